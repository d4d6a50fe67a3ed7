//! Subcommand implementations. Each reads its resolved config, writes its
//! tables into the run directory and records pass/fail checks.

use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use icl_core::analysis::{
    blowup_train_distribution, degree_oracle, looped_robustness_experiment, monotonicity_probe,
    multilayer_blowup_experiment, sample_nondegenerate_instance, scaling_adversary, termination_monitor, Model,
    RobustnessOptions,
};
use icl_core::attention::RestrictedWeights;
use icl_core::constructions::{chebyshev_weights_ordered, gd_weights, RootOrder, SpectrumRange};
use icl_core::instances::{is_right_spread_out, sample_instance, CovarianceDistribution};
use icl_core::linalg::Mat;
use icl_core::losses::LossMethod;
use icl_core::par::map_indexed;
use icl_core::rng::{self, child_seed};
use icl_core::training::{evaluate, train, BatchMode, Optimizer, TrainConfig};
use icl_core::weights_io::{deserialize_weights, serialize_weights};
use icl_core::IclError;

use crate::config::{key, required, Config, ConfigError, Key};
use crate::output::{cell, json_bytes, opt_cell, write_atomic, Csv};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Soft checks only fail the run under `--strict`.
    pub hard: bool,
    pub detail: String,
}

/// State shared by one invocation.
pub struct Run {
    pub cfg: Config,
    pub seed: u64,
    pub strict: bool,
    pub out: PathBuf,
    pub outputs: Vec<String>,
    pub checks: Vec<Check>,
}

impl Run {
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out, name, bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn check(&mut self, name: &str, passed: bool, hard: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            hard,
            detail: detail.into(),
        });
    }

    /// Checks that decide exit code 3.
    pub fn failing_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed && (c.hard || self.strict)).collect()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
}

pub struct Command {
    pub name: &'static str,
    pub schema: &'static [Key],
    pub run: fn(&mut Run) -> Result<()>,
}

pub const COMMANDS: &[Command] = &[
    Command { name: "train", schema: TRAIN, run: cmd_train },
    Command { name: "evaluate", schema: EVALUATE, run: cmd_evaluate },
    Command { name: "sweep-depth", schema: SWEEP_DEPTH, run: cmd_sweep_depth },
    Command { name: "sweep-ood", schema: SWEEP_OOD, run: cmd_sweep_ood },
    Command { name: "lowerbound", schema: LOWERBOUND, run: cmd_lowerbound },
    Command { name: "terminate", schema: TERMINATE, run: cmd_terminate },
    Command { name: "monotonicity", schema: MONOTONICITY, run: cmd_monotonicity },
    Command { name: "blowup", schema: BLOWUP, run: cmd_blowup },
    Command { name: "robustness", schema: ROBUSTNESS, run: cmd_robustness },
    Command { name: "construct", schema: CONSTRUCT, run: cmd_construct },
];

pub fn find(name: &str) -> Option<&'static Command> {
    COMMANDS.iter().find(|c| c.name == name)
}

fn config_err(key: &str, value: impl ToString, reason: impl ToString) -> anyhow::Error {
    ConfigError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
    .into()
}

fn optimizer(cfg: &Config) -> Result<Optimizer> {
    let lr = cfg.positive("lr")?;
    Ok(match cfg.str("optimizer") {
        "adam" => Optimizer::adam(lr),
        "momentum" => Optimizer::momentum(lr),
        "gd" => Optimizer::PlainGd { lr },
        other => return Err(config_err("optimizer", other, "expected adam, momentum or gd")),
    })
}

fn batch(cfg: &Config) -> Result<BatchMode> {
    match cfg.str("batch") {
        "exact" => Ok(BatchMode::Exact),
        _ => Ok(BatchMode::MonteCarlo(cfg.usize("batch")?)),
    }
}

fn variants(cfg: &Config) -> Result<Vec<bool>> {
    cfg.str("variants")
        .split(',')
        .map(str::trim)
        .map(|v| match v {
            "looped" => Ok(true),
            "multilayer" => Ok(false),
            other => Err(config_err("variants", other, "expected looped and/or multilayer")),
        })
        .collect()
}

fn variant_name(looped: bool) -> &'static str {
    if looped {
        "looped"
    } else {
        "multilayer"
    }
}

const TRAIN: &[Key] = &[
    key("seed", "0"),
    key("d", "10"),
    key("n", "20"),
    key("L", "4"),
    key("looped", "false"),
    required("dist"),
    key("optimizer", "adam"),
    key("lr", "0.01"),
    key("steps", "2000"),
    key("batch", "exact"),
    key("init_scale", "auto"),
    key("init_noise", "0.1"),
    key("checkpoint_every", "0"),
    key("weights_file", "weights.bin"),
];

fn history_csv(history: &[icl_core::training::TrainRecord]) -> Csv {
    let mut csv = Csv::new(&["step", "loss", "grad_norm", "lr"]);
    for r in history {
        csv.push(vec![cell(r.step), cell(r.loss), cell(r.grad_norm), cell(r.lr)]);
    }
    csv
}

fn cmd_train(run: &mut Run) -> Result<()> {
    let c = &run.cfg;
    let d = c.usize("d")?;
    let mut cfg = TrainConfig::new(c.dist("dist", d)?, c.usize("n")?, c.usize("L")?, c.bool("looped")?);
    cfg.optimizer = optimizer(c)?;
    cfg.steps = c.usize("steps")?;
    cfg.batch = batch(c)?;
    cfg.seed = run.seed;
    cfg.init_scale = c.opt_f64("init_scale")?;
    cfg.init_noise = c.f64("init_noise")?;
    let every = c.usize("checkpoint_every")?;
    cfg.checkpoint_every = (every > 0).then_some(every);
    let weights_file = c.str("weights_file").to_string();
    let depth = cfg.depth;
    let out = match train(&cfg) {
        Ok(out) => out,
        Err(IclError::Diverged { step, history }) => {
            run.write("history.csv", &history_csv(&history).to_bytes())?;
            return Err(anyhow!("training diverged at step {step}; history written"));
        }
        Err(e) => return Err(e.into()),
    };
    run.write("history.csv", &history_csv(&out.history).to_bytes())?;
    for r in &out.history {
        if let Some(w) = &r.weights_checkpoint {
            run.write(&format!("checkpoint_{:06}.bin", r.step), &serialize_weights(w, depth))?;
        }
    }
    run.write(&weights_file, &serialize_weights(&out.weights, depth))?;
    let (first, last) = (out.history[0].loss, out.final_loss());
    run.check(
        "final loss <= initial loss",
        last <= first,
        true,
        format!("initial {first}, final {last}"),
    );
    Ok(())
}

const EVALUATE: &[Key] = &[
    key("seed", "0"),
    required("weights"),
    key("L", "auto"),
    required("dist"),
    key("n", "20"),
    key("samples", "10000"),
];

fn load_weights(run: &Run, key: &str) -> Result<(RestrictedWeights, usize)> {
    let path = run.path(run.cfg.str(key));
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let file = deserialize_weights(&bytes).map_err(|e| config_err(key, path.display(), e))?;
    Ok((file.weights, file.depth))
}

fn cmd_evaluate(run: &mut Run) -> Result<()> {
    let (w, file_depth) = load_weights(run, "weights")?;
    let c = &run.cfg;
    let depth = match c.str("L") {
        "auto" => file_depth,
        _ => c.usize("L")?,
    };
    let dist = c.dist("dist", w.d())?;
    let rep = evaluate(&w, depth, &dist, c.usize("n")?, c.usize("samples")?, run.seed)?;
    let mut csv = Csv::new(&["L", "method", "loss", "std_error", "samples", "excluded"]);
    let row = match rep.method {
        LossMethod::TraceFormula => vec![cell(depth), cell("trace"), cell(rep.value), String::new(), String::new(), String::new()],
        LossMethod::MonteCarlo { samples, std_error, excluded } => vec![
            cell(depth),
            cell("monte_carlo"),
            cell(rep.value),
            cell(std_error),
            cell(samples),
            cell(excluded),
        ],
    };
    csv.push(row);
    run.write("evaluation.csv", &csv.to_bytes())?;
    if let Some(per) = &rep.per_layer_values {
        let mut csv = Csv::new(&["L", "loss"]);
        for (l, v) in per.iter().enumerate() {
            csv.push(vec![cell(l), cell(v)]);
        }
        run.write("per_depth.csv", &csv.to_bytes())?;
    }
    Ok(())
}

const SWEEP_DEPTH: &[Key] = &[
    key("seed", "0"),
    key("d", "10"),
    key("n", "20"),
    key("kappas", "2,4,8"),
    key("depths", "1-12"),
    key("variants", "looped,multilayer"),
    key("optimizer", "adam"),
    key("lr", "0.01"),
    key("steps", "2000"),
    key("threshold", "1.0"),
];

fn cmd_sweep_depth(run: &mut Run) -> Result<()> {
    let c = &run.cfg;
    let (d, n) = (c.usize("d")?, c.usize("n")?);
    let kappas = c.f64_list("kappas")?;
    let depths = c.usize_list("depths")?;
    let variants = variants(c)?;
    let opt = optimizer(c)?;
    let steps = c.usize("steps")?;
    let threshold = c.f64("threshold")?;
    let dists: Vec<CovarianceDistribution> = kappas
        .iter()
        .map(|&k| CovarianceDistribution::scalar_uniform(d, 1.0, k).map_err(|e| config_err("kappas", k, e)))
        .collect::<Result<_>>()?;
    let (variants_ref, depths_ref) = (&variants, &depths);
    let cells: Vec<(usize, bool, usize)> = (0..kappas.len())
        .flat_map(|k| variants_ref.iter().flat_map(move |&v| depths_ref.iter().map(move |&l| (k, v, l))))
        .collect();
    let seed = run.seed;
    let losses = map_indexed(Default::default(), cells.len(), |i| -> icl_core::Result<f64> {
        let (k, looped, l) = cells[i];
        let mut cfg = TrainConfig::new(dists[k].clone(), n, l, looped);
        cfg.optimizer = opt;
        cfg.steps = steps;
        cfg.seed = seed;
        let out = train(&cfg)?;
        Ok(evaluate(&out.weights, l, &dists[k], n, 0, child_seed(seed, 1))?.value)
    });
    let mut csv = Csv::new(&["kappa", "L", "variant", "test_loss"]);
    let mut min_depth = vec![vec![None; variants.len()]; kappas.len()];
    for (&(k, looped, l), loss) in cells.iter().zip(losses) {
        let loss = loss?;
        csv.push(vec![cell(kappas[k]), cell(l), cell(variant_name(looped)), cell(loss)]);
        let v = variants.iter().position(|&x| x == looped).unwrap();
        if loss <= threshold && min_depth[k][v].is_none_or(|m| l < m) {
            min_depth[k][v] = Some(l);
        }
    }
    run.write("depth_sweep.csv", &csv.to_bytes())?;
    let mut csv = Csv::new(&["kappa", "variant", "min_depth"]);
    for (k, row) in min_depth.iter().enumerate() {
        for (v, m) in row.iter().enumerate() {
            csv.push(vec![cell(kappas[k]), cell(variant_name(variants[v])), opt_cell(*m)]);
        }
    }
    run.write("min_depth.csv", &csv.to_bytes())?;

    let mut order: Vec<usize> = (0..kappas.len()).collect();
    order.sort_by(|&a, &b| kappas[a].total_cmp(&kappas[b]));
    for (v, &looped) in variants.iter().enumerate() {
        let seq: Vec<Option<usize>> = order.iter().map(|&k| min_depth[k][v]).collect();
        let ok = seq.iter().all(Option::is_some) && seq.windows(2).all(|p| p[0] <= p[1]);
        run.check(
            &format!("{} min depth non-decreasing in kappa", variant_name(looped)),
            ok,
            false,
            format!("{seq:?}"),
        );
    }
    if variants.len() == 2 {
        let gap = min_depth
            .iter()
            .map(|r| match (r[0], r[1]) {
                (Some(a), Some(b)) => a.abs_diff(b),
                _ => usize::MAX,
            })
            .max()
            .unwrap_or(0);
        run.check("looped vs multilayer depth gap <= 2", gap <= 2, false, format!("max gap {gap}"));
    }
    Ok(())
}

const SWEEP_OOD: &[Key] = &[
    key("seed", "0"),
    key("d", "10"),
    key("n", "20"),
    key("L", "10"),
    key("ks", "2,5,9"),
    key("windows", "0,0.1,0.2,0.3,0.4,0.5"),
    key("lo", "1"),
    key("hi", "8"),
    key("variants", "looped,multilayer"),
    key("optimizer", "adam"),
    key("lr", "0.01"),
    key("steps", "2000"),
];

fn spread_centers(k: usize, lo: f64, hi: f64) -> Vec<f64> {
    if k == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

fn cmd_sweep_ood(run: &mut Run) -> Result<()> {
    let c = &run.cfg;
    let (d, n, depth) = (c.usize("d")?, c.usize("n")?, c.usize("L")?);
    let ks = c.usize_list("ks")?;
    let windows = c.f64_list("windows")?;
    let (lo, hi) = (c.f64("lo")?, c.f64("hi")?);
    let variants = variants(c)?;
    let opt = optimizer(c)?;
    let steps = c.usize("steps")?;
    if ks.contains(&0) {
        return Err(config_err("ks", 0, "need at least one center"));
    }
    let cells: Vec<(usize, bool)> = ks.iter().flat_map(|&k| variants.iter().map(move |&v| (k, v))).collect();
    let seed = run.seed;
    let curves = map_indexed(Default::default(), cells.len(), |i| -> icl_core::Result<Vec<f64>> {
        let (k, looped) = cells[i];
        let centers = spread_centers(k, lo, hi);
        let mut cfg = TrainConfig::new(CovarianceDistribution::scaled_identities(d, &centers)?, n, depth, looped);
        cfg.optimizer = opt;
        cfg.steps = steps;
        cfg.seed = seed;
        let out = train(&cfg)?;
        windows
            .iter()
            .map(|&w| {
                let test = CovarianceDistribution::windowed(d, &centers, w)?;
                Ok(evaluate(&out.weights, depth, &test, n, 0, child_seed(seed, 1))?.value)
            })
            .collect()
    });
    let curves: Vec<Vec<f64>> = curves.into_iter().collect::<icl_core::Result<_>>()?;
    let mut csv = Csv::new(&["k", "window", "variant", "test_loss"]);
    for (&(k, looped), curve) in cells.iter().zip(&curves) {
        for (w, loss) in windows.iter().zip(curve) {
            csv.push(vec![cell(k), cell(w), cell(variant_name(looped)), cell(loss)]);
        }
    }
    run.write("ood_sweep.csv", &csv.to_bytes())?;
    for &k in &ks {
        let get = |looped| cells.iter().position(|&c| c == (k, looped)).map(|i| &curves[i]);
        if let (Some(l), Some(m)) = (get(true), get(false)) {
            let worse: Vec<f64> = windows
                .iter()
                .zip(l.iter().zip(m))
                .filter(|(&w, (a, b))| w > 0.0 && a > b)
                .map(|(&w, _)| w)
                .collect();
            run.check(
                &format!("k={k}: looped <= multilayer for every window > 0"),
                worse.is_empty(),
                false,
                format!("looped worse at windows {worse:?}"),
            );
        }
    }
    Ok(())
}

const LOWERBOUND: &[Key] = &[
    key("seed", "0"),
    key("kind", "chebyshev"),
    key("weights", ""),
    key("alpha", "1"),
    key("beta", "auto"),
    key("L", "4"),
    key("d", "3"),
    key("n", "5"),
    key("instances", "20"),
    key("grid_points", "4096"),
];

fn cmd_lowerbound(run: &mut Run) -> Result<()> {
    let c = &run.cfg;
    let alpha = c.positive("alpha")?;
    let (w, depth, d, beta) = match c.str("kind") {
        "file" => {
            let (w, depth) = load_weights(run, "weights")?;
            let d = w.d();
            let beta = c.opt_f64("beta")?.unwrap_or(4.0 * 36.0 * (depth * depth) as f64 * alpha);
            (w, depth, d, beta)
        }
        kind @ ("chebyshev" | "gd") => {
            let depth = c.usize("L")?;
            let d = c.usize("d")?;
            let beta = c.opt_f64("beta")?.unwrap_or(4.0 * 36.0 * (depth * depth) as f64 * alpha);
            let range = SpectrumRange::new(alpha, beta)?;
            let w = if kind == "gd" {
                gd_weights(range, depth, d)?
            } else {
                chebyshev_weights_ordered(range, depth, d, RootOrder::Natural)?
            };
            (w, depth, d, beta)
        }
        other => return Err(config_err("kind", other, "expected chebyshev, gd or file")),
    };
    let (n, instances, grid) = (c.usize("n")?, c.usize("instances")?, c.usize("grid_points")?);
    let l2 = (depth * depth) as f64;
    let width_bound = std::f64::consts::PI.powi(2) / (64.0 * l2) * (36.0 * l2 - 1.0);
    let seed = run.seed;
    let results = map_indexed(Default::default(), instances, |i| -> icl_core::Result<_> {
        let s = child_seed(seed, i as u64);
        let mut r = rng::stream(s, rng::streams::COVARIANCE);
        let dist = CovarianceDistribution::fixed(rng::spd_with_spectrum(&mut r, d, alpha, beta))?;
        let inst = sample_nondegenerate_instance(&dist, n, s)?;
        let scaling = scaling_adversary(&inst, Model::Restricted(&w), depth, grid)?;
        let degree = degree_oracle(&inst, Model::Restricted(&w), depth, 2 * depth + 8)?;
        Ok((scaling, degree))
    });
    let mut scal = Csv::new(&[
        "instance",
        "gamma_star",
        "relative_error",
        "bad_lo",
        "bad_hi",
        "bad_width",
        "width_bound",
        "passes",
    ]);
    let mut deg = Csv::new(&[
        "instance",
        "fitted_degree",
        "claimed_degree",
        "max_interp_residual",
        "scale",
        "parity_even",
        "passes",
    ]);
    #[derive(Serialize)]
    struct Entry {
        instance: usize,
        gamma_star: f64,
        relative_error: f64,
        bad_interval: Option<(f64, f64)>,
        degree: icl_core::analysis::DegreeReport,
    }
    let mut report = vec![];
    let (mut scaling_fail, mut degree_fail) = (0, 0);
    for (i, res) in results.into_iter().enumerate() {
        let (s, g) = res?;
        let ok = s.relative_error >= 0.25 && s.bad_width() >= width_bound;
        scaling_fail += usize::from(!ok);
        degree_fail += usize::from(!g.passes);
        scal.push(vec![
            cell(i),
            cell(s.gamma_star),
            cell(s.relative_error),
            opt_cell(s.bad_interval.map(|b| b.0)),
            opt_cell(s.bad_interval.map(|b| b.1)),
            cell(s.bad_width()),
            cell(width_bound),
            cell(ok),
        ]);
        deg.push(vec![
            cell(i),
            opt_cell(g.fitted_degree),
            cell(g.claimed_degree),
            cell(g.max_interp_residual),
            cell(g.scale),
            cell(g.parity_even),
            cell(g.passes),
        ]);
        report.push(Entry {
            instance: i,
            gamma_star: s.gamma_star,
            relative_error: s.relative_error,
            bad_interval: s.bad_interval,
            degree: g,
        });
    }
    run.write("lowerbound.csv", &scal.to_bytes())?;
    run.write("degree.csv", &deg.to_bytes())?;
    run.write("report.json", &json_bytes(&report)?)?;
    run.check(
        "scaling adversary finds error >= 1/4 on a wide interval",
        scaling_fail == 0,
        true,
        format!("{scaling_fail}/{instances} instances failed"),
    );
    run.check(
        "degree within 2L",
        degree_fail == 0,
        true,
        format!("{degree_fail}/{instances} fits failed"),
    );
    Ok(())
}

const TERMINATE: &[Key] = &[
    key("seed", "0"),
    key("alpha", "1"),
    key("beta", "8"),
    key("d", "4"),
    key("n", "6"),
    key("eps", "0.001"),
    key("l_max", "2000"),
    key("runs", "1000"),
];

fn cmd_terminate(run: &mut Run) -> Result<()> {
    let c = &run.cfg;
    let range = SpectrumRange::new(c.positive("alpha")?, c.positive("beta")?)?;
    let (d, n, runs, l_max) = (c.usize("d")?, c.usize("n")?, c.usize("runs")?, c.usize("l_max")?);
    let eps = c.positive("eps")?;
    let w = gd_weights(range, 1, d)?;
    let seed = run.seed;
    let reports = map_indexed(Default::default(), runs, |i| -> icl_core::Result<_> {
        let s = child_seed(seed, i as u64);
        let easy = i % 2 == 0;
        let dist = if easy {
            // kappa = 1: a scalar covariance anywhere in the range
            let t = (i / 2) as f64 / (runs / 2).max(1) as f64;
            let scale = range.alpha() + (range.beta() - range.alpha()) * t;
            CovarianceDistribution::fixed(Mat::identity(d, d) * scale)?
        } else {
            let mut r = rng::stream(s, rng::streams::COVARIANCE);
            CovarianceDistribution::fixed(rng::spd_with_spectrum(&mut r, d, range.alpha(), range.beta()))?
        };
        let inst = sample_instance(&dist, n, s)?;
        Ok((easy, termination_monitor(&inst, &w, l_max, eps)?))
    });
    let mut csv = Csv::new(&[
        "run",
        "kappa",
        "stop_layer",
        "threshold",
        "guaranteed_error",
        "readout_error",
        "measured_error",
    ]);
    let mut violations = 0;
    let mut stops = [vec![], vec![]];
    for (i, r) in reports.into_iter().enumerate() {
        let (easy, rep) = r?;
        violations += usize::from(rep.violated());
        let kappa = if easy { 1.0 } else { range.kappa() };
        if let Some(l) = rep.stop_layer {
            stops[usize::from(!easy)].push(l);
        }
        csv.push(vec![
            cell(i),
            cell(kappa),
            opt_cell(rep.stop_layer),
            cell(rep.threshold),
            cell(rep.guaranteed_error),
            opt_cell(rep.readout_error),
            opt_cell(rep.measured_error),
        ]);
    }
    run.write("termination.csv", &csv.to_bytes())?;
    run.check(
        "error <= eps whenever the monitor stops",
        violations == 0,
        true,
        format!("{violations} violations"),
    );
    let median = |v: &mut Vec<usize>| {
        v.sort_unstable();
        v.get(v.len() / 2).copied()
    };
    let (m1, mk) = (median(&mut stops[0]), median(&mut stops[1]));
    run.check(
        "median stop layer smaller on kappa = 1",
        matches!((m1, mk), (Some(a), Some(b)) if a < b),
        false,
        format!("kappa=1: {m1:?}, kappa={}: {mk:?}", range.kappa()),
    );
    Ok(())
}

const MONOTONICITY: &[Key] = &[
    key("seed", "0"),
    key("d", "3"),
    key("L", "4"),
    key("models", "50"),
    key("directions", "64"),
    key("covariances", "4"),
];

fn cmd_monotonicity(run: &mut Run) -> Result<()> {
    let c = &run.cfg;
    let (d, depth, models) = (c.usize("d")?, c.usize("L")?, c.usize("models")?);
    let (dirs, covs) = (c.usize("directions")?, c.usize("covariances")?);
    if depth < 2 {
        return Err(config_err("L", depth, "multilayer probe needs L >= 2"));
    }
    let seed = run.seed;
    let reports = map_indexed(Default::default(), models, |i| -> icl_core::Result<_> {
        let s = child_seed(seed, i as u64);
        let mut r = rng::stream(s, rng::streams::INIT);
        let layers: Vec<Mat> = (0..depth).map(|_| rng::spd_with_spectrum(&mut r, d, 0.05, 1.0)).collect();
        let multi = monotonicity_probe(&RestrictedWeights::from_matrices(layers)?, dirs, s)?;
        let looped = RestrictedWeights::looped_matrix(rng::spd_with_spectrum(&mut r, d, 0.05, 1.0))?;
        let looped = monotonicity_probe(&looped, covs, s)?;
        Ok((multi, looped))
    });
    let mut csv = Csv::new(&["model", "kind", "passes", "c", "layer_i", "layer_j", "l0", "tail_end"]);
    let mut report = vec![];
    let mut failures = 0;
    for (i, r) in reports.into_iter().enumerate() {
        let (multi, looped) = r?;
        failures += usize::from(!multi.passes()) + usize::from(!looped.passes());
        let wit = multi.witness.as_ref();
        csv.push(vec![
            cell(i),
            cell("multilayer"),
            cell(multi.passes()),
            opt_cell(wit.map(|w| w.c)),
            opt_cell(wit.map(|w| w.layers.0)),
            opt_cell(wit.map(|w| w.layers.1)),
            String::new(),
            String::new(),
        ]);
        for t in &looped.tails {
            csv.push(vec![
                cell(i),
                cell("looped"),
                cell(t.monotone),
                String::new(),
                String::new(),
                String::new(),
                opt_cell(t.l0),
                cell(t.end),
            ]);
        }
        report.push((multi, looped));
    }
    run.write("monotonicity.csv", &csv.to_bytes())?;
    run.write("report.json", &json_bytes(&report)?)?;
    run.check(
        "witness for every multilayer model; monotone tail for every looped model",
        failures == 0,
        true,
        format!("{failures} failures"),
    );
    Ok(())
}

const BLOWUP: &[Key] = &[
    key("seed", "0"),
    key("alpha", "1"),
    key("beta", "64"),
    key("d", "2,4"),
    key("L", "2,3,4"),
    key("delta_prime", "0.5"),
    key("eps_mass", "0.01"),
];

fn cmd_blowup(run: &mut Run) -> Result<()> {
    let c = &run.cfg;
    let (alpha, beta) = (c.positive("alpha")?, c.positive("beta")?);
    let (dp, eps) = (c.f64("delta_prime")?, c.f64("eps_mass")?);
    let mut csv = Csv::new(&["d", "L", "train_loss", "ood_loss", "bound", "proof_bound", "passes"]);
    let mut failures = 0;
    for d in c.usize_list("d")? {
        for l in c.usize_list("L")? {
            let r = multilayer_blowup_experiment(alpha, beta, l, d, dp, eps)?;
            failures += usize::from(!r.passes);
            csv.push(vec![
                cell(d),
                cell(l),
                cell(r.train_loss),
                cell(r.ood_loss),
                cell(r.bound),
                cell(r.proof_bound),
                cell(r.passes),
            ]);
        }
    }
    run.write("blowup.csv", &csv.to_bytes())?;
    run.check("ood loss above the blowup bound", failures == 0, true, format!("{failures} failures"));
    Ok(())
}

const ROBUSTNESS: &[Key] = &[
    key("seed", "0"),
    key("alpha", "1"),
    key("beta", "16"),
    key("d", "2"),
    key("L", "8"),
    key("eps_prime", "auto"),
    key("test_dist", "auto"),
    key("spread_eps", "auto"),
    key("spread_delta", "0"),
    key("steps", "3000"),
    key("relative_lr", "0.05"),
    key("weights_file", "a_star.bin"),
];

fn cmd_robustness(run: &mut Run) -> Result<()> {
    let c = &run.cfg.clone();
    let (alpha, beta) = (c.positive("alpha")?, c.positive("beta")?);
    let (d, depth) = (c.usize("d")?, c.usize("L")?);
    let range = SpectrumRange::new(alpha, beta)?;
    let (train_dist, _) = blowup_train_distribution(alpha, beta, depth, d)?;
    let spread = (c.opt_f64("spread_eps")?.unwrap_or(1.0 / depth as f64), c.f64("spread_delta")?);
    let eps_prime = c.opt_f64("eps_prime")?.unwrap_or(spread.0);
    let delta_prime = spread.1 + (d as f64 / eps_prime).ln() / depth as f64;
    let test = match c.str("test_dist") {
        "auto" => {
            let top = (1.0 - delta_prime) * beta;
            CovarianceDistribution::scalar_uniform(d, alpha, top).map_err(|e| config_err("test_dist", "auto", e))?
        }
        _ => c.dist("test_dist", d)?,
    };
    let opts = RobustnessOptions {
        steps: c.usize("steps")?,
        relative_lr: c.positive("relative_lr")?,
        seed: run.seed,
        ..RobustnessOptions::default()
    };
    let spread_check = is_right_spread_out(&train_dist, spread.0, spread.1, 64, 4096, run.seed)?;
    let rep = looped_robustness_experiment(&train_dist, range, spread, depth, &test, eps_prime, opts)?;
    let mut csv = Csv::new(&[
        "L",
        "d",
        "train_loss",
        "test_loss",
        "delta_prime",
        "bound",
        "strong_bound",
        "holds",
        "holds_strong",
        "projected_grad_norm",
    ]);
    csv.push(vec![
        cell(depth),
        cell(d),
        cell(rep.train_loss),
        cell(rep.test_loss),
        cell(rep.delta_prime),
        cell(rep.bound),
        cell(rep.strong_bound),
        cell(rep.holds),
        cell(rep.holds_strong),
        cell(rep.projected_grad_norm),
    ]);
    run.write("robustness.csv", &csv.to_bytes())?;
    let w = RestrictedWeights::looped_matrix(rep.a_star.clone())?;
    let name = c.str("weights_file").to_string();
    run.write(&name, &serialize_weights(&w, depth))?;
    run.check("test loss within the robustness bound", rep.holds, true, format!("{} <= {}", rep.test_loss, rep.bound));
    run.check(
        "train law is right-spread-out",
        spread_check.is_spread_out,
        false,
        format!("min mass {} vs eps {}", spread_check.min_estimate, spread.0),
    );
    run.check("eps' <= eps", rep.eps_within_spread, false, format!("eps' = {eps_prime}, eps = {}", spread.0));
    if let Some(w) = rep.warning {
        run.check("optimizer converged", false, false, w);
    }
    Ok(())
}

const CONSTRUCT: &[Key] = &[
    key("seed", "0"),
    key("kind", "chebyshev"),
    key("alpha", "1"),
    required("beta"),
    required("L"),
    key("d", "10"),
    key("order", "natural"),
    key("weights_file", "weights.bin"),
];

fn cmd_construct(run: &mut Run) -> Result<()> {
    let c = &run.cfg.clone();
    let range = SpectrumRange::new(c.positive("alpha")?, c.positive("beta")?)?;
    let (depth, d) = (c.usize("L")?, c.usize("d")?);
    let order = match c.str("order") {
        "natural" => RootOrder::Natural,
        "leja" => RootOrder::Leja,
        other => return Err(config_err("order", other, "expected natural or leja")),
    };
    let (w, roots) = match c.str("kind") {
        "chebyshev" => {
            let w = chebyshev_weights_ordered(range, depth, d, order)?;
            let roots = w.layers().iter().map(|l| 1.0 / l.a[(0, 0)]).collect();
            (w, roots)
        }
        "gd" => (gd_weights(range, depth, d)?, vec![2.0 * range.beta()]),
        other => return Err(config_err("kind", other, "expected chebyshev or gd")),
    };
    let mut csv = Csv::new(&["layer", "root"]);
    for (t, r) in roots.iter().enumerate() {
        csv.push(vec![cell(t), cell(r)]);
    }
    run.write("roots.csv", &csv.to_bytes())?;
    let name = c.str("weights_file").to_string();
    run.write(&name, &serialize_weights(&w, depth))?;
    Ok(())
}
