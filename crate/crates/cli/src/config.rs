//! Flat `key = value` experiment configs.

use std::collections::BTreeMap;
use std::path::Path;

use icl_core::instances::CovarianceDistribution;
use icl_core::linalg::{Mat, Vector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{key}` for `{command}` (known: {known})")]
    UnknownKey {
        key: String,
        command: &'static str,
        known: String,
    },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("key `{key}`: cannot parse {value:?}: {reason}")]
    Invalid {
        key: String,
        value: String,
        reason: String,
    },
    #[error("bad command-line parameter {0:?}; use --key value")]
    BadOverride(String),
}

/// One accepted key with its default (`None` = required).
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
}

pub const fn key(name: &'static str, default: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
    }
}

pub const fn required(name: &'static str) -> Key {
    Key { name, default: None }
}

/// Parses config text: one `key = value` per line, `#` starts a comment.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = vec![];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_text(&text)
}

/// `--key value` / `--key=value` pairs given after the subcommand.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = vec![];
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(k) = a.strip_prefix("--") else {
            return Err(ConfigError::BadOverride(a.clone()));
        };
        if let Some((k, v)) = k.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().ok_or_else(|| ConfigError::BadOverride(a.clone()))?;
            out.push((k.to_string(), v.clone()));
        }
    }
    Ok(out)
}

/// A config resolved against a command's schema: unknown keys rejected,
/// defaults filled in, later entries overriding earlier ones.
#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn resolve(command: &'static str, schema: &[Key], entries: Vec<(String, String)>) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for k in schema {
            if let Some(d) = k.default {
                values.insert(k.name.to_string(), d.to_string());
            }
        }
        for (k, v) in entries {
            if !schema.iter().any(|s| s.name == k) {
                return Err(ConfigError::UnknownKey {
                    key: k,
                    command,
                    known: schema.iter().map(|s| s.name).collect::<Vec<_>>().join(", "),
                });
            }
            values.insert(k, v);
        }
        for k in schema {
            if !values.contains_key(k.name) {
                return Err(ConfigError::Missing(k.name));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key {key} not in schema"))
    }

    fn invalid(&self, key: &str, reason: impl ToString) -> ConfigError {
        ConfigError::Invalid {
            key: key.to_string(),
            value: self.str(key).to_string(),
            reason: reason.to_string(),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.str(key).parse().map_err(|e| self.invalid(key, e))
    }

    pub fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.str(key).parse().map_err(|e| self.invalid(key, e))
    }

    pub fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        let v: f64 = self.str(key).parse().map_err(|e| self.invalid(key, e))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.invalid(key, "not finite"))
        }
    }

    pub fn positive(&self, key: &str) -> Result<f64, ConfigError> {
        let v = self.f64(key)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.invalid(key, "must be positive"))
        }
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.str(key) {
            "" | "auto" => Ok(None),
            _ => self.f64(key).map(Some),
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool, ConfigError> {
        match self.str(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(self.invalid(key, "expected true or false")),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        parse_f64_list(self.str(key)).map_err(|e| self.invalid(key, e))
    }

    /// Comma-separated counts; `a-b` expands to the inclusive range.
    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        let mut out = vec![];
        for part in self.str(key).split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some((a, b)) = part.split_once('-') {
                let a: usize = a.trim().parse().map_err(|e| self.invalid(key, e))?;
                let b: usize = b.trim().parse().map_err(|e| self.invalid(key, e))?;
                if a > b {
                    return Err(self.invalid(key, "empty range"));
                }
                out.extend(a..=b);
            } else {
                out.push(part.parse().map_err(|e| self.invalid(key, e))?);
            }
        }
        if out.is_empty() {
            return Err(self.invalid(key, "empty list"));
        }
        Ok(out)
    }

    pub fn dist(&self, key: &str, d: usize) -> Result<CovarianceDistribution, ConfigError> {
        parse_dist(self.str(key), d).map_err(|e| self.invalid(key, e))
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    let out: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

/// Distribution specs:
///
/// - `uniform:LO:HI` — `s I` with `s ~ U[LO, HI]`
/// - `centers:S1,S2,..` — `s I` with `s` uniform over the listed values
/// - `window:W:S1,S2,..` — `s I` with `s` uniform over the union of `[S_i - W, S_i + W]`
/// - `identity:S` — the fixed covariance `S I`
/// - `diag:V1,..,Vd` — a fixed diagonal covariance
pub fn parse_dist(spec: &str, d: usize) -> Result<CovarianceDistribution, String> {
    let (kind, rest) = spec.split_once(':').ok_or("expected KIND:ARGS")?;
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
    let dist = match kind.trim() {
        "uniform" => {
            let (lo, hi) = rest.split_once(':').ok_or("uniform needs LO:HI")?;
            CovarianceDistribution::scalar_uniform(d, num(lo)?, num(hi)?)
        }
        "centers" => CovarianceDistribution::scaled_identities(d, &parse_f64_list(rest)?),
        "window" => {
            let (w, centers) = rest.split_once(':').ok_or("window needs W:S1,S2,..")?;
            CovarianceDistribution::windowed(d, &parse_f64_list(centers)?, num(w)?)
        }
        "identity" => CovarianceDistribution::fixed(Mat::identity(d, d) * num(rest)?),
        "diag" => {
            let v = parse_f64_list(rest)?;
            if v.len() != d {
                return Err(format!("diag has {} entries, d = {d}", v.len()));
            }
            CovarianceDistribution::fixed(Mat::from_diagonal(&Vector::from_vec(v)))
        }
        other => return Err(format!("unknown distribution kind {other:?}")),
    };
    dist.map_err(|e| e.to_string())
}
