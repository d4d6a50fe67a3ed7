//! Run outputs: atomic file writes, CSV tables and the JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Writes `bytes` to `dir/name` through a temporary file and a rename, so a
/// crash never leaves a half-written output behind.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &target).with_context(|| format!("renaming into {}", target.display()))?;
    Ok(target)
}

/// A CSV table assembled in memory. Floats use the shortest representation
/// that parses back to the same bits.
pub struct Csv {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: vec![],
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(vec![]);
        // writing into memory cannot fail
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

pub trait CellValue {
    fn render(&self) -> String;
}

// `Debug` keeps the round trip but switches to exponent form for tiny values
impl CellValue for f64 {
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

macro_rules! display_cells {
    ($($t:ty),*) => {$(
        impl CellValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
display_cells!(usize, u64, bool, str);

impl<T: CellValue + ?Sized> CellValue for &T {
    fn render(&self) -> String {
        (**self).render()
    }
}

pub fn cell<T: CellValue>(v: T) -> String {
    v.render()
}

/// `None` becomes an empty field.
pub fn opt_cell<T: CellValue>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.render())
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub config: &'a BTreeMap<String, String>,
    pub seed: u64,
    pub strict: bool,
    pub versions: BTreeMap<&'static str, &'static str>,
    pub outputs: Vec<String>,
    pub checks: &'a [crate::commands::Check],
    /// `ok`, or the reason for exit code 3.
    pub status: String,
}

pub fn versions() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("icl-lab", env!("CARGO_PKG_VERSION")),
        ("icl-core", icl_core::VERSION),
    ])
}

pub fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}
