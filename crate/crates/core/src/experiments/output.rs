//! CSV writing with provenance columns, and summary statistics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{KbrError, Result};

pub const LIB_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Columns appended to every output row.
pub const PROVENANCE_COLUMNS: [&str; 3] = ["seed", "config_hash", "version"];

/// First 16 hex digits of the SHA-256 of the resolved configuration,
/// serialized as TOML.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let text = toml::to_string(cfg).map_err(|e| KbrError::Config(format!("cannot serialize config: {e}")))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Shortest round-trip decimal; non-finite values as `NaN`, `inf`, `-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

/// One table: data columns plus a seed per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, seed: u64, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push((seed, row));
    }

    pub fn write<W: Write>(&self, w: W, config_hash: &str) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = self.header.clone();
        header.extend(PROVENANCE_COLUMNS.iter().map(|s| s.to_string()));
        wtr.write_record(&header)?;
        for (seed, row) in &self.rows {
            let mut r = row.clone();
            r.push(seed.to_string());
            r.push(config_hash.to_string());
            r.push(LIB_VERSION.to_string());
            wtr.write_record(&r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_file(&self, path: &Path, config_hash: &str) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        self.write(f, config_hash)
    }
}

/// `NaN` is ordered above every number, so it behaves as `+inf` in medians
/// and comparisons.
pub fn nan_last_cmp(a: &f64, b: &f64) -> std::cmp::Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => std::cmp::Ordering::Equal,
        (true, false) => std::cmp::Ordering::Greater,
        (false, true) => std::cmp::Ordering::Less,
        _ => a.total_cmp(b),
    }
}

/// Median with `NaN` treated as `+inf`; mean of the middle pair for even
/// counts. `NaN` for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = values
        .iter()
        .map(|x| if x.is_nan() { f64::INFINITY } else { *x })
        .collect();
    v.sort_by(nan_last_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Summary of one group of per-run values.
#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub stderr: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Stats {
            count: n,
            median: median(values),
            mean,
            stderr: (var / n as f64).sqrt(),
        }
    }
}

/// Groups `(key, value)` pairs and summarizes each group; keys are sorted.
pub fn summarize<K: Ord + Clone>(items: impl IntoIterator<Item = (K, f64)>) -> Vec<(K, Stats)> {
    let mut groups: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for (k, v) in items {
        groups.entry(k).or_default().push(v);
    }
    groups.into_iter().map(|(k, v)| (k, Stats::of(&v))).collect()
}

pub fn stats_columns() -> [&'static str; 4] {
    ["count", "median", "mean", "stderr"]
}

pub fn stats_cells(s: &Stats) -> Vec<String> {
    vec![
        s.count.to_string(),
        fmt_f64(s.median),
        fmt_f64(s.mean),
        fmt_f64(s.stderr),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_nan_as_infinity() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[1.0, f64::NAN, f64::NAN]), f64::INFINITY);
        assert_eq!(median(&[1.0, 2.0, f64::NAN]), 2.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn table_appends_provenance() {
        let mut t = Table::new(&["a", "b"]);
        t.push(7, vec!["1".into(), fmt_f64(f64::NAN)]);
        let mut buf = Vec::new();
        t.write(&mut buf, "abcd").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            format!("a,b,seed,config_hash,version\n1,NaN,7,abcd,{LIB_VERSION}\n")
        );
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        #[derive(Serialize)]
        struct C {
            n: usize,
        }
        let a = config_hash(&C { n: 1 }).unwrap();
        assert_eq!(a, config_hash(&C { n: 1 }).unwrap());
        assert_ne!(a, config_hash(&C { n: 2 }).unwrap());
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn summaries_group_by_key() {
        let s = summarize(vec![("b", 1.0), ("a", 2.0), ("b", 3.0)]);
        assert_eq!(s[0].0, "a");
        assert_eq!(s[1].1.count, 2);
        assert_eq!(s[1].1.mean, 2.0);
        assert_eq!(s[1].1.median, 2.0);
        assert!((s[1].1.stderr - 1.0).abs() < 1e-15);
    }
}
