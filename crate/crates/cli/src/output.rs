//! Result files: `results.csv` and `manifest.json` in the output directory.
//!
//! Numbers are rendered with 17 significant digits in the C `%.17g` style, so
//! every `f64` round-trips exactly and two runs that compute the same values
//! produce byte-identical files regardless of thread count.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// `%.17g`: scientific for extreme exponents, fixed otherwise, trailing
/// zeros trimmed. 17 significant digits round-trip any `f64`.
pub fn g17(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    // Decimal exponent of the value after rounding to 17 significant digits;
    // rounding can carry (9.99...e2 -> 1e3), so read it off the formatted
    // mantissa rather than from log10.
    let sci = format!("{v:.16e}");
    let (mantissa, exp_text) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp_text.parse().expect("decimal exponent");
    if !(-4..17).contains(&exp) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (16 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}

/// Writes an RFC 4180 table (CRLF records, quoting only where needed).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len(), "ragged CSV row");
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub wall_seconds: f64,
    pub pass: bool,
    pub config: serde_json::Value,
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads: rayon::current_num_threads(),
            wall_seconds: 0.0,
            pass: true,
            config,
            details: serde_json::Value::Null,
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text.as_bytes())
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

pub fn results_path(out_dir: &Path) -> PathBuf {
    out_dir.join("results.csv")
}
