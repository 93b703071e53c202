use std::path::Path;

use super::Report;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 12] = [
    "pair_id",
    "estimator",
    "attack",
    "mask",
    "eps",
    "iters",
    "alpha",
    "seed",
    "epe_before",
    "epe_after",
    "rel",
    "ms",
];

/// Shortest decimal form of `v` rounded to `digits` significant digits.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let rounded: f64 = format!("{:.*e}", digits.saturating_sub(1), v)
        .parse()
        .expect("formatted float parses");
    rounded.to_string()
}

/// Pretty JSON with fields in declaration order and full float precision.
pub fn json_string(report: &Report) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// One row per record; reals carry 6 significant digits, an undefined
/// `rel` is an empty field.
pub fn csv_string(report: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in &report.records {
        w.write_record([
            r.pair_id.clone(),
            r.estimator.clone(),
            r.attack.to_string(),
            r.mask.clone(),
            format_sig(r.eps, 6),
            r.iters.to_string(),
            format_sig(r.alpha, 6),
            r.seed.to_string(),
            format_sig(r.epe_before, 6),
            format_sig(r.epe_after, 6),
            r.rel.map(|v| format_sig(v, 6)).unwrap_or_default(),
            r.ms.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes whichever of the JSON and CSV forms have a path.
pub fn write_report(report: &Report, json: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    if let Some(p) = json {
        std::fs::write(p, json_string(report)?)?;
    }
    if let Some(p) = csv {
        std::fs::write(p, csv_string(report)?)?;
    }
    Ok(())
}
