//! Transform files, registration traces and pair manifests.

use std::fs;
use std::path::Path;

use cdl_core::registration::{RegistrationTrace, TraceRow};
use cdl_core::transform::{AffineParams, TransformMode, COMPOSITION_ORDER, PARAM_NAMES};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRANSFORM_MAGIC: &str = "CDLXFORM 1";

/// ```text
/// CDLXFORM 1
/// order T*C*Rz*Ry*Rx*Sh*S*C^-1
/// mode affine
/// center cx cy cz
/// rx <value>
/// ...
/// kyz <value>
/// ```
pub fn write_transform(path: &Path, mu: &AffineParams, mode: TransformMode) -> Result<()> {
    let mut s = format!("{TRANSFORM_MAGIC}\norder {COMPOSITION_ORDER}\nmode {}\n", mode.name());
    s += &format!("center {} {} {}\n", mu.center[0], mu.center[1], mu.center[2]);
    for (name, v) in PARAM_NAMES.iter().zip(mu.mu) {
        s += &format!("{name} {v}\n");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_transform(path: &Path) -> Result<(AffineParams, TransformMode)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    let mut lines = text.lines();
    if lines.next() != Some(TRANSFORM_MAGIC) {
        return Err(bad(format!("expected `{TRANSFORM_MAGIC}`")));
    }
    let mut next = |key: &str| -> Result<Vec<&str>> {
        let line = lines.next().ok_or_else(|| bad(format!("missing `{key}`")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(bad(format!("expected `{key}`, got `{line}`")));
        }
        Ok(parts.collect())
    };
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("bad number `{s}`"))) };
    let order = next("order")?;
    if order != [COMPOSITION_ORDER] {
        return Err(bad(format!("unsupported composition order {order:?}")));
    }
    let mode = match next("mode")?.as_slice() {
        [m] => TransformMode::parse(m).ok_or_else(|| bad(format!("unknown mode `{m}`")))?,
        other => return Err(bad(format!("bad mode line {other:?}"))),
    };
    let c = next("center")?;
    if c.len() != 3 {
        return Err(bad("center needs three values".into()));
    }
    let center = [num(c[0])?, num(c[1])?, num(c[2])?];
    let mut mu = [0.0; 12];
    for (slot, name) in mu.iter_mut().zip(PARAM_NAMES) {
        match next(name)?.as_slice() {
            [v] => *slot = num(v)?,
            _ => return Err(bad(format!("`{name}` needs one value"))),
        }
    }
    Ok((AffineParams::new(mu, center)?, mode))
}

fn trace_header() -> Vec<String> {
    let mut h = vec!["k".to_string(), "cost".into(), "step".into()];
    h.extend(PARAM_NAMES.iter().map(|s| s.to_string()));
    h.push("dice".into());
    h
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

pub fn write_trace(path: &Path, trace: &RegistrationTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(trace_header()).map_err(|e| csv_err(path, e))?;
    for r in &trace.rows {
        let mut rec = vec![r.k.to_string(), r.cost.to_string(), r.step.to_string()];
        rec.extend(r.mu.iter().map(|v| v.to_string()));
        rec.push(r.dice.map(|d| d.to_string()).unwrap_or_default());
        w.write_record(rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<RegistrationTrace> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_owned).collect();
    if header != trace_header() {
        return Err(Error::format(path, format!("unexpected trace header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let f = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::format(path, format!("bad number `{}`", &rec[i])))
        };
        let k = rec[0].parse().map_err(|_| Error::format(path, format!("bad iteration `{}`", &rec[0])))?;
        let mut mu = [0.0; 12];
        for (j, slot) in mu.iter_mut().enumerate() {
            *slot = f(3 + j)?;
        }
        let dice = if rec[15].is_empty() { None } else { Some(f(15)?) };
        rows.push(TraceRow { k, cost: f(1)?, step: f(2)?, mu, dice });
    }
    Ok(RegistrationTrace { rows })
}

/// One row of the synthetic-data manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// `train` (aligned) or `test` (perturbed).
    pub role: String,
    pub target: String,
    pub source: String,
    pub target_mask: String,
    pub source_mask: String,
    pub truth: String,
    pub phantom_seed: u64,
    pub drift_seed: u64,
    pub perturb_seed: u64,
    pub drift: String,
    pub overlap: f64,
    pub low_overlap: bool,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if entries.is_empty() {
        w.write_record([
            "id", "role", "target", "source", "target_mask", "source_mask", "truth", "phantom_seed", "drift_seed",
            "perturb_seed", "drift", "overlap", "low_overlap",
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    for e in entries {
        w.serialize(e).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|e| e.map_err(|e| csv_err(path, e))).collect()
}
