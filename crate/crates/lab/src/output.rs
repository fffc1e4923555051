//! Writing a run to its output directory.
//!
//! Every file is a pure function of the resolved config, so re-running a
//! `resolved-config.json` reproduces the manifest hashes byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checks::CheckOutcome;
use crate::config::ExperimentConfig;
use crate::experiments::RunOutput;
use crate::Result;

#[derive(Debug, Serialize)]
struct ManifestCheck<'a> {
    name: &'a str,
    passed: bool,
    value: Option<f64>,
    rule: &'a str,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    id: &'a str,
    seed: u64,
    outcome: &'a str,
    checks: Vec<ManifestCheck<'a>>,
    /// File name to hex SHA-256.
    files: BTreeMap<String, String>,
}

/// One JSON object per training record, tagged with its run label.
pub fn trace_jsonl(out: &RunOutput) -> String {
    let mut s = String::new();
    for (label, trace) in &out.runs {
        for rec in &trace.records {
            let mut v = serde_json::to_value(rec).expect("records serialize");
            if let serde_json::Value::Object(map) = &mut v {
                map.insert("run".into(), label.clone().into());
            }
            s.push_str(&v.to_string());
            s.push('\n');
        }
        let end = serde_json::json!({ "run": label, "outcome": trace.outcome });
        s.push_str(&end.to_string());
        s.push('\n');
    }
    s
}

pub fn summary_csv(metrics: &BTreeMap<String, f64>) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in metrics {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

/// Per-epoch loss, step size, gradient norm, overlaps and `C_1..C_4`.
pub fn curves_csv(out: &RunOutput) -> String {
    let mut s = String::new();
    let Some(first) = out.runs.iter().flat_map(|(_, t)| t.records.first()).next() else {
        return "run,epoch,phase,loss\n".into();
    };
    let names: Vec<&str> = first.overlaps.variant.names().collect();
    let _ = writeln!(s, "run,epoch,phase,loss,eta,grad_norm,{},c1,c2,c3,c4", names.join(","));
    for (label, trace) in &out.runs {
        for r in &trace.records {
            let _ = write!(s, "{label},{},{},{},{},{}", r.epoch, r.phase, r.loss, r.eta, r.grad_norm);
            for v in r.overlaps.values() {
                let _ = write!(s, ",{v}");
            }
            for c in r.invariants.c {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
    }
    s
}

/// Overlaps at every checkpoint, with per-vector Q–Q correlations when the
/// run recorded them.
pub fn checkpoints_csv(out: &RunOutput) -> String {
    let mut s = String::new();
    let Some(first) = out.runs.iter().flat_map(|(_, t)| t.checkpoints.first()).next() else {
        return "run,tag,epoch\n".into();
    };
    let names: Vec<&str> = first.overlaps.variant.names().collect();
    let _ = writeln!(s, "run,tag,epoch,{},qq", names.join(","));
    for (label, trace) in &out.runs {
        for c in &trace.checkpoints {
            let _ = write!(s, "{label},{},{}", c.tag, c.epoch);
            for v in c.overlaps.values() {
                let _ = write!(s, ",{v}");
            }
            let qq: Vec<String> = c.qq.iter().flatten().map(|r| r.to_string()).collect();
            let _ = writeln!(s, ",{}", qq.join(" "));
        }
    }
    s
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes all outputs into `dir` and returns the manifest text.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput, checks: &[CheckOutcome]) -> Result<String> {
    fs::create_dir_all(dir)?;
    let mut files: Vec<(String, String)> = vec![
        ("resolved-config.json".into(), cfg.to_json_pretty()),
        ("trace.jsonl".into(), trace_jsonl(out)),
        ("summary.csv".into(), summary_csv(&out.metrics)),
        ("curves.csv".into(), curves_csv(out)),
        ("checkpoints.csv".into(), checkpoints_csv(out)),
    ];
    files.extend(out.tables.iter().map(|t| (t.file.clone(), t.csv.clone())));
    let mut hashes = BTreeMap::new();
    for (name, body) in &files {
        fs::write(dir.join(name), body)?;
        hashes.insert(name.clone(), sha256_hex(body.as_bytes()));
    }
    let manifest = Manifest {
        id: &cfg.id,
        seed: cfg.seed,
        outcome: if out.divergence().is_some() { "diverged" } else { "completed" },
        checks: checks
            .iter()
            .map(|c| ManifestCheck { name: &c.name, passed: c.passed, value: c.value, rule: &c.rule })
            .collect(),
        files: hashes,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(dir.join("manifest.json"), &text)?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_is_sorted_and_round_trips() {
        let m: BTreeMap<String, f64> = [("b".to_string(), 0.1 + 0.2), ("a".to_string(), 1e-17)].into_iter().collect();
        let s = summary_csv(&m);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "metric,value");
        assert!(lines[1].starts_with("a,"));
        let back: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(back, 0.1 + 0.2);
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
