//! Tolerant diff of two JSON or CSV documents.

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use serde_json::Value;

use crate::run_spec::config_error;

/// Maximum number of differences printed.
const SHOW: usize = 50;

pub fn numbers_match(a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> bool {
    if a == b {
        return true;
    }
    let diff = (a - b).abs();
    diff <= abs_tol || diff <= rel_tol * a.abs().max(b.abs())
}

fn diff_json(path: &str, a: &Value, b: &Value, rel: f64, abs: f64, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            if !numbers_match(x, y, rel, abs) {
                out.push(format!("{path}: {x} != {y}"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let p = format!("{path}.{k}");
                match y.get(k) {
                    Some(vb) => diff_json(&p, va, vb, rel, abs, out),
                    None => out.push(format!("{p}: missing on the right")),
                }
            }
            for k in y.keys().filter(|k| !x.contains_key(*k)) {
                out.push(format!("{path}.{k}: missing on the left"));
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                out.push(format!("{path}: length {} != {}", x.len(), y.len()));
            }
            for (i, (va, vb)) in x.iter().zip(y).enumerate() {
                diff_json(&format!("{path}[{i}]"), va, vb, rel, abs, out);
            }
        }
        _ if a == b => {}
        _ => out.push(format!("{path}: {a} != {b}")),
    }
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| moeplan::Error::Parse { line: i + 2, msg: e.to_string() })?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((headers, rows))
}

fn diff_csv(a: &Path, b: &Path, rel: f64, abs: f64, out: &mut Vec<String>) -> Result<()> {
    let (ha, ra) = read_csv(a)?;
    let (hb, rb) = read_csv(b)?;
    if ha != hb {
        out.push(format!("headers differ: {ha:?} != {hb:?}"));
        return Ok(());
    }
    if ra.len() != rb.len() {
        out.push(format!("row count {} != {}", ra.len(), rb.len()));
    }
    for (i, (x, y)) in ra.iter().zip(&rb).enumerate() {
        for ((col, cx), cy) in ha.iter().zip(x).zip(y) {
            let same = match (cx.parse::<f64>(), cy.parse::<f64>()) {
                (Ok(p), Ok(q)) => numbers_match(p, q, rel, abs),
                _ => cx == cy,
            };
            if !same {
                out.push(format!("row {}, {col}: {cx} != {cy}", i + 1));
            }
        }
    }
    Ok(())
}

fn is_csv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn run(left: &Path, right: &Path, rel_tol: f64, abs_tol: f64) -> Result<ExitCode> {
    if !(rel_tol >= 0.0 && abs_tol >= 0.0) {
        return Err(config_error("tolerances must be non-negative".into()).into());
    }
    let mut diffs = Vec::new();
    if is_csv(left) || is_csv(right) {
        diff_csv(left, right, rel_tol, abs_tol, &mut diffs)?;
    } else {
        let load = |p: &Path| -> Result<Value> {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))?)
        };
        diff_json("$", &load(left)?, &load(right)?, rel_tol, abs_tol, &mut diffs);
    }
    for d in diffs.iter().take(SHOW) {
        println!("{d}");
    }
    if diffs.len() > SHOW {
        println!("... {} more", diffs.len() - SHOW);
    }
    if diffs.is_empty() {
        println!("identical within tolerance");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{} difference(s)", diffs.len());
        Ok(ExitCode::from(1))
    }
}
