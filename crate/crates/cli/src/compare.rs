//! `compare`: aligned final-round columns across run directories, with
//! optional ordering assertions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::Args;

use crate::run::SUMMARY_FILE;
use crate::Failure;

pub const COLUMNS: [&str; 3] = ["gfl_gm", "pfl_gm", "pfl_pm"];

#[derive(Args)]
pub struct CompareArgs {
    /// Run directories (each holding a summary.csv); named by their last path component.
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
    /// Ordering check such as `fedrod.pfl_pm >= fedavg.pfl_pm` (repeatable).
    #[arg(long = "assert", value_name = "EXPR")]
    asserts: Vec<String>,
    /// Also write the table to this CSV file.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Mean column of a summary file, keyed by metric.
pub fn read_summary(dir: &Path) -> Result<BTreeMap<String, f64>, Failure> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Runtime(anyhow!("missing summary {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut cells = line.split(',');
        let (Some(name), Some(mean)) = (cells.next(), cells.next()) else {
            return Err(Failure::Runtime(anyhow!("{}:{}: malformed row", path.display(), i + 1)));
        };
        let mean: f64 = mean
            .parse()
            .map_err(|_| Failure::Runtime(anyhow!("{}:{}: bad number `{mean}`", path.display(), i + 1)))?;
        out.insert(name.to_string(), mean);
    }
    Ok(out)
}

fn run_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Ge,
    Le,
    Gt,
    Lt,
    Eq,
}

impl Op {
    fn holds(self, a: f64, b: f64) -> bool {
        match self {
            Op::Ge => a >= b,
            Op::Le => a <= b,
            Op::Gt => a > b,
            Op::Lt => a < b,
            Op::Eq => a == b,
        }
    }
}

fn parse_assertion(expr: &str) -> Result<(String, Op, String), Failure> {
    for (tok, op) in [(">=", Op::Ge), ("<=", Op::Le), ("==", Op::Eq), (">", Op::Gt), ("<", Op::Lt)] {
        if let Some((l, r)) = expr.split_once(tok) {
            return Ok((l.trim().to_string(), op, r.trim().to_string()));
        }
    }
    Err(Failure::Validation(anyhow!("cannot parse assertion `{expr}`")))
}

fn operand(s: &str, table: &BTreeMap<String, BTreeMap<String, f64>>) -> Result<f64, Failure> {
    if let Ok(v) = s.parse::<f64>() {
        return Ok(v);
    }
    let (run, col) = s
        .rsplit_once('.')
        .ok_or_else(|| Failure::Validation(anyhow!("operand `{s}` is not RUN.COLUMN")))?;
    table
        .get(run)
        .ok_or_else(|| Failure::Validation(anyhow!("unknown run `{run}`")))?
        .get(col)
        .copied()
        .ok_or_else(|| Failure::Validation(anyhow!("run `{run}` has no column `{col}`")))
}

pub fn compare(args: &CompareArgs) -> Result<(), Failure> {
    let mut table = BTreeMap::new();
    let mut csv = format!("run,{}\n", COLUMNS.join(","));
    for dir in &args.runs {
        let summary = read_summary(dir)?;
        let cells: Vec<String> = COLUMNS
            .iter()
            .map(|c| summary.get(*c).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        let name = run_name(dir);
        csv.push_str(&format!("{name},{}\n", cells.join(",")));
        table.insert(name, summary);
    }
    crate::out(&csv);
    if let Some(p) = &args.output {
        fs::write(p, &csv).map_err(|e| Failure::Runtime(anyhow!("{}: {e}", p.display())))?;
    }
    let mut failed = Vec::new();
    for expr in &args.asserts {
        let (l, op, r) = parse_assertion(expr)?;
        let (a, b) = (operand(&l, &table)?, operand(&r, &table)?);
        let ok = op.holds(a, b);
        crate::out(&format!("{} {expr} ({a} vs {b})\n", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            failed.push(expr.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Assertion(failed.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assertion_parsing() {
        let (l, op, r) = parse_assertion("a.pfl_pm >= b.pfl_pm").unwrap();
        assert_eq!((l.as_str(), op, r.as_str()), ("a.pfl_pm", Op::Ge, "b.pfl_pm"));
        assert_eq!(parse_assertion("x<1").unwrap().1, Op::Lt);
        assert!(parse_assertion("x ~ y").is_err());
        assert!(Op::Ge.holds(1.0, 1.0) && !Op::Gt.holds(1.0, 1.0));
    }
}
