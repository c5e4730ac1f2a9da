//! `run`: repetitions, artifacts and the cross-seed summary.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use fedrod::eval::{MetricsLog, CSV_COLUMNS};
use fedrod::fed::run_experiment;
use fedrod::ExperimentConfig;
use log::info;

use crate::Failure;

pub const SUMMARY_FILE: &str = "summary.csv";

/// Final-round quantities summarized across seeds, in column order.
pub fn final_metrics(log: &MetricsLog) -> Vec<(&'static str, Option<f64>)> {
    let last = log.last();
    let f = |g: fn(&fedrod::eval::MetricsRow) -> Option<f64>| last.and_then(g);
    let mut out = vec![
        ("gfl_gm", f(|r| Some(r.gfl_global))),
        ("pfl_gm", f(|r| Some(r.pfl_global))),
        ("pfl_pm", f(|r| Some(r.pfl_personal))),
        ("gfl_local_mean", f(|r| r.gfl_local_mean)),
        ("drift_mean", f(|r| r.drift_mean)),
        ("drift_var", f(|r| r.drift_var)),
        ("local_sqdist_mean", f(|r| r.local_sqdist_mean)),
        ("personal_sqdist_mean", f(|r| r.personal_sqdist_mean)),
        ("train_loss_mean", f(|r| r.train_loss_mean)),
    ];
    let h = log.holdout.as_ref();
    out.push(("holdout_pfl_generic", h.map(|h| h.pfl_generic)));
    out.push(("holdout_pfl_zero_shot", h.map(|h| h.pfl_zero_shot)));
    out.push(("holdout_pfl_finetuned", h.map(|h| h.pfl_finetuned)));
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Runtime)
}

pub fn run(config: &ExperimentConfig, force: bool) -> Result<(), Failure> {
    let dir = &config.output.dir;
    if dir.exists() {
        let nonempty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))
            .map_err(Failure::Runtime)?
            .next()
            .is_some();
        if nonempty && !force {
            return Err(Failure::Validation(anyhow!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Runtime)?;
    write(&dir.join("resolved.toml"), &config.to_toml())?;

    let seeds = config.seed_list();
    let mut logs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let sub = dir.join(format!("seed_{seed}"));
        fs::create_dir_all(&sub)
            .with_context(|| format!("creating {}", sub.display()))
            .map_err(Failure::Runtime)?;
        info!("running {} with seed {seed}", config.algorithm);
        let log = run_experiment(config, seed, Some(&sub))?;
        logs.push((seed, log));
    }

    let mut all = format!("seed,{}\n", CSV_COLUMNS.join(","));
    for (seed, log) in &logs {
        for line in log.to_csv().lines().skip(1) {
            all.push_str(&format!("{seed},{line}\n"));
        }
    }
    write(&dir.join("metrics_all.csv"), &all)?;

    let mut summary = String::from("metric,mean,std,n\n");
    let names: Vec<&str> = final_metrics(&logs[0].1).iter().map(|p| p.0).collect();
    for (i, name) in names.iter().enumerate() {
        let vals: Vec<f64> = logs
            .iter()
            .filter_map(|(_, l)| final_metrics(l)[i].1)
            .collect();
        if vals.is_empty() {
            continue;
        }
        let (m, s) = mean_std(&vals);
        summary.push_str(&format!("{name},{m},{s},{}\n", vals.len()));
    }
    write(&dir.join(SUMMARY_FILE), &summary)?;
    crate::out(&summary);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
