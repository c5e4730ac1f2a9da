//! Generic and personalized accuracy, per-class recall, drift statistics and
//! the cross-client accuracy matrix.

use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnet::{Model, NetworkSpec, ParamVector};

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Predicted labels on `test`, using personalized logits when the model has a
/// personalized head and raw generic logits otherwise.
pub fn predictions(net: &NetworkSpec, model: &Model, test: &Dataset) -> Result<Vec<usize>> {
    (0..test.len())
        .map(|i| {
            let f = net.forward(&model.theta, &model.psi, model.phi.as_ref(), test.row(i))?;
            Ok(argmax(f.personal.as_ref().unwrap_or(&f.generic)))
        })
        .collect()
}

/// Generic-head predictions, ignoring any personalized head.
pub fn generic_predictions(net: &NetworkSpec, model: &Model, test: &Dataset) -> Result<Vec<usize>> {
    (0..test.len())
        .map(|i| {
            let f = net.forward(&model.theta, &model.psi, None, test.row(i))?;
            Ok(argmax(&f.generic))
        })
        .collect()
}

/// Per-class (correct, total) counts for a prediction vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTally {
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

impl ClassTally {
    pub fn new(preds: &[usize], test: &Dataset) -> Self {
        let c = test.num_classes();
        let mut correct = vec![0; c];
        let mut total = vec![0; c];
        for (&p, &y) in preds.iter().zip(test.labels()) {
            total[y] += 1;
            if p == y {
                correct[y] += 1;
            }
        }
        ClassTally { correct, total }
    }

    pub fn accuracy(&self) -> f64 {
        let c: usize = self.correct.iter().sum();
        let t: usize = self.total.iter().sum();
        c as f64 / t as f64
    }

    /// `Σ_i P(y_i) 1[correct_i] / Σ_i P(y_i)`; `None` when `P` puts no mass on
    /// any test label.
    pub fn weighted_accuracy(&self, dist: &[f64]) -> Option<f64> {
        // Relative weights: a uniform P maps to all-ones, making the ratio
        // bit-identical to the unweighted accuracy.
        let max = dist.iter().copied().fold(0.0, f64::max);
        if !(max > 0.0) {
            return None;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for ((&p, &k), &n) in dist.iter().zip(&self.correct).zip(&self.total) {
            let w = p / max;
            num += w * k as f64;
            den += w * n as f64;
        }
        (den > 0.0).then(|| num / den)
    }

    /// Recall per class, NaN for classes absent from the test set.
    pub fn recall(&self) -> Vec<f64> {
        self.correct
            .iter()
            .zip(&self.total)
            .map(|(&k, &n)| if n > 0 { k as f64 / n as f64 } else { f64::NAN })
            .collect()
    }
}

/// Mean that returns `x` exactly when every term equals `x`.
pub fn stable_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut mean = None;
    for (k, v) in values.into_iter().enumerate() {
        mean = Some(match mean {
            None => v,
            Some(m) => m + (v - m) / (k + 1) as f64,
        });
    }
    mean
}

/// Population mean and variance.
pub fn mean_var(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.max(0.0)))
}

/// Fraction of test samples whose generic argmax equals the label.
pub fn gfl_accuracy(net: &NetworkSpec, model: &Model, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::domain("empty test set"));
    }
    let preds = generic_predictions(net, model, test)?;
    Ok(ClassTally::new(&preds, test).accuracy())
}

/// Mean over clients of the distribution-weighted accuracy on the shared test
/// set. Clients whose distribution has no mass on any test label are skipped.
pub fn pfl_accuracy(
    net: &NetworkSpec,
    models: &[&Model],
    test: &Dataset,
    distributions: &[Vec<f64>],
) -> Result<f64> {
    let tallies = models
        .iter()
        .map(|m| Ok(ClassTally::new(&predictions(net, m, test)?, test)))
        .collect::<Result<Vec<_>>>()?;
    pfl_from_tallies(&tallies.iter().collect::<Vec<_>>(), distributions)
}

pub fn pfl_from_tallies(tallies: &[&ClassTally], distributions: &[Vec<f64>]) -> Result<f64> {
    if tallies.len() != distributions.len() {
        return Err(Error::dim("client distributions", tallies.len(), distributions.len()));
    }
    let terms: Vec<f64> = tallies
        .iter()
        .zip(distributions)
        .enumerate()
        .filter_map(|(m, (t, d))| {
            let term = t.weighted_accuracy(d);
            if term.is_none() {
                warn!("client {m}: distribution has no mass on the test labels; excluded");
            }
            term
        })
        .collect();
    stable_mean(terms).ok_or_else(|| Error::domain("no client contributes to P-FL accuracy"))
}

pub fn per_class_recall(net: &NetworkSpec, model: &Model, test: &Dataset) -> Result<Vec<f64>> {
    Ok(ClassTally::new(&predictions(net, model, test)?, test).recall())
}

/// Mean and population variance of `‖w_m − w̄‖` over the local models.
pub fn drift_stats(locals: &[&ParamVector], global: &ParamVector) -> Result<(f64, f64)> {
    if locals.is_empty() {
        return Err(Error::domain("no local models"));
    }
    let norms = locals
        .iter()
        .map(|p| {
            p.ensure_same_layout(global, "drift")?;
            Ok(p.dist_sq(global).sqrt())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_var(&norms).expect("nonempty"))
}

/// Entry `(i, j)`: model `i`'s accuracy re-weighted by client `j`'s distribution.
pub fn cross_client_matrix(
    net: &NetworkSpec,
    models: &[&Model],
    distributions: &[Vec<f64>],
    test: &Dataset,
) -> Result<Vec<Vec<f64>>> {
    if models.len() != distributions.len() {
        return Err(Error::dim("client distributions", models.len(), distributions.len()));
    }
    let tallies = models
        .iter()
        .map(|m| Ok(ClassTally::new(&predictions(net, m, test)?, test)))
        .collect::<Result<Vec<_>>>()?;
    Ok(tallies
        .iter()
        .map(|t| {
            distributions
                .iter()
                .map(|d| t.weighted_accuracy(d).unwrap_or(f64::NAN))
                .collect()
        })
        .collect())
}

/// One evaluated round. Fields that do not apply (no local models yet) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub gfl_global: f64,
    pub gfl_local_mean: Option<f64>,
    pub gfl_local_var: Option<f64>,
    pub pfl_global: f64,
    pub pfl_personal: f64,
    pub drift_mean: Option<f64>,
    pub drift_var: Option<f64>,
    pub train_loss_mean: Option<f64>,
    pub local_sqdist_mean: Option<f64>,
    pub personal_sqdist_mean: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "round",
    "gfl_global",
    "gfl_local_mean",
    "gfl_local_var",
    "pfl_global",
    "pfl_personal",
    "drift_mean",
    "drift_var",
    "train_loss_mean",
    "local_sqdist_mean",
    "personal_sqdist_mean",
];

/// Accuracy of clients that never took part in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub clients: usize,
    /// Global generic model, re-weighted per held-out client.
    pub pfl_generic: f64,
    /// Personalized model built without any client data.
    pub pfl_zero_shot: f64,
    /// Zero-shot model after local fine-tuning of the personalized head.
    pub pfl_finetuned: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub cross_client: Option<Vec<Vec<f64>>>,
    pub per_class_recall: Option<Vec<f64>>,
    pub holdout: Option<HoldoutReport>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = CSV_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            let fields = [
                r.round.to_string(),
                r.gfl_global.to_string(),
                cell(r.gfl_local_mean),
                cell(r.gfl_local_var),
                r.pfl_global.to_string(),
                r.pfl_personal.to_string(),
                cell(r.drift_mean),
                cell(r.drift_var),
                cell(r.train_loss_mean),
                cell(r.local_sqdist_mean),
                cell(r.personal_sqdist_mean),
            ];
            s.push_str(&fields.join(","));
            s.push('\n');
        }
        s
    }

    /// Round-keyed JSON object plus the final artifacts.
    pub fn to_json(&self) -> serde_json::Value {
        let rounds: serde_json::Map<String, serde_json::Value> = self
            .rows
            .iter()
            .map(|r| (r.round.to_string(), serde_json::to_value(r).expect("row")))
            .collect();
        serde_json::json!({
            "rounds": rounds,
            "cross_client": self.cross_client,
            "per_class_recall": self.per_class_recall.as_ref().map(|v| {
                v.iter().map(|x| if x.is_nan() { None } else { Some(*x) }).collect::<Vec<_>>()
            }),
            "holdout": self.holdout,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("metrics.csv"), self.to_csv().as_bytes())?;
        let json = serde_json::to_string_pretty(&self.to_json()).expect("json");
        write_file(&dir.join("metrics.json"), json.as_bytes())?;
        if let Some(m) = &self.cross_client {
            write_file(&dir.join("matrix.csv"), matrix_csv(m).as_bytes())?;
        }
        Ok(())
    }
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
