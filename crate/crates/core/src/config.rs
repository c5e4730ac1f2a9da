//! Experiment configuration: a one-level TOML schema, validation that names the
//! offending key, and materialization of every default.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{Algorithm, AlgorithmSpec, HeadKind};
use crate::losses::{LossKind, LossSpec};
use crate::nnet::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlgorithmKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "feddyn")]
    FedDyn,
    #[serde(rename = "ditto")]
    Ditto,
    #[serde(rename = "fedrod-linear", alias = "fedrod")]
    FedRodLinear,
    #[serde(rename = "fedrod-hyper")]
    FedRodHyper,
    #[serde(rename = "local")]
    LocalOnly,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 7] = [
        AlgorithmKind::FedAvg,
        AlgorithmKind::FedProx,
        AlgorithmKind::FedDyn,
        AlgorithmKind::Ditto,
        AlgorithmKind::FedRodLinear,
        AlgorithmKind::FedRodHyper,
        AlgorithmKind::LocalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::FedAvg => "fedavg",
            AlgorithmKind::FedProx => "fedprox",
            AlgorithmKind::FedDyn => "feddyn",
            AlgorithmKind::Ditto => "ditto",
            AlgorithmKind::FedRodLinear => "fedrod-linear",
            AlgorithmKind::FedRodHyper => "fedrod-hyper",
            AlgorithmKind::LocalOnly => "local",
        }
    }

    fn default_lambda(self) -> f64 {
        match self {
            AlgorithmKind::FedProx | AlgorithmKind::FedDyn => 0.01,
            AlgorithmKind::Ditto => 0.75,
            _ => 0.0,
        }
    }

    fn default_loss(self) -> LossKind {
        match self {
            AlgorithmKind::FedRodLinear | AlgorithmKind::FedRodHyper => LossKind::Bsm,
            _ => LossKind::Ce,
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fedrod" {
            return Ok(AlgorithmKind::FedRodLinear);
        }
        AlgorithmKind::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("algorithm: unknown value `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub kind: Option<LossKind>,
    pub gamma: Option<f64>,
    pub ir_power: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            kind: None,
            gamma: None,
            ir_power: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Directory holding `train-*` and `t10k-*` IDX files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Synthetic,
            path: None,
            classes: 10,
            dim: 32,
            n_per_class: 500,
            test_per_class: 100,
            separation: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaSection {
    /// Server-held samples per class; 0 disables the meta set.
    pub per_class: usize,
    /// Append the meta set to every client's data.
    pub concat: bool,
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub eps: f64,
}

impl Default for MetaSection {
    fn default() -> Self {
        MetaSection {
            per_class: 0,
            concat: false,
            inner_lr: 0.1,
            meta_lr: 1.0,
            eps: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub poisoned_clients: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Evaluate every k rounds (the final round is always evaluated).
    pub eval_every: usize,
    /// Checkpoint every k rounds; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub algorithm: AlgorithmKind,
    pub lambda: Option<f64>,
    pub feddyn_sign: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub participation: f64,
    pub clients: usize,
    /// Extra clients partitioned alongside the training clients but never
    /// sampled; used to evaluate personalization of unseen clients.
    pub holdout_clients: usize,
    pub alpha: f64,
    pub imbalance_ratio: f64,
    pub seed: u64,
    pub repetitions: usize,
    pub seeds: Option<Vec<u64>>,
    pub hidden_dims: Vec<usize>,
    pub hyper_hidden: Option<usize>,
    pub meta_gamma: bool,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_full: bool,
    pub loss: LossSection,
    pub sgd: SgdConfig,
    pub dataset: DatasetSection,
    pub meta_set: MetaSection,
    pub attack: AttackSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithm: AlgorithmKind::FedAvg,
            lambda: None,
            feddyn_sign: -1.0,
            rounds: 100,
            local_epochs: 5,
            participation: 0.4,
            clients: 20,
            holdout_clients: 0,
            alpha: 0.1,
            imbalance_ratio: 1.0,
            seed: 0,
            repetitions: 1,
            seeds: None,
            hidden_dims: vec![64],
            hyper_hidden: None,
            meta_gamma: false,
            finetune_steps: 50,
            finetune_lr: 0.1,
            finetune_full: false,
            loss: LossSection::default(),
            sgd: SgdConfig::default(),
            dataset: DatasetSection::default(),
            meta_set: MetaSection::default(),
            attack: AttackSection::default(),
            output: OutputSection::default(),
        }
    }
}

fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!("{key}: {msg}")))
    }
}

/// Parses a scalar override: TOML literal if it parses as one, else a string.
pub fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    match key.split_once('.') {
        None => {
            table.insert(key.to_string(), value);
            Ok(())
        }
        Some((head, rest)) => {
            let entry = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => set_dotted(t, rest, value),
                _ => Err(Error::config(format!("{head}: expected a table"))),
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key = value` overrides (dotted keys address
    /// sections), and returns the resolved, validated configuration.
    pub fn from_toml_str(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("malformed config: {}", e.message())))?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, v.clone())?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| {
                let path = e.path().to_string();
                Error::config(format!("{path}: {}", e.into_inner()))
            })?;
        cfg.resolve()
    }

    pub fn from_file(path: &std::path::Path, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Fills algorithm-dependent defaults and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.lambda.get_or_insert(self.algorithm.default_lambda());
        let kind = *self.loss.kind.get_or_insert(self.algorithm.default_loss());
        self.loss.gamma.get_or_insert(kind.default_gamma());
        if self.hyper_hidden.is_none() && self.algorithm == AlgorithmKind::FedRodHyper {
            let d = self.hidden_dims.last().copied().unwrap_or(self.dataset.dim);
            self.hyper_hidden = Some(crate::hyperhead::default_hidden_dim(self.dataset.classes, d));
        }
        match &self.seeds {
            Some(s) => {
                check(!s.is_empty(), "seeds", "must not be empty")?;
                self.repetitions = s.len();
            }
            None => {
                check(self.repetitions >= 1, "repetitions", "must be at least 1")?;
                self.seeds = Some((0..self.repetitions as u64).map(|i| self.seed + i).collect());
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let lambda = self.lambda.unwrap_or(0.0);
        check(lambda >= 0.0 && lambda.is_finite(), "lambda", "must be finite and nonnegative")?;
        check(self.feddyn_sign == 1.0 || self.feddyn_sign == -1.0, "feddyn_sign", "must be 1 or -1")?;
        check(self.local_epochs >= 1, "local_epochs", "must be at least 1")?;
        check(
            self.participation > 0.0 && self.participation <= 1.0,
            "participation",
            "must lie in (0, 1]",
        )?;
        check(self.clients >= 1, "clients", "must be at least 1")?;
        check(self.alpha > 0.0 && self.alpha.is_finite(), "alpha", "must be positive")?;
        check(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite(), "imbalance_ratio", "must be at least 1")?;
        check(self.hidden_dims.iter().all(|&h| h > 0), "hidden_dims", "widths must be positive")?;
        check(self.hyper_hidden != Some(0), "hyper_hidden", "must be positive")?;
        check(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite(), "finetune_lr", "must be nonnegative")?;
        let loss = self.loss_spec();
        loss.validate()?;
        self.sgd.validate()?;
        let ds = &self.dataset;
        match ds.kind {
            DatasetKind::Synthetic => {
                check(ds.classes >= 2, "dataset.classes", "need at least two classes")?;
                check(ds.dim >= 1, "dataset.dim", "must be positive")?;
                check(ds.n_per_class >= 1, "dataset.n_per_class", "must be positive")?;
                check(ds.test_per_class >= 1, "dataset.test_per_class", "must be positive")?;
                check(ds.separation >= 0.0 && ds.separation.is_finite(), "dataset.separation", "must be nonnegative")?;
            }
            DatasetKind::Idx => check(ds.path.is_some(), "dataset.path", "required for idx data")?,
        }
        check(
            self.output.eval_every >= 1,
            "output.eval_every",
            "must be at least 1",
        )?;
        let total = self.clients + self.holdout_clients;
        check(
            self.attack.poisoned_clients.iter().all(|&m| m < self.clients),
            "attack.poisoned_clients",
            "client id out of range",
        )?;
        check(total >= 1, "clients", "must be at least 1")?;
        let m = &self.meta_set;
        check(m.inner_lr >= 0.0 && m.inner_lr.is_finite(), "meta_set.inner_lr", "must be nonnegative")?;
        check(m.meta_lr >= 0.0 && m.meta_lr.is_finite(), "meta_set.meta_lr", "must be nonnegative")?;
        check(m.eps > 0.0, "meta_set.eps", "must be positive")?;
        check(!m.concat || m.per_class > 0, "meta_set.concat", "needs meta_set.per_class > 0")?;
        if self.meta_gamma {
            check(loss.kind == LossKind::Bsm, "meta_gamma", "requires loss.kind = \"bsm\"")?;
            check(m.per_class > 0, "meta_gamma", "needs meta_set.per_class > 0")?;
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        let kind = self.loss.kind.unwrap_or(self.algorithm.default_loss());
        LossSpec {
            kind,
            gamma: self.loss.gamma.unwrap_or(kind.default_gamma()),
            ir_power: self.loss.ir_power,
        }
    }

    pub fn algorithm_spec(&self) -> AlgorithmSpec {
        let lambda = self.lambda.unwrap_or(self.algorithm.default_lambda());
        let kind = match self.algorithm {
            AlgorithmKind::FedAvg => Algorithm::FedAvg,
            AlgorithmKind::FedProx => Algorithm::FedProx { lambda },
            AlgorithmKind::FedDyn => Algorithm::FedDyn {
                lambda,
                sign: self.feddyn_sign,
            },
            AlgorithmKind::Ditto => Algorithm::Ditto { lambda },
            AlgorithmKind::FedRodLinear => Algorithm::FedRod {
                head: HeadKind::Linear,
            },
            AlgorithmKind::FedRodHyper => Algorithm::FedRod {
                head: HeadKind::Hyper,
            },
            AlgorithmKind::LocalOnly => Algorithm::LocalOnly,
        };
        AlgorithmSpec {
            kind,
            loss: self.loss_spec(),
            meta_gamma: self.meta_gamma,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![self.seed])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
