//! Federated orchestration: client sampling, per-algorithm local training,
//! aggregation and the experiment loop.

mod experiment;
mod local;

use rand::seq::index::sample;

use crate::error::Result;
use crate::losses::LossSpec;
use crate::nnet::{weighted_average, Model, ParamVector};
use crate::rng::{stream_rng, Stream};

pub use experiment::{run_experiment, ClientState, Experiment, RoundState};
pub use local::{
    finetune_personal, local_train, local_train_fedrod, LocalOutcome, LocalSetup, PersonalHead,
    Regularizer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Hyper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Algorithm {
    FedAvg,
    FedProx { lambda: f64 },
    /// `sign` multiplies the linear correction term; -1 follows the original
    /// dynamic-regularization update.
    FedDyn { lambda: f64, sign: f64 },
    Ditto { lambda: f64 },
    FedRod { head: HeadKind },
    LocalOnly,
}

/// What a client optimizes. The generic branch uses `loss`; personalized
/// branches (Ditto's model, Fed-RoD's head) always use plain cross entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgorithmSpec {
    pub kind: Algorithm,
    pub loss: LossSpec,
    pub meta_gamma: bool,
}

impl AlgorithmSpec {
    pub fn new(kind: Algorithm, loss: LossSpec) -> Self {
        AlgorithmSpec {
            kind,
            loss,
            meta_gamma: false,
        }
    }

    pub fn head(&self) -> Option<HeadKind> {
        match self.kind {
            Algorithm::FedRod { head } => Some(head),
            _ => None,
        }
    }
}

/// Number of clients drawn per round.
pub fn sample_size(num_clients: usize, fraction: f64) -> usize {
    ((fraction * num_clients as f64).round() as usize).clamp(1, num_clients.max(1))
}

/// Uniform draw without replacement of `round(fraction * M)` client ids,
/// keyed by `(seed, round)`, returned sorted.
pub fn sample_clients(num_clients: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    if num_clients == 0 {
        return Vec::new();
    }
    let k = sample_size(num_clients, fraction);
    let mut rng = stream_rng(seed, Stream::ClientSampling, &[round as u64]);
    let mut ids = sample(&mut rng, num_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Data-size weighted average of `(params, |D_m|)` pairs.
pub fn aggregate(contributions: &[(&ParamVector, usize)]) -> Result<ParamVector> {
    let weighted: Vec<(&ParamVector, f64)> = contributions
        .iter()
        .map(|&(p, n)| (p, n as f64))
        .collect();
    weighted_average(&weighted)
}

/// Aggregates extractor and generic head separately.
pub fn aggregate_models(contributions: &[(&Model, usize)]) -> Result<Model> {
    let theta: Vec<_> = contributions.iter().map(|&(m, n)| (&m.theta, n)).collect();
    let psi: Vec<_> = contributions.iter().map(|&(m, n)| (&m.psi, n)).collect();
    Ok(Model {
        theta: aggregate(&theta)?,
        psi: aggregate(&psi)?,
        phi: None,
    })
}
