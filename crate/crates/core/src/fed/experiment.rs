//! Experiment assembly and the round loop.

use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;

use super::local::{
    finetune_personal, local_train, local_train_fedrod, train_personal_model, LocalOutcome,
    LocalSetup, MetaTuning, PersonalHead, Regularizer,
};
use super::{aggregate, aggregate_models, sample_clients, Algorithm, AlgorithmSpec, HeadKind};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{
    dirichlet_partition_pool, draw_meta_set, exponential_imbalance, load_idx, ClientData, Dataset,
    Partition, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    mean_var, pfl_from_tallies, predictions, generic_predictions, ClassTally, HoldoutReport,
    MetricsLog, MetricsRow,
};
use crate::hyperhead::{zero_shot_personalize, HyperNet};
use crate::nnet::checkpoint::write_checkpoint;
use crate::nnet::{Layouts, Model, NetworkSpec, ParamVector};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Persistent per-client state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientState {
    /// Fed-RoD linear personalized head; kept on the client, never averaged.
    pub phi: Option<ParamVector>,
    /// Ditto personalized model, carried across rounds.
    pub personal: Option<Model>,
    /// FedDyn correction; `None` stands for the all-zero vector.
    pub feddyn_h: Option<Model>,
    /// Most recent local model.
    pub local: Option<Model>,
    /// Meta-tuned BSM exponent.
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    /// Completed rounds.
    pub round: usize,
    pub global: Model,
    pub nu: Option<ParamVector>,
    pub clients: Vec<ClientState>,
}

/// Data, model shapes and per-client views for one seed of a configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub algorithm: AlgorithmSpec,
    pub net: NetworkSpec,
    pub layouts: Layouts,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    /// Training clients' data as they train on it (after poisoning or meta
    /// concatenation).
    pub clients: Vec<ClientData>,
    pub holdout: Vec<ClientData>,
    /// True class distribution of every partitioned client (training clients
    /// first, then held-out ones); `None` for empty clients.
    pub distributions: Vec<Option<Vec<f64>>>,
    pub meta: Vec<usize>,
    pub hyper: Option<HyperNet>,
}

fn load_data(config: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let ds = &config.dataset;
    match ds.kind {
        DatasetKind::Synthetic => {
            let spec = SyntheticSpec {
                classes: ds.classes,
                dim: ds.dim,
                separation: ds.separation,
            };
            Ok((spec.train(ds.n_per_class, seed)?, spec.test(ds.test_per_class, seed)?))
        }
        DatasetKind::Idx => {
            let dir = ds
                .path
                .as_ref()
                .ok_or_else(|| Error::config("dataset.path: required for idx data"))?;
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            let classes = train.num_classes().max(test.num_classes());
            Ok((train.with_num_classes(classes)?, test.with_num_classes(classes)?))
        }
    }
}

impl Experiment {
    pub fn build(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_data(config, seed)?;
        let train = exponential_imbalance(&train, config.imbalance_ratio, seed)?;
        let net = NetworkSpec::new(train.dim(), config.hidden_dims.clone(), train.num_classes())?;
        let layouts = Layouts::new(&net);
        let all: Vec<usize> = (0..train.len()).collect();
        let (meta, pool) = draw_meta_set(&train, &all, config.meta_set.per_class, seed)?;
        let total = config.clients + config.holdout_clients;
        let partition = dirichlet_partition_pool(&train, &pool, total, config.alpha, seed)?;
        let mut clients = Vec::with_capacity(config.clients);
        for m in 0..config.clients {
            let mut cd = ClientData::from_indices(&train, partition.clients[m].clone());
            if config.attack.poisoned_clients.contains(&m) {
                cd = cd.poison_labels(derive_seed(seed, Stream::Poison, &[m as u64]));
            }
            if config.meta_set.concat {
                cd = cd.augment_with_meta(&train, &meta);
            }
            clients.push(cd);
        }
        let holdout = (config.clients..total)
            .map(|m| ClientData::from_indices(&train, partition.clients[m].clone()))
            .collect();
        let distributions = (0..total)
            .map(|m| partition.class_distribution(m).ok())
            .collect();
        let algorithm = config.algorithm_spec();
        let hyper = match algorithm.head() {
            Some(HeadKind::Hyper) => {
                let d = net.feature_dim();
                let h = config
                    .hyper_hidden
                    .unwrap_or_else(|| crate::hyperhead::default_hidden_dim(net.num_classes, d));
                Some(HyperNet::new(&net, h, layouts.phi.clone())?)
            }
            _ => None,
        };
        Ok(Experiment {
            config: config.clone(),
            seed,
            algorithm,
            net,
            layouts,
            train,
            test,
            partition,
            clients,
            holdout,
            distributions,
            meta,
            hyper,
        })
    }

    /// Clients that can be sampled: training clients with at least one sample.
    pub fn eligible(&self) -> Vec<usize> {
        (0..self.clients.len())
            .filter(|&m| {
                let empty = self.clients[m].is_empty();
                if empty {
                    warn!("client {m} has no samples; excluded from sampling");
                }
                !empty
            })
            .collect()
    }

    pub fn initial_state(&self) -> RoundState {
        let global = Model::init(&self.layouts, &mut stream_rng(self.seed, Stream::Init, &[0]));
        let nu = self
            .hyper
            .as_ref()
            .map(|h| h.init(&mut stream_rng(self.seed, Stream::Init, &[1])));
        RoundState {
            round: 0,
            global,
            nu,
            clients: vec![ClientState::default(); self.clients.len()],
        }
    }

    fn setup<'a>(&'a self, m: usize, round: usize, meta: Option<MetaTuning<'a>>) -> LocalSetup<'a> {
        LocalSetup {
            net: &self.net,
            dataset: &self.train,
            data: &self.clients[m],
            sgd: &self.config.sgd,
            epochs: self.config.local_epochs,
            round,
            seed: self.seed,
            client: m,
            meta,
        }
    }

    /// One client's local work for round `round` (0-based).
    fn train_client(
        &self,
        m: usize,
        round: usize,
        state: &RoundState,
        meta: Option<MetaTuning<'_>>,
    ) -> Result<ClientUpdate> {
        let prev = &state.clients[m];
        let setup = self.setup(m, round, meta);
        let mut loss = self.algorithm.loss;
        if let Some(g) = prev.gamma {
            loss.gamma = g;
        }
        let global = &state.global;
        let mut update = ClientUpdate {
            client: m,
            outcome: None,
            personal: None,
            feddyn_h: None,
        };
        let outcome = match self.algorithm.kind {
            Algorithm::FedAvg => local_train(&setup, global.clone(), loss, &Regularizer::default())?,
            Algorithm::FedProx { lambda } => {
                local_train(&setup, global.clone(), loss, &Regularizer::proximal(lambda, global))?
            }
            Algorithm::FedDyn { lambda, sign } => {
                let reg = Regularizer {
                    lambda,
                    anchor: Some(global),
                    linear: prev.feddyn_h.as_ref(),
                    sign,
                };
                let out = local_train(&setup, global.clone(), loss, &reg)?;
                if lambda != 0.0 {
                    let mut h = prev.feddyn_h.clone().unwrap_or_else(|| zeros_like(global));
                    h.theta.axpy(sign * lambda, &out.model.theta.sub(&global.theta));
                    h.psi.axpy(sign * lambda, &out.model.psi.sub(&global.psi));
                    update.feddyn_h = Some(h);
                }
                out
            }
            Algorithm::Ditto { lambda } => {
                let out = local_train(&setup, global.clone(), loss, &Regularizer::default())?;
                let start = prev.personal.clone().unwrap_or_else(|| global.clone());
                update.personal = Some(train_personal_model(&setup, start, lambda, global)?.model);
                out
            }
            Algorithm::LocalOnly => {
                let start = prev.local.clone().unwrap_or_else(|| global.clone());
                local_train(&setup, start, loss, &Regularizer::default())?
            }
            Algorithm::FedRod { head } => {
                let head = match head {
                    HeadKind::Linear => PersonalHead::Linear(
                        prev.phi
                            .clone()
                            .unwrap_or_else(|| ParamVector::zeros(self.layouts.phi.clone())),
                    ),
                    HeadKind::Hyper => PersonalHead::Hyper {
                        hyper: self.hyper.as_ref().expect("hypernetwork"),
                        nu: state.nu.clone().expect("hypernetwork parameters"),
                        distribution: self.clients[m].distribution()?,
                    },
                };
                local_train_fedrod(&setup, global.clone(), loss, head)?
            }
        };
        update.outcome = Some(outcome);
        Ok(update)
    }

    /// Model used to evaluate client `m` under its own distribution.
    pub fn personalized_model(&self, state: &RoundState, m: usize) -> Result<Model> {
        let cs = &state.clients[m];
        let global = || state.global.clone();
        Ok(match self.algorithm.kind {
            Algorithm::Ditto { .. } => cs.personal.clone().unwrap_or_else(global),
            Algorithm::FedRod { head: HeadKind::Linear } => {
                let phi = cs
                    .phi
                    .clone()
                    .unwrap_or_else(|| ParamVector::zeros(self.layouts.phi.clone()));
                state.global.clone().with_phi(phi)
            }
            Algorithm::FedRod { head: HeadKind::Hyper } => zero_shot_personalize(
                &state.global,
                self.hyper.as_ref().expect("hypernetwork"),
                state.nu.as_ref().expect("hypernetwork parameters"),
                &self.clients[m].distribution()?,
            )?,
            _ => cs.local.clone().unwrap_or_else(global),
        })
    }

    fn meta_samples(&self) -> Vec<(&[f64], usize)> {
        self.meta
            .iter()
            .map(|&i| (self.train.row(i), self.train.label(i)))
            .collect()
    }

    /// Runs every round, writing artifacts into `out` when given.
    pub fn run(&self, out: Option<&Path>) -> Result<(MetricsLog, RoundState)> {
        let eligible = self.eligible();
        if eligible.is_empty() {
            return Err(Error::config("clients: every client is empty"));
        }
        let meta_samples = self.meta_samples();
        let meta = self.config.meta_gamma.then(|| MetaTuning {
            meta_set: &meta_samples,
            inner_lr: self.config.meta_set.inner_lr,
            meta_lr: self.config.meta_set.meta_lr,
            eps: self.config.meta_set.eps,
        });
        let ckpt_dir = out.map(|d| d.join("checkpoints"));
        if let Some(d) = &ckpt_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }

        let mut state = self.initial_state();
        let mut log = MetricsLog::default();
        log.rows.push(self.evaluate(&state, &[], None)?);

        for round in 0..self.config.rounds {
            let picks = sample_clients(eligible.len(), self.config.participation, self.seed, round);
            let sampled: Vec<usize> = picks.iter().map(|&i| eligible[i]).collect();
            let updates: Vec<ClientUpdate> = sampled
                .par_iter()
                .map(|&m| {
                    self.train_client(m, round, &state, meta).map_err(|e| Error::Client {
                        round: round + 1,
                        client: m,
                        source: Box::new(e),
                    })
                })
                .collect::<Result<_>>()?;

            let broadcast = state.global.clone();
            let sizes: Vec<usize> = updates.iter().map(|u| self.clients[u.client].len()).collect();
            let locals: Vec<&LocalOutcome> = updates.iter().map(|u| u.outcome.as_ref().expect("outcome")).collect();
            let contributions: Vec<(&Model, usize)> =
                locals.iter().zip(&sizes).map(|(o, &n)| (&o.model, n)).collect();
            state.global = aggregate_models(&contributions)?;
            if state.nu.is_some() {
                let nus: Vec<(&ParamVector, usize)> = locals
                    .iter()
                    .zip(&sizes)
                    .map(|(o, &n)| (o.nu.as_ref().expect("hypernetwork update"), n))
                    .collect();
                state.nu = Some(aggregate(&nus)?);
            }
            for u in &updates {
                let cs = &mut state.clients[u.client];
                let o = u.outcome.as_ref().expect("outcome");
                cs.local = Some(o.model.clone());
                if o.phi.is_some() {
                    cs.phi = o.phi.clone();
                }
                if u.personal.is_some() {
                    cs.personal = u.personal.clone();
                }
                if u.feddyn_h.is_some() {
                    cs.feddyn_h = u.feddyn_h.clone();
                }
                if self.config.meta_gamma {
                    cs.gamma = Some(o.gamma);
                }
            }
            state.round = round + 1;

            let r = state.round;
            if r.is_multiple_of(self.config.output.eval_every) || r == self.config.rounds {
                let row = self.evaluate(&state, &updates, Some(&broadcast))?;
                info!(
                    "seed {} round {r}: G-FL {:.4}  P-FL(GM) {:.4}  P-FL(PM) {:.4}",
                    self.seed, row.gfl_global, row.pfl_global, row.pfl_personal
                );
                log.rows.push(row);
            }
            if let Some(d) = &ckpt_dir {
                let every = self.config.output.checkpoint_every;
                if (every > 0 && r.is_multiple_of(every)) || r == self.config.rounds {
                    self.write_state(&d.join(format!("round_{r:04}.bin")), &state)?;
                }
            }
        }

        let personal = self.personal_models(&state)?;
        let (models, dists): (Vec<&Model>, Vec<Vec<f64>>) = personal
            .iter()
            .filter_map(|(m, model)| self.distributions[*m].clone().map(|d| (model, d)))
            .unzip();
        log.cross_client = Some(crate::eval::cross_client_matrix(&self.net, &models, &dists, &self.test)?);
        log.per_class_recall = Some(
            ClassTally::new(&generic_predictions(&self.net, &state.global, &self.test)?, &self.test).recall(),
        );
        log.holdout = self.holdout_report(&state)?;
        if let Some(dir) = out {
            log.write(dir)?;
        }
        Ok((log, state))
    }

    fn personal_models(&self, state: &RoundState) -> Result<Vec<(usize, Model)>> {
        (0..self.clients.len())
            .into_par_iter()
            .filter(|&m| !self.clients[m].is_empty())
            .map(|m| Ok((m, self.personalized_model(state, m)?)))
            .collect()
    }

    fn evaluate(
        &self,
        state: &RoundState,
        updates: &[ClientUpdate],
        broadcast: Option<&Model>,
    ) -> Result<MetricsRow> {
        let test = &self.test;
        let global_tally = ClassTally::new(&generic_predictions(&self.net, &state.global, test)?, test);
        let personal = self.personal_models(state)?;
        let tallies: Vec<(usize, ClassTally)> = personal
            .par_iter()
            .map(|(m, model)| Ok((*m, ClassTally::new(&predictions(&self.net, model, test)?, test))))
            .collect::<Result<_>>()?;
        let (clients, dists): (Vec<usize>, Vec<Vec<f64>>) = tallies
            .iter()
            .filter_map(|(m, _)| self.distributions[*m].clone().map(|d| (*m, d)))
            .unzip();
        let personal_tallies: Vec<&ClassTally> = tallies
            .iter()
            .filter(|(m, _)| clients.contains(m))
            .map(|(_, t)| t)
            .collect();
        let global_tallies = vec![&global_tally; dists.len()];
        let pfl_global = pfl_from_tallies(&global_tallies, &dists)?;
        let pfl_personal = pfl_from_tallies(&personal_tallies, &dists)?;

        let mut row = MetricsRow {
            round: state.round,
            gfl_global: global_tally.accuracy(),
            gfl_local_mean: None,
            gfl_local_var: None,
            pfl_global,
            pfl_personal,
            drift_mean: None,
            drift_var: None,
            train_loss_mean: None,
            local_sqdist_mean: None,
            personal_sqdist_mean: None,
        };
        let Some(w_bar) = broadcast else {
            return Ok(row);
        };
        if updates.is_empty() {
            return Ok(row);
        }
        let locals: Vec<&Model> = updates.iter().map(|u| &u.outcome.as_ref().expect("outcome").model).collect();
        let local_acc: Vec<f64> = locals
            .par_iter()
            .map(|m| Ok(ClassTally::new(&generic_predictions(&self.net, m, test)?, test).accuracy()))
            .collect::<Result<_>>()?;
        let (mean, var) = mean_var(&local_acc).expect("nonempty");
        row.gfl_local_mean = Some(mean);
        row.gfl_local_var = Some(var);
        let sq: Vec<f64> = locals.iter().map(|m| model_dist_sq(m, w_bar)).collect();
        let norms: Vec<f64> = sq.iter().map(|v| v.sqrt()).collect();
        let (dm, dv) = mean_var(&norms).expect("nonempty");
        row.drift_mean = Some(dm);
        row.drift_var = Some(dv);
        row.local_sqdist_mean = mean_var(&sq).map(|p| p.0);
        let personal_sq: Vec<f64> = updates
            .iter()
            .map(|u| {
                let m = u.personal.as_ref().unwrap_or(&u.outcome.as_ref().expect("outcome").model);
                model_dist_sq(m, w_bar)
            })
            .collect();
        row.personal_sqdist_mean = mean_var(&personal_sq).map(|p| p.0);
        let risks: Vec<f64> = updates
            .iter()
            .filter_map(|u| u.outcome.as_ref().and_then(|o| o.mean_risk))
            .collect();
        row.train_loss_mean = mean_var(&risks).map(|p| p.0);
        Ok(row)
    }

    /// Generic, zero-shot and fine-tuned P-FL accuracy on the held-out clients.
    fn holdout_report(&self, state: &RoundState) -> Result<Option<HoldoutReport>> {
        let base = self.clients.len();
        let ids: Vec<usize> = (0..self.holdout.len())
            .filter(|&j| !self.holdout[j].is_empty())
            .collect();
        if ids.is_empty() {
            return Ok(None);
        }
        let test = &self.test;
        let dists: Vec<Vec<f64>> = ids
            .iter()
            .map(|&j| self.distributions[base + j].clone().expect("nonempty client"))
            .collect();
        let generic = ClassTally::new(&generic_predictions(&self.net, &state.global, test)?, test);
        let results: Vec<(ClassTally, ClassTally)> = ids
            .par_iter()
            .map(|&j| {
                let data = &self.holdout[j];
                let zero_shot = match (&self.hyper, &state.nu) {
                    (Some(h), Some(nu)) => zero_shot_personalize(&state.global, h, nu, &data.distribution()?)?,
                    _ => state
                        .global
                        .clone()
                        .with_phi(ParamVector::zeros(self.layouts.phi.clone())),
                };
                let tuned = finetune_personal(
                    &self.net,
                    &zero_shot,
                    &data.samples(&self.train),
                    self.config.finetune_steps,
                    self.config.finetune_lr,
                    self.config.sgd.batch_size,
                    self.config.finetune_full,
                    derive_seed(self.seed, Stream::Holdout, &[j as u64]),
                )?;
                Ok((
                    ClassTally::new(&predictions(&self.net, &zero_shot, test)?, test),
                    ClassTally::new(&predictions(&self.net, &tuned, test)?, test),
                ))
            })
            .collect::<Result<_>>()?;
        let zs: Vec<&ClassTally> = results.iter().map(|r| &r.0).collect();
        let ft: Vec<&ClassTally> = results.iter().map(|r| &r.1).collect();
        Ok(Some(HoldoutReport {
            clients: ids.len(),
            pfl_generic: pfl_from_tallies(&vec![&generic; ids.len()], &dists)?,
            pfl_zero_shot: pfl_from_tallies(&zs, &dists)?,
            pfl_finetuned: pfl_from_tallies(&ft, &dists)?,
        }))
    }

    /// Global parameters plus every client's persistent state.
    pub fn write_state(&self, path: &Path, state: &RoundState) -> Result<()> {
        let mut entries: Vec<(String, &ParamVector)> = vec![
            ("theta".into(), &state.global.theta),
            ("psi".into(), &state.global.psi),
        ];
        if let Some(nu) = &state.nu {
            entries.push(("nu".into(), nu));
        }
        for (m, cs) in state.clients.iter().enumerate() {
            if let Some(phi) = &cs.phi {
                entries.push((format!("client{m}.phi"), phi));
            }
            if let Some(p) = &cs.personal {
                entries.push((format!("client{m}.personal.theta"), &p.theta));
                entries.push((format!("client{m}.personal.psi"), &p.psi));
            }
            if let Some(h) = &cs.feddyn_h {
                entries.push((format!("client{m}.feddyn_h.theta"), &h.theta));
                entries.push((format!("client{m}.feddyn_h.psi"), &h.psi));
            }
        }
        let sections: Vec<(&str, &ParamVector)> =
            entries.iter().map(|(n, p)| (n.as_str(), *p)).collect();
        write_checkpoint(path, &sections)
    }
}

fn zeros_like(m: &Model) -> Model {
    Model {
        theta: ParamVector::zeros(m.theta.layout().clone()),
        psi: ParamVector::zeros(m.psi.layout().clone()),
        phi: None,
    }
}

fn model_dist_sq(a: &Model, b: &Model) -> f64 {
    a.theta.dist_sq(&b.theta) + a.psi.dist_sq(&b.psi)
}

#[derive(Debug, Clone)]
struct ClientUpdate {
    client: usize,
    outcome: Option<LocalOutcome>,
    personal: Option<Model>,
    feddyn_h: Option<Model>,
}

/// Builds and runs one seed of `config`, writing artifacts into `out`.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<MetricsLog> {
    let exp = Experiment::build(config, seed)?;
    Ok(exp.run(out)?.0)
}
