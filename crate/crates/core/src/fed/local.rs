//! Client-side training loops.

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::data::{ClientData, Dataset};
use crate::error::Result;
use crate::hyperhead::HyperNet;
use crate::losses::{
    accumulate_balanced, class_weights, meta_tune_gamma, softmax_cross_entropy, LossSpec,
    MetaProblem,
};
use crate::nnet::{
    sgd_step_with_lr, Branch, Gradients, Groups, Layouts, Model, NetworkSpec, ParamVector,
    SgdConfig,
};
use crate::rng::{stream_rng, Stream};

/// Server-held balanced samples used to tune the BSM exponent per batch.
#[derive(Debug, Clone, Copy)]
pub struct MetaTuning<'a> {
    pub meta_set: &'a [(&'a [f64], usize)],
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub eps: f64,
}

/// Everything a client needs to run one round of local training.
#[derive(Debug, Clone, Copy)]
pub struct LocalSetup<'a> {
    pub net: &'a NetworkSpec,
    pub dataset: &'a Dataset,
    pub data: &'a ClientData,
    pub sgd: &'a SgdConfig,
    pub epochs: usize,
    pub round: usize,
    pub seed: u64,
    pub client: usize,
    pub meta: Option<MetaTuning<'a>>,
}

/// Personalized head trained alongside the generic model.
#[derive(Debug, Clone)]
pub enum PersonalHead<'a> {
    None,
    Linear(ParamVector),
    Hyper {
        hyper: &'a HyperNet,
        nu: ParamVector,
        distribution: Vec<f64>,
    },
}

/// Extra gradient terms: `lambda (w - anchor)` and `sign * linear`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Regularizer<'a> {
    pub lambda: f64,
    pub anchor: Option<&'a Model>,
    pub linear: Option<&'a Model>,
    pub sign: f64,
}

impl Regularizer<'_> {
    pub fn proximal(lambda: f64, anchor: &Model) -> Regularizer<'_> {
        Regularizer {
            lambda,
            anchor: Some(anchor),
            linear: None,
            sign: 0.0,
        }
    }

    fn apply(&self, model: &Model, gt: &mut ParamVector, gp: &mut ParamVector) {
        if self.lambda != 0.0 {
            if let Some(a) = self.anchor {
                add_scaled_diff(gt, self.lambda, &model.theta, &a.theta);
                add_scaled_diff(gp, self.lambda, &model.psi, &a.psi);
            }
        }
        if let Some(h) = self.linear {
            gt.axpy(self.sign, &h.theta);
            gp.axpy(self.sign, &h.psi);
        }
    }
}

fn add_scaled_diff(g: &mut ParamVector, lambda: f64, w: &ParamVector, anchor: &ParamVector) {
    for ((g, &w), &a) in g.values_mut().iter_mut().zip(w.values()).zip(anchor.values()) {
        *g += lambda * (w - a);
    }
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    /// Extractor and generic head after training.
    pub model: Model,
    pub phi: Option<ParamVector>,
    pub nu: Option<ParamVector>,
    /// Mean generic-branch risk over all minibatches; `None` without any step.
    pub mean_risk: Option<f64>,
    /// BSM exponent after meta-tuning (unchanged without it).
    pub gamma: f64,
    pub steps: usize,
}

/// E epochs of minibatch SGD on the generic loss, starting from `init`.
pub fn local_train(
    setup: &LocalSetup<'_>,
    init: Model,
    loss: LossSpec,
    reg: &Regularizer<'_>,
) -> Result<LocalOutcome> {
    train_loop(setup, init, loss, reg, PersonalHead::None, Stream::LocalShuffle)
}

/// Fed-RoD local step: one forward per sample feeds the balanced loss into the
/// extractor and generic head, and plain cross entropy on the personalized
/// logits into the personalized head (or hypernetwork) only.
pub fn local_train_fedrod(
    setup: &LocalSetup<'_>,
    init: Model,
    loss: LossSpec,
    head: PersonalHead<'_>,
) -> Result<LocalOutcome> {
    train_loop(setup, init, loss, &Regularizer::default(), head, Stream::LocalShuffle)
}

/// Ditto's personalized model: cross entropy plus `lambda (w - global)`,
/// continued from the client's previous personalized model on its own stream.
pub fn train_personal_model(
    setup: &LocalSetup<'_>,
    init: Model,
    lambda: f64,
    global: &Model,
) -> Result<LocalOutcome> {
    let setup = LocalSetup { meta: None, ..*setup };
    train_loop(
        &setup,
        init,
        LossSpec::ce(),
        &Regularizer::proximal(lambda, global),
        PersonalHead::None,
        Stream::PersonalShuffle,
    )
}

fn train_loop(
    s: &LocalSetup<'_>,
    mut model: Model,
    mut loss: LossSpec,
    reg: &Regularizer<'_>,
    mut head: PersonalHead<'_>,
    stream: Stream,
) -> Result<LocalOutcome> {
    model.phi = None;
    let samples = s.data.samples(s.dataset);
    let counts = s.data.class_counts()?;
    let lr = s.sgd.lr(s.round);
    let (mom, wd) = (s.sgd.momentum, s.sgd.weight_decay);
    let mut v_theta = ParamVector::zeros(Arc::clone(model.theta.layout()));
    let mut v_psi = ParamVector::zeros(Arc::clone(model.psi.layout()));
    let mut v_head = match &head {
        PersonalHead::None => None,
        PersonalHead::Linear(p) => Some(ParamVector::zeros(Arc::clone(p.layout()))),
        PersonalHead::Hyper { nu, .. } => Some(ParamVector::zeros(Arc::clone(nu.layout()))),
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = stream_rng(s.seed, stream, &[s.round as u64, s.client as u64]);
    let mut risk_sum = 0.0;
    let mut steps = 0;

    for _ in 0..s.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(s.sgd.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| samples[i]).collect();
            if let Some(meta) = &s.meta {
                let problem = MetaProblem {
                    net: s.net,
                    model: &model,
                    client_batch: &batch,
                    counts: &counts,
                    meta_set: meta.meta_set,
                    inner_lr: meta.inner_lr,
                };
                loss.gamma = meta_tune_gamma(&problem, loss.gamma, meta.meta_lr, meta.eps)?;
            }
            let weights = class_weights(&loss, &counts);
            let cache = match &head {
                PersonalHead::Hyper {
                    hyper,
                    nu,
                    distribution,
                } => Some(hyper.forward(nu, distribution)?),
                _ => None,
            };
            let phi = match &head {
                PersonalHead::None => None,
                PersonalHead::Linear(p) => Some(p),
                PersonalHead::Hyper { .. } => cache.as_ref().map(|c| &c.phi),
            };

            let mut grads = Gradients::zeros(Groups::GENERIC, &model.theta, &model.psi, None)?;
            let mut pgrads = match phi {
                Some(p) => Some(Gradients::zeros(Groups::PHI, &model.theta, &model.psi, Some(p))?),
                None => None,
            };
            let bl = batch.len();
            let mut risk = 0.0;
            for &(x, y) in &batch {
                let fwd = s.net.forward(&model.theta, &model.psi, phi, x)?;
                risk += accumulate_balanced(
                    s.net, &model, x, y, &fwd, &loss, &counts, &weights, bl, &mut grads,
                )?;
                if let (Some(pg), Some(personal)) = (pgrads.as_mut(), fwd.personal.as_ref()) {
                    let (_, d) = softmax_cross_entropy(personal, y);
                    s.net.backward_accumulate(
                        &model.theta,
                        &model.psi,
                        phi,
                        x,
                        &fwd,
                        &d,
                        Branch::Personalized,
                        1.0 / bl as f64,
                        pg,
                    )?;
                }
            }
            let dphi = pgrads.and_then(|g| g.phi);

            let mut gt = grads.theta.take().expect("extractor gradient");
            let mut gp = grads.psi.take().expect("generic head gradient");
            reg.apply(&model, &mut gt, &mut gp);
            sgd_step_with_lr(&mut model.theta, &gt, &mut v_theta, mom, wd, lr)?;
            sgd_step_with_lr(&mut model.psi, &gp, &mut v_psi, mom, wd, lr)?;
            if let (Some(dphi), Some(vh)) = (dphi, v_head.as_mut()) {
                match &mut head {
                    PersonalHead::Linear(p) => sgd_step_with_lr(p, &dphi, vh, mom, wd, lr)?,
                    PersonalHead::Hyper {
                        hyper,
                        nu,
                        distribution,
                    } => {
                        let cache = cache.as_ref().expect("hypernetwork activations");
                        let dnu = hyper.backward(&dphi, distribution, nu, cache)?;
                        sgd_step_with_lr(nu, &dnu, vh, mom, wd, lr)?;
                    }
                    PersonalHead::None => {}
                }
            }
            risk_sum += risk;
            steps += 1;
        }
    }

    let (phi, nu) = match head {
        PersonalHead::None => (None, None),
        PersonalHead::Linear(p) => (Some(p), None),
        PersonalHead::Hyper { nu, .. } => (None, Some(nu)),
    };
    Ok(LocalOutcome {
        model,
        phi,
        nu,
        mean_risk: (steps > 0).then(|| risk_sum / steps as f64),
        gamma: loss.gamma,
        steps,
    })
}

/// Plain SGD on cross entropy of the personalized logits over `data`.
/// Only the personalized head moves unless `full` is set. A model without a
/// personalized head starts from a zero head.
#[allow(clippy::too_many_arguments)]
pub fn finetune_personal(
    net: &NetworkSpec,
    model: &Model,
    data: &[(&[f64], usize)],
    steps: usize,
    lr: f64,
    batch_size: usize,
    full: bool,
    seed: u64,
) -> Result<Model> {
    if steps == 0 || lr == 0.0 || data.is_empty() {
        return Ok(model.clone());
    }
    let mut m = model.clone();
    if m.phi.is_none() {
        m.phi = Some(ParamVector::zeros(Layouts::new(net).phi));
    }
    let groups = if full { Groups::ALL } else { Groups::PHI };
    let bs = batch_size.max(1);
    let mut rng = stream_rng(seed, Stream::Finetune, &[]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    for _ in 0..steps {
        if cursor >= data.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + bs).min(data.len());
        let batch = &order[cursor..end];
        cursor = end;
        let mut grads = Gradients::zeros(groups, &m.theta, &m.psi, m.phi.as_ref())?;
        for &i in batch {
            let (x, y) = data[i];
            let fwd = net.forward(&m.theta, &m.psi, m.phi.as_ref(), x)?;
            let personal = fwd.personal.as_ref().expect("personalized logits");
            let (_, d) = softmax_cross_entropy(personal, y);
            net.backward_accumulate(
                &m.theta,
                &m.psi,
                m.phi.as_ref(),
                x,
                &fwd,
                &d,
                Branch::Personalized,
                1.0 / batch.len() as f64,
                &mut grads,
            )?;
        }
        for (p, g) in [
            (Some(&mut m.theta), grads.theta.as_ref()),
            (Some(&mut m.psi), grads.psi.as_ref()),
            (m.phi.as_mut(), grads.phi.as_ref()),
        ] {
            if let (Some(p), Some(g)) = (p, g) {
                g.check_finite()?;
                p.axpy(-lr, g);
            }
        }
    }
    Ok(m)
}
