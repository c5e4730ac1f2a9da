//! Class-balanced losses expressed as per-class logit adjustments.
//!
//! Every loss in the zoo is cross entropy over adjusted logits
//! `a_c = s_c * g_c + b_c` (minus a margin on the true class for LDAM):
//!
//! | kind | scale `s_c`            | bias `b_c`    | margin on `y`      |
//! |------|------------------------|---------------|--------------------|
//! | CE   | 1                      | 0             | 0                  |
//! | IR   | 1 (weight `q_y` on the instance loss) | 0 | 0            |
//! | BSM  | 1                      | `γ ln N_c`    | 0                  |
//! | CDT  | `(N_c / N_max)^γ`      | 0             | 0                  |
//! | LDAM | 1                      | 0             | `γ N_y^(-1/4)`     |
//!
//! Adjustments shape the training loss only; predictions always use raw logits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{Branch, Forward, Gradients, Groups, Model, NetworkSpec, ParamVector};

/// Upper clamp for meta-learned BSM exponents.
pub const GAMMA_MAX: f64 = 4.0;

/// Per-class training counts of one client. Stored as reals so fractional
/// counts can be used in analytic tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts(Vec<f64>);

impl ClassCounts {
    pub fn new(counts: &[usize]) -> Result<Self> {
        Self::from_reals(counts.iter().map(|&c| c as f64).collect())
    }

    pub fn from_reals(counts: Vec<f64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::domain("class counts must be nonempty"));
        }
        if counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::domain("class counts must be finite and nonnegative"));
        }
        if !counts.iter().any(|&c| c > 0.0) {
            return Err(Error::domain("class counts must have a positive entry"));
        }
        Ok(ClassCounts(counts))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn get(&self, c: usize) -> f64 {
        self.0[c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Ir,
    Ldam,
    Cdt,
    Bsm,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Ce,
        LossKind::Ir,
        LossKind::Ldam,
        LossKind::Cdt,
        LossKind::Bsm,
    ];

    pub fn default_gamma(self) -> f64 {
        match self {
            LossKind::Bsm | LossKind::Ldam => 1.0,
            LossKind::Cdt => 0.2,
            LossKind::Ce | LossKind::Ir => 0.0,
        }
    }

    fn uses_counts(self) -> bool {
        self != LossKind::Ce
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LossKind::Ce => "ce",
            LossKind::Ir => "ir",
            LossKind::Ldam => "ldam",
            LossKind::Cdt => "cdt",
            LossKind::Bsm => "bsm",
        };
        f.write_str(s)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::Ce),
            "ir" => Ok(LossKind::Ir),
            "ldam" => Ok(LossKind::Ldam),
            "cdt" => Ok(LossKind::Cdt),
            "bsm" => Ok(LossKind::Bsm),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub gamma: f64,
    /// Exponent of the inverse-frequency weights `q_c ∝ N_c^(-ir_power)`; 1 or 0.5.
    pub ir_power: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            gamma: kind.default_gamma(),
            ir_power: 1.0,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn ce() -> Self {
        Self::new(LossKind::Ce)
    }

    pub fn bsm() -> Self {
        Self::new(LossKind::Bsm)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() {
            return Err(Error::config("loss.gamma must be finite"));
        }
        if matches!(self.kind, LossKind::Cdt | LossKind::Bsm) && self.gamma < 0.0 {
            return Err(Error::config("loss.gamma must be nonnegative for cdt/bsm"));
        }
        if self.ir_power != 1.0 && self.ir_power != 0.5 {
            return Err(Error::config("loss.ir_power must be 1 or 0.5"));
        }
        Ok(())
    }
}

fn check_shapes(g: &[f64], counts: &ClassCounts) -> Result<()> {
    if g.len() != counts.num_classes() {
        return Err(Error::dim("logits vs class counts", counts.num_classes(), g.len()));
    }
    Ok(())
}

/// Per-class multiplicative factor applied to raw logits (CDT only).
fn logit_scales(spec: &LossSpec, counts: &ClassCounts) -> Option<Vec<f64>> {
    (spec.kind == LossKind::Cdt).then(|| {
        let max = counts.max();
        counts
            .as_slice()
            .iter()
            .map(|&n| (n / max).powf(spec.gamma))
            .collect()
    })
}

pub fn adjusted_logits(
    g: &[f64],
    y: Option<usize>,
    spec: &LossSpec,
    counts: &ClassCounts,
) -> Result<Vec<f64>> {
    check_shapes(g, counts)?;
    let mut a = g.to_vec();
    match spec.kind {
        LossKind::Ce | LossKind::Ir => {}
        LossKind::Bsm => {
            if spec.gamma != 0.0 {
                for (v, &n) in a.iter_mut().zip(counts.as_slice()) {
                    *v = if n > 0.0 {
                        *v + spec.gamma * n.ln()
                    } else {
                        f64::NEG_INFINITY
                    };
                }
            }
        }
        LossKind::Cdt => {
            let scales = logit_scales(spec, counts).expect("cdt");
            a.iter_mut().zip(&scales).for_each(|(v, s)| *v *= s);
        }
        LossKind::Ldam => {
            let y = y.ok_or_else(|| Error::domain("LDAM needs the true label"))?;
            let n = *counts
                .as_slice()
                .get(y)
                .ok_or_else(|| Error::domain(format!("label {y} out of range")))?;
            if n <= 0.0 {
                return Err(Error::domain(format!("LDAM margin undefined: class {y} has no samples")));
            }
            a[y] -= spec.gamma * n.powf(-0.25);
        }
    }
    Ok(a)
}

/// `-log softmax(a)_y` and `softmax(a) - onehot(y)`; `-inf` entries take no mass.
pub fn softmax_cross_entropy(a: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (a[y] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[y] -= 1.0;
    (loss, grad)
}

/// Instance loss and its gradient with respect to the raw logits `g`.
pub fn instance_loss_and_grad(
    g: &[f64],
    y: usize,
    spec: &LossSpec,
    counts: &ClassCounts,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(g, counts)?;
    if y >= g.len() {
        return Err(Error::domain(format!("label {y} out of range for {} classes", g.len())));
    }
    if spec.kind.uses_counts() && counts.get(y) <= 0.0 {
        return Err(Error::domain(format!("class {y} has no training samples")));
    }
    let a = adjusted_logits(g, Some(y), spec, counts)?;
    let (loss, mut grad) = softmax_cross_entropy(&a, y);
    if let Some(scales) = logit_scales(spec, counts) {
        grad.iter_mut().zip(&scales).for_each(|(d, s)| *d *= s);
    }
    Ok((loss, grad))
}

/// Inverse-frequency class weights normalized so that `Σ N_c q_c = Σ N_c`.
pub fn ir_weights(counts: &ClassCounts, power: f64) -> Vec<f64> {
    let raw: Vec<f64> = counts
        .as_slice()
        .iter()
        .map(|&n| if n > 0.0 { n.powf(-power) } else { 0.0 })
        .collect();
    let weighted: f64 = raw.iter().zip(counts.as_slice()).map(|(q, n)| q * n).sum();
    let k = counts.total() / weighted;
    raw.into_iter().map(|q| q * k).collect()
}

/// Per-class instance weights: IR weights for IR, ones otherwise.
pub fn class_weights(spec: &LossSpec, counts: &ClassCounts) -> Vec<f64> {
    match spec.kind {
        LossKind::Ir => ir_weights(counts, spec.ir_power),
        _ => vec![1.0; counts.num_classes()],
    }
}

/// One sample's contribution to the mean balanced risk of a batch of size
/// `batch_len`: accumulates `q_y / batch_len * ∂ℓ` into `grads` through the
/// generic logits and returns `q_y * ℓ / batch_len`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_balanced(
    net: &NetworkSpec,
    model: &Model,
    x: &[f64],
    y: usize,
    fwd: &Forward,
    spec: &LossSpec,
    counts: &ClassCounts,
    weights: &[f64],
    batch_len: usize,
    grads: &mut Gradients,
) -> Result<f64> {
    let (loss, dg) = instance_loss_and_grad(&fwd.generic, y, spec, counts)?;
    let w = weights[y] / batch_len as f64;
    net.backward_accumulate(
        &model.theta,
        &model.psi,
        model.phi.as_ref(),
        x,
        fwd,
        &dg,
        Branch::Generic,
        w,
        grads,
    )?;
    Ok(w * loss)
}

/// Mean over the batch of `q_{y_i} ℓ(x_i, y_i)` and its gradient w.r.t. the
/// generic parameters (extractor and generic head).
pub fn balanced_risk(
    net: &NetworkSpec,
    model: &Model,
    batch: &[(&[f64], usize)],
    spec: &LossSpec,
    counts: &ClassCounts,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let weights = class_weights(spec, counts);
    let mut grads = Gradients::zeros(Groups::GENERIC, &model.theta, &model.psi, None)?;
    let mut risk = 0.0;
    for &(x, y) in batch {
        let fwd = net.forward(&model.theta, &model.psi, None, x)?;
        risk += accumulate_balanced(
            net, model, x, y, &fwd, spec, counts, &weights, batch.len(), &mut grads,
        )?;
    }
    Ok((risk, grads))
}

/// Mean plain cross entropy of the generic predictor over `data`.
pub fn mean_cross_entropy(net: &NetworkSpec, model: &Model, data: &[(&[f64], usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("empty meta set"));
    }
    let mut total = 0.0;
    for &(x, y) in data {
        let f = net.forward(&model.theta, &model.psi, None, x)?;
        total += softmax_cross_entropy(&f.generic, y).0;
    }
    Ok(total / data.len() as f64)
}

/// Inputs for one meta-gradient step on the BSM exponent.
pub struct MetaProblem<'a> {
    pub net: &'a NetworkSpec,
    pub model: &'a Model,
    pub client_batch: &'a [(&'a [f64], usize)],
    pub counts: &'a ClassCounts,
    pub meta_set: &'a [(&'a [f64], usize)],
    pub inner_lr: f64,
}

impl MetaProblem<'_> {
    /// Meta-set cross entropy after one SGD step on the BSM(γ) client risk.
    pub fn objective(&self, gamma: f64) -> Result<f64> {
        let spec = LossSpec::bsm().with_gamma(gamma);
        let (_, grads) = balanced_risk(self.net, self.model, self.client_batch, &spec, self.counts)?;
        let step = |p: &ParamVector, g: &Option<ParamVector>| {
            let mut p = p.clone();
            p.axpy(-self.inner_lr, g.as_ref().expect("generic grads"));
            p
        };
        let stepped = Model {
            theta: step(&self.model.theta, &grads.theta),
            psi: step(&self.model.psi, &grads.psi),
            phi: None,
        };
        mean_cross_entropy(self.net, &stepped, self.meta_set)
    }

    /// Central-difference derivative of [`Self::objective`].
    pub fn gamma_gradient(&self, gamma: f64, eps: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::domain("finite-difference step must be positive"));
        }
        Ok((self.objective(gamma + eps)? - self.objective(gamma - eps)?) / (2.0 * eps))
    }
}

/// `γ' = clamp(γ - η_meta * dD/dγ, 0, GAMMA_MAX)`.
pub fn meta_tune_gamma(problem: &MetaProblem<'_>, gamma: f64, meta_lr: f64, eps: f64) -> Result<f64> {
    if meta_lr == 0.0 {
        return Ok(gamma);
    }
    let d = problem.gamma_gradient(gamma, eps)?;
    Ok((gamma - meta_lr * d).clamp(0.0, GAMMA_MAX))
}
