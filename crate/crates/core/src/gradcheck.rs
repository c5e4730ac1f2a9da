//! Central finite-difference checks of every analytic gradient path.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::hyperhead::HyperNet;
use crate::losses::{balanced_risk, softmax_cross_entropy, ClassCounts, LossKind, LossSpec};
use crate::nnet::{Branch, Groups, Layouts, Model, NetworkSpec, ParamVector};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// `|analytic - numeric| / max(1, |analytic|)`, maximized over entries.
fn compare(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn central_diff(p: &ParamVector, eps: f64, mut f: impl FnMut(&ParamVector) -> Result<f64>) -> Result<Vec<f64>> {
    let mut work = p.clone();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = work.values()[i];
        work.values_mut()[i] = orig + eps;
        let up = f(&work)?;
        work.values_mut()[i] = orig - eps;
        let down = f(&work)?;
        work.values_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Balanced risk of the generic branch w.r.t. extractor and generic head.
pub fn check_generic(
    net: &NetworkSpec,
    model: &Model,
    batch: &[(&[f64], usize)],
    loss: &LossSpec,
    counts: &ClassCounts,
    eps: f64,
) -> Result<f64> {
    let (_, grads) = balanced_risk(net, model, batch, loss, counts)?;
    let num_theta = central_diff(&model.theta, eps, |t| {
        let m = Model { theta: t.clone(), ..model.clone() };
        Ok(balanced_risk(net, &m, batch, loss, counts)?.0)
    })?;
    let num_psi = central_diff(&model.psi, eps, |p| {
        let m = Model { psi: p.clone(), ..model.clone() };
        Ok(balanced_risk(net, &m, batch, loss, counts)?.0)
    })?;
    Ok(compare(grads.theta.as_ref().expect("theta").values(), &num_theta)
        .max(compare(grads.psi.as_ref().expect("psi").values(), &num_psi)))
}

fn personal_ce(net: &NetworkSpec, model: &Model, batch: &[(&[f64], usize)]) -> Result<f64> {
    let mut total = 0.0;
    for &(x, y) in batch {
        let f = net.forward(&model.theta, &model.psi, model.phi.as_ref(), x)?;
        total += softmax_cross_entropy(f.personal.as_ref().expect("personal"), y).0;
    }
    Ok(total / batch.len() as f64)
}

fn personal_grads(
    net: &NetworkSpec,
    model: &Model,
    batch: &[(&[f64], usize)],
    groups: Groups,
) -> Result<crate::nnet::Gradients> {
    let mut grads = crate::nnet::Gradients::zeros(groups, &model.theta, &model.psi, model.phi.as_ref())?;
    for &(x, y) in batch {
        let f = net.forward(&model.theta, &model.psi, model.phi.as_ref(), x)?;
        let (_, d) = softmax_cross_entropy(f.personal.as_ref().expect("personal"), y);
        net.backward_accumulate(
            &model.theta,
            &model.psi,
            model.phi.as_ref(),
            x,
            &f,
            &d,
            Branch::Personalized,
            1.0 / batch.len() as f64,
            &mut grads,
        )?;
    }
    Ok(grads)
}

/// Cross entropy of the personalized logits w.r.t. all three groups.
pub fn check_personal(net: &NetworkSpec, model: &Model, batch: &[(&[f64], usize)], eps: f64) -> Result<f64> {
    let g = personal_grads(net, model, batch, Groups::ALL)?;
    let mut worst = 0.0f64;
    let num = central_diff(&model.theta, eps, |t| personal_ce(net, &Model { theta: t.clone(), ..model.clone() }, batch))?;
    worst = worst.max(compare(g.theta.as_ref().expect("theta").values(), &num));
    let num = central_diff(&model.psi, eps, |p| personal_ce(net, &Model { psi: p.clone(), ..model.clone() }, batch))?;
    worst = worst.max(compare(g.psi.as_ref().expect("psi").values(), &num));
    let phi = model.phi.as_ref().expect("personalized head");
    let num = central_diff(phi, eps, |p| personal_ce(net, &Model { phi: Some(p.clone()), ..model.clone() }, batch))?;
    Ok(worst.max(compare(g.phi.as_ref().expect("phi").values(), &num)))
}

/// Cross entropy of the personalized logits w.r.t. the hypernetwork.
pub fn check_hyper(
    net: &NetworkSpec,
    hyper: &HyperNet,
    model: &Model,
    nu: &ParamVector,
    a: &[f64],
    batch: &[(&[f64], usize)],
    eps: f64,
) -> Result<f64> {
    let with_head = |nu: &ParamVector| -> Result<Model> {
        Ok(Model { phi: Some(hyper.generate_head(nu, a)?), ..model.clone() })
    };
    let cache = hyper.forward(nu, a)?;
    let m = with_head(nu)?;
    let g = personal_grads(net, &m, batch, Groups::PHI)?;
    let analytic = hyper.backward(g.phi.as_ref().expect("phi"), a, nu, &cache)?;
    let num = central_diff(nu, eps, |n| personal_ce(net, &with_head(n)?, batch))?;
    Ok(compare(analytic.values(), &num))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn randomize<R: Rng>(p: &mut ParamVector, std: f64, rng: &mut R) {
    let n = Normal::new(0.0, std).expect("normal");
    p.values_mut().iter_mut().for_each(|v| *v = n.sample(rng));
}

/// Runs every check at `points` seeded random points.
pub fn run_suite(points: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let net = NetworkSpec::new(5, vec![7], 4)?;
    let layouts = Layouts::new(&net);
    let hyper = HyperNet::new(&net, 6, layouts.phi.clone())?;
    let mut names: Vec<String> = LossKind::ALL.iter().map(|k| format!("loss/{k}")).collect();
    names.push("fedrod/linear-head".into());
    names.push("fedrod/hypernetwork".into());
    let mut worst = vec![0.0f64; names.len()];
    let normal = Normal::new(0.0, 1.0).expect("normal");
    for point in 0..points {
        let mut rng = stream_rng(seed, Stream::Init, &[0x6772_6164, point as u64]);
        let mut model = Model {
            theta: ParamVector::zeros(layouts.theta.clone()),
            psi: ParamVector::zeros(layouts.psi.clone()),
            phi: Some(ParamVector::zeros(layouts.phi.clone())),
        };
        randomize(&mut model.theta, 0.5, &mut rng);
        randomize(&mut model.psi, 0.5, &mut rng);
        randomize(model.phi.as_mut().expect("phi"), 0.5, &mut rng);
        let mut nu = ParamVector::zeros(hyper.layout().clone());
        randomize(&mut nu, 0.3, &mut rng);
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let batch: Vec<(&[f64], usize)> = xs
            .iter()
            .map(|x| (x.as_slice(), rng.random_range(0..4)))
            .collect();
        let counts: Vec<usize> = (0..4).map(|_| rng.random_range(1..50)).collect();
        let counts = ClassCounts::new(&counts)?;
        let a = crate::data::normalize_counts(
            &(0..4).map(|_| rng.random_range(0..20usize) + 1).collect::<Vec<_>>(),
        )?;
        for (i, kind) in LossKind::ALL.iter().enumerate() {
            let mut spec = LossSpec::new(*kind);
            if *kind == LossKind::Ir && point % 2 == 1 {
                spec.ir_power = 0.5;
            }
            let generic = Model { phi: None, ..model.clone() };
            worst[i] = worst[i].max(check_generic(&net, &generic, &batch, &spec, &counts, DEFAULT_EPS)?);
        }
        let k = LossKind::ALL.len();
        worst[k] = worst[k].max(check_personal(&net, &model, &batch, DEFAULT_EPS)?);
        worst[k + 1] = worst[k + 1].max(check_hyper(&net, &hyper, &model, &nu, &a, &batch, DEFAULT_EPS)?);
    }
    Ok(names
        .into_iter()
        .zip(worst)
        .map(|(name, e)| GradCheckReport {
            name,
            points,
            max_rel_error: e,
            passed: e < TOLERANCE,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_points() {
        for r in run_suite(3, 1).unwrap() {
            assert!(r.passed, "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        assert!(compare(&[1.0, 2.0], &[1.0, 2.5]) > TOLERANCE);
        assert_eq!(compare(&[3.0], &[3.0]), 0.0);
    }
}
