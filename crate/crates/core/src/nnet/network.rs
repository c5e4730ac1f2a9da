use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{Layout, LayoutEntry, ParamVector};
use crate::error::{Error, Result};

/// Standard deviation of the Gaussian used to initialize weight matrices.
pub const INIT_STD: f64 = 0.05;

/// Shape of the MLP: a rectifier feature extractor followed by affine heads.
///
/// Every extractor layer is affine + ReLU. The feature dimension is the width
/// of the last hidden layer, or the input width when there are none (a purely
/// linear model).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = NetworkSpec {
            input_dim,
            hidden_dims,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    /// (in, out) widths of the extractor layers.
    fn extractor_shapes(&self) -> Vec<(usize, usize)> {
        let mut prev = self.input_dim;
        self.hidden_dims
            .iter()
            .map(|&h| {
                let s = (prev, h);
                prev = h;
                s
            })
            .collect()
    }

    pub fn extractor_layout(&self) -> Layout {
        let mut entries = Vec::new();
        for (l, (i, o)) in self.extractor_shapes().into_iter().enumerate() {
            entries.push(LayoutEntry::new(format!("fc{l}.weight"), vec![o, i]));
            entries.push(LayoutEntry::new(format!("fc{l}.bias"), vec![o]));
        }
        Layout::new(entries)
    }

    fn head_layout_named(&self, prefix: &str) -> Layout {
        let d = self.feature_dim();
        let c = self.num_classes;
        Layout::new(vec![
            LayoutEntry::new(format!("{prefix}.weight"), vec![c, d]),
            LayoutEntry::new(format!("{prefix}.bias"), vec![c]),
        ])
    }

    pub fn generic_head_layout(&self) -> Layout {
        self.head_layout_named("head")
    }

    pub fn personal_head_layout(&self) -> Layout {
        self.head_layout_named("phead")
    }

    /// Number of values in one affine head: `(d + 1) * C`.
    pub fn head_len(&self) -> usize {
        (self.feature_dim() + 1) * self.num_classes
    }
}

/// Shared, reference-counted layouts for one [`NetworkSpec`].
#[derive(Debug, Clone)]
pub struct Layouts {
    pub theta: Arc<Layout>,
    pub psi: Arc<Layout>,
    pub phi: Arc<Layout>,
}

impl Layouts {
    pub fn new(spec: &NetworkSpec) -> Self {
        Layouts {
            theta: Arc::new(spec.extractor_layout()),
            psi: Arc::new(spec.generic_head_layout()),
            phi: Arc::new(spec.personal_head_layout()),
        }
    }
}

/// Gaussian weights (std [`INIT_STD`]) and zero biases.
pub fn init_params<R: Rng + ?Sized>(layout: Arc<Layout>, rng: &mut R) -> ParamVector {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut p = ParamVector::zeros(Arc::clone(&layout));
    let mut off = 0;
    for e in layout.entries() {
        let n = e.numel();
        if e.shape.len() > 1 {
            for v in &mut p.values_mut()[off..off + n] {
                *v = normal.sample(rng);
            }
        }
        off += n;
    }
    p
}

/// Generic model (extractor + generic head) and optional personalized head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub theta: ParamVector,
    pub psi: ParamVector,
    pub phi: Option<ParamVector>,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(layouts: &Layouts, rng: &mut R) -> Self {
        let theta = init_params(Arc::clone(&layouts.theta), rng);
        let psi = init_params(Arc::clone(&layouts.psi), rng);
        Model {
            theta,
            psi,
            phi: None,
        }
    }

    pub fn with_phi(mut self, phi: ParamVector) -> Self {
        self.phi = Some(phi);
        self
    }
}

/// Activations from one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Post-ReLU output of each extractor layer; the last one is `z`.
    hidden: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub generic: Vec<f64>,
    pub personal: Option<Vec<f64>>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let n_in = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(o, &bias)| {
        let row = &w[o * n_in..(o + 1) * n_in];
        bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }));
}

fn check_len(what: &str, p: &ParamVector, expected: usize) -> Result<()> {
    if p.len() != expected {
        return Err(Error::dim(what, expected, p.len()));
    }
    Ok(())
}

impl NetworkSpec {
    fn check_params(
        &self,
        theta: &ParamVector,
        psi: &ParamVector,
        phi: Option<&ParamVector>,
    ) -> Result<()> {
        check_len("extractor parameters", theta, self.extractor_layout().total_len())?;
        check_len("generic head parameters", psi, self.head_len())?;
        if let Some(phi) = phi {
            check_len("personalized head parameters", phi, self.head_len())?;
        }
        Ok(())
    }

    /// Feature extraction only.
    pub fn features(&self, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::dim("input features", self.input_dim, x.len()));
        }
        check_len("extractor parameters", theta, self.extractor_layout().total_len())?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let mut off = 0;
        for (i, o) in self.extractor_shapes() {
            let w = &theta.values()[off..off + i * o];
            let b = &theta.values()[off + i * o..off + i * o + o];
            off += i * o + o;
            affine(w, b, &cur, &mut next);
            next.iter_mut().for_each(|v| *v = v.max(0.0));
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Applies an affine head to features `z`.
    pub fn head_logits(&self, head: &ParamVector, z: &[f64]) -> Vec<f64> {
        let d = self.feature_dim();
        let c = self.num_classes;
        let mut out = Vec::with_capacity(c);
        affine(&head.values()[..c * d], &head.values()[c * d..], z, &mut out);
        out
    }

    /// Forward pass producing features, generic logits and, when `phi` is
    /// given, personalized logits `g_G + h_P(z; phi)`.
    pub fn forward(
        &self,
        theta: &ParamVector,
        psi: &ParamVector,
        phi: Option<&ParamVector>,
        x: &[f64],
    ) -> Result<Forward> {
        if x.len() != self.input_dim {
            return Err(Error::dim("input features", self.input_dim, x.len()));
        }
        self.check_params(theta, psi, phi)?;
        let mut hidden = Vec::with_capacity(self.hidden_dims.len());
        let mut off = 0;
        for (i, o) in self.extractor_shapes() {
            let w = &theta.values()[off..off + i * o];
            let b = &theta.values()[off + i * o..off + i * o + o];
            off += i * o + o;
            let input: &[f64] = hidden.last().map(Vec::as_slice).unwrap_or(x);
            let mut out = Vec::with_capacity(o);
            affine(w, b, input, &mut out);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            hidden.push(out);
        }
        let z = hidden.last().cloned().unwrap_or_else(|| x.to_vec());
        let generic = self.head_logits(psi, &z);
        let personal = phi.map(|phi| {
            let mut p = self.head_logits(phi, &z);
            p.iter_mut().zip(&generic).for_each(|(a, g)| *a += g);
            p
        });
        Ok(Forward {
            hidden,
            z,
            generic,
            personal,
        })
    }
}

/// Which logits a loss gradient refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Generic,
    Personalized,
}

/// Parameter groups a backward pass should produce gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Groups {
    pub theta: bool,
    pub psi: bool,
    pub phi: bool,
}

impl Groups {
    pub const GENERIC: Groups = Groups {
        theta: true,
        psi: true,
        phi: false,
    };
    pub const PHI: Groups = Groups {
        theta: false,
        psi: false,
        phi: true,
    };
    pub const ALL: Groups = Groups {
        theta: true,
        psi: true,
        phi: true,
    };
}

/// Gradient buffers for the requested groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub theta: Option<ParamVector>,
    pub psi: Option<ParamVector>,
    pub phi: Option<ParamVector>,
}

impl Gradients {
    pub fn zeros(
        groups: Groups,
        theta: &ParamVector,
        psi: &ParamVector,
        phi: Option<&ParamVector>,
    ) -> Result<Self> {
        let phi = if groups.phi {
            let phi = phi.ok_or_else(|| {
                Error::config("gradient requested for a personalized head the model does not have")
            })?;
            Some(ParamVector::zeros(Arc::clone(phi.layout())))
        } else {
            None
        };
        Ok(Gradients {
            theta: groups
                .theta
                .then(|| ParamVector::zeros(Arc::clone(theta.layout()))),
            psi: groups
                .psi
                .then(|| ParamVector::zeros(Arc::clone(psi.layout()))),
            phi,
        })
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in [&mut self.theta, &mut self.psi, &mut self.phi]
            .into_iter()
            .flatten()
        {
            g.scale(alpha);
        }
    }
}

impl NetworkSpec {
    /// Backpropagates `dlogits` (gradient w.r.t. the logits of `branch`),
    /// adding `weight * gradient` into `grads` for each group it holds.
    ///
    /// Generic logits do not depend on `phi`, so a generic-branch pass leaves
    /// the `phi` buffer untouched. Personalized logits reach `theta` and `psi`
    /// only if those buffers are present.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_accumulate(
        &self,
        theta: &ParamVector,
        psi: &ParamVector,
        phi: Option<&ParamVector>,
        x: &[f64],
        fwd: &Forward,
        dlogits: &[f64],
        branch: Branch,
        weight: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        let c = self.num_classes;
        let d = self.feature_dim();
        if dlogits.len() != c {
            return Err(Error::dim("logit gradient", c, dlogits.len()));
        }
        if branch == Branch::Personalized && phi.is_none() {
            return Err(Error::config(
                "personalized branch requested but the model has no personalized head",
            ));
        }
        if grads.phi.is_some() && phi.is_none() {
            return Err(Error::config(
                "gradient requested for a personalized head the model does not have",
            ));
        }
        let delta: Vec<f64> = dlogits.iter().map(|g| g * weight).collect();
        let z = &fwd.z;

        let head_grad = |g: &mut ParamVector| {
            let v = g.values_mut();
            for (o, &dl) in delta.iter().enumerate() {
                if dl != 0.0 {
                    let row = &mut v[o * d..(o + 1) * d];
                    row.iter_mut().zip(z).for_each(|(r, zz)| *r += dl * zz);
                }
                v[c * d + o] += dl;
            }
        };

        if let Some(g) = grads.psi.as_mut() {
            head_grad(g);
        }
        if branch == Branch::Personalized {
            if let Some(g) = grads.phi.as_mut() {
                head_grad(g);
            }
        }

        let Some(gtheta) = grads.theta.as_mut() else {
            return Ok(());
        };
        if self.hidden_dims.is_empty() {
            return Ok(());
        }

        // dL/dz through the head(s) feeding the requested branch.
        let mut dz = vec![0.0; d];
        let mut add_head_transpose = |head: &ParamVector| {
            let w = &head.values()[..c * d];
            for (o, &dl) in delta.iter().enumerate() {
                if dl != 0.0 {
                    let row = &w[o * d..(o + 1) * d];
                    dz.iter_mut().zip(row).for_each(|(a, r)| *a += dl * r);
                }
            }
        };
        add_head_transpose(psi);
        if branch == Branch::Personalized {
            add_head_transpose(phi.expect("checked above"));
        }

        let shapes = self.extractor_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(i, o) in &shapes {
            offsets.push(off);
            off += i * o + o;
        }
        let gv = gtheta.values_mut();
        let mut upstream = dz;
        for l in (0..shapes.len()).rev() {
            let (n_in, n_out) = shapes[l];
            let out = &fwd.hidden[l];
            let input: &[f64] = if l == 0 { x } else { &fwd.hidden[l - 1] };
            let pre: Vec<f64> = upstream
                .iter()
                .zip(out)
                .map(|(u, a)| if *a > 0.0 { *u } else { 0.0 })
                .collect();
            let w_off = offsets[l];
            let b_off = w_off + n_in * n_out;
            for (o, &p) in pre.iter().enumerate() {
                if p != 0.0 {
                    let row = &mut gv[w_off + o * n_in..w_off + (o + 1) * n_in];
                    row.iter_mut().zip(input).for_each(|(r, a)| *r += p * a);
                }
                gv[b_off + o] += p;
            }
            if l > 0 {
                let w = &theta.values()[w_off..b_off];
                let mut next = vec![0.0; n_in];
                for (o, &p) in pre.iter().enumerate() {
                    if p != 0.0 {
                        let row = &w[o * n_in..(o + 1) * n_in];
                        next.iter_mut().zip(row).for_each(|(a, r)| *a += p * r);
                    }
                }
                upstream = next;
            }
        }
        Ok(())
    }

    /// Single-sample backward pass returning fresh gradients for `groups`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        theta: &ParamVector,
        psi: &ParamVector,
        phi: Option<&ParamVector>,
        x: &[f64],
        fwd: &Forward,
        dlogits: &[f64],
        branch: Branch,
        groups: Groups,
    ) -> Result<Gradients> {
        let mut grads = Gradients::zeros(groups, theta, psi, phi)?;
        self.backward_accumulate(theta, psi, phi, x, fwd, dlogits, branch, 1.0, &mut grads)?;
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_setup(
        seed: u64,
        hidden: Vec<usize>,
    ) -> (NetworkSpec, Layouts, Model, ParamVector, Vec<f64>) {
        let spec = NetworkSpec::new(5, hidden, 4).unwrap();
        let layouts = Layouts::new(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.7).unwrap();
        let mut model = Model::init(&layouts, &mut rng);
        model.theta.values_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        model.psi.values_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        let mut phi = ParamVector::zeros(layouts.phi.clone());
        phi.values_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        let x: Vec<f64> = (0..5).map(|_| normal.sample(&mut rng)).collect();
        (spec, layouts, model, phi, x)
    }

    /// Straight-line re-implementation with explicit index loops.
    fn oracle_forward(spec: &NetworkSpec, theta: &[f64], psi: &[f64], phi: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut a = x.to_vec();
        let mut off = 0;
        let mut n_in = spec.input_dim;
        for &n_out in &spec.hidden_dims {
            let mut next = vec![0.0; n_out];
            for o in 0..n_out {
                let mut s = theta[off + n_out * n_in + o];
                for i in 0..n_in {
                    s += theta[off + o * n_in + i] * a[i];
                }
                next[o] = if s > 0.0 { s } else { 0.0 };
            }
            off += n_out * n_in + n_out;
            n_in = n_out;
            a = next;
        }
        let c = spec.num_classes;
        let d = n_in;
        let mut g = vec![0.0; c];
        let mut p = vec![0.0; c];
        for k in 0..c {
            let mut s = psi[c * d + k];
            let mut t = phi[c * d + k];
            for j in 0..d {
                s += psi[k * d + j] * a[j];
                t += phi[k * d + j] * a[j];
            }
            g[k] = s;
            p[k] = s + t;
        }
        (g, p)
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        for seed in 0..20 {
            let (spec, _, model, phi, x) = random_setup(seed, vec![7, 6]);
            let f = spec.forward(&model.theta, &model.psi, Some(&phi), &x).unwrap();
            let (g, p) = oracle_forward(&spec, model.theta.values(), model.psi.values(), phi.values(), &x);
            for k in 0..4 {
                assert!((f.generic[k] - g[k]).abs() < 1e-12);
                assert!((f.personal.as_ref().unwrap()[k] - p[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_personal_head_reproduces_generic_logits() {
        let (spec, layouts, model, _, x) = random_setup(3, vec![6]);
        let phi = ParamVector::zeros(layouts.phi);
        let f = spec.forward(&model.theta, &model.psi, Some(&phi), &x).unwrap();
        assert_eq!(f.personal.unwrap(), f.generic);
    }

    #[test]
    fn zero_weights_give_zero_features_and_logits() {
        let spec = NetworkSpec::new(3, vec![4], 2).unwrap();
        let layouts = Layouts::new(&spec);
        let theta = ParamVector::zeros(layouts.theta);
        let psi = ParamVector::zeros(layouts.psi);
        let f = spec.forward(&theta, &psi, None, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(f.z, vec![0.0; 4]);
        assert_eq!(f.generic, vec![0.0; 2]);
        assert!(f.personal.is_none());
    }

    #[test]
    fn forward_is_deterministic() {
        let (spec, _, model, phi, x) = random_setup(11, vec![5, 5]);
        let a = spec.forward(&model.theta, &model.psi, Some(&phi), &x).unwrap();
        let b = spec.forward(&model.theta, &model.psi, Some(&phi), &x).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.generic), bits(&b.generic));
        assert_eq!(bits(a.personal.as_ref().unwrap()), bits(b.personal.as_ref().unwrap()));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (spec, _, model, _, _) = random_setup(0, vec![3]);
        assert!(matches!(
            spec.forward(&model.theta, &model.psi, None, &[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            spec.forward(&model.psi, &model.psi, None, &[0.0; 5]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let (spec, _, model, phi, x) = random_setup(5, vec![6]);
        let f = spec.forward(&model.theta, &model.psi, Some(&phi), &x).unwrap();
        let g = spec
            .backward(&model.theta, &model.psi, Some(&phi), &x, &f, &[0.0; 4], Branch::Personalized, Groups::ALL)
            .unwrap();
        assert!(g.theta.unwrap().is_zero());
        assert!(g.psi.unwrap().is_zero());
        assert!(g.phi.unwrap().is_zero());
    }

    #[test]
    fn requesting_phi_without_head_is_a_config_error() {
        let (spec, _, model, _, x) = random_setup(5, vec![6]);
        let f = spec.forward(&model.theta, &model.psi, None, &x).unwrap();
        let err = spec
            .backward(&model.theta, &model.psi, None, &x, &f, &[1.0; 4], Branch::Generic, Groups::ALL)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn personalized_phi_only_backward_leaves_other_groups_unrequested() {
        let (spec, _, model, phi, x) = random_setup(9, vec![6]);
        let f = spec.forward(&model.theta, &model.psi, Some(&phi), &x).unwrap();
        let g = spec
            .backward(&model.theta, &model.psi, Some(&phi), &x, &f, &[0.1, -0.2, 0.3, -0.2], Branch::Personalized, Groups::PHI)
            .unwrap();
        assert!(g.theta.is_none() && g.psi.is_none());
        assert!(!g.phi.unwrap().is_zero());
    }

    #[test]
    fn init_has_zero_biases() {
        let spec = NetworkSpec::new(4, vec![8], 3).unwrap();
        let layouts = Layouts::new(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(&layouts, &mut rng);
        assert!(m.theta.entry("fc0.bias").unwrap().iter().all(|&b| b == 0.0));
        assert!(m.psi.entry("head.bias").unwrap().iter().all(|&b| b == 0.0));
        assert!(m.theta.entry("fc0.weight").unwrap().iter().any(|&w| w != 0.0));
    }
}
