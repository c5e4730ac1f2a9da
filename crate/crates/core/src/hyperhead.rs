//! Hypernetwork that maps a client's class distribution to the parameters of
//! its personalized head: `a -> ReLU(W0 a + b0) -> W1 h + b1 = phi`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nnet::{Layout, LayoutEntry, Model, NetworkSpec, ParamVector};

/// Std of the first-layer weights. The input is a probability vector, so its
/// entries are small; unit-scale weights keep hidden activations O(1).
pub const HYPER_INPUT_STD: f64 = 1.0;

/// Default hidden width: 16 for small heads, 32 otherwise.
pub fn default_hidden_dim(num_classes: usize, feature_dim: usize) -> usize {
    if num_classes * feature_dim <= 1000 {
        16
    } else {
        32
    }
}

#[derive(Debug, Clone)]
pub struct HyperNet {
    classes: usize,
    hidden: usize,
    out_len: usize,
    layout: Arc<Layout>,
    phi_layout: Arc<Layout>,
}

/// Hidden activations of one generation pass.
#[derive(Debug, Clone)]
pub struct HyperForward {
    hidden: Vec<f64>,
    pub phi: ParamVector,
}

impl HyperNet {
    pub fn new(net: &NetworkSpec, hidden: usize, phi_layout: Arc<Layout>) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("hypernetwork hidden width must be positive"));
        }
        let classes = net.num_classes;
        let out_len = net.head_len();
        if phi_layout.total_len() != out_len {
            return Err(Error::dim("personalized head layout", out_len, phi_layout.total_len()));
        }
        let layout = Arc::new(Layout::new(vec![
            LayoutEntry::new("hyper.fc0.weight", vec![hidden, classes]),
            LayoutEntry::new("hyper.fc0.bias", vec![hidden]),
            LayoutEntry::new("hyper.fc1.weight", vec![out_len, hidden]),
            LayoutEntry::new("hyper.fc1.bias", vec![out_len]),
        ]));
        Ok(HyperNet {
            classes,
            hidden,
            out_len,
            layout,
            phi_layout,
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn output_len(&self) -> usize {
        self.out_len
    }

    /// Random first layer, zero output layer: the initial head is all zeros.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let normal = Normal::new(0.0, HYPER_INPUT_STD).expect("valid std");
        let mut nu = ParamVector::zeros(Arc::clone(&self.layout));
        let n = self.hidden * self.classes;
        nu.values_mut()[..n]
            .iter_mut()
            .for_each(|v| *v = normal.sample(rng));
        nu
    }

    fn spans(&self) -> (usize, usize, usize) {
        let w0 = self.hidden * self.classes;
        let b0 = w0 + self.hidden;
        let w1 = b0 + self.out_len * self.hidden;
        (w0, b0, w1)
    }

    fn check_distribution(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.classes {
            return Err(Error::dim("class distribution", self.classes, a.len()));
        }
        if a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::domain("class distribution entries must be finite and nonnegative"));
        }
        let s: f64 = a.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("class distribution sums to {s}, not 1")));
        }
        Ok(())
    }

    pub fn forward(&self, nu: &ParamVector, a: &[f64]) -> Result<HyperForward> {
        self.check_distribution(a)?;
        if nu.len() != self.layout.total_len() {
            return Err(Error::dim("hypernetwork parameters", self.layout.total_len(), nu.len()));
        }
        let v = nu.values();
        let (w0_end, b0_end, w1_end) = self.spans();
        let (w0, b0) = (&v[..w0_end], &v[w0_end..b0_end]);
        let (w1, b1) = (&v[b0_end..w1_end], &v[w1_end..]);
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &w0[h * self.classes..(h + 1) * self.classes];
                (b0[h] + row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>()).max(0.0)
            })
            .collect();
        let out: Vec<f64> = (0..self.out_len)
            .map(|o| {
                let row = &w1[o * self.hidden..(o + 1) * self.hidden];
                b1[o] + row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        Ok(HyperForward {
            hidden,
            phi: ParamVector::from_values(Arc::clone(&self.phi_layout), out)?,
        })
    }

    /// Personalized head parameters for class distribution `a`.
    pub fn generate_head(&self, nu: &ParamVector, a: &[f64]) -> Result<ParamVector> {
        Ok(self.forward(nu, a)?.phi)
    }

    /// Chain rule from `dL/dphi` to `dL/dnu`.
    pub fn backward(
        &self,
        dphi: &ParamVector,
        a: &[f64],
        nu: &ParamVector,
        cache: &HyperForward,
    ) -> Result<ParamVector> {
        if dphi.len() != self.out_len {
            return Err(Error::dim("head gradient", self.out_len, dphi.len()));
        }
        let v = nu.values();
        let (w0_end, b0_end, w1_end) = self.spans();
        let w1 = &v[b0_end..w1_end];
        let mut grad = ParamVector::zeros(Arc::clone(&self.layout));
        let g = grad.values_mut();
        let mut dh = vec![0.0; self.hidden];
        for (o, &d) in dphi.values().iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let grow = &mut g[b0_end + o * self.hidden..b0_end + (o + 1) * self.hidden];
            grow.iter_mut().zip(&cache.hidden).for_each(|(gw, h)| *gw += d * h);
            g[w1_end + o] += d;
            let wrow = &w1[o * self.hidden..(o + 1) * self.hidden];
            dh.iter_mut().zip(wrow).for_each(|(acc, w)| *acc += d * w);
        }
        for (h, (&dhv, &hv)) in dh.iter().zip(&cache.hidden).enumerate() {
            if hv <= 0.0 || dhv == 0.0 {
                continue;
            }
            let grow = &mut g[h * self.classes..(h + 1) * self.classes];
            grow.iter_mut().zip(a).for_each(|(gw, x)| *gw += dhv * x);
            g[w0_end + h] += dhv;
        }
        Ok(grad)
    }
}

/// Personalized model for a client that never trained: the global generic
/// model plus a head generated from the client's class distribution alone.
pub fn zero_shot_personalize(
    global: &Model,
    hyper: &HyperNet,
    nu: &ParamVector,
    distribution: &[f64],
) -> Result<Model> {
    let phi = hyper.generate_head(nu, distribution)?;
    Ok(Model {
        theta: global.theta.clone(),
        psi: global.psi.clone(),
        phi: Some(phi),
    })
}
