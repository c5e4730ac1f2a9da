use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        LayoutEntry {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of tensors packed back-to-back in a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn new(entries: Vec<LayoutEntry>) -> Self {
        Layout { entries }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(LayoutEntry::numel).sum()
    }

    /// Name of the entry owning flat index `idx`.
    pub fn entry_at(&self, mut idx: usize) -> Option<&LayoutEntry> {
        for e in &self.entries {
            let n = e.numel();
            if idx < n {
                return Some(e);
            }
            idx -= n;
        }
        None
    }

    /// Offset and length of the entry called `name`.
    pub fn span(&self, name: &str) -> Option<(usize, usize)> {
        let mut off = 0;
        for e in &self.entries {
            let n = e.numel();
            if e.name == name {
                return Some((off, n));
            }
            off += n;
        }
        None
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("{}{:?}", e.name, e.shape))
            .collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Flat `f64` parameter array plus the layout that gives it structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::dim(
                format!("parameter vector for layout {layout}"),
                layout.total_len(),
                values.len(),
            ));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .span(name)
            .map(|(off, n)| &self.values[off..off + n])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn ensure_same_layout(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{what}: layout {} does not match {}",
                self.layout, other.layout
            )))
        }
    }

    /// Fails with the first layout entry holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric {
                entry: self
                    .layout
                    .entry_at(i)
                    .map(|e| e.name.clone())
                    .unwrap_or_else(|| format!("#{i}")),
            }),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        ParamVector {
            values,
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn dist_sq(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Elementwise `Σ w_m p_m / Σ w_m`.
pub fn weighted_average(entries: &[(&ParamVector, f64)]) -> Result<ParamVector> {
    let Some(&(first, _)) = entries.first() else {
        return Err(Error::Aggregation("no entries to average".into()));
    };
    let mut total = 0.0;
    for &(p, w) in entries {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Aggregation(format!("invalid weight {w}")));
        }
        if !p.same_layout(first) {
            return Err(Error::Aggregation(format!(
                "layout {} does not match {}",
                p.layout, first.layout
            )));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::Aggregation("weights sum to zero".into()));
    }
    let mut out = ParamVector::zeros(Arc::clone(&first.layout));
    for &(p, w) in entries {
        out.axpy(w / total, p);
    }
    Ok(out)
}
