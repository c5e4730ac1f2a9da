use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::dataset::{normalize_counts, Dataset};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Per-client index lists and class counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    /// `counts[m][c]` = samples of class `c` held by client `m`.
    pub counts: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

/// JSON form of a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub seed: u64,
    pub alpha: f64,
    pub num_clients: usize,
    pub num_classes: usize,
    pub counts: Vec<Vec<usize>>,
    pub distributions: Vec<Option<Vec<f64>>>,
    pub empty_clients: Vec<usize>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client_size(&self, m: usize) -> usize {
        self.clients[m].len()
    }

    /// `a_m[c] = N_{m,c} / Σ_c' N_{m,c'}`.
    pub fn class_distribution(&self, m: usize) -> Result<Vec<f64>> {
        let counts = self
            .counts
            .get(m)
            .ok_or_else(|| Error::domain(format!("no client {m}")))?;
        normalize_counts(counts)
    }

    pub fn empty_clients(&self) -> Vec<usize> {
        (0..self.num_clients())
            .filter(|&m| self.clients[m].is_empty())
            .collect()
    }

    pub fn report(&self) -> PartitionReport {
        PartitionReport {
            seed: self.seed,
            alpha: self.alpha,
            num_clients: self.num_clients(),
            num_classes: self.counts.first().map_or(0, Vec::len),
            counts: self.counts.clone(),
            distributions: (0..self.num_clients())
                .map(|m| self.class_distribution(m).ok())
                .collect(),
            empty_clients: self.empty_clients(),
        }
    }
}

/// One draw from `Dir(alpha * 1_M)` via normalized `Gamma(alpha, 1)` variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(m: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // every variate underflowed (tiny alpha): the limit puts all mass on one client
        let pick = rng.random_range(0..m);
        (0..m).map(|i| if i == pick { 1.0 } else { 0.0 }).collect()
    }
}

/// Splits `total` into integer parts proportional to `shares` (which sum to 1)
/// using the largest-remainder rule; ties go to the lower index.
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        parts[i] += 1;
    }
    parts
}

/// Dirichlet non-IID split of the samples in `pool` across `num_clients`.
pub fn dirichlet_partition_pool(
    dataset: &Dataset,
    pool: &[usize],
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("dirichlet alpha must be positive"));
    }
    let c_total = dataset.num_classes();
    let mut by_class = vec![Vec::new(); c_total];
    for &i in pool {
        by_class[dataset.label(i)].push(i);
    }
    let mut clients = vec![Vec::new(); num_clients];
    let mut counts = vec![vec![0usize; c_total]; num_clients];
    for (c, idx) in by_class.iter_mut().enumerate() {
        let mut rng = stream_rng(seed, Stream::Partition, &[c as u64]);
        let shares = sample_dirichlet(num_clients, alpha, &mut rng);
        let parts = largest_remainder(idx.len(), &shares);
        idx.shuffle(&mut rng);
        let mut start = 0;
        for (m, &n) in parts.iter().enumerate() {
            clients[m].extend_from_slice(&idx[start..start + n]);
            counts[m][c] = n;
            start += n;
        }
    }
    clients.iter_mut().for_each(|c| c.sort_unstable());
    Ok(Partition {
        clients,
        counts,
        alpha,
        seed,
    })
}

pub fn dirichlet_partition(
    dataset: &Dataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    let pool: Vec<usize> = (0..dataset.len()).collect();
    dirichlet_partition_pool(dataset, &pool, num_clients, alpha, seed)
}
