//! Per-pair training state: the moving-average inner estimators `u1`/`u2`
//! and the temperature parameters, both sharded by owning worker.
//!
//! A worker can only reach its own shard through `&mut`, so concurrent
//! per-worker updates never alias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ScalarAdam;

/// Even contiguous partition of `[0, n)` across `k` workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub n: usize,
    pub k: usize,
}

impl Partition {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("workers", "must be positive"));
        }
        if n == 0 || !n.is_multiple_of(k) {
            return Err(Error::config(
                "workers",
                format!("{n} pairs cannot be split evenly across {k} workers"),
            ));
        }
        Ok(Self { n, k })
    }

    pub fn shard_size(&self) -> usize {
        self.n / self.k
    }

    pub fn range(&self, worker: usize) -> std::ops::Range<usize> {
        let s = self.shard_size();
        worker * s..(worker + 1) * s
    }

    pub fn owner(&self, index: usize) -> usize {
        index / self.shard_size()
    }
}

/// One worker's slice of the u table.
#[derive(Debug, Clone, PartialEq)]
pub struct UShard {
    worker: usize,
    offset: usize,
    u1: Vec<f64>,
    u2: Vec<f64>,
    updated_at: Vec<Option<u64>>,
}

impl UShard {
    fn local(&self, index: usize) -> Result<usize> {
        if index >= self.offset && index < self.offset + self.u1.len() {
            Ok(index - self.offset)
        } else {
            Err(Error::Ownership {
                worker: self.worker,
                index,
            })
        }
    }

    pub fn worker(&self) -> usize {
        self.worker
    }

    /// `u ← (1 − γ)·u + γ·g` for both sides of pair `index`, stamped with `step`.
    pub fn update(&mut self, index: usize, g1: f64, g2: f64, gamma: f64, step: u64) -> Result<()> {
        let l = self.local(index)?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Domain(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if !(g1 >= 0.0 && g2 >= 0.0) {
            return Err(Error::Domain(format!("inner means must be nonnegative, got ({g1}, {g2})")));
        }
        self.u1[l] = (1.0 - gamma) * self.u1[l] + gamma * g1;
        self.u2[l] = (1.0 - gamma) * self.u2[l] + gamma * g2;
        self.updated_at[l] = Some(step);
        Ok(())
    }

    pub fn get(&self, index: usize) -> Result<(f64, f64)> {
        let l = self.local(index)?;
        Ok((self.u1[l], self.u2[l]))
    }

    /// Values for `indices` (all owned here) that were updated in `step`.
    pub fn fresh(&self, indices: &[usize], step: u64) -> Result<Vec<(f64, f64)>> {
        indices
            .iter()
            .map(|&i| {
                let l = self.local(i)?;
                if self.updated_at[l] != Some(step) {
                    return Err(Error::Staleness { index: i, step });
                }
                Ok((self.u1[l], self.u2[l]))
            })
            .collect()
    }
}

/// Inner-estimator table, starting from `u⁰ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct UTable {
    partition: Partition,
    shards: Vec<UShard>,
}

impl UTable {
    pub fn new(partition: Partition) -> Self {
        let s = partition.shard_size();
        let shards = (0..partition.k)
            .map(|w| UShard {
                worker: w,
                offset: w * s,
                u1: vec![0.0; s],
                u2: vec![0.0; s],
                updated_at: vec![None; s],
            })
            .collect();
        Self { partition, shards }
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    pub fn shard(&self, worker: usize) -> &UShard {
        &self.shards[worker]
    }

    pub fn shards_mut(&mut self) -> &mut [UShard] {
        &mut self.shards
    }

    /// Update issued by `worker`; fails unless it owns `index`.
    pub fn update_u(
        &mut self,
        worker: usize,
        index: usize,
        g1: f64,
        g2: f64,
        gamma: f64,
        step: u64,
    ) -> Result<()> {
        let shard = self.shards.get_mut(worker).ok_or(Error::Ownership { worker, index })?;
        shard.update(index, g1, g2, gamma, step)
    }

    pub fn get(&self, index: usize) -> Result<(f64, f64)> {
        if index >= self.partition.n {
            return Err(Error::Shape(format!("index {index} out of range")));
        }
        self.shards[self.partition.owner(index)].get(index)
    }

    /// `u^{t+1}` for the global batch, in batch order. Every index must have
    /// been updated in `step`.
    pub fn snapshot_u_for_batch(&self, batch: &[usize], step: u64) -> Result<Vec<(f64, f64)>> {
        batch
            .iter()
            .map(|&i| {
                if i >= self.partition.n {
                    return Err(Error::Shape(format!("index {i} out of range")));
                }
                let v = self.shards[self.partition.owner(i)].fresh(&[i], step)?;
                Ok(v[0])
            })
            .collect()
    }

    pub fn u1(&self) -> Vec<f64> {
        self.shards.iter().flat_map(|s| s.u1.iter().copied()).collect()
    }

    pub fn u2(&self) -> Vec<f64> {
        self.shards.iter().flat_map(|s| s.u2.iter().copied()).collect()
    }

    /// Rebuilds a table from flat `u1`, `u2` vectors (no freshness stamps).
    pub fn from_values(partition: Partition, u1: &[f64], u2: &[f64]) -> Result<Self> {
        if u1.len() != partition.n || u2.len() != partition.n {
            return Err(Error::Shape(format!(
                "u table has {} / {} entries, expected {}",
                u1.len(),
                u2.len(),
                partition.n
            )));
        }
        let mut t = Self::new(partition);
        for sh in &mut t.shards {
            let r = sh.offset..sh.offset + sh.u1.len();
            sh.u1.copy_from_slice(&u1[r.clone()]);
            sh.u2.copy_from_slice(&u2[r]);
        }
        Ok(t)
    }

    /// Flat little-endian dump: `n: u64`, then `u1[n]`, then `u2[n]` as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 16 * self.partition.n);
        out.extend_from_slice(&(self.partition.n as u64).to_le_bytes());
        for v in self.u1().into_iter().chain(self.u2()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], workers: usize) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("u table dump shorter than its header".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() != 16 * n {
            return Err(Error::Format(format!(
                "u table dump has {} body bytes, expected {}",
                body.len(),
                16 * n
            )));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_values(Partition::new(n, workers)?, &vals[..n], &vals[n..])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TempScheme {
    /// Fixed global τ.
    Constant,
    /// Global τ learned from the unscaled-GCL gradient (also used by the
    /// mini-batch baseline).
    GlobalV0,
    /// Global τ learned from the RGCL-g gradient.
    GlobalV3,
    /// Per-pair `τ1_i`, `τ2_i` learned from the RGCL gradient.
    IndividualV2,
}

impl TempScheme {
    pub fn is_learnable(self) -> bool {
        self != TempScheme::Constant
    }

    pub fn is_individual(self) -> bool {
        self == TempScheme::IndividualV2
    }
}

/// One worker's per-pair temperatures and their Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauShard {
    pub worker: usize,
    pub offset: usize,
    pub tau1: Vec<f64>,
    pub tau2: Vec<f64>,
    pub adam1: Vec<ScalarAdam>,
    pub adam2: Vec<ScalarAdam>,
}

impl TauShard {
    pub fn local(&self, index: usize) -> Result<usize> {
        if index >= self.offset && index < self.offset + self.tau1.len() {
            Ok(index - self.offset)
        } else {
            Err(Error::Ownership {
                worker: self.worker,
                index,
            })
        }
    }

    pub fn get(&self, index: usize) -> Result<(f64, f64)> {
        let l = self.local(index)?;
        Ok((self.tau1[l], self.tau2[l]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauValues {
    Global { tau: f64, adam: ScalarAdam },
    Individual { partition: Partition, shards: Vec<TauShard> },
}

/// Temperature state with floor `tau0` and margin `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempState {
    pub scheme: TempScheme,
    pub tau0: f64,
    pub rho: f64,
    pub values: TauValues,
}

impl TempState {
    pub fn new(scheme: TempScheme, tau_init: f64, tau0: f64, rho: f64, partition: Partition) -> Result<Self> {
        if !(tau0 > 0.0) {
            return Err(Error::config("tau0", "must be positive"));
        }
        if tau_init < tau0 {
            return Err(Error::config("tau_init", format!("{tau_init} is below the floor {tau0}")));
        }
        if !(rho >= 0.0) {
            return Err(Error::config("rho", "must be nonnegative"));
        }
        let values = if scheme.is_individual() {
            let s = partition.shard_size();
            TauValues::Individual {
                partition,
                shards: (0..partition.k)
                    .map(|w| TauShard {
                        worker: w,
                        offset: w * s,
                        tau1: vec![tau_init; s],
                        tau2: vec![tau_init; s],
                        adam1: vec![ScalarAdam::default(); s],
                        adam2: vec![ScalarAdam::default(); s],
                    })
                    .collect(),
            }
        } else {
            TauValues::Global {
                tau: tau_init,
                adam: ScalarAdam::default(),
            }
        };
        Ok(Self {
            scheme,
            tau0,
            rho,
            values,
        })
    }

    pub fn global_tau(&self) -> Option<f64> {
        match &self.values {
            TauValues::Global { tau, .. } => Some(*tau),
            TauValues::Individual { .. } => None,
        }
    }

    /// `(τ1_i, τ2_i)`; both equal the global τ for global schemes.
    pub fn pair(&self, index: usize) -> Result<(f64, f64)> {
        match &self.values {
            TauValues::Global { tau, .. } => Ok((*tau, *tau)),
            TauValues::Individual { partition, shards } => {
                if index >= partition.n {
                    return Err(Error::Shape(format!("index {index} out of range")));
                }
                shards[partition.owner(index)].get(index)
            }
        }
    }

    pub fn snapshot(&self, batch: &[usize]) -> Result<Vec<(f64, f64)>> {
        batch.iter().map(|&i| self.pair(i)).collect()
    }

    /// All τ values (both sides for individual schemes).
    pub fn all_values(&self) -> Vec<f64> {
        match &self.values {
            TauValues::Global { tau, .. } => vec![*tau],
            TauValues::Individual { shards, .. } => shards
                .iter()
                .flat_map(|s| s.tau1.iter().chain(&s.tau2).copied())
                .collect(),
        }
    }

    /// Representative scalar: the global τ, or the mean of individual values.
    pub fn representative(&self) -> f64 {
        let v = self.all_values();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Linear-interpolated quantile of all τ values.
    pub fn quantile(&self, q: f64) -> f64 {
        let mut v = self.all_values();
        v.sort_by(f64::total_cmp);
        let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    }

    pub fn min_value(&self) -> f64 {
        self.all_values().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Pins every individual temperature to `tau` (test and ablation helper).
    pub fn pin_all(&mut self, tau: f64) {
        match &mut self.values {
            TauValues::Global { tau: t, .. } => *t = tau,
            TauValues::Individual { shards, .. } => {
                for s in shards {
                    s.tau1.iter_mut().chain(s.tau2.iter_mut()).for_each(|x| *x = tau);
                }
            }
        }
    }
}
