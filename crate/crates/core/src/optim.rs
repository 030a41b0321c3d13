//! AdamW and LAMB with bias correction `1 − β^{t+1}`, decoupled weight
//! decay and per-layer trust ratios, plus the temperature update that runs
//! the same rule with zero weight decay and projects onto `τ ≥ τ0`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::engine::TauGrad;
use crate::error::{Error, Result};
use crate::state::{TauShard, TauValues, TempState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Lamb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of completed steps.
    pub step: u64,
    pub hyper: AdamHyper,
    /// Layer groups for LAMB trust ratios.
    pub groups: Vec<Range<usize>>,
}

impl OptimState {
    pub fn new(len: usize, hyper: AdamHyper, groups: Vec<Range<usize>>) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            hyper,
            groups,
        }
    }

    /// Advances the moments and returns `r = m̂/(√v̂ + ε)`.
    fn direction(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries, optimizer tracks {}",
                grad.len(),
                self.m.len()
            )));
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Optimizer(format!("non-finite gradient at coordinate {k}")));
        }
        let AdamHyper { beta1, beta2, eps, .. } = self.hyper;
        let t = self.step as i32 + 1;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let r = grad
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                (*m / c1) / ((*v / c2).sqrt() + eps)
            })
            .collect();
        self.step += 1;
        Ok(r)
    }
}

/// `θ ← θ − η(m̂/(√v̂ + ε) + λθ)`.
pub fn adamw_step(state: &mut OptimState, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::Shape("parameter and gradient lengths differ".into()));
    }
    let r = state.direction(grad)?;
    let wd = state.hyper.weight_decay;
    for (p, r) in params.iter_mut().zip(r) {
        *p -= lr * (r + wd * *p);
    }
    Ok(())
}

/// LAMB: the AdamW direction scaled per layer by `‖θ‖/‖r + λθ‖`.
///
/// A zero norm on either side sets that layer's ratio to 1. With
/// `unit_trust` every ratio is forced to 1, which is the temperature rule.
pub fn lamb_step(
    state: &mut OptimState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
    unit_trust: bool,
) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::Shape("parameter and gradient lengths differ".into()));
    }
    let r = state.direction(grad)?;
    let wd = state.hyper.weight_decay;
    let update: Vec<f64> = r.iter().zip(params.iter()).map(|(r, p)| r + wd * p).collect();
    let whole = [0..params.len()];
    let groups: &[Range<usize>] = if state.groups.is_empty() { &whole } else { &state.groups };
    for g in groups {
        let alpha = if unit_trust {
            1.0
        } else {
            trust_ratio(&params[g.clone()], &update[g.clone()])
        };
        for k in g.clone() {
            params[k] -= lr * alpha * update[k];
        }
    }
    Ok(())
}

pub fn trust_ratio(theta: &[f64], update: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (pn, un) = (norm(theta), norm(update));
    if pn == 0.0 || un == 0.0 {
        1.0
    } else {
        pn / un
    }
}

pub fn optimizer_step(
    kind: OptimizerKind,
    state: &mut OptimState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
) -> Result<()> {
    match kind {
        OptimizerKind::Adamw => adamw_step(state, params, grad, lr),
        OptimizerKind::Lamb => lamb_step(state, params, grad, lr, false),
    }
}

/// Adam moments for a single scalar parameter (no weight decay).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub step: u64,
}

impl ScalarAdam {
    /// One λ = 0 step; identical to AdamW and to LAMB with unit trust ratio.
    pub fn step(&mut self, theta: f64, grad: f64, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<f64> {
        if !grad.is_finite() {
            return Err(Error::Optimizer(format!("non-finite temperature gradient {grad}")));
        }
        let t = self.step as i32 + 1;
        self.m = beta1 * self.m + (1.0 - beta1) * grad;
        self.v = beta2 * self.v + (1.0 - beta2) * grad * grad;
        let r = (self.m / (1.0 - beta1.powi(t))) / ((self.v / (1.0 - beta2.powi(t))).sqrt() + eps);
        self.step += 1;
        Ok(theta - lr * r)
    }
}

/// Temperature update followed by projection onto `τ ≥ τ0`.
///
/// Only the Adam betas and epsilon of `hyper` are used; weight decay is zero.
pub fn temperature_step(hyper: &AdamHyper, temp: &mut TempState, grad: &TauGrad, lr: f64) -> Result<()> {
    if !temp.scheme.is_learnable() {
        return Ok(());
    }
    let tau0 = temp.tau0;
    match (&mut temp.values, grad) {
        (TauValues::Global { tau, adam }, TauGrad::Global(g)) => {
            let next = adam.step(*tau, *g, lr, hyper.beta1, hyper.beta2, hyper.eps)?;
            *tau = next.max(tau0);
            Ok(())
        }
        (TauValues::Individual { partition, shards }, TauGrad::PerPair(entries)) => {
            for e in entries {
                let w = partition.owner(e.0);
                temperature_step_shard(hyper, &mut shards[w], std::slice::from_ref(e), lr, tau0)?;
            }
            Ok(())
        }
        _ => Err(Error::Invariant("temperature gradient kind does not match scheme".into())),
    }
}

/// Per-pair update of one worker's temperatures; other indices are untouched.
pub fn temperature_step_shard(
    hyper: &AdamHyper,
    shard: &mut TauShard,
    entries: &[(usize, f64, f64)],
    lr: f64,
    tau0: f64,
) -> Result<()> {
    for &(i, g1, g2) in entries {
        let l = shard.local(i)?;
        let t1 = shard.adam1[l].step(shard.tau1[l], g1, lr, hyper.beta1, hyper.beta2, hyper.eps)?;
        let t2 = shard.adam2[l].step(shard.tau2[l], g2, lr, hyper.beta1, hyper.beta2, hyper.eps)?;
        shard.tau1[l] = t1.max(tau0);
        shard.tau2[l] = t2.max(tau0);
    }
    Ok(())
}
