//! Finite-difference oracle suite for every variant's analytic gradients.
//!
//! Each check builds a four-pair problem with linear towers, takes one
//! trainer step with `γ = 1` on the full batch (so `u` equals the exact inner
//! means) and compares the reported gradient against central differences of
//! the variant's exact loss, evaluated through the encoder.

use crate::config::{ArchKind, RunConfig};
use crate::data::generate_dataset;
use crate::encoder::TwoTower;
use crate::engine::{finite_diff_grad, TauGrad};
use crate::error::{Error, Result};
use crate::loss::{eval_gcl, eval_mbcl, eval_rgcl};
use crate::schedule::GammaKind;
use crate::state::TauValues;
use crate::trainer::{Objective, Trainer, Variant};

pub const PAIRS: usize = 4;
pub const D_IN: usize = 4;
pub const EMBED: usize = 3;
pub const TAU: f64 = 0.2;
pub const EPS: f64 = 1e-8;
pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero coordinates.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::Oracle(format!("{} analytic vs {} numeric coordinates", analytic.len(), numeric.len())));
    }
    Ok(analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &f)| relative_error(a, f))
        .fold(0.0, f64::max))
}

fn result(name: String, analytic: &[f64], numeric: &[f64]) -> Result<CheckResult> {
    let e = max_relative_error(analytic, numeric)?;
    Ok(CheckResult {
        name,
        coords: analytic.len(),
        max_rel_err: e,
        passed: e <= TOLERANCE,
    })
}

/// Configuration of the oracle problem for one variant.
pub fn oracle_config(variant: Variant, seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.n = PAIRS;
    c.data.probe = 2;
    c.data.k_max = PAIRS;
    c.data.d_img = D_IN;
    c.data.d_txt = D_IN;
    c.data.latent = 3;
    c.data.seed = seed;
    c.model.arch = ArchKind::Linear;
    c.model.embed_dim = EMBED;
    c.algo.variant = variant;
    c.algo.gamma_kind = Some(GammaKind::Constant);
    c.algo.gamma = 1.0;
    c.algo.tau_init = Some(TAU);
    c.algo.eps = EPS;
    c.algo.eps_late = EPS;
    c.fabric.workers = 1;
    c.fabric.batch = PAIRS;
    c.run.seed = seed;
    c.run.epochs = 1;
    c
}

/// Distinct per-pair temperatures so the individual checks exercise every τ.
fn spread_taus(tr: &mut Trainer) {
    if let TauValues::Individual { shards, .. } = &mut tr.temp_mut().values {
        for s in shards.iter_mut() {
            for (l, (a, b)) in s.tau1.iter_mut().zip(s.tau2.iter_mut()).enumerate() {
                let i = (s.offset + l) as f64;
                *a = 0.15 + 0.02 * i;
                *b = 0.26 - 0.03 * i;
            }
        }
    }
}

/// Checks the model gradient and, if learned, the temperature gradient of one variant.
pub fn check_variant(variant: Variant, seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = oracle_config(variant, seed);
    let data = generate_dataset(&cfg.data.spec())?;
    let (x, t) = data.rows(&(0..PAIRS).collect::<Vec<_>>());
    let mut tr = Trainer::new(cfg.clone(), data)?;
    spread_taus(&mut tr);
    let model0: TwoTower = tr.model().clone();
    let temp0 = tr.temp().clone();
    let taus: Vec<(f64, f64)> = (0..PAIRS).map(|i| temp0.pair(i)).collect::<Result<_>>()?;
    let (tau1, tau2): (Vec<f64>, Vec<f64>) = taus.iter().copied().unzip();
    let tau = temp0.representative();
    let rho = temp0.rho;

    let report = tr.step()?;
    let objective = variant.objective();
    let loss_at = |flat: &[f64], tau: f64, tau1: &[f64], tau2: &[f64]| -> Result<f64> {
        let mut m = model0.clone();
        m.set_flat(flat)?;
        let (e1, _) = m.image.forward(x.view())?;
        let (e2, _) = m.text.forward(t.view())?;
        match objective {
            Objective::Mbcl => eval_mbcl(e1.view(), e2.view(), tau),
            Objective::Global { scaled: true } => eval_gcl(e1.view(), e2.view(), tau, EPS),
            Objective::Global { scaled: false } => Ok(eval_gcl(e1.view(), e2.view(), tau, EPS)? / tau),
            Objective::Individual => eval_rgcl(e1.view(), e2.view(), tau1, tau2, EPS, rho),
        }
    };

    let w0 = model0.to_flat();
    let fd_w = finite_diff_grad(|p| loss_at(p, tau, &tau1, &tau2), &w0, STEP)?;
    let mut out = vec![result(format!("{} w", variant.name()), &report.reduced_grad, &fd_w)?];

    match report.tau_grad {
        None => {}
        Some(TauGrad::Global(g)) => {
            // The margin term 2ρτ only enters the τ coordinate.
            let margin = if variant == Variant::FastclipV3 { 2.0 * rho } else { 0.0 };
            let fd = finite_diff_grad(|p| Ok(loss_at(&w0, p[0], &tau1, &tau2)? + margin * p[0]), &[tau], STEP)?;
            out.push(result(format!("{} tau", variant.name()), &[g], &fd)?);
        }
        Some(TauGrad::PerPair(entries)) => {
            let mut flat = tau1.clone();
            flat.extend_from_slice(&tau2);
            let fd = finite_diff_grad(|p| loss_at(&w0, tau, &p[..PAIRS], &p[PAIRS..]), &flat, STEP)?;
            let mut analytic = vec![f64::NAN; 2 * PAIRS];
            for (idx, a, b) in entries {
                analytic[idx] = a;
                analytic[PAIRS + idx] = b;
            }
            out.push(result(format!("{} tau", variant.name()), &analytic, &fd)?);
        }
    }
    Ok(out)
}

/// Every variant, every learned coordinate.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        out.extend(check_variant(v, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn suite_passes_and_covers_every_variant() {
        let r = run_suite(0).unwrap();
        for c in &r {
            assert!(c.passed, "{} rel err {:e}", c.name, c.max_rel_err);
        }
        // Seven model checks plus the five learned-τ variants.
        assert_eq!(r.len(), 12);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let a = [1.0, 2.0, 3.0];
        let f = [1.0, 2.0, 3.001];
        assert!(max_relative_error(&a, &f).unwrap() > TOLERANCE);
        assert!(max_relative_error(&a, &f[..2]).is_err());
    }
}
