//! Per-worker gradient estimators for model parameters and temperatures.
//!
//! Every estimator is assembled from embedding cotangents on the worker's
//! local rows of the gathered global batch, then pushed through each tower's
//! VJP once. Worker `k` holds rows `local` of a global batch of `B` rows.
//!
//! For one `ℓ1(i, j)` term, the weight on pair `i` is `w1_i` (for example
//! `τ/(ε + u1_i)`) and the per-worker normalisation is `1/(|B_k|·|B_{i−}|)`,
//! with `|B_{i−}| = B − 1`. The cotangents it produces on `e1_i` and `e2_i`
//! belong to the *a*-part and are accumulated by the worker that owns `i`.
//! The cotangent on `e2_j` belongs to the *b*-part and goes to the worker
//! that owns `j`. That worker needs `w1_i` and `τ_i` for every global `i`,
//! which is why the fastclip strategy gathers `u` (and per-pair `τ`).
//!
//! The openclip_rs strategy instead has each worker push the b-part from its
//! own rows to every global row, then Reduce_Scatter the resulting
//! `B × d` cotangent matrices.
//!
//! Reducing per-worker packets with a mean over `K` gives the global
//! estimator, because the `1/|B_k|` normalisation already carries the
//! factor `K`.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dist::Phase;
use crate::encoder::{ForwardTape, TwoTower};
use crate::error::{Error, Result};
use crate::loss::{self, check_tau, dell_dtau_from_margin, guarded_exp, SimMatrix, Side};

/// Flat gradient over all tower parameters (image then text).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradPacket {
    pub grad: Vec<f64>,
    pub phase: Phase,
}

impl GradPacket {
    /// Pushes local-row cotangents through both towers.
    pub fn from_cotangents(
        model: &TwoTower,
        x1: ArrayView2<f64>,
        x2: ArrayView2<f64>,
        tape1: &ForwardTape,
        tape2: &ForwardTape,
        cot: &Cotangents,
    ) -> Result<Self> {
        let mut grad = model.image.vjp(x1, tape1, cot.c1.view())?;
        grad.extend(model.text.vjp(x2, tape2, cot.c2.view())?);
        if let Some(p) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Invariant(format!("non-finite gradient at parameter {p}")));
        }
        Ok(Self {
            grad,
            phase: Phase::GradReduce,
        })
    }
}

/// Temperature gradient: one scalar, or sparse per-pair entries `(i, g1, g2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TauGrad {
    Global(f64),
    PerPair(Vec<(usize, f64, f64)>),
}

/// Cotangents on a block of embedding rows, one matrix per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Cotangents {
    pub c1: Array2<f64>,
    pub c2: Array2<f64>,
}

impl Cotangents {
    pub fn zeros(rows: usize, d: usize) -> Self {
        Self {
            c1: Array2::zeros((rows, d)),
            c2: Array2::zeros((rows, d)),
        }
    }

    pub fn add_assign(&mut self, other: &Cotangents) -> Result<()> {
        if self.c1.dim() != other.c1.dim() || self.c2.dim() != other.c2.dim() {
            return Err(Error::Shape("cotangent blocks differ in shape".into()));
        }
        self.c1 += &other.c1;
        self.c2 += &other.c2;
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Cotangents) -> f64 {
        self.c1
            .iter()
            .zip(other.c1.iter())
            .chain(self.c2.iter().zip(other.c2.iter()))
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Gathered global-batch embeddings and their similarity matrix.
#[derive(Debug, Clone)]
pub struct Gathered {
    pub e1: Array2<f64>,
    pub e2: Array2<f64>,
    pub sims: SimMatrix,
}

impl Gathered {
    pub fn new(e1: Array2<f64>, e2: Array2<f64>) -> Result<Self> {
        if e1.dim() != e2.dim() {
            return Err(Error::Shape(format!("image {:?} vs text {:?}", e1.dim(), e2.dim())));
        }
        if e1.nrows() < 2 {
            return Err(Error::DegenerateBatch(format!(
                "global batch of {} leaves B_(i-) empty",
                e1.nrows()
            )));
        }
        let sims = loss::pairwise_similarity(e1.view(), e2.view())?;
        Ok(Self { e1, e2, sims })
    }

    pub fn len(&self) -> usize {
        self.e1.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.e1.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.e1.ncols()
    }
}

/// Per-row temperatures and outer weights for a contiguous block of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RowCoeffs {
    offset: usize,
    tau1: Vec<f64>,
    tau2: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

fn outer_weight(num: f64, eps: f64, u: f64) -> Result<f64> {
    let w = num / (eps + u);
    if eps + u > 0.0 && w.is_finite() {
        Ok(w)
    } else {
        Err(Error::Domain(format!("ε + u = {} is not positive", eps + u)))
    }
}

impl RowCoeffs {
    /// Shared temperature; `scaled` puts `τ` in front of each weight.
    pub fn global(tau: f64, u: &[(f64, f64)], eps: f64, scaled: bool, offset: usize) -> Result<Self> {
        check_tau(tau)?;
        let num = if scaled { tau } else { 1.0 };
        let mut c = Self::with_capacity(offset, u.len());
        for &(u1, u2) in u {
            c.push(tau, tau, outer_weight(num, eps, u1)?, outer_weight(num, eps, u2)?);
        }
        Ok(c)
    }

    /// Per-pair temperatures; weights `τ1_i/(ε + u1_i)` and `τ2_i/(ε + u2_i)`.
    pub fn individual(taus: &[(f64, f64)], u: &[(f64, f64)], eps: f64, tau0: f64, offset: usize) -> Result<Self> {
        if taus.len() != u.len() {
            return Err(Error::Shape(format!("{} temperatures for {} u entries", taus.len(), u.len())));
        }
        let mut c = Self::with_capacity(offset, u.len());
        for (r, (&(t1, t2), &(u1, u2))) in taus.iter().zip(u).enumerate() {
            if t1 < tau0 || t2 < tau0 {
                return Err(Error::Invariant(format!(
                    "row {} has temperature ({t1}, {t2}) below floor {tau0}",
                    offset + r
                )));
            }
            check_tau(t1)?;
            check_tau(t2)?;
            c.push(t1, t2, outer_weight(t1, eps, u1)?, outer_weight(t2, eps, u2)?);
        }
        Ok(c)
    }

    /// Mini-batch loss weights: `u := g`, `ε := 1/(B − 1)`, no `τ` in front.
    pub fn mbcl(tau: f64, g: &[(f64, f64)], batch: usize, offset: usize) -> Result<Self> {
        Self::global(tau, g, loss::mbcl_constant(batch), false, offset)
    }

    fn with_capacity(offset: usize, n: usize) -> Self {
        Self {
            offset,
            tau1: Vec::with_capacity(n),
            tau2: Vec::with_capacity(n),
            w1: Vec::with_capacity(n),
            w2: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, t1: f64, t2: f64, w1: f64, w2: f64) {
        self.tau1.push(t1);
        self.tau2.push(t2);
        self.w1.push(w1);
        self.w2.push(w2);
    }

    pub fn rows(&self) -> Range<usize> {
        self.offset..self.offset + self.w1.len()
    }

    #[inline]
    fn at(&self, row: usize) -> Result<(f64, f64, f64, f64)> {
        match row.checked_sub(self.offset) {
            Some(r) if r < self.w1.len() => Ok((self.tau1[r], self.tau2[r], self.w1[r], self.w2[r])),
            _ => Err(Error::Staleness { index: row, step: 0 }),
        }
    }

    fn covers(&self, rows: &Range<usize>) -> Result<()> {
        let mine = self.rows();
        if rows.start < mine.start || rows.end > mine.end {
            let missing = if rows.start < mine.start { rows.start } else { mine.end };
            return Err(Error::Staleness { index: missing, step: 0 });
        }
        Ok(())
    }
}

fn check_local(g: &Gathered, local: &Range<usize>) -> Result<()> {
    if local.is_empty() || local.end > g.len() {
        return Err(Error::DegenerateBatch(format!(
            "local rows {local:?} do not fit a global batch of {}",
            g.len()
        )));
    }
    Ok(())
}

fn normaliser(g: &Gathered, local: &Range<usize>) -> f64 {
    1.0 / (local.len() as f64 * (g.len() - 1) as f64)
}

/// `c·ℓ/τ` for both sides of pair `(i, j)` with row-`i` coefficients.
#[inline]
fn term_scales(s: &SimMatrix, i: usize, j: usize, co: (f64, f64, f64, f64), norm: f64) -> (f64, f64) {
    let (t1, t2, w1, w2) = co;
    let l1 = guarded_exp(s.margin(Side::Image, i, j) / t1);
    let l2 = guarded_exp(s.margin(Side::Text, i, j) / t2);
    (norm * w1 * l1 / t1, norm * w2 * l2 / t2)
}

/// Anchor and partner cotangents for local rows `i` against all global `j`.
pub fn a_part(g: &Gathered, local: Range<usize>, coeffs: &RowCoeffs) -> Result<Cotangents> {
    check_local(g, &local)?;
    coeffs.covers(&local)?;
    let norm = normaliser(g, &local);
    let mut out = Cotangents::zeros(local.len(), g.dim());
    for (r, i) in local.clone().enumerate() {
        let co = coeffs.at(i)?;
        let (mut sum1, mut sum2) = (0.0, 0.0);
        let mut c1 = out.c1.row_mut(r);
        let mut c2 = out.c2.row_mut(r);
        for j in (0..g.len()).filter(|&j| j != i) {
            let (a1, a2) = term_scales(&g.sims, i, j, co, norm);
            c1.scaled_add(a1, &g.e2.row(j));
            c2.scaled_add(a2, &g.e1.row(j));
            sum1 += a1;
            sum2 += a2;
        }
        // Anchor self-terms and partner terms both land on row i.
        c1.scaled_add(-(sum1 + sum2), &g.e2.row(i));
        c2.scaled_add(-(sum1 + sum2), &g.e1.row(i));
    }
    Ok(out)
}

/// Other-side cotangents for local rows `j`, summed over all global `i ≠ j`.
///
/// Needs coefficients for every global row.
pub fn b_part(g: &Gathered, local: Range<usize>, coeffs: &RowCoeffs) -> Result<Cotangents> {
    check_local(g, &local)?;
    coeffs.covers(&(0..g.len()))?;
    let norm = normaliser(g, &local);
    let mut out = Cotangents::zeros(local.len(), g.dim());
    for (r, j) in local.clone().enumerate() {
        for i in (0..g.len()).filter(|&i| i != j) {
            let (a1, a2) = term_scales(&g.sims, i, j, coeffs.at(i)?, norm);
            out.c2.row_mut(r).scaled_add(a1, &g.e1.row(i));
            out.c1.row_mut(r).scaled_add(a2, &g.e2.row(i));
        }
    }
    Ok(out)
}

/// Other-side cotangents pushed from local rows `i` to every global row,
/// multiplied by `k` so a Reduce_Scatter mean yields the b-part sums.
///
/// Returns flattened `B × d` matrices `(image, text)`.
pub fn rs_payload(g: &Gathered, local: Range<usize>, coeffs: &RowCoeffs, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_local(g, &local)?;
    coeffs.covers(&local)?;
    let norm = normaliser(g, &local) * k as f64;
    let mut out = Cotangents::zeros(g.len(), g.dim());
    for i in local {
        let co = coeffs.at(i)?;
        for j in (0..g.len()).filter(|&j| j != i) {
            let (a1, a2) = term_scales(&g.sims, i, j, co, norm);
            out.c2.row_mut(j).scaled_add(a1, &g.e1.row(i));
            out.c1.row_mut(j).scaled_add(a2, &g.e2.row(i));
        }
    }
    Ok((out.c1.into_raw_vec_and_offset().0, out.c2.into_raw_vec_and_offset().0))
}

/// Reassembles a worker's Reduce_Scatter shards into a cotangent block.
pub fn rs_block(shard1: Vec<f64>, shard2: Vec<f64>, d: usize) -> Result<Cotangents> {
    let rows = shard1.len() / d.max(1);
    let c1 = Array2::from_shape_vec((rows, d), shard1).map_err(|e| Error::Shape(e.to_string()))?;
    let c2 = Array2::from_shape_vec((rows, d), shard2).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Cotangents { c1, c2 })
}

/// Local-row cotangents of the shared-temperature estimator (a + b parts).
///
/// `u` holds `(u1, u2)` for every global row after this step's update.
pub fn grad_w_global_tau(
    g: &Gathered,
    local: Range<usize>,
    u: &[(f64, f64)],
    tau: f64,
    eps: f64,
    scaled: bool,
) -> Result<Cotangents> {
    let coeffs = RowCoeffs::global(tau, u, eps, scaled, 0)?;
    fastclip_cotangents(g, local, &coeffs)
}

/// Local-row cotangents of the per-pair-temperature estimator.
pub fn grad_w_individual_tau(
    g: &Gathered,
    local: Range<usize>,
    u: &[(f64, f64)],
    taus: &[(f64, f64)],
    eps: f64,
    tau0: f64,
) -> Result<Cotangents> {
    let coeffs = RowCoeffs::individual(taus, u, eps, tau0, 0)?;
    fastclip_cotangents(g, local, &coeffs)
}

/// a-part plus locally recombined b-part.
pub fn fastclip_cotangents(g: &Gathered, local: Range<usize>, coeffs: &RowCoeffs) -> Result<Cotangents> {
    let mut c = a_part(g, local.clone(), coeffs)?;
    c.add_assign(&b_part(g, local, coeffs)?)?;
    Ok(c)
}

/// Inner means over `B_{i−}` for `rows`, with `taus` aligned to `rows`.
pub fn batch_inner_means(s: &SimMatrix, rows: Range<usize>, taus: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let b = s.len();
    if b < 2 {
        return Err(Error::DegenerateBatch("global batch has fewer than 2 pairs".into()));
    }
    if taus.len() != rows.len() || rows.end > b {
        return Err(Error::Shape(format!("{} temperatures for rows {rows:?}", taus.len())));
    }
    let denom = (b - 1) as f64;
    rows.zip(taus)
        .map(|(i, &(t1, t2))| {
            check_tau(t1)?;
            check_tau(t2)?;
            let (mut a, mut c) = (0.0, 0.0);
            for j in (0..b).filter(|&j| j != i) {
                a += guarded_exp(s.margin(Side::Image, i, j) / t1);
                c += guarded_exp(s.margin(Side::Text, i, j) / t2);
            }
            Ok((a / denom, c / denom))
        })
        .collect()
}

/// `mean_{j∈B_{i−}} ∂ℓ/∂τ` on both sides for row `i`.
fn dtau_means(s: &SimMatrix, i: usize, t1: f64, t2: f64) -> (f64, f64) {
    let b = s.len();
    let (mut a, mut c) = (0.0, 0.0);
    for j in (0..b).filter(|&j| j != i) {
        a += dell_dtau_from_margin(s.margin(Side::Image, i, j), t1);
        c += dell_dtau_from_margin(s.margin(Side::Text, i, j), t2);
    }
    let denom = (b - 1) as f64;
    (a / denom, c / denom)
}

fn check_aligned(s: &SimMatrix, local: &Range<usize>, n: usize) -> Result<()> {
    if s.len() < 2 {
        return Err(Error::DegenerateBatch("global batch has fewer than 2 pairs".into()));
    }
    if local.is_empty() || local.end > s.len() || local.len() != n {
        return Err(Error::Shape(format!("{n} entries for local rows {local:?}")));
    }
    Ok(())
}

/// Unscaled shared-temperature gradient, averaged over the local rows.
///
/// `u` is aligned to `local`.
pub fn grad_tau_v0(s: &SimMatrix, local: Range<usize>, u: &[(f64, f64)], tau: f64, eps: f64) -> Result<f64> {
    check_tau(tau)?;
    check_aligned(s, &local, u.len())?;
    let mut total = 0.0;
    for (i, &(u1, u2)) in local.clone().zip(u) {
        let (m1, m2) = dtau_means(s, i, tau, tau);
        total += m1 / (eps + u1) + m2 / (eps + u2);
    }
    Ok(total / local.len() as f64)
}

/// Shared-temperature gradient of the loss with margin `ρ`.
pub fn grad_tau_v3(
    s: &SimMatrix,
    local: Range<usize>,
    u: &[(f64, f64)],
    tau: f64,
    eps: f64,
    rho: f64,
) -> Result<f64> {
    check_tau(tau)?;
    check_aligned(s, &local, u.len())?;
    let mut total = 0.0;
    for (i, &(u1, u2)) in local.clone().zip(u) {
        let (m1, m2) = dtau_means(s, i, tau, tau);
        total += (eps + u1).ln() + (eps + u2).ln() + tau * (m1 / (eps + u1) + m2 / (eps + u2));
    }
    Ok(total / local.len() as f64 + 2.0 * rho)
}

/// Per-pair temperature gradient for row `i`, including the `1/n` prefactor.
pub fn grad_tau_v2(
    s: &SimMatrix,
    i: usize,
    u: (f64, f64),
    tau: (f64, f64),
    eps: f64,
    rho: f64,
    n: usize,
) -> Result<(f64, f64)> {
    check_tau(tau.0)?;
    check_tau(tau.1)?;
    if s.len() < 2 || i >= s.len() {
        return Err(Error::DegenerateBatch(format!("row {i} in a batch of {}", s.len())));
    }
    let (m1, m2) = dtau_means(s, i, tau.0, tau.1);
    let nf = n as f64;
    Ok((
        ((eps + u.0).ln() + rho + tau.0 / (eps + u.0) * m1) / nf,
        ((eps + u.1).ln() + rho + tau.1 / (eps + u.1) * m2) / nf,
    ))
}

/// Sparse per-pair gradients for every local row; `indices` maps rows to pair ids.
#[allow(clippy::too_many_arguments)]
pub fn grad_tau_v2_local(
    s: &SimMatrix,
    local: Range<usize>,
    indices: &[usize],
    u: &[(f64, f64)],
    taus: &[(f64, f64)],
    eps: f64,
    rho: f64,
    n: usize,
) -> Result<TauGrad> {
    check_aligned(s, &local, u.len())?;
    if indices.len() != u.len() || taus.len() != u.len() {
        return Err(Error::Shape("indices, u and temperatures must align".into()));
    }
    let entries = local
        .zip(indices.iter().zip(u.iter().zip(taus)))
        .map(|(row, (&idx, (&uu, &tt)))| grad_tau_v2(s, row, uu, tt, eps, rho, n).map(|(a, b)| (idx, a, b)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TauGrad::PerPair(entries))
}

/// Full-batch mini-batch loss gradient: cotangents on every row and `∂/∂τ`.
pub fn grad_mbcl(g: &Gathered, tau: f64) -> Result<(Cotangents, f64)> {
    let b = g.len();
    let all = 0..b;
    let inner = batch_inner_means(&g.sims, all.clone(), &vec![(tau, tau); b])?;
    let coeffs = RowCoeffs::mbcl(tau, &inner, b, 0)?;
    let cot = fastclip_cotangents(g, all.clone(), &coeffs)?;
    let gt = grad_tau_v0(&g.sims, all, &inner, tau, loss::mbcl_constant(b))?;
    Ok((cot, gt))
}

/// Central finite differences of `f` at `x`, coordinate by coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Oracle(format!("step {h} must be positive")));
    }
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for c in 0..x.len() {
        p[c] = x[c] + h;
        let up = f(&p)?;
        p[c] = x[c] - h;
        let down = f(&p)?;
        p[c] = x[c];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!("non-finite loss around coordinate {c}")));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Fabric;
    use crate::loss::{eval_gcl, eval_mbcl, eval_rgcl, eval_rgclg, exact_inner_means};
    use crate::par::Exec;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(b: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0f64..1.0));
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    }

    fn gathered(b: usize, d: usize, seed: u64) -> Gathered {
        Gathered::new(unit_rows(b, d, seed), unit_rows(b, d, seed + 100)).unwrap()
    }

    fn flat(c: &Cotangents) -> Vec<f64> {
        c.c1.iter().chain(c.c2.iter()).copied().collect()
    }

    /// Rebuilds `(E1, E2)` from a flat `[E1; E2]` vector without renormalising.
    fn unflat(x: &[f64], b: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
        (
            Array2::from_shape_vec((b, d), x[..b * d].to_vec()).unwrap(),
            Array2::from_shape_vec((b, d), x[b * d..].to_vec()).unwrap(),
        )
    }

    fn max_rel(a: &[f64], f: &[f64]) -> f64 {
        a.iter()
            .zip(f)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    fn exact_u(g: &Gathered, t1: &[f64], t2: &[f64]) -> Vec<(f64, f64)> {
        let (a, b) = exact_inner_means(g.e1.view(), g.e2.view(), t1, t2, Exec::Sequential).unwrap();
        a.into_iter().zip(b).collect()
    }

    #[test]
    fn finite_diff_known_gradients() {
        let x = [0.3, -1.2, 2.0];
        let q = finite_diff_grad(|p| Ok(0.5 * p.iter().map(|v| v * v).sum::<f64>()), &x, 1e-6).unwrap();
        for (a, b) in q.iter().zip(&x) {
            assert!((a - b).abs() <= 1e-9 * b.abs());
        }
        let a = [1.0, -2.0, 0.5];
        let l = finite_diff_grad(|p| Ok(p.iter().zip(&a).map(|(x, y)| x * y).sum()), &x, 1e-6).unwrap();
        for (u, v) in l.iter().zip(&a) {
            assert!((u - v).abs() < 1e-9);
        }
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-6),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn identical_embeddings_give_zero_gradients() {
        let row = unit_rows(1, 3, 1);
        let e = Array2::from_shape_fn((4, 3), |(_, c)| row[[0, c]]);
        let g = Gathered::new(e.clone(), e).unwrap();
        let u = vec![(1.0, 1.0); 4];
        for scaled in [true, false] {
            let c = grad_w_global_tau(&g, 0..4, &u, 0.1, 1e-14, scaled).unwrap();
            assert!(flat(&c).iter().all(|v| v.abs() < 1e-15));
        }
        let c = grad_w_individual_tau(&g, 0..4, &u, &[(0.1, 0.2); 4], 1e-14, 0.01).unwrap();
        assert!(flat(&c).iter().all(|v| v.abs() < 1e-15));
        let (c, t) = grad_mbcl(&g, 0.1).unwrap();
        assert!(flat(&c).iter().all(|v| v.abs() < 1e-15));
        assert_eq!(t, 0.0);
        assert_eq!(grad_tau_v0(&g.sims, 0..4, &u, 0.1, 1e-14).unwrap(), 0.0);
        let v3 = grad_tau_v3(&g.sims, 0..4, &u, 0.1, 1e-14, 6.5).unwrap();
        assert!((v3 - 13.0).abs() < 1e-12);
    }

    #[test]
    fn gcl_gradient_matches_finite_differences() {
        let (b, d, tau, eps) = (5, 3, 0.2, 1e-8);
        let g = gathered(b, d, 3);
        let u = exact_u(&g, &[tau; 5], &[tau; 5]);
        let c = grad_w_global_tau(&g, 0..b, &u, tau, eps, true).unwrap();
        let x: Vec<f64> = g.e1.iter().chain(g.e2.iter()).copied().collect();
        let fd = finite_diff_grad(
            |p| {
                let (e1, e2) = unflat(p, b, d);
                eval_gcl(e1.view(), e2.view(), tau, eps)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(max_rel(&flat(&c), &fd) < 1e-6, "{}", max_rel(&flat(&c), &fd));

        // Unscaled differs by exactly the factor τ.
        let cu = grad_w_global_tau(&g, 0..b, &u, tau, eps, false).unwrap();
        for (s, un) in flat(&c).iter().zip(flat(&cu)) {
            assert!((s - tau * un).abs() < 1e-14);
        }
    }

    #[test]
    fn rgcl_w_gradient_matches_finite_differences() {
        let (b, d, eps, rho) = (4, 3, 1e-8, 0.5);
        let g = gathered(b, d, 7);
        let t1 = [0.2, 0.25, 0.3, 0.22];
        let t2 = [0.21, 0.18, 0.35, 0.3];
        let u = exact_u(&g, &t1, &t2);
        let taus: Vec<_> = t1.iter().copied().zip(t2.iter().copied()).collect();
        let c = grad_w_individual_tau(&g, 0..b, &u, &taus, eps, 0.01).unwrap();
        let x: Vec<f64> = g.e1.iter().chain(g.e2.iter()).copied().collect();
        let fd = finite_diff_grad(
            |p| {
                let (e1, e2) = unflat(p, b, d);
                eval_rgcl(e1.view(), e2.view(), &t1, &t2, eps, rho)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(max_rel(&flat(&c), &fd) < 1e-6);
    }

    #[test]
    fn mbcl_gradient_matches_finite_differences() {
        let (b, d, tau) = (4, 3, 0.2);
        let g = gathered(b, d, 11);
        let (c, gt) = grad_mbcl(&g, tau).unwrap();
        let x: Vec<f64> = g.e1.iter().chain(g.e2.iter()).copied().collect();
        let fd = finite_diff_grad(
            |p| {
                let (e1, e2) = unflat(p, b, d);
                eval_mbcl(e1.view(), e2.view(), tau)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(max_rel(&flat(&c), &fd) < 1e-6);
        let ft = finite_diff_grad(|p| eval_mbcl(g.e1.view(), g.e2.view(), p[0]), &[tau], 1e-6).unwrap();
        assert!((gt - ft[0]).abs() / ft[0].abs() < 1e-6);
    }

    #[test]
    fn mbcl_equals_gcl_machinery_under_substitution() {
        let (b, tau) = (6, 0.15);
        let g = gathered(b, 4, 13);
        let inner = batch_inner_means(&g.sims, 0..b, &vec![(tau, tau); b]).unwrap();
        let via_gcl = grad_w_global_tau(&g, 0..b, &inner, tau, loss::mbcl_constant(b), false).unwrap();
        let (direct, _) = grad_mbcl(&g, tau).unwrap();
        assert_eq!(via_gcl, direct);
    }

    #[test]
    fn tau_gradients_match_finite_differences() {
        let (b, tau, eps, rho) = (5, 0.2, 1e-8, 0.7);
        let g = gathered(b, 3, 17);
        let u = exact_u(&g, &[tau; 5], &[tau; 5]);
        let v3 = grad_tau_v3(&g.sims, 0..b, &u, tau, eps, rho).unwrap();
        let fd = finite_diff_grad(|p| eval_rgclg(g.e1.view(), g.e2.view(), p[0], eps, rho), &[tau], 1e-6).unwrap();
        assert!((v3 - fd[0]).abs() / fd[0].abs() < 1e-6);

        // v0 is the τ-gradient of the unscaled loss GCL/τ at fixed outer τ.
        let v0 = grad_tau_v0(&g.sims, 0..b, &u, tau, eps).unwrap();
        let fd0 = finite_diff_grad(
            |p| {
                let ts = vec![p[0]; b];
                let (a, c) = exact_inner_means(g.e1.view(), g.e2.view(), &ts, &ts, Exec::Sequential)?;
                Ok(a.iter().zip(&c).map(|(x, y)| (eps + x).ln() + (eps + y).ln()).sum::<f64>() / b as f64)
            },
            &[tau],
            1e-6,
        )
        .unwrap();
        assert!((v0 - fd0[0]).abs() / fd0[0].abs() < 1e-6);
    }

    #[test]
    fn v0_two_pair_hand_instance() {
        let e1 = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let e2 = ndarray::array![[0.6, 0.8], [0.8, 0.6]];
        let g = Gathered::new(e1, e2).unwrap();
        let (tau, eps) = (0.5, 0.0);
        let u = [(2.0, 3.0), (0.5, 1.5)];
        // s = [[0.6, 0.8], [0.8, 0.6]]; every margin is +0.2.
        let m: f64 = 0.2;
        let d: f64 = -(m / (tau * tau)) * (m / tau).exp();
        let expect = (d / 2.0 + d / 3.0 + d / 0.5 + d / 1.5) / 2.0;
        let got = grad_tau_v0(&g.sims, 0..2, &u, tau, eps).unwrap();
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn v2_examples() {
        let row = unit_rows(1, 3, 2);
        let e = Array2::from_shape_fn((3, 3), |(_, c)| row[[0, c]]);
        let g = Gathered::new(e.clone(), e).unwrap();
        let eps = 1e-14;
        let (a, b) = grad_tau_v2(&g.sims, 1, (1.0 - eps, 1.0 - eps), (0.03, 0.05), eps, 9.0, 64).unwrap();
        assert!((a - 9.0 / 64.0).abs() < 1e-15 && (b - 9.0 / 64.0).abs() < 1e-15);

        // With the ∂ℓ/∂τ terms at zero, a tiny u makes the log term and hence
        // the gradient negative, so the step raises τ.
        let (a, b) = grad_tau_v2(&g.sims, 0, (1e-9, 1.0), (0.05, 0.05), 1e-14, 0.0, 4).unwrap();
        assert!(a < 0.0);
        assert!(a < b);
    }

    #[test]
    fn v2_matches_finite_differences_of_rgcl() {
        let (b, eps, rho) = (4, 1e-8, 0.4);
        let g = gathered(b, 3, 19);
        let t1 = vec![0.2, 0.25, 0.3, 0.22];
        let t2 = vec![0.21, 0.18, 0.35, 0.3];
        let u = exact_u(&g, &t1, &t2);
        for i in 0..b {
            let (a, c) = grad_tau_v2(&g.sims, i, u[i], (t1[i], t2[i]), eps, rho, b).unwrap();
            let fd1 = finite_diff_grad(
                |p| {
                    let mut t = t1.clone();
                    t[i] = p[0];
                    eval_rgcl(g.e1.view(), g.e2.view(), &t, &t2, eps, rho)
                },
                &[t1[i]],
                1e-6,
            )
            .unwrap();
            let fd2 = finite_diff_grad(
                |p| {
                    let mut t = t2.clone();
                    t[i] = p[0];
                    eval_rgcl(g.e1.view(), g.e2.view(), &t1, &t, eps, rho)
                },
                &[t2[i]],
                1e-6,
            )
            .unwrap();
            assert!((a - fd1[0]).abs() / fd1[0].abs() < 1e-5);
            assert!((c - fd2[0]).abs() / fd2[0].abs() < 1e-5);
        }
    }

    #[test]
    fn individual_with_equal_taus_is_scaled_global() {
        let g = gathered(8, 4, 23);
        let u: Vec<_> = (0..8).map(|i| (0.5 + 0.1 * i as f64, 0.7 + 0.05 * i as f64)).collect();
        let a = grad_w_global_tau(&g, 2..6, &u, 0.07, 1e-8, true).unwrap();
        let b = grad_w_individual_tau(&g, 2..6, &u, &[(0.07, 0.07); 8], 1e-8, 0.03).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn below_floor_temperature_is_rejected() {
        let g = gathered(4, 3, 1);
        let err = grad_w_individual_tau(&g, 0..2, &[(1.0, 1.0); 4], &[(0.02, 0.05); 4], 1e-8, 0.03);
        assert!(matches!(err, Err(Error::Invariant(_))));
    }

    #[test]
    fn missing_u_entry_is_stale() {
        let g = gathered(4, 3, 1);
        let coeffs = RowCoeffs::global(0.1, &[(1.0, 1.0); 2], 1e-8, true, 0).unwrap();
        assert!(matches!(b_part(&g, 0..2, &coeffs), Err(Error::Staleness { .. })));
        assert!(Gathered::new(unit_rows(1, 3, 0), unit_rows(1, 3, 1)).is_err());
    }

    fn worker_split_sum(g: &Gathered, k: usize, coeffs: &RowCoeffs) -> Vec<Vec<f64>> {
        let bl = g.len() / k;
        (0..k)
            .map(|w| flat(&fastclip_cotangents(g, w * bl..(w + 1) * bl, coeffs).unwrap()))
            .collect()
    }

    #[test]
    fn worker_split_reduces_to_serial() {
        let g = gathered(16, 5, 29);
        let u: Vec<_> = (0..16).map(|i| (0.3 + 0.02 * i as f64, 0.4 + 0.03 * i as f64)).collect();
        let coeffs = RowCoeffs::global(0.1, &u, 1e-8, true, 0).unwrap();
        let serial = flat(&fastclip_cotangents(&g, 0..16, &coeffs).unwrap());
        for k in [2, 4, 8] {
            // Each worker's block is K times its rows' share; stacking and
            // dividing by K gives the serial cotangents.
            let parts = worker_split_sum(&g, k, &coeffs);
            let mut stacked = Vec::new();
            let bl = 16 / k;
            for side in 0..2 {
                for p in &parts {
                    stacked.extend(p[side * bl * 5..(side + 1) * bl * 5].iter().map(|v| v / k as f64));
                }
            }
            for (a, b) in stacked.iter().zip(&serial) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rs_strategy_matches_local_b_part_at_one_over_d_cost() {
        for (k, d) in [(2usize, 8usize), (4, 16), (4, 64)] {
            let bl = 4;
            let b = k * bl;
            let g = gathered(b, d, 31 + d as u64);
            let u: Vec<_> = (0..b).map(|i| (0.5 + 0.01 * i as f64, 0.6 + 0.02 * i as f64)).collect();
            let coeffs = RowCoeffs::global(0.1, &u, 1e-8, true, 0).unwrap();

            let mut fabric = Fabric::new(k).unwrap();
            let u_payloads: Vec<Vec<f64>> = (0..k)
                .map(|w| u[w * bl..(w + 1) * bl].iter().flat_map(|&(a, c)| [a, c]).collect())
                .collect();
            fabric.all_gather(Phase::UGather, &u_payloads).unwrap();

            let payloads: Vec<(Vec<f64>, Vec<f64>)> = (0..k)
                .map(|w| {
                    let local = RowCoeffs::global(0.1, &u[w * bl..(w + 1) * bl], 1e-8, true, w * bl).unwrap();
                    rs_payload(&g, w * bl..(w + 1) * bl, &local, k).unwrap()
                })
                .collect();
            let img: Vec<_> = payloads.iter().map(|p| p.0.clone()).collect();
            let txt: Vec<_> = payloads.iter().map(|p| p.1.clone()).collect();
            let s1 = fabric.reduce_scatter_mean(Phase::RsGrad, &img).unwrap();
            let s2 = fabric.reduce_scatter_mean(Phase::RsGrad, &txt).unwrap();
            for w in 0..k {
                let rs = rs_block(s1[w].clone(), s2[w].clone(), d).unwrap();
                let local = b_part(&g, w * bl..(w + 1) * bl, &coeffs).unwrap();
                assert!(rs.max_abs_diff(&local) <= 1e-12);
            }
            let rep = fabric.ledger_report();
            assert_eq!(
                rep.phase_elements(Phase::UGather) * d as u64,
                rep.phase_elements(Phase::RsGrad)
            );
        }
    }
}
