//! Similarities, the pairwise exponentials `ℓ1`/`ℓ2`, their closed-form
//! partial derivatives, mini-batch inner means, and exact full-dataset
//! evaluators for the mini-batch, global, robust-global and
//! robust-global-with-shared-temperature contrastive losses.
//!
//! Everything here is a pure function of its inputs. The exact evaluators are
//! `O(n²·d)` and serve as ground truth for the stochastic estimators in
//! [`crate::engine`].
//!
//! Conventions: `e1` rows are image embeddings, `e2` rows are text
//! embeddings, and `s[i][j] = ⟨e1_i, e2_j⟩`. `ℓ1(i, j) = exp((s_ij − s_ii)/τ)`
//! contrasts image `i` with text `j`; `ℓ2(i, j) = exp((s_ji − s_ii)/τ)`
//! contrasts text `i` with image `j`.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Largest argument passed to `exp`; larger values are clamped.
pub const EXP_ARG_MAX: f64 = 60.0;

/// Tolerance on `‖e‖₂ = 1` for embeddings handed to the loss layer.
pub const UNIT_NORM_TOL: f64 = 1e-9;

static EXP_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times an exponent was clamped to [`EXP_ARG_MAX`] in this process.
pub fn exp_clamp_count() -> u64 {
    EXP_CLAMPS.load(Ordering::Relaxed)
}

#[inline]
pub(crate) fn guarded_exp(x: f64) -> f64 {
    if x > EXP_ARG_MAX {
        EXP_CLAMPS.fetch_add(1, Ordering::Relaxed);
        EXP_ARG_MAX.exp()
    } else {
        x.exp()
    }
}

#[inline]
pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive, got {tau}")))
    }
}

#[inline]
pub(crate) fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Which side of a pair plays the anchor role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `ℓ1`: image `i` against texts.
    Image,
    /// `ℓ2`: text `i` against images.
    Text,
}

/// One image/text embedding pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub index: usize,
}

impl EmbeddingPair {
    pub fn new(e1: Vec<f64>, e2: Vec<f64>, index: usize) -> Result<Self> {
        if e1.len() != e2.len() {
            return Err(Error::Shape(format!(
                "image dim {} != text dim {}",
                e1.len(),
                e2.len()
            )));
        }
        for (name, v) in [("e1", &e1), ("e2", &e2)] {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Domain(format!("{name} of pair {index} has norm {norm}")));
            }
        }
        Ok(Self { e1, e2, index })
    }
}

/// Stacks pairs into `(E1, E2)` matrices, one row per pair.
pub fn stack_pairs(pairs: &[EmbeddingPair]) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = pairs.first().map_or(0, |p| p.e1.len());
    let mut e1 = Array2::zeros((pairs.len(), d));
    let mut e2 = Array2::zeros((pairs.len(), d));
    for (r, p) in pairs.iter().enumerate() {
        if p.e1.len() != d {
            return Err(Error::Shape(format!("pair {} has dim {}, expected {d}", p.index, p.e1.len())));
        }
        e1.row_mut(r).assign(&ArrayView1::from(&p.e1));
        e2.row_mut(r).assign(&ArrayView1::from(&p.e2));
    }
    Ok((e1, e2))
}

/// Cross-modal cosine similarity matrix. Not symmetric in general.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    s: Array2<f64>,
}

impl SimMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[[i, j]]
    }

    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.nrows() == 0
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.s
    }

    /// `s_ij − s_ii` for `ℓ1`, `s_ji − s_ii` for `ℓ2`.
    #[inline]
    pub fn margin(&self, side: Side, i: usize, j: usize) -> f64 {
        match side {
            Side::Image => self.s[[i, j]] - self.s[[i, i]],
            Side::Text => self.s[[j, i]] - self.s[[i, i]],
        }
    }
}

/// `S[i][j] = ⟨E1[i], E2[j]⟩`. Rows must already be unit-norm.
pub fn pairwise_similarity(e1: ArrayView2<f64>, e2: ArrayView2<f64>) -> Result<SimMatrix> {
    if e1.ncols() != e2.ncols() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            e1.ncols(),
            e2.ncols()
        )));
    }
    Ok(SimMatrix { s: e1.dot(&e2.t()) })
}

/// `exp(margin/τ)` for the given side.
pub fn ell(s: &SimMatrix, side: Side, i: usize, j: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(guarded_exp(s.margin(side, i, j) / tau))
}

pub fn ell1(s: &SimMatrix, i: usize, j: usize, tau: f64) -> Result<f64> {
    ell(s, Side::Image, i, j, tau)
}

pub fn ell2(s: &SimMatrix, i: usize, j: usize, tau: f64) -> Result<f64> {
    ell(s, Side::Text, i, j, tau)
}

#[inline]
pub(crate) fn dell_dtau_from_margin(margin: f64, tau: f64) -> f64 {
    -(margin / (tau * tau)) * guarded_exp(margin / tau)
}

/// `∂ℓ/∂τ = −(m/τ²)·exp(m/τ)` where `m` is the side's margin.
pub fn dell_dtau(s: &SimMatrix, side: Side, i: usize, j: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(dell_dtau_from_margin(s.margin(side, i, j), tau))
}

/// Cotangents of one `ℓ` term on the three embeddings it touches.
///
/// For `ℓ1(i, j)` the anchor is `e1_i`, the partner `e2_i` and the other
/// `e2_j`; for `ℓ2(i, j)` the anchor is `e2_i`, the partner `e1_i` and the
/// other `e1_j`. Gradients are with respect to the normalized embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EllCotangents {
    pub value: f64,
    pub anchor: Vec<f64>,
    pub partner: Vec<f64>,
    pub other: Vec<f64>,
}

/// Closed-form gradient of `ℓ = exp((⟨a, o⟩ − ⟨a, p⟩)/τ)` w.r.t. `a`, `p`, `o`.
pub fn dell_de(
    anchor: ArrayView1<f64>,
    partner: ArrayView1<f64>,
    other: ArrayView1<f64>,
    tau: f64,
) -> Result<EllCotangents> {
    check_tau(tau)?;
    if anchor.len() != partner.len() || anchor.len() != other.len() {
        return Err(Error::Shape("embedding lengths differ".into()));
    }
    let value = guarded_exp((dot(anchor, other) - dot(anchor, partner)) / tau);
    let c = value / tau;
    Ok(EllCotangents {
        value,
        anchor: other.iter().zip(partner.iter()).map(|(o, p)| c * (o - p)).collect(),
        partner: anchor.iter().map(|a| -c * a).collect(),
        other: anchor.iter().map(|a| c * a).collect(),
    })
}

/// Mean of `ℓ` over `batch` for anchor `i` on the given side.
pub fn g_batch(s: &SimMatrix, side: Side, i: usize, batch: &[usize], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if batch.is_empty() {
        return Err(Error::DegenerateBatch(format!("empty contrast set for pair {i}")));
    }
    if batch.contains(&i) {
        return Err(Error::DegenerateBatch(format!("contrast set for pair {i} contains {i}")));
    }
    let sum: f64 = batch
        .iter()
        .map(|&j| guarded_exp(s.margin(side, i, j) / tau))
        .sum();
    Ok(sum / batch.len() as f64)
}

pub fn g1_batch(s: &SimMatrix, i: usize, batch: &[usize], tau: f64) -> Result<f64> {
    g_batch(s, Side::Image, i, batch, tau)
}

pub fn g2_batch(s: &SimMatrix, i: usize, batch: &[usize], tau: f64) -> Result<f64> {
    g_batch(s, Side::Text, i, batch, tau)
}

/// Exact inner means over `S_{i−}` for every pair, with per-pair temperatures.
///
/// Returns `(g1, g2)`; `tau1[i]` is used for `g1_i`, `tau2[i]` for `g2_i`.
pub fn exact_inner_means(
    e1: ArrayView2<f64>,
    e2: ArrayView2<f64>,
    tau1: &[f64],
    tau2: &[f64],
    exec: Exec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = e1.nrows();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("need at least 2 pairs, got {n}")));
    }
    if e2.nrows() != n || tau1.len() != n || tau2.len() != n {
        return Err(Error::Shape("pair count mismatch".into()));
    }
    for &t in tau1.iter().chain(tau2) {
        check_tau(t)?;
    }
    let s = pairwise_similarity(e1, e2)?;
    let denom = (n - 1) as f64;
    let rows = par::map_indexed(exec, n, |i| {
        let (mut a, mut b) = (0.0, 0.0);
        for j in (0..n).filter(|&j| j != i) {
            a += guarded_exp(s.margin(Side::Image, i, j) / tau1[i]);
            b += guarded_exp(s.margin(Side::Text, i, j) / tau2[i]);
        }
        (a / denom, b / denom)
    });
    Ok(rows.into_iter().unzip())
}

fn sum_in_order(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |acc, x| acc + x)
}

/// Global contrastive loss `τ/n · Σ_i [log(ε + g1_i) + log(ε + g2_i)]`.
pub fn eval_gcl(e1: ArrayView2<f64>, e2: ArrayView2<f64>, tau: f64, epsilon: f64) -> Result<f64> {
    eval_gcl_with(e1, e2, tau, epsilon, Exec::default())
}

pub fn eval_gcl_with(
    e1: ArrayView2<f64>,
    e2: ArrayView2<f64>,
    tau: f64,
    epsilon: f64,
    exec: Exec,
) -> Result<f64> {
    check_eps(epsilon)?;
    let n = e1.nrows();
    let taus = vec![tau; n];
    let (g1, g2) = exact_inner_means(e1, e2, &taus, &taus, exec)?;
    let total = sum_in_order(
        g1.iter()
            .zip(&g2)
            .map(|(a, b)| (epsilon + a).ln() + (epsilon + b).ln()),
    );
    Ok(tau * total / n as f64)
}

/// Robust global contrastive loss with per-pair temperatures.
pub fn eval_rgcl(
    e1: ArrayView2<f64>,
    e2: ArrayView2<f64>,
    tau1: &[f64],
    tau2: &[f64],
    epsilon: f64,
    rho: f64,
) -> Result<f64> {
    check_eps(epsilon)?;
    let n = e1.nrows();
    let (g1, g2) = exact_inner_means(e1, e2, tau1, tau2, Exec::default())?;
    let total = sum_in_order((0..n).map(|i| {
        tau1[i] * ((epsilon + g1[i]).ln() + rho) + tau2[i] * ((epsilon + g2[i]).ln() + rho)
    }));
    Ok(total / n as f64)
}

/// Robust global contrastive loss with one shared temperature: GCL + 2ρτ.
pub fn eval_rgclg(
    e1: ArrayView2<f64>,
    e2: ArrayView2<f64>,
    tau: f64,
    epsilon: f64,
    rho: f64,
) -> Result<f64> {
    Ok(eval_gcl(e1, e2, tau, epsilon)? + 2.0 * rho * tau)
}

/// Additive constant inside the mini-batch loss for a global batch of `b`
/// pairs: one over the size of the contrast set `B_{i−}`.
pub fn mbcl_constant(b: usize) -> f64 {
    1.0 / (b - 1) as f64
}

/// Mini-batch contrastive loss of one sampled batch (not τ-scaled).
///
/// Each pair is contrasted against the other `B − 1` pairs of the batch and
/// the additive constant is `1/(B − 1)`, the reciprocal of that contrast
/// set's size.
pub fn eval_mbcl(e1: ArrayView2<f64>, e2: ArrayView2<f64>, tau: f64) -> Result<f64> {
    let b = e1.nrows();
    let taus = vec![tau; b];
    let (g1, g2) = exact_inner_means(e1, e2, &taus, &taus, Exec::default())?;
    let c = mbcl_constant(b);
    let total = sum_in_order(g1.iter().zip(&g2).map(|(a, x)| (c + a).ln() + (c + x).ln()));
    Ok(total / b as f64)
}

fn check_eps(epsilon: f64) -> Result<()> {
    if epsilon >= 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("epsilon must be nonnegative, got {epsilon}")))
    }
}
