//! Toy two-tower encoders with explicit forward passes and vector-Jacobian
//! products, including the Jacobian of the final unit normalization.
//!
//! Each tower is either a single affine layer or a two-layer tanh MLP. The
//! flat parameter view lists layers in order, each as its weight matrix
//! (row-major, `out × in`) followed by its bias.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a pre-normalization embedding is rejected.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Linear,
    Mlp { hidden: usize },
}

/// Architecture header: enough to rebuild a tower from a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub arch: Arch,
}

impl TowerSpec {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        match self.arch {
            Arch::Linear => vec![(self.d_out, self.d_in)],
            Arch::Mlp { hidden } => vec![(hidden, self.d_in), (self.d_out, hidden)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Parameters of one tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tower {
    spec: TowerSpec,
    layers: Vec<Dense>,
}

/// Cached activations from [`Tower::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Normalized embeddings, one row per input.
    pub e: Array2<f64>,
    pub norms: Vec<f64>,
    /// Post-tanh hidden activations (MLP only).
    pub hidden: Option<Array2<f64>>,
    fingerprint: u64,
}

fn fingerprint(layers: &[Dense]) -> u64 {
    // FNV-1a over the parameter bit patterns.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for l in layers {
        for v in l.w.iter().chain(l.b.iter()) {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl Tower {
    /// Uniform init in `±1/√d_in` per layer, weights and biases alike.
    pub fn init(spec: TowerSpec, seed: u64) -> Result<Self> {
        if spec.d_in == 0 || spec.d_out == 0 || matches!(spec.arch, Arch::Mlp { hidden: 0 }) {
            return Err(Error::config("model", "tower dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(o, i)| {
                let bound = 1.0 / (i as f64).sqrt();
                let w = Array2::from_shape_fn((o, i), |_| rng.random_range(-bound..bound));
                let b = Array1::from_shape_fn(o, |_| rng.random_range(-bound..bound));
                Dense { w, b }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn from_layers(spec: TowerSpec, layers: Vec<Dense>) -> Result<Self> {
        let dims = spec.layer_dims();
        if dims.len() != layers.len()
            || dims
                .iter()
                .zip(&layers)
                .any(|(&(o, i), l)| l.w.dim() != (o, i) || l.b.len() != o)
        {
            return Err(Error::Shape("layers do not match tower spec".into()));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> TowerSpec {
        self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter().copied());
            out.extend(l.b.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, tower has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|x| *x = it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn from_flat(spec: TowerSpec, flat: &[f64]) -> Result<Self> {
        let mut t = Self {
            spec,
            layers: spec
                .layer_dims()
                .into_iter()
                .map(|(o, i)| Dense {
                    w: Array2::zeros((o, i)),
                    b: Array1::zeros(o),
                })
                .collect(),
        };
        t.set_flat(flat)?;
        Ok(t)
    }

    /// Flat index ranges of each weight matrix and each bias vector.
    pub fn groups(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut at = 0;
        for l in &self.layers {
            out.push(at..at + l.w.len());
            at += l.w.len();
            out.push(at..at + l.b.len());
            at += l.b.len();
        }
        out
    }

    /// Encodes the rows of `x` onto the unit sphere.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardTape)> {
        if x.ncols() != self.spec.d_in {
            return Err(Error::Shape(format!(
                "input has {} columns, tower expects {}",
                x.ncols(),
                self.spec.d_in
            )));
        }
        let affine = |l: &Dense, inp: ArrayView2<f64>| -> Array2<f64> { inp.dot(&l.w.t()) + &l.b };
        let (z, hidden) = match self.spec.arch {
            Arch::Linear => (affine(&self.layers[0], x), None),
            Arch::Mlp { .. } => {
                let h = affine(&self.layers[0], x).mapv(f64::tanh);
                (affine(&self.layers[1], h.view()), Some(h))
            }
        };
        let mut e = z;
        let mut norms = Vec::with_capacity(e.nrows());
        for (r, mut row) in e.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm >= MIN_EMBEDDING_NORM) {
                return Err(Error::NearZeroEmbedding { row: r, norm });
            }
            row /= norm;
            norms.push(norm);
        }
        let tape = ForwardTape {
            e: e.clone(),
            norms,
            hidden,
            fingerprint: fingerprint(&self.layers),
        };
        Ok((e, tape))
    }

    /// `Σ_b J_bᵀ · (I − e_b e_bᵀ)/‖z_b‖ · cot_b` as a flat gradient.
    pub fn vjp(&self, x: ArrayView2<f64>, tape: &ForwardTape, cot: ArrayView2<f64>) -> Result<Vec<f64>> {
        if tape.fingerprint != fingerprint(&self.layers) {
            return Err(Error::TapeMismatch("tape was recorded with different parameters".into()));
        }
        if x.nrows() != tape.e.nrows() || cot.dim() != tape.e.dim() || x.ncols() != self.spec.d_in {
            return Err(Error::TapeMismatch(format!(
                "inputs {:?}, cotangents {:?}, tape {:?}",
                x.dim(),
                cot.dim(),
                tape.e.dim()
            )));
        }
        // Project out the radial direction and undo the norm scaling.
        let mut dz = cot.to_owned();
        for ((mut row, e), &norm) in dz.rows_mut().into_iter().zip(tape.e.rows()).zip(&tape.norms) {
            let radial = row.dot(&e);
            row.scaled_add(-radial, &e);
            row /= norm;
        }
        let dense_grad = |d_out: &Array2<f64>, inp: ArrayView2<f64>| -> (Array2<f64>, Array1<f64>) {
            (d_out.t().dot(&inp), d_out.sum_axis(Axis(0)))
        };
        let mut grads = Vec::new();
        match self.spec.arch {
            Arch::Linear => grads.push(dense_grad(&dz, x)),
            Arch::Mlp { .. } => {
                let h = tape
                    .hidden
                    .as_ref()
                    .ok_or_else(|| Error::TapeMismatch("tape lacks hidden activations".into()))?;
                let top = dense_grad(&dz, h.view());
                let dh = dz.dot(&self.layers[1].w);
                let da = dh * &h.mapv(|v| 1.0 - v * v);
                grads.push(dense_grad(&da, x));
                grads.push(top);
            }
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for (gw, gb) in grads {
            flat.extend(gw.iter().copied());
            flat.extend(gb.iter().copied());
        }
        Ok(flat)
    }
}

/// Image and text towers; the flat view is image parameters then text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoTower {
    pub image: Tower,
    pub text: Tower,
}

/// Architecture header plus flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub image: TowerSpec,
    pub text: TowerSpec,
    pub params: Vec<f64>,
}

impl TwoTower {
    pub fn init(image: TowerSpec, text: TowerSpec, seed: u64) -> Result<Self> {
        if image.d_out != text.d_out {
            return Err(Error::config("embed_dim", "towers must share the embedding dimension"));
        }
        Ok(Self {
            image: Tower::init(image, seed.wrapping_mul(2).wrapping_add(1))?,
            text: Tower::init(text, seed.wrapping_mul(2).wrapping_add(2))?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.image.param_count() + self.text.param_count()
    }

    pub fn embed_dim(&self) -> usize {
        self.image.spec.d_out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.image.to_flat();
        v.extend(self.text.to_flat());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let split = self.image.param_count();
        self.image.set_flat(&flat[..split])?;
        self.text.set_flat(&flat[split..])
    }

    /// Layer groups over the flat view (one per weight matrix and bias).
    pub fn groups(&self) -> Vec<Range<usize>> {
        let off = self.image.param_count();
        let mut g = self.image.groups();
        g.extend(self.text.groups().into_iter().map(|r| r.start + off..r.end + off));
        g
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            image: self.image.spec,
            text: self.text.spec,
            params: self.to_flat(),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        let split = ck.image.param_count();
        if ck.params.len() != split + ck.text.param_count() {
            return Err(Error::Format("parameter count does not match architecture header".into()));
        }
        Ok(Self {
            image: Tower::from_flat(ck.image, &ck.params[..split])?,
            text: Tower::from_flat(ck.text, &ck.params[split..])?,
        })
    }
}
