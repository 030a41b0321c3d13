//! Synthetic paired data and its binary file format.
//!
//! Pair `i` shares a latent `z_i ~ N(0, I_m)`: `x_i = A z_i + σ·ξ` and
//! `t_i = B z_i + σ·ξ'` with fixed random `A`, `B`.
//!
//! File layout (little-endian): `n_total: u64`, `d_img: u64`, `d_txt: u64`,
//! then `n_total × d_img` image doubles row-major, then `n_total × d_txt`
//! text doubles. The last `probe` rows are the held-out probe set.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// Gaussian maps scaled by `1/√m`.
    Random,
    /// `A = B = I`; requires `d_img = d_txt = m`.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Training pairs.
    pub n: usize,
    /// Held-out probe pairs appended after the training pairs.
    pub probe: usize,
    pub latent: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Training pairs must split evenly into this many streams.
    pub k_max: usize,
    pub maps: MapKind,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 1024,
            probe: 256,
            latent: 8,
            d_img: 16,
            d_txt: 16,
            sigma: 0.5,
            seed: 0,
            k_max: 8,
            maps: MapKind::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub x: Array2<f64>,
    pub t: Array2<f64>,
    pub probe: usize,
}

impl PairDataset {
    pub fn n_total(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_train(&self) -> usize {
        self.x.nrows() - self.probe
    }

    pub fn d_img(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_txt(&self) -> usize {
        self.t.ncols()
    }

    /// Image and text rows for the given pair indices.
    pub fn rows(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.x.select(Axis(0), idx), self.t.select(Axis(0), idx))
    }

    pub fn probe_views(&self) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        let start = self.n_train();
        (self.x.slice(s![start.., ..]), self.t.slice(s![start.., ..]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * (self.x.len() + self.t.len()));
        for h in [self.n_total(), self.d_img(), self.d_txt()] {
            out.extend_from_slice(&(h as u64).to_le_bytes());
        }
        for v in self.x.iter().chain(self.t.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], probe: usize) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::Format("dataset shorter than its header".into()));
        }
        let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().expect("8 bytes")) as usize;
        let (n, di, dt) = (word(0), word(1), word(2));
        let expect = n
            .checked_mul(di + dt)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        let body = &bytes[24..];
        if body.len() != expect {
            return Err(Error::Format(format!(
                "dataset body has {} bytes, header implies {expect}",
                body.len()
            )));
        }
        if probe >= n {
            return Err(Error::config("data.probe", format!("{probe} probe pairs leave no training data in {n}")));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (xv, tv) = vals.split_at(n * di);
        let shape = |r, c, v: &[f64]| Array2::from_shape_vec((r, c), v.to_vec()).map_err(|e| Error::Format(e.to_string()));
        Ok(Self {
            x: shape(n, di, xv)?,
            t: shape(n, dt, tv)?,
            probe,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path, probe: usize) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, probe)
    }
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<PairDataset> {
    if spec.k_max == 0 || !spec.n.is_multiple_of(spec.k_max) {
        return Err(Error::config(
            "data.n",
            format!("{} pairs do not split into {} streams", spec.n, spec.k_max),
        ));
    }
    if spec.n < 2 || spec.latent == 0 || spec.d_img == 0 || spec.d_txt == 0 {
        return Err(Error::config("data.n", "sizes must be positive and n at least 2"));
    }
    if !(spec.sigma >= 0.0) {
        return Err(Error::config("data.sigma", "must be nonnegative"));
    }
    let m = spec.latent;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = |r: usize, c: usize| -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(&mut rng))
    };
    let (a, b) = match spec.maps {
        MapKind::Random => {
            let scale = 1.0 / (m as f64).sqrt();
            (normal(spec.d_img, m) * scale, normal(spec.d_txt, m) * scale)
        }
        MapKind::Identity => {
            if spec.d_img != m || spec.d_txt != m {
                return Err(Error::config("data.maps", "identity maps need d_img = d_txt = latent"));
            }
            (Array2::eye(m), Array2::eye(m))
        }
    };
    let total = spec.n + spec.probe;
    let z = normal(total, m);
    let ni = normal(total, spec.d_img);
    let nt = normal(total, spec.d_txt);
    let x = z.dot(&a.t()) + ni * spec.sigma;
    let t = z.dot(&b.t()) + nt * spec.sigma;
    Ok(PairDataset { x, t, probe: spec.probe })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_identity_pairs_match() {
        let spec = SyntheticSpec {
            n: 16,
            probe: 4,
            latent: 3,
            d_img: 3,
            d_txt: 3,
            sigma: 0.0,
            seed: 5,
            k_max: 8,
            maps: MapKind::Identity,
        };
        let d = generate_dataset(&spec).unwrap();
        assert_eq!(d.x, d.t);
        assert_eq!(d.n_total(), 20);
        assert_eq!(d.n_train(), 16);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec::default();
        let a = generate_dataset(&spec).unwrap().to_bytes();
        let b = generate_dataset(&spec).unwrap().to_bytes();
        assert_eq!(a, b);
        let c = generate_dataset(&SyntheticSpec { seed: 1, ..spec }).unwrap().to_bytes();
        assert_ne!(a, c);
    }

    #[test]
    fn file_round_trip() {
        let d = generate_dataset(&SyntheticSpec { n: 64, probe: 8, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.bin");
        d.write(&p).unwrap();
        let back = PairDataset::read(&p, 8).unwrap();
        assert_eq!(back, d);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 24 + 72 * 32 * 8);
        assert!(matches!(PairDataset::from_bytes(&bytes[..100], 8), Err(Error::Format(_))));
    }

    #[test]
    fn uneven_stream_split_is_rejected() {
        let e = generate_dataset(&SyntheticSpec { n: 100, ..Default::default() });
        assert!(matches!(e, Err(Error::Config { .. })));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let d = generate_dataset(&SyntheticSpec { n: 8, probe: 2, ..Default::default() }).unwrap();
        let e = d.write(Path::new("/nonexistent-dir/x/pairs.bin"));
        assert!(matches!(e, Err(Error::Io(_))));
    }

    #[test]
    fn default_spec_is_fast() {
        let start = std::time::Instant::now();
        generate_dataset(&SyntheticSpec::default()).unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0);
    }
}
