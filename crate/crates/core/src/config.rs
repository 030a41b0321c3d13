//! Run configuration: TOML sections of flat `key = value` entries.
//!
//! Every key has a default, unknown keys are rejected, and environment
//! variables named `FASTCLIP_<SECTION>_<KEY>` override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MapKind, SyntheticSpec};
use crate::encoder::Arch;
use crate::error::{Error, Result};
use crate::optim::{AdamHyper, OptimizerKind};
use crate::par::Exec;
use crate::schedule::GammaKind;
use crate::trainer::{Strategy, Variant};

pub const ENV_PREFIX: &str = "FASTCLIP_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n: usize,
    pub probe: usize,
    pub latent: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub sigma: f64,
    pub seed: u64,
    pub k_max: usize,
    pub maps: MapKind,
    /// Read pairs from this file instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            n: s.n,
            probe: s.probe,
            latent: s.latent,
            d_img: s.d_img,
            d_txt: s.d_txt,
            sigma: s.sigma,
            seed: s.seed,
            k_max: s.k_max,
            maps: s.maps,
            path: None,
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n: self.n,
            probe: self.probe,
            latent: self.latent,
            d_img: self.d_img,
            d_txt: self.d_txt,
            sigma: self.sigma,
            seed: self.seed,
            k_max: self.k_max,
            maps: self.maps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: ArchKind,
    /// Hidden width for `mlp` towers.
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: ArchKind::Linear,
            hidden: 32,
            embed_dim: 16,
        }
    }
}

impl ModelSection {
    pub fn arch(&self) -> Arch {
        match self.arch {
            ArchKind::Linear => Arch::Linear,
            ArchKind::Mlp => Arch::Mlp { hidden: self.hidden },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoSection {
    pub variant: Variant,
    /// Defaults to the variant's schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_kind: Option<GammaKind>,
    /// Constant inner learning rate.
    pub gamma: f64,
    pub gamma_min: f64,
    /// Defaults to half the epochs (at least one).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_decay_epochs: Option<u64>,
    /// Defaults to the variant's initial temperature.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_init: Option<f64>,
    pub tau0: f64,
    pub rho: f64,
    pub tau_lr: f64,
    pub eps: f64,
    pub eps_late: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_switch_epoch: Option<u64>,
    pub strategy: Strategy,
    pub tau_decay_threshold: f64,
    pub tau_decay_factor: f64,
}

impl Default for AlgoSection {
    fn default() -> Self {
        Self {
            variant: Variant::FastclipV3,
            gamma_kind: None,
            gamma: 0.6,
            gamma_min: 0.2,
            gamma_decay_epochs: None,
            tau_init: None,
            tau0: 0.01,
            rho: 6.5,
            tau_lr: 1e-4,
            eps: 1e-14,
            eps_late: 1e-14,
            eps_switch_epoch: None,
            strategy: Strategy::Auto,
            tau_decay_threshold: 0.03,
            tau_decay_factor: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let h = AdamHyper::default();
        Self {
            kind: OptimizerKind::Adamw,
            lr: 1e-3,
            min_lr: 0.0,
            warmup_iters: 100,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
        }
    }
}

impl OptimSection {
    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FabricSection {
    pub workers: usize,
    /// Per-worker batch size.
    pub batch: usize,
    pub exec: Exec,
}

impl Default for FabricSection {
    fn default() -> Self {
        Self {
            workers: 4,
            batch: 8,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub epochs: u64,
    /// Seeds model initialisation and batch sampling.
    pub seed: u64,
    pub out_dir: String,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            seed: 0,
            out_dir: "runs/default".into(),
            checkpoint_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub algo: AlgoSection,
    pub optim: OptimSection,
    pub fabric: FabricSection,
    pub run: RunSection,
}

const SECTIONS: [&str; 6] = ["data", "model", "algo", "optim", "fabric", "run"];

/// Maps a serde message like "unknown field `foo`" to its key.
fn key_from_message(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

fn de_error(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    Error::config(key_from_message(&msg), msg)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(de_error)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies `FASTCLIP_<SECTION>_<KEY>` overrides from `vars`.
    ///
    /// Values are parsed as TOML literals, falling back to bare strings.
    pub fn with_env<I>(self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = toml::Table::try_from(&self).expect("config is a table");
        let mut touched = false;
        for (name, raw) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let rest = rest.to_ascii_lowercase();
            let Some((section, key)) = SECTIONS
                .iter()
                .find_map(|s| rest.strip_prefix(s).and_then(|k| k.strip_prefix('_')).map(|k| (*s, k)))
            else {
                return Err(Error::config(name.clone(), "unknown configuration section"));
            };
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            table
                .get_mut(section)
                .and_then(|v| v.as_table_mut())
                .expect("every section serialises")
                .insert(key.to_string(), value);
            touched = true;
        }
        if !touched {
            return Ok(self);
        }
        table.try_into().map_err(de_error)
    }

    pub fn with_process_env(self) -> Result<Self> {
        self.with_env(std::env::vars())
    }

    pub fn gamma_kind(&self) -> GammaKind {
        self.algo.gamma_kind.unwrap_or(self.algo.variant.default_gamma_kind())
    }

    pub fn tau_init(&self) -> f64 {
        self.algo.tau_init.unwrap_or(self.algo.variant.default_tau_init())
    }

    pub fn gamma_decay_epochs(&self) -> u64 {
        self.algo.gamma_decay_epochs.unwrap_or((self.run.epochs / 2).max(1))
    }

    pub fn global_batch(&self) -> usize {
        self.fabric.batch * self.fabric.workers
    }

    /// Strategy after resolving `auto` against the variant.
    pub fn strategy(&self) -> Strategy {
        match self.algo.strategy {
            Strategy::Auto if self.algo.variant == Variant::OpenclipMbcl => Strategy::OpenclipRs,
            Strategy::Auto => Strategy::Fastclip,
            s => s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let pos = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(key, "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("data.n", d.n)?;
        pos("data.latent", d.latent)?;
        pos("data.d_img", d.d_img)?;
        pos("data.d_txt", d.d_txt)?;
        pos("data.k_max", d.k_max)?;
        pos("model.embed_dim", self.model.embed_dim)?;
        pos("fabric.workers", self.fabric.workers)?;
        pos("fabric.batch", self.fabric.batch)?;
        if self.model.arch == ArchKind::Mlp {
            pos("model.hidden", self.model.hidden)?;
        }
        if !(d.sigma >= 0.0) {
            return Err(Error::config("data.sigma", "must be nonnegative"));
        }
        if !d.n.is_multiple_of(d.k_max) {
            return Err(Error::config("data.n", format!("must be divisible by data.k_max = {}", d.k_max)));
        }
        if d.probe < 2 {
            return Err(Error::config("data.probe", "need at least 2 probe pairs"));
        }
        let (k, kmax) = (self.fabric.workers, d.k_max);
        if kmax % k != 0 {
            return Err(Error::config("fabric.workers", format!("must divide data.k_max = {kmax}")));
        }
        let per_worker_streams = kmax / k;
        if !self.fabric.batch.is_multiple_of(per_worker_streams) {
            return Err(Error::config(
                "fabric.batch",
                format!("must be a multiple of data.k_max / fabric.workers = {per_worker_streams}"),
            ));
        }
        let gb = self.global_batch();
        if gb < 2 {
            return Err(Error::config("fabric.batch", "global batch must hold at least 2 pairs"));
        }
        if gb > d.n || !(d.n / kmax).is_multiple_of(gb / kmax) {
            return Err(Error::config(
                "fabric.batch",
                format!("global batch {gb} must tile each of the {kmax} streams of {} pairs", d.n / kmax),
            ));
        }

        let a = &self.algo;
        let v = a.variant;
        if let (Variant::Sogclr | Variant::Isogclr, GammaKind::Cosine) = (v, self.gamma_kind()) {
            return Err(Error::config("algo.gamma_kind", format!("{} uses a constant inner learning rate", v.name())))
        }
        if !(a.gamma > 0.0 && a.gamma <= 1.0) {
            return Err(Error::config("algo.gamma", "must lie in (0, 1]"));
        }
        if !(a.gamma_min > 0.0 && a.gamma_min <= 1.0) {
            return Err(Error::config("algo.gamma_min", "must lie in (0, 1]"));
        }
        if self.algo.gamma_decay_epochs == Some(0) {
            return Err(Error::config("algo.gamma_decay_epochs", "must be positive"));
        }
        if !(a.tau0 > 0.0) {
            return Err(Error::config("algo.tau0", "must be positive"));
        }
        if !(self.tau_init() >= a.tau0) {
            return Err(Error::config("algo.tau_init", format!("must be at least algo.tau0 = {}", a.tau0)));
        }
        if !(a.rho >= 0.0) {
            return Err(Error::config("algo.rho", "must be nonnegative"));
        }
        if !(a.tau_lr >= 0.0) {
            return Err(Error::config("algo.tau_lr", "must be nonnegative"));
        }
        if !(a.eps >= 0.0) {
            return Err(Error::config("algo.eps", "must be nonnegative"));
        }
        if !(a.eps_late >= 0.0) {
            return Err(Error::config("algo.eps_late", "must be nonnegative"));
        }
        if !(a.tau_decay_factor > 0.0 && a.tau_decay_factor <= 1.0) {
            return Err(Error::config("algo.tau_decay_factor", "must lie in (0, 1]"));
        }
        if v == Variant::OpenclipMbcl && a.strategy == Strategy::Fastclip {
            return Err(Error::config(
                "algo.strategy",
                "the mini-batch baseline keeps no u estimators to gather; use openclip_rs or auto",
            ));
        }

        let o = &self.optim;
        if !(o.lr >= 0.0 && o.min_lr >= 0.0) {
            return Err(Error::config("optim.lr", "learning rates must be nonnegative"));
        }
        if !(o.beta1 >= 0.0 && o.beta1 < 1.0) {
            return Err(Error::config("optim.beta1", "must lie in [0, 1)"));
        }
        if !(o.beta2 >= 0.0 && o.beta2 < 1.0) {
            return Err(Error::config("optim.beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be nonnegative"));
        }
        Ok(())
    }
}
