//! Training loop: batch sampling, feature and `u` gathers, variant dispatch,
//! gradient reduction, optimizer and temperature steps, and per-epoch
//! metrics.
//!
//! Batches come from `k_max` fixed micro-streams. Stream `s` owns the
//! contiguous index block `[s·n/k_max, (s+1)·n/k_max)` and reshuffles it each
//! epoch from `(seed, s, epoch)`. Worker `k` of `K` owns streams
//! `k·k_max/K .. (k+1)·k_max/K`, so its data shard is contiguous and the
//! global batch, read in worker order, is the same for every `K` dividing
//! `k_max`.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::PairDataset;
use crate::dist::{CommLedger, Fabric, Phase};
use crate::encoder::{ForwardTape, ModelCheckpoint, TowerSpec, TwoTower};
use crate::engine::{
    self, batch_inner_means, grad_tau_v0, grad_tau_v2_local, grad_tau_v3, Cotangents, Gathered, GradPacket,
    RowCoeffs, TauGrad,
};
use crate::error::{Error, Result};
use crate::loss;
use crate::optim::{optimizer_step, temperature_step, AdamHyper, OptimState};
use crate::par::{self, Exec};
use crate::schedule::{gamma_at, lr_at, EpsilonSchedule, GammaKind, GammaSchedule, OuterLrSchedule, TauLrDecay};
use crate::state::{Partition, TempScheme, TempState, UTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    OpenclipMbcl,
    Sogclr,
    Isogclr,
    FastclipV0,
    FastclipV1,
    FastclipV2,
    FastclipV3,
}

/// Which loss the model gradient follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Mini-batch loss; no `u` estimators.
    Mbcl,
    /// Shared temperature; `scaled` puts `τ` in front of the gradient.
    Global { scaled: bool },
    /// Per-pair temperatures.
    Individual,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::OpenclipMbcl,
        Variant::Sogclr,
        Variant::Isogclr,
        Variant::FastclipV0,
        Variant::FastclipV1,
        Variant::FastclipV2,
        Variant::FastclipV3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::OpenclipMbcl => "openclip_mbcl",
            Variant::Sogclr => "sogclr",
            Variant::Isogclr => "isogclr",
            Variant::FastclipV0 => "fastclip_v0",
            Variant::FastclipV1 => "fastclip_v1",
            Variant::FastclipV2 => "fastclip_v2",
            Variant::FastclipV3 => "fastclip_v3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("algo.variant", format!("unknown variant `{s}`")))
    }

    pub fn temp_scheme(self) -> TempScheme {
        match self {
            Variant::Sogclr | Variant::FastclipV1 => TempScheme::Constant,
            Variant::OpenclipMbcl | Variant::FastclipV0 => TempScheme::GlobalV0,
            Variant::FastclipV3 => TempScheme::GlobalV3,
            Variant::Isogclr | Variant::FastclipV2 => TempScheme::IndividualV2,
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            Variant::OpenclipMbcl => Objective::Mbcl,
            Variant::FastclipV0 => Objective::Global { scaled: false },
            Variant::Sogclr | Variant::FastclipV1 | Variant::FastclipV3 => Objective::Global { scaled: true },
            Variant::Isogclr | Variant::FastclipV2 => Objective::Individual,
        }
    }

    pub fn default_gamma_kind(self) -> GammaKind {
        match self {
            Variant::Sogclr | Variant::Isogclr | Variant::OpenclipMbcl => GammaKind::Constant,
            _ => GammaKind::Cosine,
        }
    }

    pub fn default_tau_init(self) -> f64 {
        match self {
            Variant::OpenclipMbcl | Variant::FastclipV3 => 0.07,
            _ => 0.03,
        }
    }
}

/// How the b-part of the model gradient reaches its owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// `fastclip` unless the variant keeps no `u` estimators.
    Auto,
    /// All_Gather `u` (and per-pair τ) and recombine locally.
    Fastclip,
    /// Reduce_Scatter per-row feature cotangents.
    OpenclipRs,
}

/// Deterministic mixing of `(seed, stream, epoch)` into one RNG seed.
fn stream_seed(seed: u64, stream: usize, epoch: u64) -> u64 {
    let mut z = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [stream as u64, epoch] {
        z = z.wrapping_add(v.wrapping_mul(0xbf58_476d_1ce4_e5b9)).wrapping_add(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        z = z.wrapping_mul(0xd6e8_feb8_6659_fd93);
        z ^= z >> 29;
    }
    z
}

/// Batch sampler over `k_max` micro-streams.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSampler {
    n: usize,
    k_max: usize,
    workers: usize,
    local_batch: usize,
    seed: u64,
}

/// Per-epoch stream permutations.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub epoch: u64,
    perms: Vec<Vec<usize>>,
}

impl StreamSampler {
    pub fn new(n: usize, k_max: usize, workers: usize, local_batch: usize, seed: u64) -> Result<Self> {
        if k_max == 0 || !n.is_multiple_of(k_max) {
            return Err(Error::config("data.n", format!("{n} pairs do not split into {k_max} streams")));
        }
        if workers == 0 || !k_max.is_multiple_of(workers) {
            return Err(Error::config("fabric.workers", format!("must divide data.k_max = {k_max}")));
        }
        let per = k_max / workers;
        if local_batch == 0 || !local_batch.is_multiple_of(per) {
            return Err(Error::config("fabric.batch", format!("must be a positive multiple of {per}")));
        }
        let stream_len = n / k_max;
        let take = local_batch / per;
        if take > stream_len || !stream_len.is_multiple_of(take) {
            return Err(Error::config(
                "fabric.batch",
                format!("per-stream draw of {take} does not tile streams of {stream_len}"),
            ));
        }
        Ok(Self {
            n,
            k_max,
            workers,
            local_batch,
            seed,
        })
    }

    pub fn iters_per_epoch(&self) -> u64 {
        (self.n / (self.local_batch * self.workers)) as u64
    }

    fn per_stream(&self) -> usize {
        self.local_batch / (self.k_max / self.workers)
    }

    pub fn plan(&self, epoch: u64) -> EpochPlan {
        let len = self.n / self.k_max;
        let perms = (0..self.k_max)
            .map(|s| {
                let mut p: Vec<usize> = (s * len..(s + 1) * len).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(self.seed, s, epoch)));
                p
            })
            .collect();
        EpochPlan { epoch, perms }
    }

    /// Indices of worker `worker`'s batch at iteration `iter` of the plan's epoch.
    pub fn local_batch(&self, plan: &EpochPlan, worker: usize, iter: u64) -> Result<Vec<usize>> {
        if worker >= self.workers || iter >= self.iters_per_epoch() {
            return Err(Error::Shape(format!("no batch for worker {worker} at iteration {iter}")));
        }
        let per = self.k_max / self.workers;
        let take = self.per_stream();
        let start = iter as usize * take;
        Ok((worker * per..(worker + 1) * per)
            .flat_map(|s| plan.perms[s][start..start + take].iter().copied())
            .collect())
    }
}

/// Retrieval recall at rank 1 in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub r1_i2t: f64,
    pub r1_t2i: f64,
}

/// R@1 with ties resolved to the lowest index.
pub fn evaluate_retrieval(e1: ArrayView2<f64>, e2: ArrayView2<f64>) -> Result<Retrieval> {
    let m = e1.nrows();
    if m < 2 || e2.nrows() != m {
        return Err(Error::Shape(format!("retrieval needs matching sets of at least 2, got {m}")));
    }
    let s = loss::pairwise_similarity(e1, e2)?;
    let argmax = |f: &dyn Fn(usize) -> f64| {
        (1..m).fold(0, |best, j| if f(j) > f(best) { j } else { best })
    };
    let mut hits = (0usize, 0usize);
    for i in 0..m {
        if argmax(&|j| s.get(i, j)) == i {
            hits.0 += 1;
        }
        if argmax(&|j| s.get(j, i)) == i {
            hits.1 += 1;
        }
    }
    Ok(Retrieval {
        r1_i2t: hits.0 as f64 / m as f64,
        r1_t2i: hits.1 as f64 / m as f64,
    })
}

/// Cumulative ledger elements per phase, in [`Phase::ALL`] order minus `Other`.
pub const LEDGER_PHASES: [Phase; 6] = [
    Phase::FeatureGather,
    Phase::UGather,
    Phase::TauGather,
    Phase::RsGrad,
    Phase::GradReduce,
    Phase::TauReduce,
];

/// One metrics row, written after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epoch: u64,
    pub iter: u64,
    pub probe_loss: f64,
    pub r1_i2t: f64,
    pub r1_t2i: f64,
    pub tau: f64,
    pub tau_q10: f64,
    pub tau_q50: f64,
    pub tau_q90: f64,
    pub gamma: f64,
    pub lr: f64,
    pub ledger: [u64; 6],
}

/// What one step produced, for equivalence harnesses.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iter: u64,
    pub gamma: f64,
    pub lr: f64,
    pub tau: f64,
    pub reduced_grad: Vec<f64>,
    /// Temperature gradient used this step, if the scheme learns τ.
    pub tau_grad: Option<TauGrad>,
    pub params: Vec<f64>,
}

/// Everything needed to resume bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u64,
    pub iter: u64,
    pub model: ModelCheckpoint,
    pub optim: OptimState,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub temp: TempState,
    pub tau_decay: TauLrDecay,
    pub ledger: CommLedger,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Debug, Clone)]
struct Replica {
    model: TwoTower,
    opt: OptimState,
}

/// A worker's a-part cotangents and its reduce-scatter payload.
type WorkerRs = (Cotangents, (Vec<f64>, Vec<f64>));

struct WorkerForward {
    x1: Array2<f64>,
    x2: Array2<f64>,
    e1: Array2<f64>,
    e2: Array2<f64>,
    tape1: ForwardTape,
    tape2: ForwardTape,
}

pub struct Trainer {
    cfg: RunConfig,
    data: PairDataset,
    replicas: Vec<Replica>,
    u: UTable,
    temp: TempState,
    tau_decay: TauLrDecay,
    fabric: Fabric,
    sampler: StreamSampler,
    gamma: GammaSchedule,
    lr: OuterLrSchedule,
    eps: EpsilonSchedule,
    strategy: Strategy,
    epoch: u64,
    iter: u64,
    plan: Option<EpochPlan>,
}

fn flatten_pairs(v: &[(f64, f64)]) -> Vec<f64> {
    v.iter().flat_map(|&(a, b)| [a, b]).collect()
}

fn unflatten_pairs(v: &[f64]) -> Vec<(f64, f64)> {
    v.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: PairDataset) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.data.n;
        if data.n_train() != n {
            return Err(Error::config(
                "data.n",
                format!("dataset holds {} training pairs, config says {n}", data.n_train()),
            ));
        }
        let k = cfg.fabric.workers;
        let image = TowerSpec {
            d_in: data.d_img(),
            d_out: cfg.model.embed_dim,
            arch: cfg.model.arch(),
        };
        let text = TowerSpec {
            d_in: data.d_txt(),
            ..image
        };
        let model = TwoTower::init(image, text, cfg.run.seed)?;
        let opt = OptimState::new(model.param_count(), cfg.optim.hyper(), model.groups());
        let partition = Partition::new(n, k)?;
        let a = &cfg.algo;
        let temp = TempState::new(cfg.algo.variant.temp_scheme(), cfg.tau_init(), a.tau0, a.rho, partition)?;
        let tau_decay = TauLrDecay {
            threshold: a.tau_decay_threshold,
            factor: a.tau_decay_factor,
            latched: false,
        };
        Self::assemble(cfg, data, model, opt, UTable::new(partition), temp, tau_decay, CommLedger::default(), 0, 0)
    }

    pub fn resume(ck: Checkpoint, data: PairDataset) -> Result<Self> {
        ck.config.validate()?;
        let model = TwoTower::from_checkpoint(&ck.model)?;
        let partition = Partition::new(ck.config.data.n, ck.config.fabric.workers)?;
        let u = UTable::from_values(partition, &ck.u1, &ck.u2)?;
        Self::assemble(
            ck.config, data, model, ck.optim, u, ck.temp, ck.tau_decay, ck.ledger, ck.epoch, ck.iter,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: RunConfig,
        data: PairDataset,
        model: TwoTower,
        opt: OptimState,
        u: UTable,
        temp: TempState,
        tau_decay: TauLrDecay,
        ledger: CommLedger,
        epoch: u64,
        iter: u64,
    ) -> Result<Self> {
        let k = cfg.fabric.workers;
        let sampler = StreamSampler::new(cfg.data.n, cfg.data.k_max, k, cfg.fabric.batch, cfg.run.seed)?;
        let ipe = sampler.iters_per_epoch();
        let gamma = match cfg.gamma_kind() {
            GammaKind::Constant => GammaSchedule::constant(cfg.algo.gamma),
            GammaKind::Cosine => GammaSchedule::cosine(cfg.algo.gamma_min, cfg.gamma_decay_epochs(), ipe),
        };
        gamma.validate()?;
        let lr = OuterLrSchedule {
            peak_lr: cfg.optim.lr,
            min_lr: cfg.optim.min_lr,
            warmup_iters: cfg.optim.warmup_iters,
            total_iters: (cfg.run.epochs * ipe).max(cfg.optim.warmup_iters + 1),
        };
        let eps = EpsilonSchedule {
            eps_initial: cfg.algo.eps,
            eps_late: cfg.algo.eps_late,
            switch_epoch: cfg.algo.eps_switch_epoch,
        };
        let mut fabric = Fabric::new(k)?;
        *fabric.ledger_mut() = ledger;
        let strategy = cfg.strategy();
        Ok(Self {
            replicas: vec![Replica { model, opt }; k],
            data,
            u,
            temp,
            tau_decay,
            fabric,
            sampler,
            gamma,
            lr,
            eps,
            strategy,
            epoch,
            iter,
            plan: None,
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn iters_per_epoch(&self) -> u64 {
        self.sampler.iters_per_epoch()
    }

    pub fn model(&self) -> &TwoTower {
        &self.replicas[0].model
    }

    pub fn temp(&self) -> &TempState {
        &self.temp
    }

    pub fn temp_mut(&mut self) -> &mut TempState {
        &mut self.temp
    }

    pub fn u_table(&self) -> &UTable {
        &self.u
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn dataset(&self) -> &PairDataset {
        &self.data
    }

    pub fn sampler(&self) -> &StreamSampler {
        &self.sampler
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Parameter vectors of every replica.
    pub fn replica_params(&self) -> Vec<Vec<f64>> {
        self.replicas.iter().map(|r| r.model.to_flat()).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            iter: self.iter,
            model: self.replicas[0].model.checkpoint(),
            optim: self.replicas[0].opt.clone(),
            u1: self.u.u1(),
            u2: self.u.u2(),
            temp: self.temp.clone(),
            tau_decay: self.tau_decay,
            ledger: self.fabric.ledger().clone(),
        }
    }

    fn exec(&self) -> Exec {
        self.cfg.fabric.exec
    }

    fn rows(&self, w: usize) -> Range<usize> {
        let bl = self.cfg.fabric.batch;
        w * bl..(w + 1) * bl
    }

    /// One iteration across all workers.
    pub fn step(&mut self) -> Result<StepReport> {
        let ipe = self.sampler.iters_per_epoch();
        let t = self.iter;
        let epoch = t / ipe;
        if self.plan.as_ref().map(|p| p.epoch) != Some(epoch) {
            self.plan = Some(self.sampler.plan(epoch));
        }
        let plan = self.plan.as_ref().expect("plan set above");
        let k = self.cfg.fabric.workers;
        let bl = self.cfg.fabric.batch;
        let b = k * bl;
        let d = self.cfg.model.embed_dim;
        let gamma = gamma_at(&self.gamma, t);
        let lr = lr_at(&self.lr, t);
        let eps = self.eps.at_epoch(epoch);
        let exec = self.exec();
        let objective = self.cfg.algo.variant.objective();
        let scheme = self.temp.scheme;
        let tau0 = self.temp.tau0;
        let rho = self.temp.rho;

        let batches = (0..k)
            .map(|w| self.sampler.local_batch(plan, w, t % ipe))
            .collect::<Result<Vec<_>>>()?;

        // Forward pass on every worker's replica.
        let (data, replicas) = (&self.data, &self.replicas);
        let fwd: Vec<WorkerForward> = par::try_map_indexed(exec, k, |w| {
            let (x1, x2) = data.rows(&batches[w]);
            let m = &replicas[w].model;
            let (e1, tape1) = m.image.forward(x1.view())?;
            let (e2, tape2) = m.text.forward(x2.view())?;
            Ok::<_, Error>(WorkerForward { x1, x2, e1, e2, tape1, tape2 })
        })?;

        let p1: Vec<&[f64]> = fwd.iter().map(|f| f.e1.as_slice().expect("standard layout")).collect();
        let p2: Vec<&[f64]> = fwd.iter().map(|f| f.e2.as_slice().expect("standard layout")).collect();
        let g1 = self.fabric.all_gather(Phase::FeatureGather, &p1)?;
        let g2 = self.fabric.all_gather(Phase::FeatureGather, &p2)?;
        let shape = |v: Vec<f64>| Array2::from_shape_vec((b, d), v).map_err(|e| Error::Shape(e.to_string()));
        let gathered = Gathered::new(shape(g1)?, shape(g2)?)?;

        let local_taus = batches
            .iter()
            .map(|idx| self.temp.snapshot(idx))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Range<usize>> = (0..k).map(|w| self.rows(w)).collect();
        let inner: Vec<Vec<(f64, f64)>> = par::try_map_indexed(exec, k, |w| {
            batch_inner_means(&gathered.sims, rows[w].clone(), &local_taus[w])
        })?;

        // Moving-average update on each owner's shard.
        let local_u: Vec<Vec<(f64, f64)>> = if objective == Objective::Mbcl {
            inner.clone()
        } else {
            for (w, shard) in self.u.shards_mut().iter_mut().enumerate() {
                for (&idx, &(a, c)) in batches[w].iter().zip(&inner[w]) {
                    shard.update(idx, a, c, gamma, t)?;
                }
            }
            (0..k)
                .map(|w| self.u.shard(w).fresh(&batches[w], t))
                .collect::<Result<Vec<_>>>()?
        };

        let tau_now = self.temp.global_tau();
        let coeffs_for = |w: usize, u: &[(f64, f64)], taus: &[(f64, f64)], offset: usize| -> Result<RowCoeffs> {
            match objective {
                Objective::Mbcl => RowCoeffs::mbcl(tau_now.expect("global scheme"), &inner[w], b, offset),
                Objective::Global { scaled } => RowCoeffs::global(tau_now.expect("global scheme"), u, eps, scaled, offset),
                Objective::Individual => RowCoeffs::individual(taus, u, eps, tau0, offset),
            }
        };

        let cots: Vec<Cotangents> = match self.strategy {
            Strategy::Fastclip | Strategy::Auto => {
                let pu: Vec<Vec<f64>> = local_u.iter().map(|u| flatten_pairs(u)).collect();
                let all_u = unflatten_pairs(&self.fabric.all_gather(Phase::UGather, &pu)?);
                let all_taus = if objective == Objective::Individual {
                    let pt: Vec<Vec<f64>> = local_taus.iter().map(|t| flatten_pairs(t)).collect();
                    unflatten_pairs(&self.fabric.all_gather(Phase::TauGather, &pt)?)
                } else {
                    Vec::new()
                };
                let coeffs = coeffs_for(0, &all_u, &all_taus, 0)?;
                par::try_map_indexed(exec, k, |w| engine::fastclip_cotangents(&gathered, rows[w].clone(), &coeffs))?
            }
            Strategy::OpenclipRs => {
                let coeffs = (0..k)
                    .map(|w| coeffs_for(w, &local_u[w], &local_taus[w], rows[w].start))
                    .collect::<Result<Vec<_>>>()?;
                let parts: Vec<WorkerRs> = par::try_map_indexed(exec, k, |w| {
                    let a = engine::a_part(&gathered, rows[w].clone(), &coeffs[w])?;
                    let p = engine::rs_payload(&gathered, rows[w].clone(), &coeffs[w], k)?;
                    Ok::<_, Error>((a, p))
                })?;
                let img: Vec<&[f64]> = parts.iter().map(|p| p.1 .0.as_slice()).collect();
                let txt: Vec<&[f64]> = parts.iter().map(|p| p.1 .1.as_slice()).collect();
                let s1 = self.fabric.reduce_scatter_mean(Phase::RsGrad, &img)?;
                let s2 = self.fabric.reduce_scatter_mean(Phase::RsGrad, &txt)?;
                parts
                    .into_iter()
                    .zip(s1.into_iter().zip(s2))
                    .map(|((mut a, _), (x, y))| {
                        a.add_assign(&engine::rs_block(x, y, d)?)?;
                        Ok(a)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };

        let packets: Vec<GradPacket> = par::try_map_indexed(exec, k, |w| {
            let f = &fwd[w];
            GradPacket::from_cotangents(&replicas[w].model, f.x1.view(), f.x2.view(), &f.tape1, &f.tape2, &cots[w])
        })?;
        let grads: Vec<&[f64]> = packets.iter().map(|p| p.grad.as_slice()).collect();
        let reduced = self.fabric.all_reduce_mean(Phase::GradReduce, &grads)?;

        // Temperature gradient from the same gathered quantities.
        let tau_grad = match scheme {
            TempScheme::Constant => None,
            TempScheme::GlobalV0 | TempScheme::GlobalV3 => {
                let tau = tau_now.expect("global scheme");
                let per: Vec<Vec<f64>> = (0..k)
                    .map(|w| {
                        let r = rows[w].clone();
                        let v = match (scheme, objective) {
                            (TempScheme::GlobalV0, Objective::Mbcl) => {
                                grad_tau_v0(&gathered.sims, r, &inner[w], tau, loss::mbcl_constant(b))
                            }
                            (TempScheme::GlobalV0, _) => grad_tau_v0(&gathered.sims, r, &local_u[w], tau, eps),
                            _ => grad_tau_v3(&gathered.sims, r, &local_u[w], tau, eps, rho),
                        }?;
                        Ok(vec![v])
                    })
                    .collect::<Result<_>>()?;
                let g = self.fabric.all_reduce_mean(Phase::TauReduce, &per)?;
                Some(TauGrad::Global(g[0]))
            }
            TempScheme::IndividualV2 => {
                let mut entries = Vec::with_capacity(b);
                for w in 0..k {
                    let TauGrad::PerPair(e) = grad_tau_v2_local(
                        &gathered.sims,
                        rows[w].clone(),
                        &batches[w],
                        &local_u[w],
                        &local_taus[w],
                        eps,
                        rho,
                        self.cfg.data.n,
                    )?
                    else {
                        unreachable!("per-pair gradient")
                    };
                    entries.extend(e);
                }
                Some(TauGrad::PerPair(entries))
            }
        };

        // Every replica takes the same step from the same reduced gradient.
        let kind = self.cfg.optim.kind;
        let replicas = &self.replicas;
        let stepped: Vec<(Vec<f64>, OptimState)> = par::try_map_indexed(exec, k, |w| {
            let mut p = replicas[w].model.to_flat();
            let mut o = replicas[w].opt.clone();
            optimizer_step(kind, &mut o, &mut p, &reduced, lr)?;
            Ok::<_, Error>((p, o))
        })?;
        for (r, (p, o)) in self.replicas.iter_mut().zip(stepped) {
            r.model.set_flat(&p)?;
            r.opt = o;
        }
        let params = self.replicas[0].model.to_flat();
        if let Some(w) = (1..k).find(|&w| self.replicas[w].model.to_flat() != params) {
            return Err(Error::Invariant(format!("replica {w} diverged from replica 0")));
        }
        if self.replicas[0].opt.step != t + 1 {
            return Err(Error::Optimizer("optimizer step count out of sync with iteration".into()));
        }

        if let Some(g) = &tau_grad {
            let mult = if scheme.is_individual() {
                1.0
            } else {
                self.tau_decay.observe(self.temp.representative())
            };
            let hyper = AdamHyper {
                weight_decay: 0.0,
                ..self.cfg.optim.hyper()
            };
            temperature_step(&hyper, &mut self.temp, g, self.cfg.algo.tau_lr * mult)?;
            if self.temp.min_value() < tau0 {
                return Err(Error::Invariant("temperature fell below its floor".into()));
            }
        }

        self.iter += 1;
        self.epoch = self.iter / ipe;
        Ok(StepReport {
            iter: t,
            gamma,
            lr,
            tau: self.temp.representative(),
            reduced_grad: reduced,
            tau_grad,
            params,
        })
    }

    /// Runs the rest of the current epoch and evaluates.
    pub fn run_epoch(&mut self) -> Result<TrainMetrics> {
        self.run_epoch_with(|_| {})
    }

    pub fn run_epoch_with<F: FnMut(&StepReport)>(&mut self, mut on_step: F) -> Result<TrainMetrics> {
        let ipe = self.sampler.iters_per_epoch();
        let end = (self.epoch + 1) * ipe;
        let mut last = (gamma_at(&self.gamma, self.iter), lr_at(&self.lr, self.iter));
        while self.iter < end {
            let r = self.step()?;
            last = (r.gamma, r.lr);
            on_step(&r);
        }
        self.metrics(self.epoch, last.0, last.1)
    }

    /// Exact probe loss, retrieval and temperature summary at the current parameters.
    pub fn metrics(&self, epoch: u64, gamma: f64, lr: f64) -> Result<TrainMetrics> {
        let (px, pt) = self.data.probe_views();
        let model = &self.replicas[0].model;
        let (e1, _) = model.image.forward(px)?;
        let (e2, _) = model.text.forward(pt)?;
        let tau = self.temp.representative();
        let eps = self.eps.at_epoch(epoch);
        let probe_loss = match self.temp.scheme {
            TempScheme::GlobalV3 => loss::eval_rgclg(e1.view(), e2.view(), tau, eps, self.temp.rho)?,
            _ => loss::eval_gcl_with(e1.view(), e2.view(), tau, eps, self.exec())?,
        };
        let r = evaluate_retrieval(e1.view(), e2.view())?;
        let rep = self.fabric.ledger_report();
        let mut ledger = [0u64; 6];
        for (slot, ph) in ledger.iter_mut().zip(LEDGER_PHASES) {
            *slot = rep.phase_elements(ph);
        }
        Ok(TrainMetrics {
            epoch,
            iter: self.iter,
            probe_loss,
            r1_i2t: r.r1_i2t,
            r1_t2i: r.r1_t2i,
            tau,
            tau_q10: self.temp.quantile(0.1),
            tau_q50: self.temp.quantile(0.5),
            tau_q90: self.temp.quantile(0.9),
            gamma,
            lr,
            ledger,
        })
    }
}
