//! Training driver that writes a run directory.
//!
//! Layout of `run.out_dir`:
//! - `config.toml`: the resolved configuration
//! - `metrics.csv`: one row per completed epoch, see [`crate::metrics`]
//! - `checkpoint-epoch-NNNN.json` every `run.checkpoint_every` epochs
//! - `checkpoint.json`: latest state, rewritten after every epoch
//! - `ledger.csv`: every collective call of the run so far

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ArchKind, RunConfig};
use crate::data::{generate_dataset, PairDataset};
use crate::dist::Phase;
use crate::error::Result;
use crate::metrics::MetricsWriter;
use crate::trainer::{Checkpoint, Strategy, TrainMetrics, Trainer, Variant, LEDGER_PHASES};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "checkpoint.json";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const CONFIG_FILE: &str = "config.toml";

pub fn checkpoint_name(epoch: u64) -> String {
    format!("checkpoint-epoch-{epoch:04}.json")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop once this many epochs are complete, even if `run.epochs` is larger.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    /// Rows written by this invocation.
    pub rows: Vec<TrainMetrics>,
    pub checkpoint: Checkpoint,
}

/// Reads `data.path` if set, otherwise generates the synthetic set.
pub fn load_dataset(cfg: &RunConfig) -> Result<PairDataset> {
    match &cfg.data.path {
        Some(p) => PairDataset::read(Path::new(p), cfg.data.probe),
        None => generate_dataset(&cfg.data.spec()),
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, ck.to_json())?;
    Ok(())
}

/// Fresh run. An existing `metrics.csv` in the output directory is replaced.
pub fn train(cfg: RunConfig, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let trainer = Trainer::new(cfg, data)?;
    let out = PathBuf::from(&trainer.config().run.out_dir);
    fs::create_dir_all(&out)?;
    let metrics = out.join(METRICS_FILE);
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    fs::write(out.join(CONFIG_FILE), trainer.config().to_toml())?;
    drive(trainer, &out, opts)
}

/// Continues from a checkpoint, appending to the metrics file of its output
/// directory. `epochs` extends the planned run length when given.
pub fn resume(ck: Checkpoint, epochs: Option<u64>, opts: RunOptions) -> Result<RunOutcome> {
    let mut ck = ck;
    if let Some(e) = epochs {
        ck.config.run.epochs = e;
    }
    let data = load_dataset(&ck.config)?;
    let trainer = Trainer::resume(ck, data)?;
    let out = PathBuf::from(&trainer.config().run.out_dir);
    fs::create_dir_all(&out)?;
    drive(trainer, &out, opts)
}

fn drive(mut trainer: Trainer, out: &Path, opts: RunOptions) -> Result<RunOutcome> {
    let mut writer = MetricsWriter::open(&out.join(METRICS_FILE))?;
    let target = match opts.stop_after {
        Some(s) => s.min(trainer.config().run.epochs),
        None => trainer.config().run.epochs,
    };
    let every = trainer.config().run.checkpoint_every;
    let mut rows = Vec::new();
    while trainer.epoch() < target {
        let m = trainer.run_epoch()?;
        writer.append(&m)?;
        rows.push(m);
        let done = trainer.epoch();
        let ck = trainer.checkpoint();
        if every > 0 && (done.is_multiple_of(every) || done == target) {
            write_checkpoint(&out.join(checkpoint_name(done)), &ck)?;
        }
        write_checkpoint(&out.join(LATEST_CHECKPOINT), &ck)?;
    }
    let checkpoint = trainer.checkpoint();
    write_checkpoint(&out.join(LATEST_CHECKPOINT), &checkpoint)?;
    fs::write(out.join(LEDGER_FILE), trainer.fabric().ledger().export())?;
    Ok(RunOutcome {
        out_dir: out.to_path_buf(),
        rows,
        checkpoint,
    })
}

/// One iteration under each reduction strategy from identical state.
#[derive(Debug, Clone, PartialEq)]
pub struct CommComparison {
    pub workers: usize,
    pub batch: usize,
    pub dim: usize,
    /// Per-iteration elements by phase, in [`LEDGER_PHASES`] order.
    pub fastclip: [u64; 6],
    pub openclip_rs: [u64; 6],
    /// Largest coordinate gap between the two reduced gradients.
    pub grad_gap: f64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl CommComparison {
    pub fn phase(which: &[u64; 6], p: Phase) -> u64 {
        LEDGER_PHASES.iter().position(|&q| q == p).map_or(0, |i| which[i])
    }

    /// `u-gather` of the fastclip strategy against `rs-grad` of the other, in lowest terms.
    pub fn ratio(&self) -> (u64, u64) {
        let u = Self::phase(&self.fastclip, Phase::UGather);
        let rs = Self::phase(&self.openclip_rs, Phase::RsGrad);
        let g = gcd(u, rs).max(1);
        (u / g, rs / g)
    }
}

pub fn compare_comm(workers: usize, batch: usize, dim: usize, seed: u64) -> Result<CommComparison> {
    let mut c = RunConfig::default();
    c.data.k_max = workers;
    c.data.n = workers * batch * 2;
    c.data.probe = 16;
    c.data.seed = seed;
    c.model.arch = ArchKind::Linear;
    c.model.embed_dim = dim;
    c.algo.variant = Variant::FastclipV1;
    c.fabric.workers = workers;
    c.fabric.batch = batch;
    c.run.seed = seed;
    c.run.epochs = 1;
    let data = generate_dataset(&c.data.spec())?;
    let mut out = Vec::new();
    for strategy in [Strategy::Fastclip, Strategy::OpenclipRs] {
        let mut cfg = c.clone();
        cfg.algo.strategy = strategy;
        let mut tr = Trainer::new(cfg, data.clone())?;
        let r = tr.step()?;
        let rep = tr.fabric().ledger_report();
        let mut per = [0u64; 6];
        for (slot, p) in per.iter_mut().zip(LEDGER_PHASES) {
            *slot = rep.phase_elements(p);
        }
        out.push((per, r.reduced_grad));
    }
    let grad_gap = out[0]
        .1
        .iter()
        .zip(&out[1].1)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(CommComparison {
        workers,
        batch,
        dim,
        fastclip: out[0].0,
        openclip_rs: out[1].0,
        grad_gap,
    })
}
