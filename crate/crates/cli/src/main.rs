use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fastclip_core::config::RunConfig;
use fastclip_core::data::generate_dataset;
use fastclip_core::dist::Phase;
use fastclip_core::gradcheck::{self, TOLERANCE};
use fastclip_core::metrics::read_csv;
use fastclip_core::par::Exec;
use fastclip_core::report::render_svg;
use fastclip_core::run::{self, CommComparison, RunOptions};
use fastclip_core::trainer::{Variant, LEDGER_PHASES};
use fastclip_core::Error;

#[derive(Parser)]
#[command(name = "fastclip", version, about = "Contrastive training on a simulated data-parallel fabric")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic pair dataset described by the config.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train and write metrics, checkpoints and the ledger to the output directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `run.out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// `parallel` or `sequential`.
        #[arg(long)]
        exec: Option<String>,
        /// Continue from a checkpoint file; its embedded config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Run one step under both reduction strategies and compare traffic.
    CompareComm {
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every variant's gradients.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Plot a metrics file as SVG.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Defaults to the metrics path with an `.svg` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, Error> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.with_process_env()
}

fn parse_exec(s: &str) -> Result<Exec, Error> {
    match s {
        "parallel" => Ok(Exec::Parallel),
        "sequential" => Ok(Exec::Sequential),
        _ => Err(Error::config("fabric.exec", format!("unknown mode `{s}`"))),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData { config, out, seed, n } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            if let Some(n) = n {
                cfg.data.n = n;
            }
            let d = generate_dataset(&cfg.data.spec())?;
            d.write(&out)?;
            println!(
                "wrote {} pairs ({} train, {} probe) to {}",
                d.n_total(),
                d.n_train(),
                d.probe,
                out.display()
            );
        }
        Cmd::Train {
            config,
            variant,
            epochs,
            workers,
            batch,
            seed,
            out,
            exec,
            resume,
            stop_after,
        } => {
            let opts = RunOptions { stop_after };
            let outcome = if let Some(ck_path) = resume {
                let ck = run::read_checkpoint(&ck_path)?;
                run::resume(ck, epochs, opts)?
            } else {
                let mut cfg = load_config(config.as_ref())?;
                if let Some(v) = variant {
                    cfg.algo.variant = Variant::parse(&v)?;
                }
                if let Some(e) = epochs {
                    cfg.run.epochs = e;
                }
                if let Some(k) = workers {
                    cfg.fabric.workers = k;
                }
                if let Some(b) = batch {
                    cfg.fabric.batch = b;
                }
                if let Some(s) = seed {
                    cfg.run.seed = s;
                }
                if let Some(o) = out {
                    cfg.run.out_dir = o.to_string_lossy().into_owned();
                }
                if let Some(x) = exec {
                    cfg.fabric.exec = parse_exec(&x)?;
                }
                run::train(cfg, opts)?
            };
            if let Some(last) = outcome.rows.last() {
                println!(
                    "epoch {} loss {:.6} r1 {:.4}/{:.4} tau {:.4}",
                    last.epoch, last.probe_loss, last.r1_i2t, last.r1_t2i, last.tau
                );
            }
            println!("{} epochs written to {}", outcome.rows.len(), outcome.out_dir.display());
        }
        Cmd::CompareComm { workers, batch, dim, seed } => {
            let c = run::compare_comm(workers, batch, dim, seed)?;
            println!("phase,fastclip,openclip_rs");
            for (i, p) in LEDGER_PHASES.iter().enumerate() {
                println!("{p},{},{}", c.fastclip[i], c.openclip_rs[i]);
            }
            println!("grad gap = {:e}", c.grad_gap);
            let (a, b) = c.ratio();
            println!("{}:{} ratio = {a}:{b}", Phase::UGather, Phase::RsGrad);
            let u = CommComparison::phase(&c.fastclip, Phase::UGather);
            if u == 0 || c.grad_gap > 1e-12 {
                return Err(Failure::Check("strategies disagree".into()));
            }
        }
        Cmd::GradCheck { config } => {
            let cfg = load_config(config.as_ref())?;
            cfg.validate()?;
            let results = gradcheck::run_suite(cfg.run.seed)?;
            let mut failed = 0;
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!("{tag} {:<20} coords {:>3} max rel err {:.3e}", r.name, r.coords, r.max_rel_err);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} checks above {TOLERANCE:e}")));
            }
            println!("all {} checks within {TOLERANCE:e}", results.len());
        }
        Cmd::Report { metrics, out } => {
            let rows = read_csv(&metrics)?;
            let svg = render_svg(&rows)?;
            let out = out.unwrap_or_else(|| metrics.with_extension("svg"));
            std::fs::write(&out, svg).map_err(Error::from)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Io(_) | Error::Format(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
