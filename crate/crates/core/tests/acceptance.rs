//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#![allow(clippy::single_range_in_vec_init)]

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fastclip_core::config::RunConfig;
use fastclip_core::data::generate_dataset;
use fastclip_core::dist::Phase;
use fastclip_core::engine::TauGrad;
use fastclip_core::gradcheck::{self, TOLERANCE};
use fastclip_core::loss::exact_inner_means;
use fastclip_core::optim::{adamw_step, lamb_step, temperature_step, AdamHyper, OptimState};
use fastclip_core::par::Exec;
use fastclip_core::run::{self, CommComparison, RunOptions};
use fastclip_core::schedule::{gamma_at, lr_at, GammaKind, GammaSchedule, OuterLrSchedule};
use fastclip_core::state::{Partition, TempScheme, TempState};
use fastclip_core::trainer::{StepReport, Trainer, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c1_gradient_oracles() -> Outcome {
    let start = Instant::now();
    let results = gradcheck::run_suite(0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("non-empty suite");
    for r in &results {
        ensure(r.passed, format!("{} max rel err {:.3e} > {TOLERANCE:e}", r.name, r.max_rel_err))?;
    }
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} checks, worst {} at {:.2e}, {:.2?}",
        results.len(),
        worst.name,
        worst.max_rel_err,
        elapsed
    ))
}

fn trajectory(variant: Variant, workers: usize, global_batch: usize, epochs: u64) -> Result<Vec<StepReport>, String> {
    let mut c = RunConfig::default();
    c.data.n = 256;
    c.algo.variant = variant;
    c.fabric.workers = workers;
    c.fabric.batch = global_batch / workers;
    c.run.epochs = epochs;
    c.optim.warmup_iters = 10;
    c.algo.tau_lr = 1e-3;
    let data = generate_dataset(&c.data.spec()).map_err(|e| e.to_string())?;
    let mut tr = Trainer::new(c, data).map_err(|e| e.to_string())?;
    let mut steps = Vec::new();
    for _ in 0..epochs {
        tr.run_epoch_with(|r| steps.push(r.clone())).map_err(|e| e.to_string())?;
    }
    Ok(steps)
}

fn c2_distributed_serial() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut steps = 0;
    for variant in [Variant::FastclipV3, Variant::FastclipV2] {
        let reference = trajectory(variant, 1, 32, 5)?;
        for k in [2, 4, 8] {
            let run = trajectory(variant, k, 32, 5)?;
            ensure(run.len() == reference.len(), format!("K={k}: step count differs"))?;
            for (a, b) in reference.iter().zip(&run) {
                let g = max_abs_diff(&a.reduced_grad, &b.reduced_grad);
                let p = max_abs_diff(&a.params, &b.params);
                worst = worst.max(g).max(p);
                ensure(
                    g <= 1e-10 && p <= 1e-10,
                    format!("{} K={k} step {}: grad {g:.2e}, params {p:.2e}", variant.name(), b.iter),
                )?;
            }
        }
        steps += reference.len();
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("v3 and v2, {steps} steps per K, worst gap {worst:.2e}, {elapsed:.2?}"))
}

fn c3_reduction_strategies() -> Outcome {
    let mut parts = Vec::new();
    for d in [8, 16, 64] {
        let c = run::compare_comm(4, 8, d, 0).map_err(|e| e.to_string())?;
        let u = CommComparison::phase(&c.fastclip, Phase::UGather);
        let rs = CommComparison::phase(&c.openclip_rs, Phase::RsGrad);
        ensure(c.grad_gap <= 1e-12, format!("d={d}: gradient gap {:.2e}", c.grad_gap))?;
        ensure(u > 0 && u * d as u64 == rs, format!("d={d}: u-gather {u} vs rs-grad {rs}"))?;
        parts.push(format!("d={d} {u}:{rs} gap {:.1e}", c.grad_gap));
    }
    Ok(parts.join(", "))
}

fn c4_schedules() -> Outcome {
    let ipe = 10;
    let s = GammaSchedule::cosine(0.2, 18, ipe);
    let checks = [(0, 1.0), (9 * ipe, 0.6), (18 * ipe, 0.2), (40 * ipe + 3, 0.2)];
    for (t, want) in checks {
        let got = gamma_at(&s, t);
        ensure((got - want).abs() <= 1e-12, format!("gamma_at({t}) = {got}, want {want}"))?;
    }
    let lr = OuterLrSchedule {
        peak_lr: 2e-4,
        min_lr: 4e-5,
        warmup_iters: 100,
        total_iters: 1100,
    };
    for (t, want) in [(0, 0.0), (100, 2e-4), (600, 1.2e-4)] {
        let got = lr_at(&lr, t);
        ensure(got == want, format!("lr_at({t}) = {got:e}, want {want:e}"))?;
    }
    Ok("gamma 1.0/0.6/0.2 and lr 0/2e-4/1.2e-4 reproduced".into())
}

fn c5_u_tracking() -> Outcome {
    let gamma = 0.6;
    let mut c = RunConfig::default();
    c.data.n = 16;
    c.data.probe = 4;
    c.data.k_max = 1;
    c.algo.variant = Variant::FastclipV1;
    c.algo.gamma_kind = Some(GammaKind::Constant);
    c.algo.gamma = gamma;
    c.algo.tau_init = Some(0.5);
    c.optim.lr = 0.0;
    c.optim.min_lr = 0.0;
    c.fabric.workers = 1;
    c.fabric.batch = 16;
    c.run.epochs = 20;
    let data = generate_dataset(&c.data.spec()).map_err(|e| e.to_string())?;
    let (x, t) = data.rows(&(0..16).collect::<Vec<_>>());
    let mut tr = Trainer::new(c, data).map_err(|e| e.to_string())?;
    let (e1, _) = tr.model().image.forward(x.view()).map_err(|e| e.to_string())?;
    let (e2, _) = tr.model().text.forward(t.view()).map_err(|e| e.to_string())?;
    let taus = vec![0.5; 16];
    let (g1, g2) = exact_inner_means(e1.view(), e2.view(), &taus, &taus, Exec::Sequential).map_err(|e| e.to_string())?;
    let err0: Vec<f64> = g1.iter().chain(&g2).map(|g| g.abs()).collect();
    let mut worst = 0.0f64;
    for step in 1..=20 {
        tr.step().map_err(|e| e.to_string())?;
        let (u1, u2) = (tr.u_table().u1(), tr.u_table().u2());
        let factor = (1.0 - gamma).powi(step);
        for (k, (u, g)) in u1.iter().chain(&u2).zip(g1.iter().chain(&g2)).enumerate() {
            let dev = ((u - g).abs() - factor * err0[k]).abs();
            worst = worst.max(dev);
            ensure(dev <= 1e-12, format!("step {step}, entry {k}: |u-g| off by {dev:.2e}"))?;
        }
    }
    Ok(format!("20 steps, 32 estimators, worst deviation {worst:.2e}"))
}

fn c6_optimizers() -> Outcome {
    let hyper = |b1: f64, b2: f64, wd: f64| AdamHyper {
        beta1: b1,
        beta2: b2,
        eps: 1e-8,
        weight_decay: wd,
    };
    let mut s = OptimState::new(1, hyper(0.9, 0.999, 0.1), vec![]);
    let mut p = [1.0];
    adamw_step(&mut s, &mut p, &[0.0], 0.1).map_err(|e| e.to_string())?;
    ensure(p[0] == 0.99, format!("AdamW gave {}", p[0]))?;

    let mut s = OptimState::new(2, hyper(0.0, 0.0, 0.0), vec![0..2]);
    let mut p = [3.0, 4.0];
    lamb_step(&mut s, &mut p, &[1.0, 0.0], 0.1, false).map_err(|e| e.to_string())?;
    ensure(p == [2.5, 4.0], format!("LAMB gave {p:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = hyper(0.9, 0.98, 0.05);
    let groups = vec![0..5, 5..8];
    let mut sa = OptimState::new(8, h, groups.clone());
    let mut sl = OptimState::new(8, h, groups);
    let mut pa: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut pl = pa.clone();
    let mut gap = 0.0f64;
    for _ in 0..100 {
        let g: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        adamw_step(&mut sa, &mut pa, &g, 1e-2).map_err(|e| e.to_string())?;
        lamb_step(&mut sl, &mut pl, &g, 1e-2, true).map_err(|e| e.to_string())?;
        gap = gap.max(max_abs_diff(&pa, &pl));
    }
    ensure(gap <= 1e-15, format!("LAMB(α=1) vs AdamW gap {gap:e}"))?;

    let tau0 = 0.01;
    let part = Partition::new(8, 2).map_err(|e| e.to_string())?;
    let h = AdamHyper {
        weight_decay: 0.0,
        ..AdamHyper::default()
    };
    let mut lowest = f64::INFINITY;
    for scheme in [TempScheme::GlobalV0, TempScheme::GlobalV3, TempScheme::IndividualV2] {
        let mut t = TempState::new(scheme, 0.03, tau0, 6.5, part).map_err(|e| e.to_string())?;
        for _ in 0..2000 {
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let grad = if scheme.is_individual() {
                let entries = (0..3)
                    .map(|_| (rng.random_range(0..8), scale * rng.random_range(-1.0..1.0), scale * rng.random_range(-1.0..1.0)))
                    .collect();
                TauGrad::PerPair(entries)
            } else {
                TauGrad::Global(scale * rng.random_range(-1.0..1.0))
            };
            let lr = 10f64.powf(rng.random_range(-4.0..-1.0));
            temperature_step(&h, &mut t, &grad, lr).map_err(|e| e.to_string())?;
            let m = t.min_value();
            lowest = lowest.min(m);
            ensure(m >= tau0, format!("{scheme:?}: τ = {m} below floor"))?;
        }
    }
    Ok(format!("exact unit vectors, LAMB/AdamW gap {gap:.1e}, lowest fuzzed τ {lowest}"))
}

struct Final {
    r1: f64,
    loss: f64,
}

fn desk_run(variant: Variant, gamma: Option<GammaKind>, seed: u64) -> Result<Final, String> {
    let mut c = RunConfig::default();
    c.data.n = 1024;
    c.data.latent = 8;
    c.data.d_img = 16;
    c.data.d_txt = 16;
    c.data.seed = seed;
    c.algo.variant = variant;
    c.algo.gamma_kind = gamma;
    c.algo.gamma = 0.6;
    c.fabric.workers = 4;
    c.fabric.batch = 8;
    c.run.epochs = 50;
    c.run.seed = seed;
    let data = generate_dataset(&c.data.spec()).map_err(|e| e.to_string())?;
    let mut tr = Trainer::new(c, data).map_err(|e| e.to_string())?;
    let mut last = None;
    for _ in 0..50 {
        last = Some(tr.run_epoch().map_err(|e| e.to_string())?);
    }
    let m = last.expect("50 epochs");
    Ok(Final {
        r1: 0.5 * (m.r1_i2t + m.r1_t2i),
        loss: m.probe_loss,
    })
}

fn c7_directional() -> Outcome {
    let start = Instant::now();
    let (mut v1_r1, mut mb_r1, mut cos_loss, mut const_loss) = (vec![], vec![], vec![], vec![]);
    for seed in 0..3 {
        let cos = desk_run(Variant::FastclipV1, Some(GammaKind::Cosine), seed)?;
        let con = desk_run(Variant::FastclipV1, Some(GammaKind::Constant), seed)?;
        let mb = desk_run(Variant::OpenclipMbcl, None, seed)?;
        v1_r1.push(cos.r1);
        mb_r1.push(mb.r1);
        cos_loss.push(cos.loss);
        const_loss.push(con.loss);
    }
    let elapsed = start.elapsed();
    let (a1, a2) = (median(v1_r1), median(mb_r1));
    let (b1, b2) = (median(cos_loss), median(const_loss));
    let detail = format!(
        "(a) R@1 v1 {a1:.4} vs mbcl {a2:.4}; (b) GCL cosine {b1:.5} vs constant {b2:.5}; {elapsed:.1?}"
    );
    ensure(elapsed < Duration::from_secs(600), format!("took {elapsed:?}"))?;
    ensure(b1 <= b2, format!("(b) violated: {detail}"))?;
    ensure(a1 >= a2, format!("(a) violated: {detail}"))?;
    Ok(detail)
}

fn small_run_config(dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.n = 128;
    c.data.probe = 32;
    c.algo.variant = Variant::FastclipV3;
    c.fabric.workers = 4;
    c.fabric.batch = 8;
    c.optim.warmup_iters = 4;
    c.run.epochs = 2;
    c.run.out_dir = dir.to_string_lossy().into_owned();
    c
}

fn c8_determinism_resume() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, c) = (root.path().join("a"), root.path().join("b"), root.path().join("c"));
    let full = run::train(small_run_config(&a), RunOptions::default()).map_err(|e| e.to_string())?;
    run::train(small_run_config(&b), RunOptions::default()).map_err(|e| e.to_string())?;
    let ma = fs::read(a.join(run::METRICS_FILE)).map_err(|e| e.to_string())?;
    let mb = fs::read(b.join(run::METRICS_FILE)).map_err(|e| e.to_string())?;
    ensure(ma == mb, "repeated run produced different metrics bytes".into())?;

    run::train(small_run_config(&c), RunOptions { stop_after: Some(1) }).map_err(|e| e.to_string())?;
    let ck = run::read_checkpoint(&c.join(run::LATEST_CHECKPOINT)).map_err(|e| e.to_string())?;
    let resumed = run::resume(ck, None, RunOptions::default()).map_err(|e| e.to_string())?;
    let mut split = resumed.checkpoint;
    let mut whole = full.checkpoint;
    split.config.run.out_dir.clear();
    whole.config.run.out_dir.clear();
    ensure(split == whole, "split run checkpoint differs from the uninterrupted one".into())?;
    ensure(split.to_json() == whole.to_json(), "checkpoint JSON differs".into())?;
    let mc = fs::read(c.join(run::METRICS_FILE)).map_err(|e| e.to_string())?;
    ensure(mc == ma, "split run metrics differ".into())?;
    Ok(format!("{} metrics bytes identical, 1+1 epoch checkpoint equals 2-epoch one", ma.len()))
}

fn main() -> ExitCode {
    let criteria: [Check; 8] = [
        ("gradient oracles", c1_gradient_oracles),
        ("distributed-serial equivalence", c2_distributed_serial),
        ("reduction strategies and ledger ratio", c3_reduction_strategies),
        ("schedule anchors", c4_schedules),
        ("u contraction", c5_u_tracking),
        ("optimizer unit vectors", c6_optimizers),
        ("directional learning", c7_directional),
        ("determinism and resume", c8_determinism_resume),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
