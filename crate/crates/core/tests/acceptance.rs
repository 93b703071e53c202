//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfattack::attacks::{
    fgsm_sf, pgd_sf, random_attack, AttackConfig, AttackKind, Domain, RandomMode, StepSize,
    TargetMask,
};
use sfattack::estimators::{
    epe, load_weights, save_weights, train_tiny, zero_flow_epe, Estimator, NegatedPositions,
    OtEstimator, TinyEstimator, TinyNetWeights,
};
use sfattack::harness::{
    gradcheck_suite, relative_degradation, run_experiment, GridEntry, Report, RunOptions,
};
use sfattack::pointcloud::{load_ply, load_sfp, save_ply, save_sfp, FlowField, PointCloud, ScenePair};
use sfattack::synthgen::{make_dataset, make_pair, MotionSampler, MotionSpec};
use sfattack::Error;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn pairs(sampler: &MotionSampler, count: usize, seed: u64) -> Vec<ScenePair> {
    make_dataset(count, sampler, seed)
        .expect("dataset")
        .into_iter()
        .map(|e| e.pair)
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let suite = gradcheck_suite(2024, 20).map_err(|e| e.to_string())?;
    let worst = suite
        .entries
        .iter()
        .map(|e| e.report.max_rel_err)
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    check(suite.entries.len() == 40, "expected 40 checks")?;
    check(suite.pass, format!("worst relative error {worst:e}"))?;
    check(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!("40 checks, worst rel err {worst:.2e}, {elapsed:.1?}"))
}

fn feasibility_violation(
    pair: &ScenePair,
    cfg: &AttackConfig,
    r: &sfattack::attacks::AttackResult,
) -> Option<String> {
    let (base, adv) = match cfg.mask.domain {
        Domain::Positions => (&pair.pc1.positions, &r.adv_pc1.positions),
        Domain::Colors => (
            pair.pc1.colors.as_ref().unwrap(),
            r.adv_pc1.colors.as_ref().unwrap(),
        ),
    };
    for (i, d) in r.delta.iter().enumerate() {
        for k in 0..3 {
            if d[k].abs() > cfg.eps + 1e-12 {
                return Some(format!("|delta| {} > eps {}", d[k].abs(), cfg.eps));
            }
            if !cfg.mask.axes[k] && (d[k] != 0.0 || adv[i][k] != base[i][k]) {
                return Some(format!("off-mask change at point {i} axis {k}"));
            }
            if cfg.mask.domain == Domain::Positions && adv[i][k] != base[i][k] + d[k] {
                return Some("adv != pc1 + delta".into());
            }
        }
    }
    // The untouched domain must be bit-identical.
    match cfg.mask.domain {
        Domain::Positions if r.adv_pc1.colors != pair.pc1.colors => {
            return Some("colors changed by a position attack".into())
        }
        Domain::Colors if r.adv_pc1.positions != pair.pc1.positions => {
            return Some("positions changed by a color attack".into())
        }
        _ => {}
    }
    if let Some(colors) = &r.adv_pc1.colors {
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Some("color outside [0, 1]".into());
        }
    }
    None
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ot = OtEstimator::default();
    let masks = [
        "all-dims", "dim=0", "dim=1", "dim=2", "dim=0,2", "all-channels", "channel=0", "channel=1,2",
    ];
    let mut runs = 0;
    for i in 0..1000u64 {
        let n = rng.random_range(3..12);
        let spec = MotionSpec::translation([
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
        ]);
        let pair = make_pair(n, &spec, true, i).map_err(|e| e.to_string())?;
        let gt_bytes = save_sfp(&pair).map_err(|e| e.to_string())?;
        let mask: TargetMask = masks[(i % masks.len() as u64) as usize].parse().unwrap();
        let eps = rng.random_range(0.01..0.6);
        let mut cfg = AttackConfig::new(eps, rng.random_range(1..5), mask);
        cfg.random_start = rng.random();
        if rng.random() {
            cfg.alpha = StepSize::Fixed(rng.random_range(0.001..1.0));
        }
        cfg.random_mode = if rng.random() { RandomMode::Uniform } else { RandomMode::Rademacher };
        let tiny = TinyEstimator::new(TinyNetWeights::init(6, i).unwrap());
        let est: &dyn Estimator = if i % 2 == 0 { &ot } else { &tiny };
        let result = match i % 3 {
            0 => fgsm_sf(&pair, est, &cfg),
            1 => pgd_sf(&pair, est, &cfg, i),
            _ => random_attack(&pair, est, &cfg, i),
        }
        .map_err(|e| format!("invocation {i}: {e}"))?;
        if let Some(v) = feasibility_violation(&pair, &cfg, &result) {
            return Err(format!("invocation {i}: {v}"));
        }
        check(
            save_sfp(&pair).map_err(|e| e.to_string())? == gt_bytes,
            format!("invocation {i}: input pair changed"),
        )?;
        let adv = result.adv_pair(&pair);
        check(
            adv.gt_flow == pair.gt_flow && adv.pc2 == pair.pc2,
            format!("invocation {i}: ground truth or pc2 changed"),
        )?;
        runs += 1;
    }
    Ok(format!("{runs} invocations, 0 violations"))
}

fn criterion_3() -> Outcome {
    let pair = ScenePair {
        id: "fixture".into(),
        pc1: PointCloud::new(vec![[1.0, 2.0, -1.0]], None).unwrap(),
        pc2: PointCloud::new(vec![[0.0, 0.0, 0.0]], None).unwrap(),
        gt_flow: Some(FlowField::zeros(1)),
    };
    let all = AttackConfig::new(0.5, 1, TargetMask::all(Domain::Positions));
    let r = fgsm_sf(&pair, &NegatedPositions, &all).map_err(|e| e.to_string())?;
    let want = [1.5, 2.5, -1.5];
    let p = r.adv_pc1.positions[0];
    check(
        (0..3).all(|k| (p[k] - want[k]).abs() <= 1e-12),
        format!("all-dims gave {p:?}"),
    )?;
    let dim0 = AttackConfig::new(0.5, 1, "dim=0".parse().unwrap());
    let r = fgsm_sf(&pair, &NegatedPositions, &dim0).map_err(|e| e.to_string())?;
    let q = r.adv_pc1.positions[0];
    let want = [1.5, 2.0, -1.0];
    check(
        (0..3).all(|k| (q[k] - want[k]).abs() <= 1e-12),
        format!("dim=0 gave {q:?}"),
    )?;
    Ok(format!("all-dims {p:?}, dim=0 {q:?}"))
}

fn criterion_4() -> Outcome {
    let ot = OtEstimator::default();
    let masks = ["all-dims", "dim=1", "all-channels", "channel=2"];
    for i in 0..100u64 {
        let sampler = MotionSampler::rigid(10, true);
        let pair = sfattack::synthgen::make_entry(i as usize, &sampler, 4)
            .map_err(|e| e.to_string())?
            .pair;
        let tiny = TinyEstimator::new(TinyNetWeights::init(6, i).unwrap());
        let est: &dyn Estimator = if i % 2 == 0 { &ot } else { &tiny };
        let mut cfg = AttackConfig::new(0.05 + 0.01 * (i % 7) as f64, 1, masks[i as usize % 4].parse().unwrap());
        cfg.alpha = StepSize::Fixed(cfg.eps);
        let a = fgsm_sf(&pair, est, &cfg).map_err(|e| e.to_string())?;
        let b = pgd_sf(&pair, est, &cfg, i).map_err(|e| e.to_string())?;
        let bits = |r: &sfattack::attacks::AttackResult| {
            let mut v: Vec<u64> = r.adv_pc1.positions.iter().flatten().map(|x| x.to_bits()).collect();
            v.extend(r.adv_pc1.colors.iter().flatten().flatten().map(|x| x.to_bits()));
            v.extend(r.delta.iter().flatten().map(|x| x.to_bits()));
            v.push(r.loss_before.to_bits());
            v.push(r.loss_after.to_bits());
            v
        };
        check(bits(&a) == bits(&b), format!("pair {i} differs"))?;
    }
    Ok("100 pairs bit-identical".into())
}

fn criterion_5() -> Outcome {
    let cfg = AttackConfig::new(2.0, 10, TargetMask::all(Domain::Positions));
    let alpha = cfg.resolved_alpha();
    check(alpha == 0.5, format!("alpha {alpha}"))?;
    Ok(format!("alpha = {alpha}"))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let data = pairs(&MotionSampler::rigid(256, false), 64, 42);
    let eps = 0.1;
    let mk = |attack, iters, mask: &str| {
        GridEntry::new(attack, AttackConfig::new(eps, iters, mask.parse().unwrap()))
    };
    let grid = [
        mk(AttackKind::Fgsm, 1, "all-dims"),
        mk(AttackKind::Fgsm, 1, "dim=0"),
        mk(AttackKind::Fgsm, 1, "dim=1"),
        mk(AttackKind::Fgsm, 1, "dim=2"),
        mk(AttackKind::Pgd, 10, "all-dims"),
        mk(AttackKind::Random, 1, "all-dims"),
    ];
    let report = run_experiment(&data, &OtEstimator::default(), &grid, &RunOptions::new(7))
        .map_err(|e| e.to_string())?;
    check(report.diagnostics.is_empty(), format!("{:?}", report.diagnostics))?;
    let rel: Vec<f64> = report.aggregates.iter().map(|a| a.rel.unwrap_or(f64::NAN)).collect();
    let (all, dims, pgd, random) = (rel[0], &rel[1..4], rel[4], rel[5]);
    let elapsed = start.elapsed();
    let summary = format!(
        "rel fgsm all {all:.3}, dims {:.3}/{:.3}/{:.3}, pgd {pgd:.3}, random {random:.3}, {elapsed:.1?}",
        dims[0], dims[1], dims[2]
    );
    check(dims.iter().all(|d| all > *d && *d > 0.0), format!("dimension ordering: {summary}"))?;
    check(pgd >= all, format!("pgd < fgsm: {summary}"))?;
    check(all >= 3.0 * random, format!("fgsm < 3 x random: {summary}"))?;
    check(elapsed < Duration::from_secs(600), format!("too slow: {summary}"))?;
    Ok(summary)
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let sampler = MotionSampler::rigid(128, true);
    let train = pairs(&sampler, 64, 1);
    let held_out = pairs(&sampler, 16, 1001);
    let outcome = train_tiny(&train, 30, 0.1, 3).map_err(|e| e.to_string())?;
    let est = TinyEstimator::new(outcome.weights);
    let (mut aepe, mut zero) = (0.0, 0.0);
    for p in &held_out {
        let gt = p.gt_flow.as_ref().unwrap();
        aepe += epe(&est.estimate(p).map_err(|e| e.to_string())?, gt).unwrap() / 16.0;
        zero += zero_flow_epe(gt).unwrap() / 16.0;
    }
    let trace = &outcome.loss_trace;
    let (first, last) = (trace[0], trace[trace.len() - 1]);
    let elapsed = start.elapsed();
    let summary = format!(
        "held-out AEPE {aepe:.4} vs zero-flow {zero:.4}, loss {first:.4} -> {last:.4}, {elapsed:.1?}"
    );
    check(trace.iter().all(|v| v.is_finite()), "non-finite loss")?;
    check(aepe < zero, summary.clone())?;
    check(last < first, summary.clone())?;
    check(elapsed < Duration::from_secs(300), summary.clone())?;
    Ok(summary)
}

fn criterion_8() -> Outcome {
    let rel = relative_degradation(0.117, 0.196).unwrap();
    check((rel - 0.675).abs() < 1e-3, format!("rel {rel}"))?;
    let data = pairs(&MotionSampler::deform(24, true), 9, 8);
    let grid: Vec<GridEntry> = sfattack::harness::parse_grid(
        r#"[{"attack":"none"},
            {"attack":"fgsm","eps":0.05,"target":"dim=1"},
            {"attack":"pgd","eps":0.05,"iters":3,"target":"all-channels"},
            {"attack":"random","eps":0.05,"target":"all-dims"}]"#,
    )
    .unwrap();
    let report = run_experiment(&data, &OtEstimator::default(), &grid, &RunOptions::new(8))
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for agg in &report.aggregates {
        // Independent pass: recompute each attack from scratch.
        let mut before = 0.0;
        let mut after = 0.0;
        let entry = grid.iter().find(|g| g.attack == agg.attack).unwrap();
        for p in &data {
            let seed = sfattack::harness::cell_seed(8, &p.id, entry);
            let r = sfattack::attacks::run_attack(entry.attack, p, &OtEstimator::default(), &entry.config, seed)
                .map_err(|e| e.to_string())?;
            before += r.loss_before;
            after += r.loss_after;
        }
        before /= data.len() as f64;
        after /= data.len() as f64;
        worst = worst
            .max((agg.aepe_before - before).abs())
            .max((agg.aepe_after - after).abs());
        if agg.attack != AttackKind::None {
            let want = (after - before) / before;
            worst = worst.max((agg.rel.unwrap() - want).abs());
        }
    }
    for r in &report.records {
        if r.attack == AttackKind::None {
            check(r.rel == Some(0.0), "rel of 'none' must be 0")?;
        } else {
            let want = (r.epe_after - r.epe_before) / r.epe_before;
            worst = worst.max((r.rel.unwrap() - want).abs());
        }
    }
    check(worst <= 1e-9, format!("aggregate mismatch {worst:e}"))?;
    Ok(format!("rel(0.117, 0.196) = {rel:.4}; oracle mismatch {worst:.1e}"))
}

fn run_cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sfattack"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "sfattack {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn pipeline(dir: &Path, jobs: &str) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>), String> {
    let grid = r#"[{"attack":"none"},{"attack":"fgsm","eps":0.1,"target":"all-dims"},
        {"attack":"pgd","eps":0.1,"iters":4,"target":"channel=0"},
        {"attack":"random","eps":0.1,"target":"dim=2","random_mode":"rademacher"}]"#;
    std::fs::write(dir.join("grid.json"), grid).map_err(|e| e.to_string())?;
    run_cli(&["generate", "--scenes", "8", "--points", "48", "--motion", "rigid", "--color", "--seed", "5", "--out", "data"], dir)?;
    run_cli(&["train", "--data", "data", "--epochs", "4", "--lr", "0.1", "--seed", "6", "--out", "model.sftn"], dir)?;
    run_cli(
        &["attack", "--model", "tiny:model.sftn", "--attack", "pgd", "--eps", "0.1", "--iters", "5",
          "--target", "all-dims", "--in", "data/pair_0.sfp", "--out", "adv.sfp", "--report", "attack.json", "--seed", "7"],
        dir,
    )?;
    run_cli(
        &["eval", "--model", "tiny:model.sftn", "--data", "data", "--grid", "grid.json",
          "--report", "eval.json", "--csv", "eval.csv", "--seed", "8", "--jobs", jobs],
        dir,
    )?;
    let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
    let mut attack = read("attack.json")?;
    attack.extend(read("adv.sfp")?);
    attack.extend(read("model.sftn")?);
    Ok((attack, read("eval.json")?, read("eval.csv")?))
}

fn criterion_9() -> Outcome {
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = pipeline(dirs[0].path(), "1")?;
    let b = pipeline(dirs[1].path(), "1")?;
    check(a == b, "two --jobs 1 runs differ")?;
    let c = pipeline(dirs[2].path(), "4")?;
    let parse = |bytes: &[u8]| serde_json::from_slice::<Report>(bytes).map_err(|e| e.to_string());
    check(parse(&a.1)? == parse(&c.1)?, "--jobs 4 report content differs")?;
    check(a.2 == c.2, "--jobs 4 CSV differs")?;
    Ok(format!("eval.json {} bytes, eval.csv {} bytes identical", a.1.len(), a.2.len()))
}

fn structured(e: &Error) -> bool {
    matches!(e, Error::Format(_) | Error::Length(_) | Error::Validation(_))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pair = make_pair(17, &MotionSpec::rotation([0.0, 0.0, 1.0], 0.1), true, 3).unwrap();
    let sfp = save_sfp(&pair).map_err(|e| e.to_string())?;
    let back = load_sfp(&sfp).map_err(|e| e.to_string())?;
    check(save_sfp(&back).unwrap() == sfp, "SFP1 not bit-exact")?;
    let weights = TinyNetWeights::init(6, 1).unwrap();
    let sftn = save_weights(&weights);
    check(save_weights(&load_weights(&sftn).unwrap()) == sftn, "SFTN not bit-exact")?;
    let ply = save_ply(&pair.pc1);
    let cloud = load_ply(&ply).map_err(|e| e.to_string())?;
    let f32_exact = cloud
        .positions
        .iter()
        .zip(&pair.pc1.positions)
        .all(|(a, b)| (0..3).all(|k| a[k] == b[k] as f32 as f64));
    check(f32_exact, "PLY not exact at 32-bit")?;

    let mut cases = 0;
    for i in 0..10_000usize {
        let (kind, src): (usize, &[u8]) = match i % 3 {
            0 => (0, &sfp),
            1 => (1, &sftn),
            _ => (2, ply.as_bytes()),
        };
        let mut bytes = src.to_vec();
        let mode = (i / 3) % 3;
        match mode {
            0 => bytes.truncate(rng.random_range(0..bytes.len())),
            1 => {
                let j = rng.random_range(0..4.min(bytes.len()));
                bytes[j] ^= rng.random_range(1..=255u8);
            }
            _ => {
                for _ in 0..rng.random_range(1..4) {
                    let j = rng.random_range(0..bytes.len());
                    bytes[j] = rng.random();
                }
            }
        }
        let outcome = catch_unwind(AssertUnwindSafe(|| match kind {
            0 => load_sfp(&bytes).map(|_| ()),
            1 => load_weights(&bytes).map(|_| ()),
            _ => match std::str::from_utf8(&bytes) {
                Ok(text) => load_ply(text).map(|_| ()),
                Err(_) => Err(Error::Format("not utf-8".into())),
            },
        }))
        .map_err(|_| format!("case {i} panicked"))?;
        match outcome {
            // Truncations and corrupted magic must be rejected.
            Ok(()) if mode != 2 && kind != 2 => return Err(format!("case {i} accepted corrupt input")),
            Err(e) if !structured(&e) => return Err(format!("case {i}: unexpected error {e}")),
            _ => {}
        }
        cases += 1;
    }
    Ok(format!("round-trips exact, {cases} fuzz cases without panic"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", criterion_1),
        ("attack feasibility invariants", criterion_2),
        ("analytic FGSM fixture", criterion_3),
        ("PGD reduces to FGSM", criterion_4),
        ("alpha schedule", criterion_5),
        ("directional reproduction on synthetic suite", criterion_6),
        ("tiny-net training sanity", criterion_7),
        ("harness arithmetic", criterion_8),
        ("determinism", criterion_9),
        ("round-trips and fuzzing", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.ends_with(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("{id} FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
