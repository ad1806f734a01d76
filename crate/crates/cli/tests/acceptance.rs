//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use atm_cli::commands::{self, compare_schedules, DEFAULT_THETAS};
use atm_cli::Outcome;
use atm_core::cost::baseline_report;
use atm_core::io::textured_scene;
use atm_core::merging::{
    alternate_split, batch_adaptive_r, layer_threshold, pair_tokens, planned_token_counts, step, MergeSchedule,
    ThresholdParams,
};
use atm_core::model::{attention, mlp, patch_embed};
use atm_core::numeric::Matrix;
use atm_core::theory::{
    info_loss_grid, info_loss_probe, merging_error_closed, merging_error_direct, random_case, theorem1_bounds,
    verify_bounds, VerifyConfig,
};
use atm_core::{forward, AtmError, ForwardInput, ModelConfig, ModelWeights, TokenBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.2?}, limit {limit:?}"))?;
    Ok(t)
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn images(size: usize, count: usize, seed: u64) -> Vec<atm_core::io::Image> {
    (0..count).map(|i| textured_scene(size, seed + i as u64, 0.2)).collect()
}

fn flops_calibration() -> Check {
    let start = Instant::now();
    let mut parts = Vec::new();
    for (name, cfg, table) in [
        ("DeiT-T", ModelConfig::deit_tiny(), 1.3),
        ("DeiT-S", ModelConfig::deit_small(), 4.6),
        ("DeiT-B", ModelConfig::deit_base(), 17.6),
    ] {
        let g = baseline_report(&cfg).gflops;
        let rel = (g - table).abs() / table;
        ensure(rel <= 0.05, || format!("{name}: {g:.3} GFLOPs vs {table} ({:.1}% off)", 100.0 * rel))?;
        parts.push(format!("{name} {g:.3}"));
    }
    let t = within_time(start, Duration::from_secs(1))?;
    Ok(format!("{} GFLOPs in {t:.2?}", parts.join(", ")))
}

fn stress_test_arithmetic() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let text = r#"batch_size = 2
output = "out"
weights = "synthetic:0"
[model]
preset = "deit-s"
[inputs]
synthetic = { count = 2, seed = 0 }
"#;
    let cfg = common::config(dir.path(), text);
    let rows = compare_schedules(&cfg, 0.30).map_err(err)?;
    let t = within_time(start, Duration::from_secs(120))?;
    let ld = &rows[0].result;
    ensure(rows[0].kind == "layer_dependent_threshold" && ld.within_tolerance, || {
        format!("layer-dependent row not tuned: {:.2}%", ld.reduction_percent)
    })?;
    let mut parts = Vec::new();
    for row in rows.iter().filter(|r| r.result.within_tolerance) {
        let g = row.result.gflops;
        ensure((g - 3.2).abs() / 3.2 <= 0.05, || format!("{}: {g:.3} GFLOPs", row.kind))?;
        parts.push(format!("{} {g:.3} ({:.1}%)", row.kind, -row.result.reduction_percent));
    }
    Ok(format!("{} in {t:.1?}", parts.join(", ")))
}

fn round_out(lo: f64, hi: f64) -> (f64, f64) {
    ((lo * 100.0).floor() / 100.0, (hi * 100.0).ceil() / 100.0)
}

fn bound_sandwich() -> Check {
    let start = Instant::now();
    let report = verify_bounds(&VerifyConfig::default()).map_err(err)?;
    let t = within_time(start, Duration::from_secs(30))?;
    ensure(report.trials == 100_000 && report.passed(), || {
        format!("{} violations, first {:?}", report.violations.len(), report.violations.first())
    })?;
    ensure(theorem1_bounds(1, 1, 1.0) == (0.5, 1.0), || "sizes 1, 1".into())?;
    ensure(theorem1_bounds(100, 100, 1.0) == (50.0, 100.0), || "sizes 100, 100".into())?;
    let (lo, hi) = theorem1_bounds(100, 1, 1.0);
    ensure(lo == 100.0 / 101.0 && hi == 200.0 / 101.0, || format!("sizes 100, 1: {lo}, {hi}"))?;
    ensure(round_out(lo, hi) == (0.99, 1.99), || format!("{:?}", round_out(lo, hi)))?;
    Ok(format!(
        "{} trials, 0 violations, {} degenerate; coefficients [0.5, 1], [0.99, 1.99], [50, 100] in {t:.2?}",
        report.trials, report.degenerate
    ))
}

fn closed_form_equivalence() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for trial in 0..10_000 {
        let c = random_case(41, trial, 64, 1000).map_err(err)?;
        let direct = merging_error_direct(&c).map_err(err)?;
        let closed = merging_error_closed(c.n_i, c.n_j, c.cos());
        let rel = (direct - closed).abs() / direct.abs().max(closed.abs()).max(f64::MIN_POSITIVE);
        ensure(rel <= 1e-9, || format!("trial {trial}: direct {direct}, closed {closed}"))?;
        worst = worst.max(rel);
    }
    let t = within_time(start, Duration::from_secs(10))?;
    Ok(format!("10000 cases, max relative difference {worst:.2e} in {t:.2?}"))
}

/// `exp(x) - 1` by its Taylor series.
fn expm1_series(x: f64) -> f64 {
    let (mut term, mut sum, mut k) = (x, 0.0, 1.0);
    while term.abs() > 1e-30 {
        sum += term;
        k += 1.0;
        term *= x / k;
    }
    sum
}

fn threshold_schedule() -> Check {
    let mut points = 0;
    let mut worst = 0.0f64;
    for a in 0..12 {
        for b in 0..8 {
            for m in 0..30 {
                let alpha = (945 + 5 * a) as f64 / 1000.0;
                let beta = (15 + 5 * b) as f64 / 1000.0;
                let theta_min = (800 + 5 * m) as f64 / 1000.0;
                let p = ThresholdParams::new(alpha, beta, theta_min).map_err(err)?;
                let mut prev = f64::INFINITY;
                for l in 1..=12 {
                    let got = layer_threshold(l, &p);
                    let want = (alpha - expm1_series(beta * (l - 1) as f64)).max(theta_min);
                    worst = worst.max((got - want).abs());
                    ensure((got - want).abs() <= 1e-12, || format!("{p:?} layer {l}: {got} vs {want}"))?;
                    ensure(got <= prev, || format!("{p:?} increases at layer {l}"))?;
                    ensure(got >= theta_min, || format!("{p:?} below theta_min at layer {l}"))?;
                    prev = got;
                }
                // Clamped for good once the decay passes theta_min.
                let clamped = ThresholdParams::new(alpha, 1.0, theta_min).map_err(err)?;
                ensure(layer_threshold(12, &clamped) == theta_min, || format!("{clamped:?} not clamped"))?;
                ensure(layer_threshold(1, &p) == alpha, || format!("{p:?} layer 1"))?;
                points += 1;
            }
        }
    }
    Ok(format!("{points} grid points x 12 layers, max abs difference {worst:.1e}"))
}

/// Token counts of a fixed-r schedule: `r` fewer per layer until the source
/// group runs short.
fn progression(n0: usize, depth: usize, r: usize, splitting_depth: usize) -> Vec<(usize, usize)> {
    let mut n = n0;
    let mut out = Vec::new();
    for layer in 1..=depth {
        let m = n - 1;
        let sources = if layer <= splitting_depth { m.div_ceil(2) } else { m / 2 };
        let available = if m < 2 { 0 } else { sources };
        let k = r.min(available);
        out.push((n, n - k));
        n -= k;
    }
    out
}

fn static_baseline() -> Check {
    let cfg = ModelConfig { depth: 12, ..ModelConfig::tiny() };
    let w = ModelWeights::synthetic(&cfg).map_err(err)?;
    let imgs = images(cfg.image_size, 2, 3);
    let mut exhausted = 0;
    for r in [0, 1, 3, 5, 8, 13, 20, 40] {
        let s = MergeSchedule::ConstantTopR { r };
        let out = forward(ForwardInput::Images(imgs.clone()), &cfg, &w, &s).map_err(err)?;
        let want = progression(cfg.num_tokens(), cfg.depth, r, cfg.splitting_depth);
        ensure(out.trace.token_counts() == want, || format!("r={r}: {:?} vs {want:?}", out.trace.token_counts()))?;
        if want.iter().any(|&(a, b)| a - b < r) {
            exhausted += 1;
        }
    }
    let deit = ModelConfig::deit_small();
    for r in 0..=120 {
        let s = MergeSchedule::ConstantTopR { r };
        let planned = planned_token_counts(deit.num_tokens(), true, deit.depth, &s, deit.splitting_depth, false)
            .ok_or("top-r is content independent")?;
        let want = progression(deit.num_tokens(), deit.depth, r, deit.splitting_depth);
        ensure(planned == want, || format!("DeiT-S r={r}: {planned:?}"))?;
    }
    ensure(exhausted > 0, || "no run reached exhaustion".into())?;
    Ok(format!("8 forwards ({exhausted} exhausting) and 121 DeiT-S plans follow N - (l-1) r"))
}

/// Sizes sum to the original count and provenance partitions it.
fn conserved(x: &TokenBatch) -> Result<(), String> {
    let n = x.original_count();
    for (b, (sizes, prov)) in x.sizes().iter().zip(x.provenance()).enumerate() {
        let total: usize = sizes.iter().map(|&s| s as usize).sum();
        ensure(total == n, || format!("image {b}: sizes sum to {total}, not {n}"))?;
        for (s, p) in sizes.iter().zip(prov) {
            ensure(*s as usize == p.len(), || format!("image {b}: size {s} with {} sources", p.len()))?;
        }
        let mut all: Vec<u32> = prov.iter().flatten().copied().collect();
        all.sort_unstable();
        ensure(all == (0..n as u32).collect::<Vec<_>>(), || format!("image {b}: provenance is not a partition"))?;
    }
    Ok(())
}

fn random_config(rng: &mut ChaCha8Rng, seed: u64) -> ModelConfig {
    let depth = rng.random_range(1..=4);
    let dim = [16, 32][rng.random_range(0..2)];
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let (image_size, patch_size) = [(32, 8), (48, 8), (48, 16), (64, 16)][rng.random_range(0..4)];
    let use_cls_token = rng.random_bool(0.8);
    ModelConfig {
        depth,
        dim,
        heads,
        mlp_ratio: 2.0,
        image_size,
        patch_size,
        num_classes: 5,
        use_cls_token,
        proportional_attention: rng.random_bool(0.5),
        final_layer_cls_only: use_cls_token && rng.random_bool(0.3),
        splitting_depth: rng.random_range(0..=depth),
        seed,
    }
}

fn random_schedule(rng: &mut ChaCha8Rng) -> MergeSchedule {
    match rng.random_range(0..6) {
        0 => MergeSchedule::LayerDependentThreshold(
            ThresholdParams::new(rng.random_range(0.9..1.0), rng.random_range(0.0..0.1), rng.random_range(0.3..0.9))
                .expect("valid"),
        ),
        1 => MergeSchedule::ConstantThreshold { theta: rng.random_range(0.2..1.0) },
        2 => MergeSchedule::ConstantTopR { r: rng.random_range(0..20) },
        3 => MergeSchedule::IncreasingTopR { r0: rng.random_range(0..10) },
        4 => MergeSchedule::DecreasingTopR { r0: rng.random_range(0..20) },
        _ => MergeSchedule::NoOp,
    }
}

fn conservation_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut layers = 0;
    let mut merged = 0;
    for case in 0..100u64 {
        let cfg = random_config(&mut rng, case);
        let schedule = random_schedule(&mut rng);
        let w = ModelWeights::synthetic(&cfg).map_err(err)?;
        let imgs: Vec<_> = (0..rng.random_range(1..=3))
            .map(|i| textured_scene(cfg.image_size, 100 * case + i, rng.random_range(0.0..0.5)))
            .collect();
        let ctx = |l: usize| format!("case {case} ({cfg:?}, {schedule:?}) layer {l}");

        let mut x = patch_embed(&imgs, &cfg, &w).map_err(err)?;
        conserved(&x).map_err(|e| format!("{}: {e}", ctx(0)))?;
        let mut counts = Vec::new();
        for (i, block) in w.blocks.iter().enumerate() {
            let layer = i + 1;
            let (attended, keys) = attention(&x, block, cfg.heads, cfg.proportional_attention).map_err(err)?;
            let n = attended.num_tokens();
            let next = if cfg.final_layer_cls_only && layer == cfg.depth {
                let only = attended.drop_to_cls().map_err(err)?;
                let ok = only.num_tokens() == 1 && only.sizes().iter().all(|s| s == &[1]);
                ensure(ok, || format!("{}: CLS-only drop kept {:?}", ctx(layer), only.sizes()))?;
                only
            } else {
                let (m, _) = step(&attended, &keys, layer, &schedule, cfg.splitting_depth).map_err(err)?;
                conserved(&m).map_err(|e| format!("{}: {e}", ctx(layer)))?;
                m
            };
            counts.push((n, next.num_tokens()));
            merged += n - next.num_tokens();
            layers += 1;
            x = mlp(&next, block).map_err(err)?;
        }
        let full = forward(ForwardInput::Images(imgs), &cfg, &w, &schedule).map_err(err)?;
        ensure(full.trace.token_counts() == counts, || format!("{}: forward trace differs", ctx(cfg.depth)))?;
    }
    Ok(format!("100 forwards, {layers} layers checked, {merged} tokens merged"))
}

fn random_keys(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    // A shared component makes high similarities common.
    let shared: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data = (0..n * d).map(|k| shared[k % d] + rng.random_range(-0.6..0.6)).collect();
    Matrix::new(n, d, data).expect("shape")
}

/// Pairs above `theta` by brute force: best destination per source.
fn count_above(keys: &Matrix, theta: f64) -> usize {
    let unit = |i: usize| {
        let r: Vec<f64> = keys.row(i).iter().map(|&v| v as f64).collect();
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.into_iter().map(|v| v / n).collect::<Vec<f64>>()
    };
    let n = keys.rows();
    // Token 0 plays CLS; sources are even positions among the rest.
    let rest: Vec<usize> = (1..n).collect();
    let src: Vec<usize> = rest.iter().step_by(2).copied().collect();
    let dst: Vec<usize> = rest.iter().skip(1).step_by(2).copied().collect();
    src.iter()
        .filter(|&&s| {
            let us = unit(s);
            let best = dst
                .iter()
                .map(|&t| us.iter().zip(unit(t)).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            best > theta
        })
        .count()
}

fn batch_adaptivity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let split = alternate_split(33, Some(0));
    for case in 0..200 {
        let keys = random_keys(&mut rng, 33, 8);
        let plan = pair_tokens(&keys, &split).map_err(err)?;
        let theta = rng.random_range(0.5..1.0);
        let r = batch_adaptive_r(std::slice::from_ref(&plan), theta);
        let want = count_above(&keys, theta);
        ensure(r == want, || format!("case {case}: r {r}, exact count {want}"))?;
    }
    for case in 0..200 {
        let b = rng.random_range(2..=6);
        let theta = rng.random_range(0.5..1.0);
        let mut plans = Vec::new();
        let mut counts = Vec::new();
        for _ in 0..b {
            let keys = random_keys(&mut rng, 33, 8);
            plans.push(pair_tokens(&keys, &split).map_err(err)?);
            counts.push(count_above(&keys, theta));
        }
        let r = batch_adaptive_r(&plans, theta);
        let max = *counts.iter().max().expect("non-empty");
        ensure(r <= max, || format!("case {case}: r {r} above max count {max}"))?;
        ensure(r == counts.iter().sum::<usize>() / b, || format!("case {case}: r {r}, counts {counts:?}"))?;
    }

    let cfg = ModelConfig::tiny();
    let w = ModelWeights::synthetic(&cfg).map_err(err)?;
    let img = textured_scene(cfg.image_size, 5, 0.2);
    let schedules = [
        MergeSchedule::ConstantThreshold { theta: 0.9 },
        MergeSchedule::LayerDependentThreshold(ThresholdParams::new(0.99, 0.04, 0.85).map_err(err)?),
    ];
    let mut merging_layers = 0;
    for s in schedules {
        let single = forward(ForwardInput::Images(vec![img.clone()]), &cfg, &w, &s).map_err(err)?;
        let rs = |o: &atm_core::ForwardOutput| o.trace.layers.iter().map(|l| l.r).collect::<Vec<_>>();
        merging_layers += rs(&single).iter().filter(|&&r| r > 0).count();
        for k in 2..=4 {
            let batch = forward(ForwardInput::Images(vec![img.clone(); k]), &cfg, &w, &s).map_err(err)?;
            ensure(rs(&batch) == rs(&single), || format!("{s:?} k={k}: {:?} vs {:?}", rs(&batch), rs(&single)))?;
        }
    }
    ensure(merging_layers > 0, || "identical-image check never merged".into())?;
    Ok("200 single-image counts exact, 200 floored batch means, identical batches k=2..4 match".into())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let emit = "[emit]\ntoken_maps = true\n";
    let a = common::config(dir.path(), &common::tiny_toml("a", 5, 21, emit));
    let b = common::config(dir.path(), &common::tiny_toml("b", 5, 21, emit));
    for cfg in [&a, &b] {
        ensure(commands::cmd_run(cfg).map_err(err)? == Outcome::Success, || "run reported errors".into())?;
    }
    let (ta, tb) = (common::tree(&a.output), common::tree(&b.output));
    let maps = ta.keys().filter(|p| p.starts_with("token_maps")).count();
    ensure(maps == 5, || format!("{maps} token maps"))?;
    ensure(ta == tb, || {
        let diff: Vec<_> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
        format!("files differ: {diff:?}")
    })?;
    Ok(format!("{} files identical, {maps} token maps", ta.len()))
}

fn probe_sanity() -> Check {
    let cfg = ModelConfig { depth: 12, ..ModelConfig::tiny() };
    let w = ModelWeights::synthetic(&cfg).map_err(err)?;
    let input = ForwardInput::Images(images(cfg.image_size, 2, 13));
    for layer in 1..=cfg.depth {
        let d = info_loss_probe(&cfg, &w, &input, layer, 1.0).map_err(err)?;
        ensure(d == 0.0, || format!("layer {layer}: {d} at theta 1"))?;
    }
    let grid = info_loss_grid(&cfg, &w, &input, &DEFAULT_THETAS).map_err(err)?;
    ensure(grid.len() == cfg.depth * 5, || format!("{} records", grid.len()))?;
    let mut positive = 0;
    for (layer, chunk) in grid.chunks(5).enumerate() {
        for (rec, &theta) in chunk.iter().zip(&DEFAULT_THETAS) {
            ensure(rec.layer == layer + 1 && rec.theta == Some(theta), || format!("misplaced {rec:?}"))?;
            ensure(rec.cls_distance.is_finite() && rec.cls_distance >= 0.0, || format!("{rec:?}"))?;
            positive += usize::from(rec.cls_distance > 0.0);
        }
        let mean = chunk[..4].iter().map(|r| r.cls_distance).sum::<f64>() / 4.0;
        let avg = &chunk[4];
        ensure(avg.theta.is_none() && (avg.cls_distance - mean).abs() <= 1e-15, || format!("{avg:?}"))?;
    }
    ensure(positive > 0, || "no threshold changed the CLS output".into())?;
    let bad = info_loss_probe(&cfg, &w, &input, 0, 0.9);
    ensure(matches!(bad, Err(AtmError::InvalidConfig(_))), || "layer 0 accepted".into())?;
    Ok(format!("12 layers zero at theta 1; 12 x 4 grid plus averages, {positive} cells positive"))
}

fn proportional_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for case in 0..20u64 {
        let mut cfg = random_config(&mut rng, case);
        cfg.final_layer_cls_only = false;
        let w = ModelWeights::synthetic(&cfg).map_err(err)?;
        let imgs = images(cfg.image_size, rng.random_range(1..=3), case);
        let x = patch_embed(&imgs, &cfg, &w).map_err(err)?;
        ensure(x.sizes().iter().flatten().all(|&s| s == 1), || "fresh tokens not size 1".into())?;
        for block in &w.blocks {
            let (p, pk) = attention(&x, block, cfg.heads, true).map_err(err)?;
            let (s, sk) = attention(&x, block, cfg.heads, false).map_err(err)?;
            let bits = |m: &[Matrix]| m.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
            ensure(bits(p.tokens()) == bits(s.tokens()), || format!("case {case}: outputs differ"))?;
            ensure(bits(&pk) == bits(&sk), || format!("case {case}: keys differ"))?;
            checked += 1;
        }
        let (mut on, mut off) = (cfg.clone(), cfg.clone());
        on.proportional_attention = true;
        off.proportional_attention = false;
        let a = forward(ForwardInput::Images(imgs.clone()), &on, &w, &MergeSchedule::NoOp).map_err(err)?;
        let b = forward(ForwardInput::Images(imgs), &off, &w, &MergeSchedule::NoOp).map_err(err)?;
        let logit_bits =
            |o: &atm_core::ForwardOutput| o.logits.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(logit_bits(&a) == logit_bits(&b), || format!("case {case}: logits differ"))?;
    }
    Ok(format!("{checked} attention blocks and 20 unmerged forwards bit-identical"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("FLOPs calibration", flops_calibration),
        ("stress-test arithmetic", stress_test_arithmetic),
        ("bound sandwich", bound_sandwich),
        ("closed-form equivalence", closed_form_equivalence),
        ("threshold schedule", threshold_schedule),
        ("static-baseline equivalence", static_baseline),
        ("conservation suite", conservation_suite),
        ("batch-adaptivity consistency", batch_adaptivity),
        ("determinism", determinism),
        ("probe sanity", probe_sanity),
        ("proportional attention identity", proportional_identity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
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
