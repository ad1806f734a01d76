use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use atm_core::cost::{self, CostReport};
use atm_core::io::{render_token_map, Image};
use atm_core::merging::planned_token_counts;
use atm_core::model::{forward, ForwardOutput};
use atm_core::theory::{info_loss_grid, verify_bounds, VerifyConfig};
use atm_core::{ForwardInput, MergeSchedule, ModelConfig, ModelWeights, ThresholdParams};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{Batch, RunConfig};
use crate::records::{error_record, read_jsonl, JsonlWriter};
use crate::search::{search_continuous, search_integer, Evaluation, SearchResult};
use crate::{ConfigError, Outcome, UsageError};

pub const DEFAULT_THETAS: [f64; 4] = [0.8, 0.85, 0.9, 0.95];

fn report_error(context: &str, e: &anyhow::Error) -> serde_json::Value {
    eprintln!("error[{}]: {context}: {e:#}", crate::error_category(e));
    error_record(context, e)
}

/// Per-image averages over a set of batch costs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub images: usize,
    pub batches: usize,
    pub gflops: f64,
    pub baseline_gflops: f64,
    pub reduction_percent: f64,
}

pub fn summarize(costs: &[(usize, CostReport)], model: &ModelConfig) -> Summary {
    let images: usize = costs.iter().map(|(n, _)| n).sum();
    let flops: f64 = costs.iter().map(|(n, c)| *n as f64 * c.total_flops as f64).sum();
    let baseline = cost::baseline_flops(model) as f64;
    let mean = if images == 0 { baseline } else { flops / images as f64 };
    Summary {
        images,
        batches: costs.len(),
        gflops: mean / 1e9,
        baseline_gflops: baseline / 1e9,
        reduction_percent: 100.0 * (baseline - mean) / baseline,
    }
}

pub fn run_batch(
    cfg: &RunConfig,
    weights: &ModelWeights,
    batch: &Batch,
    schedule: &MergeSchedule,
) -> anyhow::Result<(ForwardOutput, CostReport)> {
    let out = forward(batch.input(cfg), &cfg.model, weights, schedule)?;
    let cost = cost::trace_cost(&out.trace, &cfg.model)?;
    Ok((out, cost))
}

fn batch_record(
    b: usize,
    n: usize,
    schedule: &MergeSchedule,
    out: &ForwardOutput,
    cost: &CostReport,
) -> serde_json::Value {
    json!({
        "type": "batch",
        "batch": b,
        "images": n,
        "schedule": schedule,
        "token_counts": out.trace.token_counts(),
        "merged_per_layer": out.trace.merged_per_layer(),
        "r": out.trace.layers.iter().map(|l| l.r).collect::<Vec<_>>(),
        "theta": out.trace.layers.iter().map(|l| l.theta).collect::<Vec<_>>(),
        "gflops": cost.gflops,
        "baseline_gflops": cost.baseline_gflops,
        "reduction_percent": cost.reduction_percent,
    })
}

#[derive(Serialize)]
struct TraceRow<'a> {
    batch: usize,
    #[serde(flatten)]
    layer: &'a atm_core::merging::LayerRecord,
}

/// Renders the final token partition of every image in an image batch into
/// `dir`, named by the image's position in the input pool.
fn render_maps(
    cfg: &RunConfig,
    weights: &ModelWeights,
    first_index: usize,
    raw: &[Image],
    out: &ForwardOutput,
    dir: &Path,
) -> anyhow::Result<Vec<serde_json::Value>> {
    fs::create_dir_all(dir)?;
    // With the final CLS-only drop the last partition has no patch tokens;
    // show the partition the same schedule reaches without it.
    let rerun;
    let tokens = if out.tokens.is_cls_only() {
        let mut m = cfg.model.clone();
        m.final_layer_cls_only = false;
        rerun = forward(cfg.prepare(raw), &m, weights, &cfg.schedule)?;
        &rerun.tokens
    } else {
        &out.tokens
    };
    let mut recs = Vec::new();
    for (i, img) in raw.iter().enumerate() {
        let name = format!("img{:04}.ppm", first_index + i);
        let remaining = render_token_map(
            tokens,
            i,
            cfg.model.grid_side(),
            dir.join(&name),
            cfg.model.patch_size,
            cfg.model.seed,
            Some(img),
        )?;
        recs.push(json!({
            "type": "token_map",
            "image": first_index + i,
            "path": format!("token_maps/{name}"),
            "remaining_tokens": remaining,
        }));
    }
    Ok(recs)
}

fn cost_rows(w: &mut csv::Writer<fs::File>, batch: usize, c: &CostReport) -> anyhow::Result<()> {
    for l in &c.layers {
        w.write_record([
            batch.to_string(),
            l.layer.to_string(),
            l.tokens_attn.to_string(),
            l.tokens_mlp.to_string(),
            l.attn_flops.to_string(),
            l.mlp_flops.to_string(),
        ])?;
    }
    Ok(())
}

pub fn cmd_run(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let out_dir = &cfg.output;
    fs::create_dir_all(out_dir).with_context(|| format!("creating `{}`", out_dir.display()))?;
    let weights = cfg.load_weights()?;
    let batches = cfg.batches()?;

    let mut records = cfg.emit.records.then(|| JsonlWriter::create(&out_dir.join("records.jsonl"))).transpose()?;
    let mut trace = cfg.emit.trace.then(|| JsonlWriter::create(&out_dir.join("trace.jsonl"))).transpose()?;
    let mut costs_csv = if cfg.emit.cost {
        let mut w = csv::Writer::from_path(out_dir.join("cost.csv"))?;
        w.write_record(["batch", "layer", "tokens_attn", "tokens_mlp", "attn_flops", "mlp_flops"])?;
        Some(w)
    } else {
        None
    };

    let mut costs = Vec::new();
    let mut errors = 0;
    for (b, batch) in batches.iter().enumerate() {
        let result = run_batch(cfg, &weights, batch, &cfg.schedule).and_then(|(out, cost)| {
            let maps = match batch {
                Batch::Images { first_index, raw } if cfg.emit.token_maps => {
                    render_maps(cfg, &weights, *first_index, raw, &out, &out_dir.join("token_maps"))?
                }
                _ => Vec::new(),
            };
            Ok((out, cost, maps))
        });
        match result {
            Ok((out, cost, maps)) => {
                if let Some(w) = records.as_mut() {
                    w.write(&batch_record(b, batch.len(), &cfg.schedule, &out, &cost))?;
                    for m in &maps {
                        w.write(m)?;
                    }
                }
                if let Some(w) = trace.as_mut() {
                    for layer in &out.trace.layers {
                        w.write(&TraceRow { batch: b, layer })?;
                    }
                }
                if let Some(w) = costs_csv.as_mut() {
                    cost_rows(w, b, &cost)?;
                }
                costs.push((batch.len(), cost));
            }
            Err(e) => {
                errors += 1;
                let rec = report_error(&format!("batch {b}"), &e);
                if let Some(w) = records.as_mut() {
                    w.write(&rec)?;
                }
            }
        }
    }
    let summary = summarize(&costs, &cfg.model);
    let mut summary_rec = serde_json::to_value(&summary)?;
    summary_rec["type"] = json!("summary");
    summary_rec["errors"] = json!(errors);
    summary_rec["schedule"] = serde_json::to_value(cfg.schedule)?;
    if let Some(w) = records.as_mut() {
        w.write(&summary_rec)?;
        w.flush()?;
    }
    if let Some(w) = trace.as_mut() {
        w.flush()?;
    }
    if let Some(mut w) = costs_csv {
        w.flush()?;
    }
    println!("{}", serde_json::to_string(&summary_rec)?);
    Ok(Outcome::from_errors(errors))
}

fn threshold_defaults(s: &MergeSchedule) -> (f64, f64) {
    match s {
        MergeSchedule::LayerDependentThreshold(p) => (p.alpha, p.beta),
        _ => (0.99, 0.04),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub kind: &'static str,
    #[serde(flatten)]
    pub result: SearchResult,
}

/// Tunes each schedule kind to `target` (a fraction in `(0, 1)`) on the first
/// input batch. Alternate grouping is used in every layer so that only the
/// schedule differs between rows.
pub fn compare_schedules(cfg: &RunConfig, target: f64) -> anyhow::Result<Vec<CompareRow>> {
    if !(target > 0.0 && target < 1.0) {
        return Err(UsageError(format!("--target-reduction must lie in (0, 1), got {target}")).into());
    }
    let target_pct = 100.0 * target;
    let mut model = cfg.model.clone();
    model.splitting_depth = model.depth;
    let mut run_cfg = cfg.clone();
    run_cfg.model = model.clone();
    let weights = cfg.load_weights()?;
    let batches = cfg.batches()?;
    let batch = &batches[0];
    let initial = match batch {
        Batch::Images { .. } => model.num_tokens(),
        Batch::Dump { tokens, .. } => tokens.num_tokens(),
    };

    let real = |s: &MergeSchedule| -> anyhow::Result<Evaluation> {
        let (out, cost) = run_batch(&run_cfg, &weights, batch, s)?;
        Ok(Evaluation { cost, merged_per_layer: out.trace.merged_per_layer() })
    };
    let analytic = |s: &MergeSchedule| -> anyhow::Result<Evaluation> {
        let counts = planned_token_counts(
            initial,
            model.use_cls_token,
            model.depth,
            s,
            model.splitting_depth,
            model.final_layer_cls_only,
        )
        .context("schedule is content dependent")?;
        Ok(Evaluation {
            cost: cost::trace_flops(&counts, &model)?,
            merged_per_layer: counts.iter().map(|(a, b)| a - b).collect(),
        })
    };
    // Confirms the analytic choice with a real forward.
    let confirm = |mut r: SearchResult| -> anyhow::Result<SearchResult> {
        let e = real(&r.schedule)?;
        if e.merged_per_layer != r.merged_per_layer {
            return Err(anyhow::anyhow!("forward merged {:?}, planned {:?}", e.merged_per_layer, r.merged_per_layer));
        }
        r.reduction_percent = e.cost.reduction_percent;
        r.gflops = e.cost.gflops;
        r.cost = Some(e.cost);
        Ok(r)
    };

    let (alpha, beta) = threshold_defaults(&cfg.schedule);
    let hi = initial + model.depth;
    let mut rows = Vec::new();
    let ld = search_continuous(
        "theta_min",
        1e-3,
        alpha,
        target_pct,
        |t| MergeSchedule::LayerDependentThreshold(ThresholdParams { alpha, beta, theta_min: t }),
        real,
    )?;
    rows.push(CompareRow { kind: "layer_dependent_threshold", result: ld });
    let ct =
        search_continuous("theta", 1e-3, 1.0, target_pct, |theta| MergeSchedule::ConstantThreshold { theta }, real)?;
    rows.push(CompareRow { kind: "constant_threshold", result: ct });
    let r = search_integer("r", hi, target_pct, |r| MergeSchedule::ConstantTopR { r }, analytic)?;
    rows.push(CompareRow { kind: "constant_top_r", result: confirm(r)? });
    let r = search_integer("r0", hi, target_pct, |r0| MergeSchedule::IncreasingTopR { r0 }, analytic)?;
    rows.push(CompareRow { kind: "increasing_top_r", result: confirm(r)? });
    let r = search_integer("r0", hi, target_pct, |r0| MergeSchedule::DecreasingTopR { r0 }, analytic)?;
    rows.push(CompareRow { kind: "decreasing_top_r", result: confirm(r)? });
    Ok(rows)
}

pub fn cmd_compare_schedules(cfg: &RunConfig, target: f64) -> anyhow::Result<Outcome> {
    let rows = compare_schedules(cfg, target)?;
    let dir = &cfg.output;
    fs::create_dir_all(dir)?;
    let mut w = JsonlWriter::create(&dir.join("compare.jsonl"))?;
    let mut table = csv::Writer::from_path(dir.join("compare.csv"))?;
    table.write_record([
        "schedule",
        "parameter",
        "value",
        "feasible",
        "within_tolerance",
        "reduction_percent",
        "gflops",
        "iterations",
    ])?;
    for row in &rows {
        let r = &row.result;
        let mut rec = serde_json::to_value(row)?;
        rec["type"] = json!(if r.feasible { "schedule_result" } else { "infeasible" });
        w.write(&rec)?;
        for (i, m) in r.merged_per_layer.iter().enumerate() {
            w.write(&json!({"type": "layer_merges", "schedule": row.kind, "layer": i + 1, "merged": m}))?;
        }
        if let Some(c) = &r.cost {
            w.write(&json!({"type": "cost", "schedule": row.kind, "report": c}))?;
        }
        table.write_record([
            row.kind.to_string(),
            r.parameter.to_string(),
            r.value.to_string(),
            r.feasible.to_string(),
            r.within_tolerance.to_string(),
            format!("{:.3}", r.reduction_percent),
            format!("{:.4}", r.gflops),
            r.iterations.to_string(),
        ])?;
        if r.feasible {
            println!(
                "{:<26} {:<18} reduction {:6.2}%  {:.3} GFLOPs  {}",
                row.kind,
                format!("{}={}", r.parameter, r.value),
                r.reduction_percent,
                r.gflops,
                if r.within_tolerance { "ok" } else { "outside tolerance" }
            );
        } else if let Some(min) = r.min_reduction_percent {
            println!("{:<26} infeasible: at least {:.2}% reduction, target {:.2}%", row.kind, min, r.target_percent);
        } else {
            println!(
                "{:<26} infeasible: at most {:.2}% reduction, target {:.2}%",
                row.kind, r.max_reduction_percent, r.target_percent
            );
        }
    }
    w.flush()?;
    table.flush()?;

    let mut dist = csv::Writer::from_path(dir.join("distribution.csv"))?;
    let mut header = vec!["layer".to_string()];
    header.extend(rows.iter().map(|r| r.kind.to_string()));
    dist.write_record(&header)?;
    for layer in 0..cfg.model.depth {
        let mut rec = vec![(layer + 1).to_string()];
        rec.extend(rows.iter().map(|r| r.result.merged_per_layer.get(layer).copied().unwrap_or(0).to_string()));
        dist.write_record(&rec)?;
    }
    dist.flush()?;
    Ok(Outcome::Success)
}

pub fn sweep_key(p: &ThresholdParams) -> String {
    format!("{:.3}|{:.3}|{:.3}", p.alpha, p.beta, p.theta_min)
}

fn sweep_point(cfg: &RunConfig, weights: &ModelWeights, batches: &[Batch], p: ThresholdParams) -> serde_json::Value {
    let schedule = MergeSchedule::LayerDependentThreshold(p);
    let key = sweep_key(&p);
    let result: anyhow::Result<serde_json::Value> = (|| {
        let mut costs = Vec::new();
        let mut merged = Vec::new();
        for b in batches {
            let (out, cost) = run_batch(cfg, weights, b, &schedule)?;
            merged.push(out.trace.merged_per_layer());
            costs.push((b.len(), cost));
        }
        let s = summarize(&costs, &cfg.model);
        Ok(json!({
            "type": "sweep_point",
            "key": key,
            "alpha": p.alpha,
            "beta": p.beta,
            "theta_min": p.theta_min,
            "images": s.images,
            "gflops": s.gflops,
            "baseline_gflops": s.baseline_gflops,
            "reduction_percent": s.reduction_percent,
            "merged_per_layer": merged,
        }))
    })();
    result.unwrap_or_else(|e| {
        let mut rec = report_error(&format!("sweep point {key}"), &e);
        rec["key"] = json!(key);
        rec
    })
}

/// Runs every grid point not already present in `sweep.jsonl`, appending one
/// record per point in grid order. `limit` caps the number of new points.
pub fn cmd_sweep(cfg: &RunConfig, workers: usize, limit: Option<usize>) -> anyhow::Result<Outcome> {
    let dir = &cfg.output;
    fs::create_dir_all(dir)?;
    let path = dir.join("sweep.jsonl");
    let existing = read_jsonl(&path)?;
    // Rewrite to drop a torn final line before appending.
    {
        let mut w = JsonlWriter::create(&path)?;
        for v in &existing {
            w.write(v)?;
        }
        w.flush()?;
    }
    let done: BTreeSet<String> =
        existing.iter().filter_map(|v| v.get("key").and_then(|k| k.as_str()).map(str::to_owned)).collect();
    let points = cfg.sweep.points();
    if points.is_empty() {
        return Err(ConfigError("sweep grid is empty".into()).into());
    }
    let pending: Vec<ThresholdParams> =
        points.into_iter().filter(|p| !done.contains(&sweep_key(p))).take(limit.unwrap_or(usize::MAX)).collect();
    log::info!("sweep: {} points done, {} to run", done.len(), pending.len());

    let weights = cfg.load_weights()?;
    let batches = cfg.batches()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    let mut w = JsonlWriter::append(&path)?;
    let mut errors = 0;
    for chunk in pending.chunks(workers.max(1)) {
        let recs: Vec<serde_json::Value> =
            pool.install(|| chunk.par_iter().map(|&p| sweep_point(cfg, &weights, &batches, p)).collect());
        for r in recs {
            if r["type"] == "error" {
                errors += 1;
            }
            w.write(&r)?;
        }
        w.flush()?;
    }
    println!(
        "{}",
        json!({"type": "sweep_summary", "previously_done": done.len(), "ran": pending.len(), "errors": errors})
    );
    Ok(Outcome::from_errors(errors))
}

pub fn cmd_verify(cfg: &VerifyConfig, out: Option<&Path>) -> anyhow::Result<Outcome> {
    if cfg.trials == 0 {
        return Err(UsageError("--trials must be at least 1".into()).into());
    }
    let report = verify_bounds(cfg)?;
    let summary = json!({
        "type": "verify",
        "trials": report.trials,
        "dim": report.dim,
        "seed": report.seed,
        "degenerate": report.degenerate,
        "violations": report.violations.len(),
        "tightest_lower_ratio": report.tightest_lower_ratio,
        "tightest_upper_ratio": report.tightest_upper_ratio,
        "max_closed_form_rel_diff": report.max_closed_form_rel_diff,
        "passed": report.passed(),
    });
    println!("{summary}");
    for cx in report.violations.iter().take(10) {
        eprintln!("counterexample: {}", serde_json::to_string(cx)?);
    }
    if let Some(dir) = out {
        let mut w = JsonlWriter::create(&dir.join("verify.jsonl"))?;
        w.write(&summary)?;
        for cx in &report.violations {
            let mut v = serde_json::to_value(cx)?;
            v["type"] = json!("counterexample");
            w.write(&v)?;
        }
        w.flush()?;
    }
    Ok(Outcome::from_errors(report.violations.len()))
}

pub fn check_thetas(thetas: &[f64]) -> anyhow::Result<()> {
    if thetas.is_empty() || thetas.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(UsageError(format!("thresholds must lie in (0, 1], got {thetas:?}")).into());
    }
    Ok(())
}

pub fn cmd_probe_loss(cfg: &RunConfig, thetas: &[f64]) -> anyhow::Result<Outcome> {
    check_thetas(thetas)?;
    let weights = cfg.load_weights()?;
    let batches = cfg.batches()?;
    let input: ForwardInput = batches[0].input(cfg);
    let grid = info_loss_grid(&cfg.model, &weights, &input, thetas)?;
    let dir = &cfg.output;
    fs::create_dir_all(dir)?;
    let mut w = JsonlWriter::create(&dir.join("probe.jsonl"))?;
    let mut table = csv::Writer::from_path(dir.join("probe.csv"))?;
    table.write_record(["layer", "theta", "cls_distance", "merged_tokens"])?;
    for r in &grid {
        let mut v = serde_json::to_value(r)?;
        v["type"] = json!(if r.theta.is_some() { "probe" } else { "probe_average" });
        w.write(&v)?;
        table.write_record([
            r.layer.to_string(),
            r.theta.map_or_else(|| "mean".to_string(), |t| t.to_string()),
            format!("{:e}", r.cls_distance),
            r.merged_tokens.to_string(),
        ])?;
    }
    w.flush()?;
    table.flush()?;
    println!(
        "{}",
        json!({"type": "probe_summary", "layers": cfg.model.depth, "thetas": thetas, "records": grid.len()})
    );
    Ok(Outcome::Success)
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityRow {
    pub batch_size: usize,
    #[serde(flatten)]
    pub summary: Summary,
    /// Merge count per layer for each batch.
    pub r_per_batch: Vec<Vec<usize>>,
}

/// Re-batches the image pool at each size and costs the runs.
pub fn batch_sensitivity(cfg: &RunConfig, sizes: &[usize]) -> anyhow::Result<Vec<SensitivityRow>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(UsageError(format!("batch sizes must be at least 1, got {sizes:?}")).into());
    }
    let pool = cfg.image_pool()?;
    let weights = cfg.load_weights()?;
    let mut rows = Vec::new();
    for &size in sizes {
        if pool.len() < size {
            return Err(
                ConfigError(format!("input pool has {} images, fewer than batch size {size}", pool.len())).into()
            );
        }
        let mut costs = Vec::new();
        let mut rs = Vec::new();
        for (i, chunk) in pool.chunks(size).enumerate() {
            let batch = Batch::Images { first_index: i * size, raw: chunk.to_vec() };
            let (out, cost) = run_batch(cfg, &weights, &batch, &cfg.schedule)?;
            rs.push(out.trace.layers.iter().map(|l| l.r).collect());
            costs.push((chunk.len(), cost));
        }
        rows.push(SensitivityRow { batch_size: size, summary: summarize(&costs, &cfg.model), r_per_batch: rs });
    }
    Ok(rows)
}

pub fn cmd_batch_sensitivity(cfg: &RunConfig, sizes: &[usize]) -> anyhow::Result<Outcome> {
    let rows = batch_sensitivity(cfg, sizes)?;
    fs::create_dir_all(&cfg.output)?;
    let mut w = JsonlWriter::create(&cfg.output.join("batch_sensitivity.jsonl"))?;
    for r in &rows {
        let mut v = serde_json::to_value(r)?;
        v["type"] = json!("batch_size");
        w.write(&v)?;
        println!(
            "batch {:>4}: {:.4} GFLOPs ({:.2}% reduction)",
            r.batch_size, r.summary.gflops, r.summary.reduction_percent
        );
    }
    w.flush()?;
    Ok(Outcome::Success)
}

pub fn cmd_render(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let weights = cfg.load_weights()?;
    let dir = cfg.output.join("token_maps");
    let mut w = JsonlWriter::create(&cfg.output.join("render.jsonl"))?;
    let mut errors = 0;
    for (b, batch) in cfg.batches()?.iter().enumerate() {
        let Batch::Images { first_index, raw } = batch else {
            log::warn!("batch {b} is a token dump; token maps need image inputs");
            continue;
        };
        let result = run_batch(cfg, &weights, batch, &cfg.schedule)
            .and_then(|(out, _)| render_maps(cfg, &weights, *first_index, raw, &out, &dir));
        match result {
            Ok(recs) => {
                for r in recs {
                    w.write(&r)?;
                }
            }
            Err(e) => {
                errors += 1;
                w.write(&report_error(&format!("batch {b}"), &e))?;
            }
        }
    }
    w.flush()?;
    Ok(Outcome::from_errors(errors))
}

pub fn flops_record(name: &str, model: &ModelConfig) -> serde_json::Value {
    let r = cost::baseline_report(model);
    json!({
        "type": "flops",
        "model": name,
        "depth": model.depth,
        "dim": model.dim,
        "tokens": model.num_tokens(),
        "embed_flops": r.embed_flops,
        "head_flops": r.head_flops,
        "block_attn_flops": r.layers[0].attn_flops,
        "block_mlp_flops": r.layers[0].mlp_flops,
        "total_flops": r.total_flops,
        "gflops": r.gflops,
    })
}

/// Baseline cost of each named model; writes `flops_<name>.csv` under `out`.
pub fn cmd_flops(models: &[(String, ModelConfig)], out: Option<&PathBuf>) -> anyhow::Result<Outcome> {
    for (name, m) in models {
        println!("{}", flops_record(name, m));
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            let f = fs::File::create(dir.join(format!("flops_{name}.csv")))?;
            cost::write_csv(&cost::baseline_report(m), f)?;
        }
    }
    Ok(Outcome::Success)
}
