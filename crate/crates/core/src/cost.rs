//! Analytic operation counts for ViT inference.
//!
//! One multiply-accumulate is one operation. Softmax, normalization,
//! activations, residual adds and biases are not counted.

use std::io::Write;

use serde::Serialize;

use crate::error::{AtmError, Result};
use crate::model::{ModelConfig, Trace};

/// Attention and MLP operation counts of one block over `n` tokens.
///
/// Attention: `4 n d^2` for the QKV and output projections plus `2 n^2 d`
/// for the scores and the weighted value sum. MLP: `2 n d h` for the two
/// linear layers with hidden width `h`.
pub fn block_flops(n: usize, dim: usize, mlp_hidden: usize) -> (u64, u64) {
    (attn_flops(n, dim), mlp_flops(n, dim, mlp_hidden))
}

pub fn attn_flops(n: usize, dim: usize) -> u64 {
    let (n, d) = (n as u64, dim as u64);
    4 * n * d * d + 2 * n * n * d
}

pub fn mlp_flops(n: usize, dim: usize, mlp_hidden: usize) -> u64 {
    2 * n as u64 * dim as u64 * mlp_hidden as u64
}

pub fn embed_flops(cfg: &ModelConfig) -> u64 {
    (cfg.num_patches() * cfg.patch_features() * cfg.dim) as u64
}

pub fn head_flops(cfg: &ModelConfig) -> u64 {
    (cfg.dim * cfg.num_classes) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub tokens_attn: usize,
    pub tokens_mlp: usize,
    pub attn_flops: u64,
    pub mlp_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub embed_flops: u64,
    pub head_flops: u64,
    pub total_flops: u64,
    pub gflops: f64,
    pub baseline_flops: u64,
    pub baseline_gflops: f64,
    /// `100 * (baseline - total) / baseline`.
    pub reduction_percent: f64,
}

/// Costs a forward given `(tokens entering attention, tokens entering the
/// MLP)` for each layer.
pub fn trace_flops(counts: &[(usize, usize)], cfg: &ModelConfig) -> Result<CostReport> {
    if counts.len() != cfg.depth {
        return Err(AtmError::Shape(format!("trace has {} layers, model has {}", counts.len(), cfg.depth)));
    }
    let (d, h) = (cfg.dim, cfg.mlp_hidden());
    let layers: Vec<LayerCost> = counts
        .iter()
        .enumerate()
        .map(|(i, &(na, nm))| LayerCost {
            layer: i + 1,
            tokens_attn: na,
            tokens_mlp: nm,
            attn_flops: attn_flops(na, d),
            mlp_flops: mlp_flops(nm, d, h),
        })
        .collect();
    let embed = embed_flops(cfg);
    let head = head_flops(cfg);
    let total = embed + head + layers.iter().map(|l| l.attn_flops + l.mlp_flops).sum::<u64>();
    let baseline = baseline_flops(cfg);
    Ok(CostReport {
        layers,
        embed_flops: embed,
        head_flops: head,
        total_flops: total,
        gflops: total as f64 / 1e9,
        baseline_flops: baseline,
        baseline_gflops: baseline as f64 / 1e9,
        reduction_percent: 100.0 * (baseline as f64 - total as f64) / baseline as f64,
    })
}

pub fn trace_cost(trace: &Trace, cfg: &ModelConfig) -> Result<CostReport> {
    trace_flops(&trace.token_counts(), cfg)
}

/// Every layer at the full token count.
pub fn baseline_flops(cfg: &ModelConfig) -> u64 {
    let (n, d, h) = (cfg.num_tokens(), cfg.dim, cfg.mlp_hidden());
    let (a, m) = block_flops(n, d, h);
    embed_flops(cfg) + head_flops(cfg) + cfg.depth as u64 * (a + m)
}

pub fn baseline_report(cfg: &ModelConfig) -> CostReport {
    let n = cfg.num_tokens();
    trace_flops(&vec![(n, n); cfg.depth], cfg).expect("depth-length trace")
}

/// Per-layer rows followed by a `total` row.
pub fn write_csv<W: Write>(report: &CostReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| AtmError::Io(std::io::Error::other(e));
    w.write_record(["layer", "tokens_attn", "tokens_mlp", "attn_flops", "mlp_flops"]).map_err(csv_err)?;
    for l in &report.layers {
        w.write_record([
            l.layer.to_string(),
            l.tokens_attn.to_string(),
            l.tokens_mlp.to_string(),
            l.attn_flops.to_string(),
            l.mlp_flops.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let attn: u64 = report.layers.iter().map(|l| l.attn_flops).sum();
    let mlp: u64 = report.layers.iter().map(|l| l.mlp_flops).sum();
    w.write_record(["total".into(), String::new(), String::new(), attn.to_string(), mlp.to_string()])
        .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}
