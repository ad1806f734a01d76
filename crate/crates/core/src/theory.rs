//! Merging error of a weighted two-token merge, its closed form and bounds,
//! plus a layer-wise information-loss probe. Everything here is `f64`.
//!
//! For unit vectors `x_i`, `x_j` with sizes `n_i`, `n_j`, the merged token is
//! `X = (n_i x_i + n_j x_j) / (n_i + n_j)` and the error is
//! `E = n_i d(x_i, X) + n_j d(x_j, X)` with `d` the cosine distance. It
//! equals `N - sqrt(N^2 - 2 M delta)` for `N = n_i + n_j`, `M = n_i n_j`, and
//! lies between `(M / N) delta` and `(2 M / N) delta`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{AtmError, Result};
use crate::merging::MergeSchedule;
use crate::model::{forward, forward_with, ForwardInput, ModelConfig, ModelWeights};

pub const UNIT_TOLERANCE: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine distance `1 - cos`, evaluated as half the squared distance of the
/// normalized vectors so that near-parallel inputs keep full precision.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(AtmError::DegenerateInput("cosine distance of a zero vector".into()));
    }
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x / na - y / nb;
            d * d
        })
        .sum();
    Ok((sq / 2.0).min(2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeErrorCase {
    pub x_i: Vec<f64>,
    pub x_j: Vec<f64>,
    pub n_i: u64,
    pub n_j: u64,
    pub delta: f64,
}

impl MergeErrorCase {
    /// Inputs must already be unit length; they are not renormalized.
    pub fn new(x_i: Vec<f64>, x_j: Vec<f64>, n_i: u64, n_j: u64) -> Result<Self> {
        if x_i.len() != x_j.len() || x_i.is_empty() {
            return Err(AtmError::Shape(format!("vectors of length {} and {}", x_i.len(), x_j.len())));
        }
        if n_i == 0 || n_j == 0 {
            return Err(AtmError::InvalidConfig("merging sizes must be at least 1".into()));
        }
        for (name, v) in [("x_i", &x_i), ("x_j", &x_j)] {
            let n = norm(v);
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(AtmError::DegenerateInput(format!("{name} has norm {n}, expected a unit vector")));
            }
        }
        let delta = cosine_distance(&x_i, &x_j)?;
        Ok(Self { x_i, x_j, n_i, n_j, delta })
    }

    pub fn cos(&self) -> f64 {
        dot(&self.x_i, &self.x_j).clamp(-1.0, 1.0)
    }

    /// `1 + cos`, evaluated without cancellation near antipodal inputs.
    pub fn one_plus_cos(&self) -> f64 {
        let (ni, nj) = (norm(&self.x_i), norm(&self.x_j));
        let sq: f64 = self
            .x_i
            .iter()
            .zip(&self.x_j)
            .map(|(a, b)| {
                let s = a / ni + b / nj;
                s * s
            })
            .sum();
        (sq / 2.0).min(2.0)
    }
}

/// Forms the merged vector explicitly and sums the two weighted distances.
pub fn merging_error_direct(c: &MergeErrorCase) -> Result<f64> {
    let w = c.n_j as f64 / (c.n_i + c.n_j) as f64;
    let merged: Vec<f64> = c.x_i.iter().zip(&c.x_j).map(|(a, b)| a + w * (b - a)).collect();
    if norm(&merged) == 0.0 {
        return Err(AtmError::DegenerateMerge(format!(
            "antipodal tokens of equal size {} merge to the zero vector",
            c.n_i
        )));
    }
    let di = cosine_distance(&c.x_i, &merged)?;
    let dj = cosine_distance(&c.x_j, &merged)?;
    Ok(c.n_i as f64 * di + c.n_j as f64 * dj)
}

/// Closed form in terms of the distance `delta = 1 - cos`.
pub fn merging_error_closed_delta(n_i: u64, n_j: u64, delta: f64) -> f64 {
    let n = (n_i + n_j) as f64;
    let m = n_i as f64 * n_j as f64;
    let radicand = (n * n - 2.0 * m * delta).max(0.0);
    2.0 * m * delta / (n + radicand.sqrt())
}

/// Closed form from both `delta = 1 - cos` and `1 + cos`; the radicand is
/// written as `(n_i - n_j)^2 + 2 M (1 + cos)` so neither end of the cosine
/// range loses precision.
pub fn merging_error_closed_stable(n_i: u64, n_j: u64, delta: f64, one_plus_cos: f64) -> f64 {
    let n = (n_i + n_j) as f64;
    let m = n_i as f64 * n_j as f64;
    let diff = n_i as f64 - n_j as f64;
    let radicand = diff * diff + 2.0 * m * one_plus_cos;
    2.0 * m * delta / (n + radicand.sqrt())
}

/// `(n_i + n_j) - sqrt(n_i^2 + n_j^2 + 2 n_i n_j cos)`.
pub fn merging_error_closed(n_i: u64, n_j: u64, cos_ij: f64) -> f64 {
    merging_error_closed_delta(n_i, n_j, 1.0 - cos_ij.clamp(-1.0, 1.0))
}

/// `((M / N) delta, (2 M / N) delta)`.
pub fn theorem1_bounds(n_i: u64, n_j: u64, delta: f64) -> (f64, f64) {
    let c = bound_coefficient(n_i, n_j);
    (c * delta, 2.0 * c * delta)
}

/// `n_i n_j / (n_i + n_j)`.
pub fn bound_coefficient(n_i: u64, n_j: u64) -> f64 {
    n_i as f64 * n_j as f64 / (n_i + n_j) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub trials: usize,
    pub dim: usize,
    pub seed: u64,
    pub max_size: u64,
    /// Multiplier of `(M / N) delta` used as the upper bound; 2 is the true
    /// bound, smaller values inject a fault.
    pub upper_coefficient: f64,
    /// Relative agreement demanded between the direct and closed forms.
    pub closed_form_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { trials: 100_000, dim: 64, seed: 0, max_size: 1000, upper_coefficient: 2.0, closed_form_tolerance: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    pub trial: usize,
    pub kind: &'static str,
    pub case: MergeErrorCase,
    pub direct: f64,
    pub closed: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub trials: usize,
    pub dim: usize,
    pub seed: u64,
    pub degenerate: usize,
    /// Smallest `E / lower` seen (1 means the lower bound was attained).
    pub tightest_lower_ratio: f64,
    /// Largest `E / upper` seen (1 means the upper bound was attained).
    pub tightest_upper_ratio: f64,
    pub max_closed_form_rel_diff: f64,
    pub violations: Vec<Counterexample>,
}

impl BoundsReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Random unit vector from a rotation-invariant distribution.
pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Renormalizes until the norm is within [`UNIT_TOLERANCE`] of one.
fn unitize(mut v: Vec<f64>) -> Vec<f64> {
    for _ in 0..4 {
        let n = norm(&v);
        if (n - 1.0).abs() <= UNIT_TOLERANCE / 4.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Draw for one trial; every trial has its own ChaCha stream, so results do
/// not depend on evaluation order.
pub fn random_case(seed: u64, trial: usize, dim: usize, max_size: u64) -> Result<MergeErrorCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let x_i = unitize(random_unit(&mut rng, dim));
    let x_j = unitize(random_unit(&mut rng, dim));
    let n_i = rng.random_range(1..=max_size);
    let n_j = rng.random_range(1..=max_size);
    MergeErrorCase::new(x_i, x_j, n_i, n_j)
}

/// Checks one case. Bounds are compared with a few ulps of slack since the
/// upper bound is approached (not reached) by near-antipodal equal sizes.
pub fn check_case(
    trial: usize,
    case: MergeErrorCase,
    upper_coefficient: f64,
    closed_tol: f64,
) -> Result<(f64, f64, f64, Option<Counterexample>)> {
    let direct = merging_error_direct(&case)?;
    let closed = merging_error_closed_stable(case.n_i, case.n_j, case.delta, case.one_plus_cos());
    let coef = bound_coefficient(case.n_i, case.n_j);
    let lower = coef * case.delta;
    let upper = upper_coefficient * coef * case.delta;
    let slack = 8.0 * f64::EPSILON;
    let rel =
        if closed == 0.0 && direct == 0.0 { 0.0 } else { (direct - closed).abs() / direct.abs().max(closed.abs()) };
    let kind = if direct < lower * (1.0 - slack) {
        Some("below-lower-bound")
    } else if direct > upper * (1.0 + slack) {
        Some("above-upper-bound")
    } else if rel > closed_tol {
        Some("closed-form-mismatch")
    } else {
        None
    };
    let lower_ratio = if lower > 0.0 { direct / lower } else { 1.0 };
    let upper_ratio = if upper > 0.0 { direct / upper } else { 0.0 };
    let cx = kind.map(|kind| Counterexample { trial, kind, case, direct, closed, lower, upper });
    Ok((lower_ratio, upper_ratio, rel, cx))
}

pub fn verify_bounds(cfg: &VerifyConfig) -> Result<BoundsReport> {
    if cfg.trials == 0 {
        return Err(AtmError::InvalidConfig("trials must be at least 1".into()));
    }
    if cfg.dim < 2 || cfg.max_size == 0 {
        return Err(AtmError::InvalidConfig("need dim >= 2 and max_size >= 1".into()));
    }
    let mut report = BoundsReport {
        trials: cfg.trials,
        dim: cfg.dim,
        seed: cfg.seed,
        degenerate: 0,
        tightest_lower_ratio: f64::INFINITY,
        tightest_upper_ratio: 0.0,
        max_closed_form_rel_diff: 0.0,
        violations: Vec::new(),
    };
    for trial in 0..cfg.trials {
        let case = random_case(cfg.seed, trial, cfg.dim, cfg.max_size)?;
        match check_case(trial, case, cfg.upper_coefficient, cfg.closed_form_tolerance) {
            Ok((lo, hi, rel, cx)) => {
                report.tightest_lower_ratio = report.tightest_lower_ratio.min(lo);
                report.tightest_upper_ratio = report.tightest_upper_ratio.max(hi);
                report.max_closed_form_rel_diff = report.max_closed_form_rel_diff.max(rel);
                report.violations.extend(cx);
            }
            Err(AtmError::DegenerateMerge(_)) => report.degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// One cell of the layer x threshold information-loss grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRecord {
    pub layer: usize,
    /// `None` marks the per-layer average across thresholds.
    pub theta: Option<f64>,
    pub cls_distance: f64,
    pub merged_tokens: usize,
}

fn mean_cls_distance(base: &[Vec<f32>], probe: &[Vec<f32>]) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in base.iter().zip(probe) {
        let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        total += cosine_distance(&a, &b)?;
    }
    Ok(total / base.len().max(1) as f64)
}

fn probe_against(
    baseline: &[Vec<f32>],
    input: &ForwardInput,
    cfg: &ModelConfig,
    weights: &ModelWeights,
    layer: usize,
    theta: f64,
) -> Result<ProbeRecord> {
    if layer == 0 || layer > cfg.depth {
        return Err(AtmError::InvalidConfig(format!("probe layer {layer} outside 1..={}", cfg.depth)));
    }
    let schedule = MergeSchedule::ConstantThreshold { theta };
    let out = forward_with(input.clone(), cfg, weights, &schedule, |l| l == layer)?;
    Ok(ProbeRecord {
        layer,
        theta: Some(theta),
        cls_distance: mean_cls_distance(baseline, &out.features)?,
        merged_tokens: out.trace.merged_per_layer().iter().sum(),
    })
}

/// Mean cosine distance between final CLS representations of an unmerged
/// forward and one that merges only in `layer` at constant `theta`.
pub fn info_loss_probe(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    input: &ForwardInput,
    layer: usize,
    theta: f64,
) -> Result<f64> {
    let base = forward(input.clone(), cfg, weights, &MergeSchedule::NoOp)?;
    probe_against(&base.features, input, cfg, weights, layer, theta).map(|r| r.cls_distance)
}

/// Full grid: for each layer, one record per theta followed by the average.
pub fn info_loss_grid(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    input: &ForwardInput,
    thetas: &[f64],
) -> Result<Vec<ProbeRecord>> {
    if thetas.is_empty() {
        return Err(AtmError::InvalidConfig("no thresholds to probe".into()));
    }
    let base = forward(input.clone(), cfg, weights, &MergeSchedule::NoOp)?;
    let mut out = Vec::with_capacity(cfg.depth * (thetas.len() + 1));
    for layer in 1..=cfg.depth {
        let mut sum = 0.0;
        let mut merged = 0;
        for &theta in thetas {
            let rec = probe_against(&base.features, input, cfg, weights, layer, theta)?;
            sum += rec.cls_distance;
            merged += rec.merged_tokens;
            out.push(rec);
        }
        out.push(ProbeRecord {
            layer,
            theta: None,
            cls_distance: sum / thetas.len() as f64,
            merged_tokens: merged / thetas.len(),
        });
    }
    Ok(out)
}
