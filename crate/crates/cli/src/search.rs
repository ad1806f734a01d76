//! Bisection on a schedule's free parameter to hit a target FLOPs reduction.

use atm_core::cost::CostReport;
use atm_core::MergeSchedule;
use serde::Serialize;

pub const MAX_ITERATIONS: usize = 40;
/// Accepted distance from the target, in percentage points of reduction.
pub const TOLERANCE_POINTS: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: CostReport,
    pub merged_per_layer: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchResult {
    pub schedule: MergeSchedule,
    pub parameter: &'static str,
    pub value: f64,
    pub feasible: bool,
    pub within_tolerance: bool,
    pub iterations: usize,
    pub target_percent: f64,
    pub reduction_percent: f64,
    pub gflops: f64,
    /// Reduction at the most aggressive parameter value.
    pub max_reduction_percent: f64,
    /// Reduction at the most conservative value, when even that overshoots.
    pub min_reduction_percent: Option<f64>,
    pub merged_per_layer: Vec<usize>,
    #[serde(skip)]
    pub cost: Option<CostReport>,
}

struct Best {
    value: f64,
    schedule: MergeSchedule,
    eval: Evaluation,
}

fn finish(
    parameter: &'static str,
    best: Best,
    target: f64,
    iterations: usize,
    max_reduction: f64,
    feasible: bool,
) -> SearchResult {
    let red = best.eval.cost.reduction_percent;
    SearchResult {
        schedule: best.schedule,
        parameter,
        value: best.value,
        feasible,
        within_tolerance: feasible && (red - target).abs() <= TOLERANCE_POINTS,
        iterations,
        target_percent: target,
        reduction_percent: red,
        gflops: best.eval.cost.gflops,
        max_reduction_percent: max_reduction,
        min_reduction_percent: None,
        merged_per_layer: best.eval.merged_per_layer,
        cost: Some(best.eval.cost),
    }
}

/// Integer parameter in `0..=hi` where reduction does not decrease as the
/// parameter grows. Picks the value whose reduction is closest to `target`.
pub fn search_integer(
    parameter: &'static str,
    hi: usize,
    target: f64,
    make: impl Fn(usize) -> MergeSchedule,
    mut eval: impl FnMut(&MergeSchedule) -> anyhow::Result<Evaluation>,
) -> anyhow::Result<SearchResult> {
    let mut iterations = 0;
    let mut at = |k: usize, iterations: &mut usize| -> anyhow::Result<Best> {
        *iterations += 1;
        let schedule = make(k);
        Ok(Best { value: k as f64, schedule, eval: eval(&schedule)? })
    };
    let top = at(hi, &mut iterations)?;
    let max_reduction = top.eval.cost.reduction_percent;
    if max_reduction < target - TOLERANCE_POINTS {
        return Ok(finish(parameter, top, target, iterations, max_reduction, false));
    }
    // Smallest k with reduction >= target.
    let (mut lo, mut hi_k) = (0usize, hi);
    let mut upper = top;
    while lo < hi_k && iterations < MAX_ITERATIONS {
        let mid = lo + (hi_k - lo) / 2;
        let b = at(mid, &mut iterations)?;
        if b.eval.cost.reduction_percent >= target {
            hi_k = mid;
            upper = b;
        } else {
            lo = mid + 1;
        }
    }
    let best = if hi_k > 0 && iterations < MAX_ITERATIONS {
        let below = at(hi_k - 1, &mut iterations)?;
        let du = (upper.eval.cost.reduction_percent - target).abs();
        let db = (below.eval.cost.reduction_percent - target).abs();
        if db < du {
            below
        } else {
            upper
        }
    } else {
        upper
    };
    Ok(finish(parameter, best, target, iterations, max_reduction, true))
}

/// Real parameter in `[lo, hi]` where reduction does not increase as the
/// parameter grows (thresholds).
pub fn search_continuous(
    parameter: &'static str,
    lo: f64,
    hi: f64,
    target: f64,
    make: impl Fn(f64) -> MergeSchedule,
    mut eval: impl FnMut(&MergeSchedule) -> anyhow::Result<Evaluation>,
) -> anyhow::Result<SearchResult> {
    let mut at = |x: f64| -> anyhow::Result<Best> {
        let schedule = make(x);
        Ok(Best { value: x, schedule, eval: eval(&schedule)? })
    };
    let dist = |b: &Best| (b.eval.cost.reduction_percent - target).abs();
    let aggressive = at(lo)?;
    let max_reduction = aggressive.eval.cost.reduction_percent;
    if max_reduction < target - TOLERANCE_POINTS {
        return Ok(finish(parameter, aggressive, target, 1, max_reduction, false));
    }
    let conservative = at(hi)?;
    if conservative.eval.cost.reduction_percent > target + TOLERANCE_POINTS {
        let min = conservative.eval.cost.reduction_percent;
        let mut r = finish(parameter, conservative, target, 2, max_reduction, false);
        r.min_reduction_percent = Some(min);
        return Ok(r);
    }
    let mut best = if dist(&conservative) < dist(&aggressive) { conservative } else { aggressive };
    let (mut a, mut b) = (lo, hi);
    let mut iterations = 2;
    while dist(&best) > TOLERANCE_POINTS && iterations < MAX_ITERATIONS {
        let mid = 0.5 * (a + b);
        let probe = at(mid)?;
        iterations += 1;
        if probe.eval.cost.reduction_percent > target {
            a = mid;
        } else {
            b = mid;
        }
        if dist(&probe) < dist(&best) {
            best = probe;
        }
    }
    Ok(finish(parameter, best, target, iterations, max_reduction, true))
}
