//! Adaptive token merging: grouping, bipartite matching, layer-dependent
//! thresholds, the batch-wide merge count and the size-weighted merge.
//!
//! One call to [`step`] performs the whole per-layer procedure:
//!
//! 1. split the non-CLS tokens into a source and a destination group,
//!    alternating by position up to the splitting depth and by merging size
//!    after it;
//! 2. pair every source token with its most similar destination token;
//! 3. resolve how many pairs to merge, either from a similarity threshold
//!    averaged over the batch or from a fixed top-r rule;
//! 4. merge that many of the most similar pairs in every image.
//!
//! All tie-breaks resolve to the lowest token index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};
use crate::model::TokenBatch;
use crate::numeric::Matrix;

/// Parameters of the decaying per-layer similarity threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub alpha: f64,
    pub beta: f64,
    pub theta_min: f64,
}

impl ThresholdParams {
    pub fn new(alpha: f64, beta: f64, theta_min: f64) -> Result<Self> {
        let p = Self { alpha, beta, theta_min };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.theta_min > 0.0
            && self.theta_min <= self.alpha
            && self.alpha <= 1.0
            && self.beta >= 0.0
            && self.beta.is_finite();
        if ok {
            Ok(())
        } else {
            Err(AtmError::InvalidConfig(format!(
                "threshold parameters need 0 < theta_min <= alpha <= 1 and beta >= 0, got {self:?}"
            )))
        }
    }
}

/// `max(alpha - (exp(beta * (layer - 1)) - 1), theta_min)`, layers counted from 1.
pub fn layer_threshold(layer: usize, p: &ThresholdParams) -> f64 {
    let l = layer.max(1) as f64;
    let decayed = p.alpha - ((p.beta * (l - 1.0)).exp() - 1.0);
    decayed.max(p.theta_min)
}

/// Inclusive range of values `start, start + step, ..., end`, all in
/// thousandths, so every grid point is the nearest `f64` to a 3-decimal value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilliRange {
    pub start: u32,
    pub end: u32,
    pub step: u32,
}

impl MilliRange {
    pub fn values(&self) -> Vec<f64> {
        if self.step == 0 || self.end < self.start {
            return Vec::new();
        }
        (self.start..=self.end).step_by(self.step as usize).map(|k| k as f64 / 1000.0).collect()
    }
}

/// `(alpha, beta, theta_min)` grid for threshold sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub alpha: MilliRange,
    pub beta: MilliRange,
    pub theta_min: MilliRange,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            alpha: MilliRange { start: 945, end: 1000, step: 5 },
            beta: MilliRange { start: 15, end: 50, step: 5 },
            theta_min: MilliRange { start: 800, end: 945, step: 5 },
        }
    }
}

impl ThresholdGrid {
    /// Every combination, `theta_min <= alpha` or not, alpha-major.
    pub fn candidates(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for a in self.alpha.values() {
            for b in self.beta.values() {
                for t in self.theta_min.values() {
                    out.push((a, b, t));
                }
            }
        }
        out
    }

    /// Combinations that form valid parameters.
    pub fn points(&self) -> Vec<ThresholdParams> {
        self.candidates().into_iter().filter_map(|(a, b, t)| ThresholdParams::new(a, b, t).ok()).collect()
    }
}

/// How many token pairs each layer merges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeSchedule {
    LayerDependentThreshold(ThresholdParams),
    ConstantThreshold {
        theta: f64,
    },
    ConstantTopR {
        r: usize,
    },
    /// `r0 + (l - 1)` merges at layer `l`.
    IncreasingTopR {
        r0: usize,
    },
    /// `r0 - (l - 1)` merges at layer `l`, floored at zero.
    DecreasingTopR {
        r0: usize,
    },
    NoOp,
}

impl MergeSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            MergeSchedule::LayerDependentThreshold(p) => p.validate(),
            MergeSchedule::ConstantThreshold { theta } => {
                if *theta > 0.0 && *theta <= 1.0 {
                    Ok(())
                } else {
                    Err(AtmError::InvalidConfig(format!("constant threshold must lie in (0, 1], got {theta}")))
                }
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MergeSchedule::LayerDependentThreshold(_) => "layer_dependent_threshold",
            MergeSchedule::ConstantThreshold { .. } => "constant_threshold",
            MergeSchedule::ConstantTopR { .. } => "constant_top_r",
            MergeSchedule::IncreasingTopR { .. } => "increasing_top_r",
            MergeSchedule::DecreasingTopR { .. } => "decreasing_top_r",
            MergeSchedule::NoOp => "no_op",
        }
    }

    /// Threshold in force at `layer`, for the threshold-based kinds.
    pub fn threshold(&self, layer: usize) -> Option<f64> {
        match self {
            MergeSchedule::LayerDependentThreshold(p) => Some(layer_threshold(layer, p)),
            MergeSchedule::ConstantThreshold { theta } => Some(*theta),
            _ => None,
        }
    }

    /// Requested merge count at `layer` for the top-r kinds, before clamping
    /// to the number of available pairs.
    pub fn top_r(&self, layer: usize) -> Option<usize> {
        let offset = layer.saturating_sub(1);
        match self {
            MergeSchedule::ConstantTopR { r } => Some(*r),
            MergeSchedule::IncreasingTopR { r0 } => Some(r0 + offset),
            MergeSchedule::DecreasingTopR { r0 } => Some(r0.saturating_sub(offset)),
            MergeSchedule::NoOp => Some(0),
            _ => None,
        }
    }

    /// True when the merge counts depend only on token counts, not content.
    pub fn is_content_independent(&self) -> bool {
        self.threshold(1).is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Alternate,
    SizeDistinctive,
}

/// Grouping used at `layer` given the splitting depth.
pub fn grouping_for_layer(layer: usize, splitting_depth: usize) -> Grouping {
    if layer <= splitting_depth {
        Grouping::Alternate
    } else {
        Grouping::SizeDistinctive
    }
}

/// Token indices (into the current token array) of the two matching groups.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl Split {
    /// Number of candidate pairs: one per source token, if any destination exists.
    pub fn pair_count(&self) -> usize {
        if self.dst.is_empty() {
            0
        } else {
            self.src.len()
        }
    }
}

fn non_cls(n: usize, cls_index: Option<usize>) -> impl Iterator<Item = usize> {
    (0..n).filter(move |&i| Some(i) != cls_index)
}

/// Even positions of the non-CLS tokens become sources, odd ones destinations.
pub fn alternate_split(n: usize, cls_index: Option<usize>) -> Split {
    let mut split = Split::default();
    for (pos, idx) in non_cls(n, cls_index).enumerate() {
        if pos % 2 == 0 {
            split.src.push(idx);
        } else {
            split.dst.push(idx);
        }
    }
    split
}

/// Sorts non-CLS tokens by merging size (stable in index) and gives the
/// smaller half to the sources. An odd count leaves the extra token in the
/// destination group.
pub fn size_distinctive_split(sizes: &[u32], cls_index: Option<usize>) -> Split {
    let mut order: Vec<usize> = non_cls(sizes.len(), cls_index).collect();
    order.sort_by_key(|&i| (sizes[i], i));
    let half = order.len() / 2;
    let dst = order.split_off(half);
    Split { src: order, dst }
}

pub fn split_for(grouping: Grouping, sizes: &[u32], cls_index: Option<usize>) -> Split {
    match grouping {
        Grouping::Alternate => alternate_split(sizes.len(), cls_index),
        Grouping::SizeDistinctive => size_distinctive_split(sizes, cls_index),
    }
}

/// Candidate pairs for one image and, once resolved, how many to merge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergePlan {
    /// `(src, dst)` token indices, one entry per source token.
    pub pairs: Vec<(usize, usize)>,
    pub similarities: Vec<f64>,
    pub r: usize,
    pub theta: Option<f64>,
}

impl MergePlan {
    pub fn empty() -> Self {
        Self { pairs: Vec::new(), similarities: Vec::new(), r: 0, theta: None }
    }

    /// Pairs whose similarity is strictly above `theta`.
    pub fn count_above(&self, theta: f64) -> usize {
        self.similarities.iter().filter(|&&s| s > theta).count()
    }

    /// Pair positions ordered by descending similarity, ties by lower source index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.sort_by(|&a, &b| {
            self.similarities[b].total_cmp(&self.similarities[a]).then(self.pairs[a].0.cmp(&self.pairs[b].0))
        });
        order
    }
}

fn unit_rows(keys: &Matrix) -> Result<Vec<Vec<f64>>> {
    keys.iter_rows()
        .enumerate()
        .map(|(i, row)| {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(AtmError::DegenerateInput(format!("key of token {i} has norm {norm}")));
            }
            Ok(row.iter().map(|&v| v as f64 / norm).collect())
        })
        .collect()
}

/// Pairs each source token with its most similar destination token.
///
/// Similarity is the cosine of the L2-normalized keys, computed in f64 and
/// clamped to `[-1, 1]`. Ties go to the destination with the lowest index.
pub fn pair_tokens(keys: &Matrix, split: &Split) -> Result<MergePlan> {
    if split.pair_count() == 0 {
        return Ok(MergePlan::empty());
    }
    let mut touched: Vec<usize> = split.src.iter().chain(&split.dst).copied().collect();
    touched.sort_unstable();
    touched.dedup();
    let units = unit_rows(&keys.select_rows(&touched))?;
    let unit = |idx: usize| &units[touched.binary_search(&idx).expect("index in touched set")];

    let mut dst_sorted = split.dst.clone();
    dst_sorted.sort_unstable();

    let mut plan = MergePlan {
        pairs: Vec::with_capacity(split.src.len()),
        similarities: Vec::with_capacity(split.src.len()),
        r: 0,
        theta: None,
    };
    for &s in &split.src {
        let su = unit(s);
        let mut best = (f64::NEG_INFINITY, dst_sorted[0]);
        for &d in &dst_sorted {
            let sim: f64 = su.iter().zip(unit(d)).fold(0.0, |acc, (a, b)| acc + a * b).clamp(-1.0, 1.0);
            if sim > best.0 {
                best = (sim, d);
            }
        }
        plan.pairs.push((s, best.1));
        plan.similarities.push(best.0);
    }
    Ok(plan)
}

/// Merge count shared by the whole batch: the floored mean, over images, of
/// the number of pairs with similarity strictly above `theta`.
pub fn batch_adaptive_r(plans: &[MergePlan], theta: f64) -> usize {
    if plans.is_empty() {
        return 0;
    }
    let total: usize = plans.iter().map(|p| p.count_above(theta)).sum();
    let available = plans.iter().map(|p| p.pairs.len()).min().unwrap_or(0);
    (total / plans.len()).min(available)
}

fn merge_image(
    tokens: &Matrix,
    sizes: &[u32],
    provenance: &[Vec<u32>],
    plan: &MergePlan,
    r: usize,
) -> (Matrix, Vec<u32>, Vec<Vec<u32>>, Vec<usize>) {
    let dim = tokens.cols();
    let mut absorbed: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut removed = vec![false; tokens.rows()];
    for &k in plan.ranked().iter().take(r) {
        let (s, d) = plan.pairs[k];
        absorbed.entry(d).or_default().push(s);
        removed[s] = true;
    }

    let survivors: Vec<usize> = (0..tokens.rows()).filter(|&i| !removed[i]).collect();
    let mut data = Vec::with_capacity(survivors.len() * dim);
    let mut new_sizes = Vec::with_capacity(survivors.len());
    let mut new_prov = Vec::with_capacity(survivors.len());
    for &i in &survivors {
        match absorbed.get_mut(&i) {
            None => {
                data.extend_from_slice(tokens.row(i));
                new_sizes.push(sizes[i]);
                new_prov.push(provenance[i].clone());
            }
            Some(srcs) => {
                srcs.sort_unstable();
                let mut acc: Vec<f64> = tokens.row(i).iter().map(|&v| sizes[i] as f64 * v as f64).collect();
                let mut total = sizes[i];
                let mut prov = provenance[i].clone();
                for &s in srcs.iter() {
                    let n = sizes[s] as f64;
                    for (a, &v) in acc.iter_mut().zip(tokens.row(s)) {
                        *a += n * v as f64;
                    }
                    total += sizes[s];
                    prov.extend_from_slice(&provenance[s]);
                }
                prov.sort_unstable();
                let denom = total as f64;
                data.extend(acc.iter().map(|a| (a / denom) as f32));
                new_sizes.push(total);
                new_prov.push(prov);
            }
        }
    }
    let merged = Matrix::new(survivors.len(), dim, data).expect("row count matches");
    (merged, new_sizes, new_prov, survivors)
}

/// Merges the `r` most similar pairs of every image's plan.
///
/// A destination chosen by several sources absorbs all of them in one
/// size-weighted mean. Surviving tokens keep their relative order.
pub fn merge_tokens(x: &TokenBatch, plans: &[MergePlan], r: usize) -> Result<TokenBatch> {
    if plans.len() != x.batch_size() {
        return Err(AtmError::Shape(format!("{} merge plans for a batch of {}", plans.len(), x.batch_size())));
    }
    if let Some(p) = plans.iter().find(|p| p.pairs.len() < r) {
        return Err(AtmError::InvalidConfig(format!("cannot merge {r} pairs from a plan with {}", p.pairs.len())));
    }
    if r == 0 {
        return Ok(x.clone());
    }
    if let Some(cls) = x.cls_index() {
        if plans.iter().any(|p| p.pairs.iter().any(|&(s, d)| s == cls || d == cls)) {
            return Err(AtmError::InvariantViolation("CLS token appears in a merge plan".into()));
        }
    }

    let mut tokens = Vec::with_capacity(x.batch_size());
    let mut sizes = Vec::with_capacity(x.batch_size());
    let mut provenance = Vec::with_capacity(x.batch_size());
    let mut cls_index = x.cls_index();
    for (b, plan) in plans.iter().enumerate() {
        let (t, s, p, survivors) = merge_image(&x.tokens()[b], &x.sizes()[b], &x.provenance()[b], plan, r);
        if let Some(cls) = x.cls_index() {
            cls_index = survivors.iter().position(|&i| i == cls);
        }
        tokens.push(t);
        sizes.push(s);
        provenance.push(p);
    }
    TokenBatch::from_parts(tokens, sizes, provenance, cls_index, x.original_count())
}

/// What one layer's merging step did.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub grouping: Option<Grouping>,
    pub theta: Option<f64>,
    pub r: usize,
    pub pairs_available: usize,
    /// Per-image counts of pairs above the threshold (threshold kinds only).
    pub above_threshold: Vec<usize>,
    /// Set on the final layer when every non-CLS token was dropped.
    pub cls_only_drop: bool,
}

impl LayerRecord {
    pub fn passthrough(layer: usize, tokens: usize) -> Self {
        Self {
            layer,
            tokens_in: tokens,
            tokens_out: tokens,
            grouping: None,
            theta: None,
            r: 0,
            pairs_available: 0,
            above_threshold: Vec::new(),
            cls_only_drop: false,
        }
    }
}

/// One layer of adaptive merging on post-attention tokens.
///
/// `keys` holds one `N x d` key matrix per image, aligned with `x`.
pub fn step(
    x: &TokenBatch,
    keys: &[Matrix],
    layer: usize,
    schedule: &MergeSchedule,
    splitting_depth: usize,
) -> Result<(TokenBatch, LayerRecord)> {
    let n = x.num_tokens();
    if matches!(schedule, MergeSchedule::NoOp) {
        return Ok((x.clone(), LayerRecord::passthrough(layer, n)));
    }
    if keys.len() != x.batch_size() {
        return Err(AtmError::Shape(format!("{} key matrices for a batch of {}", keys.len(), x.batch_size())));
    }
    if let Some(k) = keys.iter().find(|k| k.rows() != n) {
        return Err(AtmError::Shape(format!("key matrix has {} rows for {n} tokens", k.rows())));
    }

    let grouping = grouping_for_layer(layer, splitting_depth);
    let mut plans = Vec::with_capacity(x.batch_size());
    for (b, k) in keys.iter().enumerate() {
        let split = split_for(grouping, &x.sizes()[b], x.cls_index());
        plans.push(pair_tokens(k, &split)?);
    }
    let available = plans.iter().map(|p| p.pairs.len()).min().unwrap_or(0);

    let theta = schedule.threshold(layer);
    let (r, above) = match theta {
        Some(t) => (batch_adaptive_r(&plans, t), plans.iter().map(|p| p.count_above(t)).collect()),
        None => (schedule.top_r(layer).unwrap_or(0).min(available), Vec::new()),
    };
    for p in &mut plans {
        p.r = r;
        p.theta = theta;
    }

    let merged = merge_tokens(x, &plans, r)?;
    let record = LayerRecord {
        layer,
        tokens_in: n,
        tokens_out: merged.num_tokens(),
        grouping: Some(grouping),
        theta,
        r,
        pairs_available: available,
        above_threshold: above,
        cls_only_drop: false,
    };
    Ok((merged, record))
}

/// Token counts per layer for content-independent schedules, without running
/// a model. Returns `(tokens_in, tokens_out)` for layers `1..=depth`.
pub fn planned_token_counts(
    initial_tokens: usize,
    has_cls: bool,
    depth: usize,
    schedule: &MergeSchedule,
    splitting_depth: usize,
    final_layer_cls_only: bool,
) -> Option<Vec<(usize, usize)>> {
    if !schedule.is_content_independent() {
        return None;
    }
    let mut n = initial_tokens;
    let mut out = Vec::with_capacity(depth);
    for layer in 1..=depth {
        if final_layer_cls_only && layer == depth {
            out.push((n, 1));
            n = 1;
            continue;
        }
        let m = n - usize::from(has_cls);
        let (src, dst) = match grouping_for_layer(layer, splitting_depth) {
            Grouping::Alternate => (m.div_ceil(2), m / 2),
            Grouping::SizeDistinctive => (m / 2, m - m / 2),
        };
        let available = if dst == 0 { 0 } else { src };
        let r = schedule.top_r(layer).unwrap_or(0).min(available);
        out.push((n, n - r));
        n -= r;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn milli(k: usize) -> f64 {
        k as f64 / 1000.0
    }

    #[test]
    fn default_grid_size() {
        let g = ThresholdGrid::default();
        assert_eq!((g.alpha.values().len(), g.beta.values().len(), g.theta_min.values().len()), (12, 8, 30));
        assert_eq!(g.candidates().len(), 12 * 8 * 30);
        // Only alpha = 0.945 excludes anything: theta_min = 0.945 stays valid.
        assert_eq!(g.points().len(), 12 * 8 * 30);
        assert_eq!(g.theta_min.values()[29], 0.945);
    }

    fn params(a: f64, b: f64, t: f64) -> ThresholdParams {
        ThresholdParams::new(a, b, t).unwrap()
    }

    fn random_keys(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    fn batch_of(tokens: Vec<Matrix>, cls: Option<usize>) -> TokenBatch {
        let n = tokens[0].rows();
        let b = tokens.len();
        TokenBatch::from_dump(tokens, vec![vec![1; n]; b], cls).unwrap()
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(layer_threshold(1, &params(0.97, 0.3, 0.5)), 0.97);
        assert_eq!(layer_threshold(200, &params(0.99, 0.04, 0.88)), 0.88);
        let want = 0.99 - (0.08f64.exp() - 1.0);
        assert!((want - 0.90671).abs() < 1e-5);
        assert!((layer_threshold(3, &params(0.99, 0.04, 0.88)) - want).abs() < 1e-15);
    }

    #[test]
    fn threshold_params_rejected() {
        assert!(ThresholdParams::new(0.9, 0.01, 0.95).is_err());
        assert!(ThresholdParams::new(1.1, 0.01, 0.5).is_err());
        assert!(ThresholdParams::new(0.9, -0.01, 0.5).is_err());
        assert!(ThresholdParams::new(0.9, 0.01, 0.0).is_err());
        assert!(MergeSchedule::ConstantThreshold { theta: 0.0 }.validate().is_err());
        assert!(MergeSchedule::ConstantThreshold { theta: 1.0 }.validate().is_ok());
    }

    proptest! {
        #[test]
        fn threshold_monotone_and_bounded(
            a in 0usize..12, b in 0usize..8, t in 0usize..30, l in 1usize..40
        ) {
            let p = params(milli(945 + 5 * a), milli(15 + 5 * b), milli(800 + 5 * t));
            let here = layer_threshold(l, &p);
            prop_assert!(here >= p.theta_min && here <= p.alpha);
            prop_assert!(layer_threshold(l + 1, &p) <= here);
        }
    }

    #[test]
    fn alternate_split_examples() {
        let s = alternate_split(7, Some(0));
        assert_eq!(s.src, vec![1, 3, 5]);
        assert_eq!(s.dst, vec![2, 4, 6]);

        let s = alternate_split(2, Some(0));
        assert_eq!(s.pair_count(), 0);

        let s = alternate_split(197, Some(0));
        assert_eq!((s.src.len(), s.dst.len()), (98, 98));
    }

    #[test]
    fn size_distinctive_examples() {
        let s = size_distinctive_split(&[1, 5, 2, 8], None);
        assert_eq!(s.src, vec![0, 2]);
        assert_eq!(s.dst, vec![1, 3]);

        let s = size_distinctive_split(&[4; 6], None);
        assert_eq!(s.src, vec![0, 1, 2]);
        assert_eq!(s.dst, vec![3, 4, 5]);

        let sizes = [3, 1, 1, 2, 7];
        let s = size_distinctive_split(&sizes, None);
        let mut src: Vec<u32> = s.src.iter().map(|&i| sizes[i]).collect();
        let mut dst: Vec<u32> = s.dst.iter().map(|&i| sizes[i]).collect();
        src.sort();
        dst.sort();
        assert_eq!(src, vec![1, 1]);
        assert_eq!(dst, vec![2, 3, 7]);
        assert_eq!(s.src, vec![1, 2]);
    }

    #[test]
    fn size_distinctive_skips_cls() {
        let s = size_distinctive_split(&[1, 9, 1, 3], Some(0));
        assert_eq!(s.src, vec![2]);
        assert_eq!(s.dst, vec![3, 1]);
    }

    proptest! {
        #[test]
        fn size_distinctive_separates_sizes(sizes in prop::collection::vec(1u32..50, 2..60), cls in any::<bool>()) {
            let cls = cls.then_some(0);
            let s = size_distinctive_split(&sizes, cls);
            let max_src = s.src.iter().map(|&i| sizes[i]).max();
            let min_dst = s.dst.iter().map(|&i| sizes[i]).min();
            if let (Some(a), Some(b)) = (max_src, min_dst) {
                prop_assert!(a <= b);
            }
            prop_assert!(s.dst.len() >= s.src.len());
            prop_assert!(cls.is_none_or(|c| !s.src.contains(&c) && !s.dst.contains(&c)));
        }
    }

    #[test]
    fn pairing_picks_identical_destination() {
        let keys =
            Matrix::from_rows(&[vec![1.0f32, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.3, 0.2, 0.9], vec![0.3, 0.2, 0.9]])
                .unwrap();
        let split = Split { src: vec![2], dst: vec![0, 1, 3] };
        let plan = pair_tokens(&keys, &split).unwrap();
        assert_eq!(plan.pairs, vec![(2, 3)]);
        assert!((plan.similarities[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairing_orthogonal_source() {
        let keys = Matrix::from_rows(&[vec![0.0f32, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let split = Split { src: vec![0], dst: vec![2, 1] };
        let plan = pair_tokens(&keys, &split).unwrap();
        assert_eq!(plan.similarities, vec![0.0]);
        // Equal similarity: lowest destination index wins.
        assert_eq!(plan.pairs, vec![(0, 1)]);
    }

    #[test]
    fn pairing_zero_key_is_degenerate() {
        let keys = Matrix::from_rows(&[vec![0.0f32, 0.0], vec![1.0, 0.0]]).unwrap();
        let split = Split { src: vec![0], dst: vec![1] };
        assert!(matches!(pair_tokens(&keys, &split), Err(AtmError::DegenerateInput(_))));
    }

    #[test]
    fn pairing_matches_brute_force_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        for _ in 0..20 {
            let keys = random_keys(&mut rng, 12, 6);
            let split = alternate_split(12, None);
            let plan = pair_tokens(&keys, &split).unwrap();
            for (k, &s) in split.src.iter().enumerate() {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for &d in &split.dst {
                    let c = crate::numeric::cosine_similarity(
                        &keys.row(s).iter().map(|&v| v as f64).collect::<Vec<_>>(),
                        &keys.row(d).iter().map(|&v| v as f64).collect::<Vec<_>>(),
                    )
                    .unwrap();
                    if c > best.0 + 1e-12 {
                        best = (c, d);
                    }
                }
                assert_eq!(plan.pairs[k], (s, best.1));
                assert!((plan.similarities[k] - best.0).abs() < 1e-12);
            }
        }
    }

    fn plan_with(sims: &[f64]) -> MergePlan {
        MergePlan {
            pairs: (0..sims.len()).map(|i| (2 * i + 1, 2 * i + 2)).collect(),
            similarities: sims.to_vec(),
            r: 0,
            theta: None,
        }
    }

    #[test]
    fn batch_r_examples() {
        assert_eq!(batch_adaptive_r(&[plan_with(&[0.95, 0.85, 0.91])], 0.9), 2);
        let a = plan_with(&[0.95, 0.95, 0.1, 0.1]);
        let b = plan_with(&[0.95, 0.95, 0.95, 0.1]);
        assert_eq!(batch_adaptive_r(&[a, b], 0.9), 2);
        assert_eq!(batch_adaptive_r(&[plan_with(&[1.0, 1.0, 0.99])], 1.0), 0);
        // Boundary equality does not count.
        assert_eq!(batch_adaptive_r(&[plan_with(&[0.9, 0.9])], 0.9), 0);
    }

    proptest! {
        #[test]
        fn batch_r_consistency(
            sims in prop::collection::vec(prop::collection::vec(-1.0f64..=1.0, 8), 1..6),
            theta in 0.0f64..=1.0,
            k in 1usize..6,
        ) {
            let plans: Vec<MergePlan> = sims.iter().map(|s| plan_with(s)).collect();
            let r = batch_adaptive_r(&plans, theta);
            let max = plans.iter().map(|p| p.count_above(theta)).max().unwrap();
            prop_assert!(r <= max);
            prop_assert_eq!(batch_adaptive_r(&plans[..1], theta), plans[0].count_above(theta));
            let dup = vec![plans[0].clone(); k];
            prop_assert_eq!(batch_adaptive_r(&dup, theta), plans[0].count_above(theta));
        }

        #[test]
        fn top_r_at_threshold_count_merges_exactly_those_above(
            sims in prop::collection::vec(-1.0f64..=1.0, 1..30),
            theta in -1.0f64..=1.0,
        ) {
            let plan = plan_with(&sims);
            let r = plan.count_above(theta);
            let chosen = &plan.ranked()[..r];
            for (k, s) in sims.iter().enumerate() {
                prop_assert_eq!(chosen.contains(&k), *s > theta);
            }
        }
    }

    #[test]
    fn merge_identical_tokens() {
        let t = Matrix::from_rows(&[vec![0.5f32, -1.0], vec![0.5, -1.0]]).unwrap();
        let x = batch_of(vec![t], None);
        let plan = MergePlan { pairs: vec![(0, 1)], similarities: vec![1.0], r: 1, theta: None };
        let out = merge_tokens(&x, &[plan], 1).unwrap();
        assert_eq!(out.tokens()[0].data(), &[0.5, -1.0]);
        assert_eq!(out.sizes()[0], vec![2]);
    }

    #[test]
    fn merge_weighted_by_size() {
        let t = Matrix::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = TokenBatch::from_dump(vec![t], vec![vec![3, 1]], None).unwrap();
        let plan = MergePlan { pairs: vec![(1, 0)], similarities: vec![0.0], r: 1, theta: None };
        let out = merge_tokens(&x, &[plan], 1).unwrap();
        assert_eq!(out.tokens()[0].data(), &[0.75, 0.25]);
        assert_eq!(out.sizes()[0], vec![4]);
        out.check_invariants().unwrap();
    }

    #[test]
    fn three_way_merge_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_keys(&mut rng, 3, 8);
        let sizes = vec![2u32, 5, 3];
        let x = TokenBatch::from_dump(vec![t.clone()], vec![sizes.clone()], None).unwrap();
        let plan = MergePlan { pairs: vec![(0, 2), (1, 2)], similarities: vec![0.5, 0.7], r: 2, theta: None };
        let out = merge_tokens(&x, &[plan], 2).unwrap();
        assert_eq!(out.sizes()[0], vec![10]);

        // Sequential pairwise merging, both absorption orders.
        let pairwise = |a: (&[f32], u32), b: (&[f32], u32)| -> (Vec<f64>, u32) {
            let n = (a.1 + b.1) as f64;
            let v = a.0.iter().zip(b.0).map(|(&p, &q)| (a.1 as f64 * p as f64 + b.1 as f64 * q as f64) / n).collect();
            (v, a.1 + b.1)
        };
        for first in [0usize, 1] {
            let second = 1 - first;
            let (v1, n1) = pairwise((t.row(2), sizes[2]), (t.row(first), sizes[first]));
            let v1f: Vec<f32> = v1.iter().map(|&v| v as f32).collect();
            let (v2, _) = pairwise((&v1f, n1), (t.row(second), sizes[second]));
            for (g, w) in out.tokens()[0].row(0).iter().zip(&v2) {
                assert!((*g as f64 - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn merge_rejects_oversized_r() {
        let x = batch_of(vec![Matrix::from_rows(&[vec![1.0f32], vec![1.0]]).unwrap()], None);
        let plan = plan_with(&[0.5]);
        assert!(merge_tokens(&x, &[plan], 2).is_err());
    }

    #[test]
    fn merge_ties_resolve_to_lower_source() {
        let t = Matrix::from_rows(&[vec![1.0f32], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let x = batch_of(vec![t], None);
        let plan = MergePlan { pairs: vec![(2, 3), (0, 1)], similarities: vec![0.8, 0.8], r: 1, theta: None };
        let out = merge_tokens(&x, &[plan], 1).unwrap();
        assert_eq!(out.tokens()[0].data(), &[1.5, 3.0, 4.0]);
    }

    proptest! {
        #[test]
        fn merge_conserves_sizes_and_provenance(seed in any::<u64>(), n in 3usize..24, r_frac in 0.0f64..=1.0, cls in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keys = random_keys(&mut rng, n, 5);
            let sizes: Vec<u32> = (0..n).map(|_| rng.random_range(1..6)).collect();
            let cls = cls.then_some(0);
            let mut sizes = sizes;
            if cls.is_some() { sizes[0] = 1; }
            let x = TokenBatch::from_dump(vec![keys.clone()], vec![sizes.clone()], cls).unwrap();
            let split = size_distinctive_split(&sizes, cls);
            let plan = pair_tokens(&keys, &split).unwrap();
            let r = (plan.pairs.len() as f64 * r_frac).floor() as usize;
            let out = merge_tokens(&x, &[plan], r).unwrap();
            prop_assert_eq!(out.num_tokens(), n - r);
            out.check_invariants().unwrap();
            prop_assert_eq!(out.sizes()[0].iter().sum::<u32>(), sizes.iter().sum::<u32>());
            prop_assert_eq!(out.cls_index(), cls);
        }

        #[test]
        fn plans_are_scale_invariant(seed in any::<u64>(), exp in -8i32..8, theta in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keys = random_keys(&mut rng, 15, 7);
            let c = 2f32.powi(exp);
            let scaled = Matrix::new(15, 7, keys.data().iter().map(|v| v * c).collect()).unwrap();
            let split = alternate_split(15, Some(0));
            let a = pair_tokens(&keys, &split).unwrap();
            let b = pair_tokens(&scaled, &split).unwrap();
            prop_assert_eq!(&a.pairs, &b.pairs);
            prop_assert_eq!(a.ranked(), b.ranked());
            prop_assert_eq!(a.count_above(theta), b.count_above(theta));
        }
    }

    #[test]
    fn plans_invariant_under_generic_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let keys = random_keys(&mut rng, 21, 9);
        let scaled = Matrix::new(21, 9, keys.data().iter().map(|v| v * 3.7).collect()).unwrap();
        let split = alternate_split(21, Some(0));
        let a = pair_tokens(&keys, &split).unwrap();
        let b = pair_tokens(&scaled, &split).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.ranked(), b.ranked());
    }

    #[test]
    fn step_no_op_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = batch_of(vec![random_keys(&mut rng, 9, 4)], Some(0));
        let keys = vec![random_keys(&mut rng, 9, 4)];
        let (out, rec) = step(&x, &keys, 1, &MergeSchedule::NoOp, 3).unwrap();
        assert_eq!(out, x);
        assert_eq!(rec.r, 0);
    }

    #[test]
    fn step_constant_top_r_on_deit_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut x = batch_of(vec![random_keys(&mut rng, 197, 8)], Some(0));
        let schedule = MergeSchedule::ConstantTopR { r: 13 };
        for layer in 1..=12 {
            let keys = vec![random_keys(&mut rng, x.num_tokens(), 8)];
            let (next, rec) = step(&x, &keys, layer, &schedule, 9).unwrap();
            let expected = if rec.pairs_available >= 13 { 13 } else { rec.pairs_available };
            assert_eq!(rec.r, expected);
            assert_eq!(next.num_tokens(), x.num_tokens() - expected);
            x = next;
        }
        assert_eq!(x.num_tokens(), 197 - 12 * 13);
    }

    #[test]
    fn step_selects_grouping_by_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = batch_of(vec![random_keys(&mut rng, 11, 4)], Some(0));
        let keys = vec![random_keys(&mut rng, 11, 4)];
        let s = MergeSchedule::ConstantTopR { r: 1 };
        assert_eq!(step(&x, &keys, 3, &s, 3).unwrap().1.grouping, Some(Grouping::Alternate));
        assert_eq!(step(&x, &keys, 4, &s, 3).unwrap().1.grouping, Some(Grouping::SizeDistinctive));
    }

    #[test]
    fn increasing_and_decreasing_top_r() {
        let inc = MergeSchedule::IncreasingTopR { r0: 2 };
        let dec = MergeSchedule::DecreasingTopR { r0: 2 };
        assert_eq!((1..=4).map(|l| inc.top_r(l).unwrap()).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
        assert_eq!((1..=4).map(|l| dec.top_r(l).unwrap()).collect::<Vec<_>>(), vec![2, 1, 0, 0]);
    }

    #[test]
    fn planned_counts_follow_progression() {
        let counts = planned_token_counts(197, true, 12, &MergeSchedule::ConstantTopR { r: 2 }, 9, false).unwrap();
        for (i, &(n_in, n_out)) in counts.iter().enumerate() {
            assert_eq!(n_in, 197 - 2 * i);
            assert_eq!(n_out, 197 - 2 * (i + 1));
        }
        // Exhaustion: only as many merges as there are pairs.
        let counts = planned_token_counts(9, true, 6, &MergeSchedule::ConstantTopR { r: 4 }, 6, false).unwrap();
        let outs: Vec<usize> = counts.iter().map(|c| c.1).collect();
        assert_eq!(outs, vec![5, 3, 2, 2, 2, 2]);
        assert!(planned_token_counts(9, true, 6, &MergeSchedule::ConstantThreshold { theta: 0.9 }, 6, false).is_none());
    }

    #[test]
    fn schedule_serde_roundtrip() {
        let s = MergeSchedule::LayerDependentThreshold(params(0.99, 0.04, 0.88));
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(text, r#"{"kind":"layer_dependent_threshold","alpha":0.99,"beta":0.04,"theta_min":0.88}"#);
        assert_eq!(serde_json::from_str::<MergeSchedule>(&text).unwrap(), s);
        let n: MergeSchedule = serde_json::from_str(r#"{"kind":"no_op"}"#).unwrap();
        assert_eq!(n, MergeSchedule::NoOp);
    }
}
