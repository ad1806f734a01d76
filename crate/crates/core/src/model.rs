//! Desk-scale ViT: patch embedding, pre-norm blocks with multi-head
//! self-attention and an MLP, and a merging step between the two.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};
use crate::io::Image;
use crate::merging::{self, LayerRecord, MergeSchedule};
use crate::numeric::{gelu_in_place, layer_norm, linear, softmax_in_place, Matrix, LAYER_NORM_EPS};

pub const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub use_cls_token: bool,
    #[serde(default = "default_true")]
    pub proportional_attention: bool,
    #[serde(default)]
    pub final_layer_cls_only: bool,
    /// Last layer that uses alternate grouping; later layers group by size.
    pub splitting_depth: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_num_classes() -> usize {
    1000
}
fn default_true() -> bool {
    true
}

/// `ceil(3L/4)`.
pub fn default_splitting_depth(depth: usize) -> usize {
    (3 * depth).div_ceil(4)
}

impl ModelConfig {
    pub fn deit(dim: usize, heads: usize) -> Self {
        Self {
            depth: 12,
            dim,
            heads,
            mlp_ratio: 4.0,
            image_size: 224,
            patch_size: 16,
            num_classes: 1000,
            use_cls_token: true,
            proportional_attention: true,
            final_layer_cls_only: false,
            splitting_depth: default_splitting_depth(12),
            seed: 0,
        }
    }

    pub fn deit_tiny() -> Self {
        Self::deit(192, 3)
    }

    pub fn deit_small() -> Self {
        Self::deit(384, 6)
    }

    pub fn deit_base() -> Self {
        Self::deit(768, 12)
    }

    /// Small model for tests and quick CLI runs: 64px images, 8px patches.
    pub fn tiny() -> Self {
        Self {
            depth: 4,
            dim: 32,
            heads: 4,
            mlp_ratio: 4.0,
            image_size: 64,
            patch_size: 8,
            num_classes: 10,
            use_cls_token: true,
            proportional_attention: true,
            final_layer_cls_only: false,
            splitting_depth: default_splitting_depth(4),
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "deit-t" | "deit-tiny" => Some(Self::deit_tiny()),
            "deit-s" | "deit-small" => Some(Self::deit_small()),
            "deit-b" | "deit-base" => Some(Self::deit_base()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(AtmError::InvalidConfig(m));
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch_size == 0 {
            return fail("depth, dim, heads and patch_size must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.splitting_depth > self.depth {
            return fail(format!("splitting_depth {} exceeds depth {}", self.splitting_depth, self.depth));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return fail(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if self.final_layer_cls_only && !self.use_cls_token {
            return fail("final_layer_cls_only needs a CLS token".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Token count entering the first block.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * IN_CHANNELS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1_weight: Vec<f32>,
    pub norm1_bias: Vec<f32>,
    /// `D x 3D`; columns are `[q | k | v]`, heads contiguous inside each.
    pub qkv_weight: Matrix,
    pub qkv_bias: Vec<f32>,
    pub proj_weight: Matrix,
    pub proj_bias: Vec<f32>,
    pub norm2_weight: Vec<f32>,
    pub norm2_bias: Vec<f32>,
    pub fc1_weight: Matrix,
    pub fc1_bias: Vec<f32>,
    pub fc2_weight: Matrix,
    pub fc2_bias: Vec<f32>,
}

/// All parameters. Weight matrices are stored input-major (`in x out`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub patch_weight: Matrix,
    pub patch_bias: Vec<f32>,
    pub cls_token: Vec<f32>,
    pub pos_embed: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub norm_weight: Vec<f32>,
    pub norm_bias: Vec<f32>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f32>,
}

/// A named tensor in flat row-major form.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Every tensor name with the shape the config dictates.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let h = cfg.mlp_hidden();
    let mut v = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_features(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![cfg.num_tokens(), d]),
    ];
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}.");
        v.extend([
            (format!("{p}norm1.weight"), vec![d]),
            (format!("{p}norm1.bias"), vec![d]),
            (format!("{p}attn.qkv.weight"), vec![d, 3 * d]),
            (format!("{p}attn.qkv.bias"), vec![3 * d]),
            (format!("{p}attn.proj.weight"), vec![d, d]),
            (format!("{p}attn.proj.bias"), vec![d]),
            (format!("{p}norm2.weight"), vec![d]),
            (format!("{p}norm2.bias"), vec![d]),
            (format!("{p}mlp.fc1.weight"), vec![d, h]),
            (format!("{p}mlp.fc1.bias"), vec![h]),
            (format!("{p}mlp.fc2.weight"), vec![h, d]),
            (format!("{p}mlp.fc2.bias"), vec![d]),
        ]);
    }
    v.extend([
        ("norm.weight".to_string(), vec![d]),
        ("norm.bias".to_string(), vec![d]),
        ("head.weight".to_string(), vec![d, cfg.num_classes]),
        ("head.bias".to_string(), vec![cfg.num_classes]),
    ]);
    if !cfg.use_cls_token {
        v.retain(|(n, _)| n != "cls_token");
    }
    v
}

fn to_matrix(t: NamedTensor) -> Matrix {
    let (r, c) = (t.shape[0], t.shape[1]);
    Matrix::new(r, c, t.data).expect("audited shape")
}

impl ModelWeights {
    /// Gaussian weights with standard deviation `1/sqrt(D)`, layer norms at identity.
    pub fn synthetic(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0f32, 1.0 / (cfg.dim as f32).sqrt()).expect("finite std");
        let mut tensors = BTreeMap::new();
        for (name, shape) in expected_shapes(cfg) {
            let len: usize = shape.iter().product();
            let data = if name.contains("norm") && name.ends_with(".weight") {
                vec![1.0; len]
            } else if name.contains("norm") {
                vec![0.0; len]
            } else {
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            };
            tensors.insert(name, NamedTensor { shape, data });
        }
        Self::from_named(tensors, cfg)
    }

    /// Builds weights from named tensors after auditing every shape.
    /// Names the config does not know about are returned for the caller to report.
    pub fn from_named(mut tensors: BTreeMap<String, NamedTensor>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        for (name, shape) in expected_shapes(cfg) {
            match tensors.get(&name) {
                None => return Err(AtmError::MissingTensor(name)),
                Some(t) if t.shape != shape => {
                    return Err(AtmError::TensorShape { name, expected: shape, found: t.shape.clone() })
                }
                Some(_) => {}
            }
        }
        let mut take = |n: &str| tensors.remove(n).expect("audited");
        let patch_weight = to_matrix(take("patch_embed.weight"));
        let patch_bias = take("patch_embed.bias").data;
        let cls_token = if cfg.use_cls_token { take("cls_token").data } else { Vec::new() };
        let pos_embed = to_matrix(take("pos_embed"));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("blocks.{i}.");
            blocks.push(BlockWeights {
                norm1_weight: take(&format!("{p}norm1.weight")).data,
                norm1_bias: take(&format!("{p}norm1.bias")).data,
                qkv_weight: to_matrix(take(&format!("{p}attn.qkv.weight"))),
                qkv_bias: take(&format!("{p}attn.qkv.bias")).data,
                proj_weight: to_matrix(take(&format!("{p}attn.proj.weight"))),
                proj_bias: take(&format!("{p}attn.proj.bias")).data,
                norm2_weight: take(&format!("{p}norm2.weight")).data,
                norm2_bias: take(&format!("{p}norm2.bias")).data,
                fc1_weight: to_matrix(take(&format!("{p}mlp.fc1.weight"))),
                fc1_bias: take(&format!("{p}mlp.fc1.bias")).data,
                fc2_weight: to_matrix(take(&format!("{p}mlp.fc2.weight"))),
                fc2_bias: take(&format!("{p}mlp.fc2.bias")).data,
            });
        }
        Ok(Self {
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            norm_weight: take("norm.weight").data,
            norm_bias: take("norm.bias").data,
            head_weight: to_matrix(take("head.weight")),
            head_bias: take("head.bias").data,
        })
    }

    pub fn to_named(&self) -> BTreeMap<String, NamedTensor> {
        fn vec_t(v: &[f32]) -> NamedTensor {
            NamedTensor { shape: vec![v.len()], data: v.to_vec() }
        }
        fn mat_t(m: &Matrix) -> NamedTensor {
            NamedTensor { shape: vec![m.rows(), m.cols()], data: m.data().to_vec() }
        }
        let mut out = BTreeMap::new();
        out.insert("patch_embed.weight".into(), mat_t(&self.patch_weight));
        out.insert("patch_embed.bias".into(), vec_t(&self.patch_bias));
        if !self.cls_token.is_empty() {
            out.insert("cls_token".into(), vec_t(&self.cls_token));
        }
        out.insert("pos_embed".into(), mat_t(&self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}.");
            out.insert(format!("{p}norm1.weight"), vec_t(&b.norm1_weight));
            out.insert(format!("{p}norm1.bias"), vec_t(&b.norm1_bias));
            out.insert(format!("{p}attn.qkv.weight"), mat_t(&b.qkv_weight));
            out.insert(format!("{p}attn.qkv.bias"), vec_t(&b.qkv_bias));
            out.insert(format!("{p}attn.proj.weight"), mat_t(&b.proj_weight));
            out.insert(format!("{p}attn.proj.bias"), vec_t(&b.proj_bias));
            out.insert(format!("{p}norm2.weight"), vec_t(&b.norm2_weight));
            out.insert(format!("{p}norm2.bias"), vec_t(&b.norm2_bias));
            out.insert(format!("{p}mlp.fc1.weight"), mat_t(&b.fc1_weight));
            out.insert(format!("{p}mlp.fc1.bias"), vec_t(&b.fc1_bias));
            out.insert(format!("{p}mlp.fc2.weight"), mat_t(&b.fc2_weight));
            out.insert(format!("{p}mlp.fc2.bias"), vec_t(&b.fc2_bias));
        }
        out.insert("norm.weight".into(), vec_t(&self.norm_weight));
        out.insert("norm.bias".into(), vec_t(&self.norm_bias));
        out.insert("head.weight".into(), mat_t(&self.head_weight));
        out.insert("head.bias".into(), vec_t(&self.head_bias));
        out
    }

    /// Re-checks every tensor shape against `cfg`.
    pub fn shape_audit(&self, cfg: &ModelConfig) -> Result<()> {
        let named = self.to_named();
        if named.len() != expected_shapes(cfg).len() {
            return Err(AtmError::Shape(format!(
                "weights hold {} tensors, config expects {}",
                named.len(),
                expected_shapes(cfg).len()
            )));
        }
        for (name, shape) in expected_shapes(cfg) {
            match named.get(&name) {
                None => return Err(AtmError::MissingTensor(name)),
                Some(t) if t.shape != shape => {
                    return Err(AtmError::TensorShape { name, expected: shape, found: t.shape.clone() })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Batched token activations with merging sizes and patch provenance.
///
/// Provenance records original token positions: with a CLS token it sits
/// at position 0 and patch `p` at `p + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    tokens: Vec<Matrix>,
    sizes: Vec<Vec<u32>>,
    provenance: Vec<Vec<Vec<u32>>>,
    cls_index: Option<usize>,
    original_count: usize,
    cls_only: bool,
}

impl TokenBatch {
    pub fn from_parts(
        tokens: Vec<Matrix>,
        sizes: Vec<Vec<u32>>,
        provenance: Vec<Vec<Vec<u32>>>,
        cls_index: Option<usize>,
        original_count: usize,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(AtmError::Shape("empty batch".into()));
        }
        let n = tokens[0].rows();
        let d = tokens[0].cols();
        if tokens.iter().any(|t| t.shape() != (n, d))
            || sizes.len() != tokens.len()
            || provenance.len() != tokens.len()
            || sizes.iter().any(|s| s.len() != n)
            || provenance.iter().any(|p| p.len() != n)
        {
            return Err(AtmError::Shape("tokens, sizes and provenance disagree in batch or token count".into()));
        }
        if cls_index.is_some_and(|c| c >= n) {
            return Err(AtmError::Shape(format!("CLS index out of range for {n} tokens")));
        }
        Ok(Self { tokens, sizes, provenance, cls_index, original_count, cls_only: false })
    }

    /// Tokens from a raw dump. A token of size `s` is credited with `s`
    /// consecutive original positions, assigned in token order.
    pub fn from_dump(tokens: Vec<Matrix>, sizes: Vec<Vec<u32>>, cls_index: Option<usize>) -> Result<Self> {
        if sizes.iter().flatten().any(|&s| s == 0) {
            return Err(AtmError::InvalidConfig("merging sizes must be positive".into()));
        }
        let totals: Vec<u32> = sizes.iter().map(|s| s.iter().sum()).collect();
        if totals.windows(2).any(|w| w[0] != w[1]) {
            return Err(AtmError::InvariantViolation("images in a dump carry different total merging sizes".into()));
        }
        let provenance = sizes
            .iter()
            .map(|row| {
                let mut next = 0u32;
                row.iter()
                    .map(|&s| {
                        let p: Vec<u32> = (next..next + s).collect();
                        next += s;
                        p
                    })
                    .collect()
            })
            .collect();
        let original = totals.first().copied().unwrap_or(0) as usize;
        Self::from_parts(tokens, sizes, provenance, cls_index, original)
    }

    pub fn tokens(&self) -> &[Matrix] {
        &self.tokens
    }

    pub fn sizes(&self) -> &[Vec<u32>] {
        &self.sizes
    }

    pub fn provenance(&self) -> &[Vec<Vec<u32>>] {
        &self.provenance
    }

    pub fn cls_index(&self) -> Option<usize> {
        self.cls_index
    }

    pub fn original_count(&self) -> usize {
        self.original_count
    }

    pub fn batch_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].cols()
    }

    /// True once every non-CLS token has been dropped in the final layer.
    pub fn is_cls_only(&self) -> bool {
        self.cls_only
    }

    /// Replaces the activations, keeping sizes and provenance.
    pub fn with_tokens(&self, tokens: Vec<Matrix>) -> Result<Self> {
        let mut out =
            Self::from_parts(tokens, self.sizes.clone(), self.provenance.clone(), self.cls_index, self.original_count)?;
        out.cls_only = self.cls_only;
        Ok(out)
    }

    /// Keeps only the CLS token of every image.
    pub fn drop_to_cls(&self) -> Result<Self> {
        let cls = self.cls_index.ok_or_else(|| AtmError::InvalidConfig("no CLS token to retain".into()))?;
        let mut out = Self::from_parts(
            self.tokens.iter().map(|t| t.select_rows(&[cls])).collect(),
            self.sizes.iter().map(|s| vec![s[cls]]).collect(),
            self.provenance.iter().map(|p| vec![p[cls].clone()]).collect(),
            Some(0),
            self.original_count,
        )?;
        out.cls_only = true;
        Ok(out)
    }

    /// Checks size conservation and the provenance partition for every image.
    pub fn check_invariants(&self) -> Result<()> {
        for (b, (sizes, prov)) in self.sizes.iter().zip(&self.provenance).enumerate() {
            for (i, (&s, p)) in sizes.iter().zip(prov).enumerate() {
                if s as usize != p.len() {
                    return Err(AtmError::InvariantViolation(format!(
                        "image {b} token {i}: size {s} but {} provenance entries",
                        p.len()
                    )));
                }
            }
            if self.cls_only {
                if sizes.len() != 1 || sizes[0] != 1 {
                    return Err(AtmError::InvariantViolation(format!(
                        "image {b}: CLS-only batch must hold one token of size 1"
                    )));
                }
                continue;
            }
            let total: usize = sizes.iter().map(|&s| s as usize).sum();
            if total != self.original_count {
                return Err(AtmError::InvariantViolation(format!(
                    "image {b}: sizes sum to {total}, expected {}",
                    self.original_count
                )));
            }
            let mut seen = vec![false; self.original_count];
            for p in prov.iter().flatten() {
                let p = *p as usize;
                if p >= self.original_count || seen[p] {
                    return Err(AtmError::InvariantViolation(format!(
                        "image {b}: original position {p} duplicated or out of range"
                    )));
                }
                seen[p] = true;
            }
        }
        Ok(())
    }
}

/// Patch tokens for a batch of images, with CLS prepended and positions added.
pub fn patch_embed(images: &[Image], cfg: &ModelConfig, weights: &ModelWeights) -> Result<TokenBatch> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(AtmError::Shape("no images to embed".into()));
    }
    let side = cfg.grid_side();
    let p = cfg.patch_size;
    let n0 = cfg.num_tokens();
    let offset = usize::from(cfg.use_cls_token);
    let mut tokens = Vec::with_capacity(images.len());
    for img in images {
        if img.height != cfg.image_size || img.width != cfg.image_size {
            return Err(AtmError::Shape(format!(
                "image is {}x{}, model expects {}x{}",
                img.height, img.width, cfg.image_size, cfg.image_size
            )));
        }
        let mut patches = Vec::with_capacity(cfg.num_patches() * cfg.patch_features());
        for gy in 0..side {
            for gx in 0..side {
                for py in 0..p {
                    for px in 0..p {
                        let pix = img.pixel(gy * p + py, gx * p + px);
                        patches.extend_from_slice(&pix);
                    }
                }
            }
        }
        let patches = Matrix::new(cfg.num_patches(), cfg.patch_features(), patches)?;
        let embedded = linear(&patches, &weights.patch_weight, &weights.patch_bias)?;
        let mut x = Matrix::zeros(n0, cfg.dim);
        if cfg.use_cls_token {
            x.row_mut(0).copy_from_slice(&weights.cls_token);
        }
        for i in 0..cfg.num_patches() {
            x.row_mut(i + offset).copy_from_slice(embedded.row(i));
        }
        x.add_assign(&weights.pos_embed)?;
        tokens.push(x);
    }
    let b = images.len();
    let provenance = vec![(0..n0 as u32).map(|i| vec![i]).collect(); b];
    TokenBatch::from_parts(tokens, vec![vec![1; n0]; b], provenance, cfg.use_cls_token.then_some(0), n0)
}

fn attention_image(
    x: &Matrix,
    sizes: &[u32],
    block: &BlockWeights,
    heads: usize,
    proportional: bool,
) -> Result<(Matrix, Matrix)> {
    let (n, dim) = x.shape();
    let hd = dim / heads;
    let h = layer_norm(x, &block.norm1_weight, &block.norm1_bias, LAYER_NORM_EPS as f32)?;
    let qkv = linear(&h, &block.qkv_weight, &block.qkv_bias)?;
    let scale = 1.0 / (hd as f32).sqrt();
    let log_sizes: Vec<f32> = sizes.iter().map(|&s| (s as f32).ln()).collect();

    let mut mixed = Matrix::zeros(n, dim);
    let mut keys = Matrix::zeros(n, hd);
    let mut logits = vec![0.0f32; n];
    for head in 0..heads {
        let q_off = head * hd;
        let k_off = dim + head * hd;
        let v_off = 2 * dim + head * hd;
        for i in 0..n {
            let q = &qkv.row(i)[q_off..q_off + hd];
            for (j, logit) in logits.iter_mut().enumerate() {
                let k = &qkv.row(j)[k_off..k_off + hd];
                let mut acc = 0.0f32;
                for t in 0..hd {
                    acc += q[t] * k[t];
                }
                *logit = acc * scale;
                if proportional {
                    *logit += log_sizes[j];
                }
            }
            softmax_in_place(&mut logits);
            let out = &mut mixed.row_mut(i)[q_off..q_off + hd];
            for (j, &a) in logits.iter().enumerate() {
                let v = &qkv.row(j)[v_off..v_off + hd];
                for t in 0..hd {
                    out[t] += a * v[t];
                }
            }
        }
        for i in 0..n {
            let k = &qkv.row(i)[k_off..k_off + hd];
            let dst = keys.row_mut(i);
            for t in 0..hd {
                dst[t] += k[t];
            }
        }
    }
    let inv_heads = 1.0 / heads as f32;
    for v in keys.data_mut() {
        *v *= inv_heads;
    }
    let mut out = linear(&mixed, &block.proj_weight, &block.proj_bias)?;
    out.add_assign(x)?;
    Ok((out, keys))
}

/// Attention sub-block with residual. Returns the attended tokens and, per
/// image, the keys averaged over heads (`N x D/H`).
///
/// With `proportional` set, `ln(size_j)` is added to every logit against key `j`.
pub fn attention(
    x: &TokenBatch,
    block: &BlockWeights,
    heads: usize,
    proportional: bool,
) -> Result<(TokenBatch, Vec<Matrix>)> {
    if !x.dim().is_multiple_of(heads) {
        return Err(AtmError::Shape(format!("dim {} not divisible by {heads} heads", x.dim())));
    }
    let mut outs = Vec::with_capacity(x.batch_size());
    let mut keys = Vec::with_capacity(x.batch_size());
    for (t, s) in x.tokens().iter().zip(x.sizes()) {
        let (o, k) = attention_image(t, s, block, heads, proportional)?;
        outs.push(o);
        keys.push(k);
    }
    Ok((x.with_tokens(outs)?, keys))
}

/// MLP sub-block with residual.
pub fn mlp(x: &TokenBatch, block: &BlockWeights) -> Result<TokenBatch> {
    let mut outs = Vec::with_capacity(x.batch_size());
    for t in x.tokens() {
        let h = layer_norm(t, &block.norm2_weight, &block.norm2_bias, LAYER_NORM_EPS as f32)?;
        let mut hidden = linear(&h, &block.fc1_weight, &block.fc1_bias)?;
        gelu_in_place(&mut hidden);
        let mut o = linear(&hidden, &block.fc2_weight, &block.fc2_bias)?;
        o.add_assign(t)?;
        outs.push(o);
    }
    x.with_tokens(outs)
}

#[derive(Debug, Clone)]
pub enum ForwardInput {
    Images(Vec<Image>),
    Tokens(TokenBatch),
}

/// Per-layer record of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    pub initial_tokens: usize,
    pub layers: Vec<LayerRecord>,
}

impl Trace {
    /// `(tokens entering attention, tokens entering the MLP)` per layer.
    pub fn token_counts(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.tokens_in, l.tokens_out)).collect()
    }

    pub fn merged_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.tokens_in - l.tokens_out).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f32>>,
    /// Final-norm representation fed to the head (CLS token or size-weighted mean).
    pub features: Vec<Vec<f32>>,
    pub trace: Trace,
    /// Tokens after the last block, before the final norm.
    pub tokens: TokenBatch,
}

/// Full forward pass with merging after every block's attention.
pub fn forward(
    input: ForwardInput,
    cfg: &ModelConfig,
    weights: &ModelWeights,
    schedule: &MergeSchedule,
) -> Result<ForwardOutput> {
    forward_with(input, cfg, weights, schedule, |_| true)
}

/// Like [`forward`], but merging runs only in layers where `merge_in` is true.
pub fn forward_with(
    input: ForwardInput,
    cfg: &ModelConfig,
    weights: &ModelWeights,
    schedule: &MergeSchedule,
    merge_in: impl Fn(usize) -> bool,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    schedule.validate()?;
    if weights.blocks.len() != cfg.depth {
        return Err(AtmError::Shape(format!("{} blocks of weights for depth {}", weights.blocks.len(), cfg.depth)));
    }
    let mut x = match input {
        ForwardInput::Images(images) => patch_embed(&images, cfg, weights)?,
        ForwardInput::Tokens(t) => {
            if t.dim() != cfg.dim {
                return Err(AtmError::Shape(format!("token dump has dim {}, model expects {}", t.dim(), cfg.dim)));
            }
            if t.cls_index().is_some() != cfg.use_cls_token {
                return Err(AtmError::InvalidConfig("token dump CLS presence disagrees with the model config".into()));
            }
            t
        }
    };
    x.check_invariants()?;
    let mut trace = Trace { initial_tokens: x.num_tokens(), layers: Vec::with_capacity(cfg.depth) };
    for (i, block) in weights.blocks.iter().enumerate() {
        let layer = i + 1;
        let (attended, keys) = attention(&x, block, cfg.heads, cfg.proportional_attention)?;
        let n = attended.num_tokens();
        let (merged, record) = if cfg.final_layer_cls_only && layer == cfg.depth {
            let dropped = attended.drop_to_cls()?;
            let mut rec = LayerRecord::passthrough(layer, n);
            rec.tokens_out = 1;
            rec.cls_only_drop = true;
            (dropped, rec)
        } else if merge_in(layer) {
            merging::step(&attended, &keys, layer, schedule, cfg.splitting_depth)?
        } else {
            (attended, LayerRecord::passthrough(layer, n))
        };
        merged.check_invariants()?;
        x = mlp(&merged, block)?;
        trace.layers.push(record);
    }

    let mut logits = Vec::with_capacity(x.batch_size());
    let mut features = Vec::with_capacity(x.batch_size());
    for (t, sizes) in x.tokens().iter().zip(x.sizes()) {
        let normed = layer_norm(t, &weights.norm_weight, &weights.norm_bias, LAYER_NORM_EPS as f32)?;
        let feat: Vec<f32> = match x.cls_index() {
            Some(c) => normed.row(c).to_vec(),
            None => {
                let total: f64 = sizes.iter().map(|&s| s as f64).sum();
                let mut acc = vec![0.0f64; normed.cols()];
                for (row, &s) in normed.iter_rows().zip(sizes) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += s as f64 * v as f64;
                    }
                }
                acc.iter().map(|a| (a / total) as f32).collect()
            }
        };
        let fm = Matrix::new(1, feat.len(), feat.clone())?;
        logits.push(linear(&fm, &weights.head_weight, &weights.head_bias)?.into_data());
        features.push(feat);
    }
    Ok(ForwardOutput { logits, features, trace, tokens: x })
}
