//! Run configuration files (TOML).
//!
//! ```toml
//! batch_size = 4
//! output = "out"                    # relative to this file
//! weights = "synthetic:0"           # or a path to a weights container
//!
//! [model]
//! preset = "deit-s"                 # deit-t | deit-s | deit-b | tiny
//! final_layer_cls_only = false      # any ModelConfig field may be overridden
//!
//! [schedule]
//! kind = "layer_dependent_threshold"
//! alpha = 0.99
//! beta = 0.04
//! theta_min = 0.88
//!
//! [inputs]
//! images = ["a.ppm"]
//! dumps = ["tokens.bin"]
//! normalize = true
//! synthetic = { count = 4, seed = 0, noise = 0.2 }
//!
//! [emit]
//! trace = true
//! cost = true
//! token_maps = false
//! records = true
//!
//! [sweep]
//! alpha = "0.945:1.000:0.005"
//! beta = "0.015:0.050:0.005"
//! theta_min = "0.800:0.945:0.005"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use atm_core::io::{load_image_ppm, load_token_dump, textured_scene, Image, IMAGENET_MEAN, IMAGENET_STD};
use atm_core::merging::{MilliRange, ThresholdGrid};
use atm_core::{ForwardInput, MergeSchedule, ModelConfig, ModelWeights, ThresholdParams, TokenBatch};
use serde::Deserialize;

use crate::ConfigError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    preset: Option<String>,
    depth: Option<usize>,
    dim: Option<usize>,
    heads: Option<usize>,
    mlp_ratio: Option<f64>,
    image_size: Option<usize>,
    patch_size: Option<usize>,
    num_classes: Option<usize>,
    use_cls_token: Option<bool>,
    proportional_attention: Option<bool>,
    final_layer_cls_only: Option<bool>,
    splitting_depth: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticInputs {
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f32,
}

fn default_noise() -> f32 {
    0.2
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInputs {
    #[serde(default)]
    images: Vec<PathBuf>,
    #[serde(default)]
    dumps: Vec<PathBuf>,
    #[serde(default)]
    synthetic: Option<SyntheticInputs>,
    #[serde(default = "yes")]
    normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Emit {
    #[serde(default = "yes")]
    pub trace: bool,
    #[serde(default = "yes")]
    pub cost: bool,
    #[serde(default)]
    pub token_maps: bool,
    #[serde(default = "yes")]
    pub records: bool,
}

impl Default for Emit {
    fn default() -> Self {
        Self { trace: true, cost: true, token_maps: false, records: true }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    alpha: Option<String>,
    beta: Option<String>,
    theta_min: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    model: RawModel,
    weights: Option<String>,
    schedule: Option<MergeSchedule>,
    #[serde(default)]
    inputs: RawInputs,
    batch_size: Option<usize>,
    output: Option<PathBuf>,
    #[serde(default)]
    emit: Emit,
    #[serde(default)]
    sweep: RawSweep,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightsSource {
    Synthetic(u64),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub images: Vec<PathBuf>,
    pub dumps: Vec<PathBuf>,
    pub synthetic: Option<SyntheticInputs>,
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: WeightsSource,
    pub schedule: MergeSchedule,
    pub inputs: Inputs,
    pub batch_size: usize,
    pub output: PathBuf,
    pub emit: Emit,
    pub sweep: ThresholdGrid,
}

pub fn default_schedule() -> MergeSchedule {
    MergeSchedule::LayerDependentThreshold(ThresholdParams { alpha: 0.99, beta: 0.04, theta_min: 0.88 })
}

/// Parses `"start:end:step"` with up to three decimals into thousandths.
pub fn parse_milli_range(text: &str) -> anyhow::Result<MilliRange> {
    let parts: Vec<&str> = text.split(':').map(str::trim).collect();
    let milli = |s: &str| -> anyhow::Result<u32> {
        let v: f64 = s.parse().with_context(|| format!("`{s}` is not a number"))?;
        let k = (v * 1000.0).round();
        if !(0.0..=u32::MAX as f64).contains(&k) || ((k / 1000.0) - v).abs() > 1e-9 {
            bail!("`{s}` needs at most three decimals and must be non-negative");
        }
        Ok(k as u32)
    };
    let r = match parts[..] {
        [one] => {
            let k = milli(one)?;
            MilliRange { start: k, end: k, step: 1 }
        }
        [s, e, st] => MilliRange { start: milli(s)?, end: milli(e)?, step: milli(st)? },
        _ => bail!("range `{text}` must be `value` or `start:end:step`"),
    };
    if r.step == 0 || r.end < r.start {
        bail!("range `{text}` is empty");
    }
    Ok(r)
}

fn apply_model(raw: &RawModel) -> anyhow::Result<ModelConfig> {
    let name = raw.preset.as_deref().unwrap_or("deit-s");
    let mut m = ModelConfig::preset(name).with_context(|| format!("unknown model preset `{name}`"))?;
    let depth_changed = raw.depth.is_some();
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = raw.$f { m.$f = v; } )* };
    }
    set!(
        depth,
        dim,
        heads,
        mlp_ratio,
        image_size,
        patch_size,
        num_classes,
        use_cls_token,
        proportional_attention,
        final_layer_cls_only,
        seed
    );
    m.splitting_depth = match raw.splitting_depth {
        Some(v) => v,
        None if depth_changed => atm_core::model::default_splitting_depth(m.depth),
        None => m.splitting_depth,
    };
    m.validate()?;
    Ok(m)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn must_exist(p: &Path, what: &str) -> anyhow::Result<()> {
    if !p.is_file() {
        return Err(ConfigError(format!("{what} `{}` does not exist", p.display())).into());
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config `{}`", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths are resolved against `base` and
    /// every referenced input must exist.
    pub fn parse(text: &str, base: &Path) -> anyhow::Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        let model = apply_model(&raw.model).map_err(|e| ConfigError(format!("{e:#}")))?;

        let weights = match raw.weights.as_deref() {
            None => WeightsSource::Synthetic(model.seed),
            Some(w) => match w.strip_prefix("synthetic:") {
                Some(seed) => WeightsSource::Synthetic(
                    seed.parse().map_err(|_| ConfigError(format!("bad synthetic seed in `{w}`")))?,
                ),
                None => {
                    let p = resolve(base, Path::new(w));
                    must_exist(&p, "weights file")?;
                    WeightsSource::File(p)
                }
            },
        };

        let schedule = raw.schedule.unwrap_or_else(default_schedule);
        schedule.validate().map_err(|e| ConfigError(e.to_string()))?;

        let images: Vec<PathBuf> = raw.inputs.images.iter().map(|p| resolve(base, p)).collect();
        let dumps: Vec<PathBuf> = raw.inputs.dumps.iter().map(|p| resolve(base, p)).collect();
        for p in &images {
            must_exist(p, "image")?;
        }
        for p in &dumps {
            must_exist(p, "token dump")?;
        }
        if let Some(s) = raw.inputs.synthetic {
            if !(0.0..=1.0).contains(&s.noise) {
                return Err(ConfigError("synthetic noise must lie in [0, 1]".into()).into());
            }
        }

        let batch_size = raw.batch_size.unwrap_or(1);
        if batch_size == 0 {
            return Err(ConfigError("batch_size must be at least 1".into()).into());
        }

        let mut sweep = ThresholdGrid::default();
        for (field, text) in [
            (&mut sweep.alpha, &raw.sweep.alpha),
            (&mut sweep.beta, &raw.sweep.beta),
            (&mut sweep.theta_min, &raw.sweep.theta_min),
        ] {
            if let Some(t) = text {
                *field = parse_milli_range(t).map_err(|e| ConfigError(format!("sweep: {e:#}")))?;
            }
        }

        Ok(Self {
            model,
            weights,
            schedule,
            inputs: Inputs { images, dumps, synthetic: raw.inputs.synthetic, normalize: raw.inputs.normalize },
            batch_size,
            output: resolve(base, raw.output.as_deref().unwrap_or(Path::new("out"))),
            emit: raw.emit,
            sweep,
        })
    }

    /// `--seed` replaces the synthetic weight seed and the synthetic input seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        if let WeightsSource::Synthetic(s) = &mut self.weights {
            *s = seed;
        }
        if let Some(s) = &mut self.inputs.synthetic {
            s.seed = seed;
        }
    }

    pub fn load_weights(&self) -> anyhow::Result<ModelWeights> {
        Ok(match &self.weights {
            WeightsSource::Synthetic(seed) => {
                let mut m = self.model.clone();
                m.seed = *seed;
                ModelWeights::synthetic(&m)?
            }
            WeightsSource::File(p) => atm_core::io::load_weights(p, &self.model)?,
        })
    }

    /// Image files first, then synthetic scenes, all unnormalized.
    pub fn image_pool(&self) -> anyhow::Result<Vec<Image>> {
        let mut pool = Vec::new();
        for p in &self.inputs.images {
            pool.push(load_image_ppm(p).with_context(|| format!("loading `{}`", p.display()))?);
        }
        if let Some(s) = self.inputs.synthetic {
            for i in 0..s.count {
                pool.push(textured_scene(self.model.image_size, s.seed.wrapping_add(i as u64), s.noise));
            }
        }
        Ok(pool)
    }

    pub fn dumps(&self) -> anyhow::Result<Vec<TokenBatch>> {
        let cls = self.model.use_cls_token.then_some(0);
        self.inputs
            .dumps
            .iter()
            .map(|p| load_token_dump(p, cls).with_context(|| format!("loading `{}`", p.display())))
            .collect()
    }

    /// Image pool split into `batch_size` chunks (the last may be short),
    /// followed by one batch per token dump.
    pub fn batches(&self) -> anyhow::Result<Vec<Batch>> {
        let pool = self.image_pool()?;
        let mut out = Vec::new();
        let mut first = 0;
        for chunk in pool.chunks(self.batch_size) {
            out.push(Batch::Images { first_index: first, raw: chunk.to_vec() });
            first += chunk.len();
        }
        for (i, d) in self.dumps()?.into_iter().enumerate() {
            out.push(Batch::Dump { index: i, tokens: d });
        }
        if out.is_empty() {
            return Err(ConfigError("no inputs: give images, dumps or synthetic inputs".into()).into());
        }
        Ok(out)
    }

    pub fn prepare(&self, raw: &[Image]) -> ForwardInput {
        ForwardInput::Images(raw.iter().map(|i| self.normalized(i)).collect())
    }

    pub fn normalized(&self, img: &Image) -> Image {
        let mut img = img.clone();
        if self.inputs.normalize {
            img.normalize(IMAGENET_MEAN, IMAGENET_STD);
        }
        img
    }
}

#[derive(Debug, Clone)]
pub enum Batch {
    Images { first_index: usize, raw: Vec<Image> },
    Dump { index: usize, tokens: TokenBatch },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Images { raw, .. } => raw.len(),
            Batch::Dump { tokens, .. } => tokens.batch_size(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, cfg: &RunConfig) -> ForwardInput {
        match self {
            Batch::Images { raw, .. } => cfg.prepare(raw),
            Batch::Dump { tokens, .. } => ForwardInput::Tokens(tokens.clone()),
        }
    }
}
