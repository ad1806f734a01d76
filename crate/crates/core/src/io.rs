//! File formats: the tensor container, binary PPM images, token dumps and
//! token-map rendering.
//!
//! # Tensor container layout
//!
//! ```text
//! [u64 little-endian: header length H][H bytes: UTF-8 JSON header][payload]
//! ```
//!
//! The header maps each tensor name to
//! `{"dtype": "F32" | "F64" | "U32", "shape": [..], "data_offsets": [start, end]}`
//! with offsets relative to the start of the payload. An optional
//! `__metadata__` object of string values is allowed. Tensors are written in
//! name order, contiguous and little-endian; the header is padded with spaces
//! to a multiple of 8 bytes. Offsets must be in bounds, non-overlapping, and
//! cover the payload with no gaps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};
use crate::model::{ModelConfig, ModelWeights, NamedTensor, TokenBatch};
use crate::numeric::Matrix;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
    U32,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::U32(_) => Dtype::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => {
                TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            Dtype::F64 => {
                TensorData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            Dtype::U32 => {
                TensorData::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(AtmError::Shape(format!("shape {shape:?} needs {want} elements, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.into(), serde_json::to_value(&self.metadata).expect("string map"));
        }
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let start = payload.len();
            t.data.write_le(&mut payload);
            let entry =
                HeaderEntry { dtype: t.data.dtype(), shape: t.shape.clone(), data_offsets: [start, payload.len()] };
            header.insert(name.clone(), serde_json::to_value(entry).expect("plain struct"));
        }
        let mut text = serde_json::to_string(&header).expect("json map");
        while !text.len().is_multiple_of(8) {
            text.push(' ');
        }
        let mut out = Vec::with_capacity(8 + text.len() + payload.len());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(AtmError::MalformedHeader("file shorter than the length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = 8u64.checked_add(header_len).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| {
            AtmError::MalformedHeader(format!("header length {header_len} exceeds file size {}", bytes.len()))
        })? as usize;
        let text = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| AtmError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let raw: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text.trim_end())
            .map_err(|e| AtmError::MalformedHeader(format!("header is not a JSON object: {e}")))?;
        let payload = &bytes[header_end..];

        let mut metadata = BTreeMap::new();
        let mut entries = Vec::with_capacity(raw.len());
        for (name, value) in raw {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value)
                    .map_err(|e| AtmError::MalformedHeader(format!("bad metadata: {e}")))?;
                continue;
            }
            let entry: HeaderEntry =
                serde_json::from_value(value).map_err(|e| AtmError::MalformedHeader(format!("entry `{name}`: {e}")))?;
            let [start, end] = entry.data_offsets;
            let count: usize = entry.shape.iter().product();
            if end < start || end - start != count * entry.dtype.width() {
                return Err(AtmError::MalformedHeader(format!(
                    "entry `{name}`: offsets [{start}, {end}) do not fit {:?} of shape {:?}",
                    entry.dtype, entry.shape
                )));
            }
            entries.push((name, entry));
        }

        entries.sort_by_key(|(_, e)| (e.data_offsets[0], e.data_offsets[1]));
        for (name, e) in &entries {
            if e.data_offsets[1] > payload.len() {
                return Err(AtmError::OutOfBounds {
                    name: name.clone(),
                    detail: format!("ends at byte {} of a {}-byte payload", e.data_offsets[1], payload.len()),
                });
            }
        }
        let mut cursor = 0usize;
        for (i, (name, e)) in entries.iter().enumerate() {
            if e.data_offsets[0] < cursor {
                return Err(AtmError::OverlappingOffsets { first: entries[i - 1].0.clone(), second: name.clone() });
            }
            if e.data_offsets[0] > cursor {
                return Err(AtmError::MalformedHeader(format!("gap in payload before `{name}` at byte {cursor}")));
            }
            cursor = e.data_offsets[1];
        }
        if cursor != payload.len() {
            return Err(AtmError::MalformedHeader(format!(
                "{} trailing payload bytes not covered by any tensor",
                payload.len() - cursor
            )));
        }

        let mut tensors = BTreeMap::new();
        for (name, e) in entries {
            let [s, t] = e.data_offsets;
            let data = TensorData::read_le(e.dtype, &payload[s..t]);
            tensors.insert(name, Tensor { shape: e.shape, data });
        }
        Ok(Self { tensors, metadata })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_weights(path: impl AsRef<Path>, weights: &ModelWeights) -> Result<()> {
    let mut c = TensorContainer::new();
    for (name, t) in weights.to_named() {
        c.insert(name, Tensor::new(t.shape, TensorData::F32(t.data))?);
    }
    c.write(path)
}

/// Loads and shape-audits weights; also returns the names of tensors the
/// config does not use.
pub fn load_weights_reporting(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<(ModelWeights, Vec<String>)> {
    let container = TensorContainer::read(path)?;
    let known: std::collections::BTreeSet<String> =
        crate::model::expected_shapes(cfg).into_iter().map(|(n, _)| n).collect();
    let mut named = BTreeMap::new();
    let mut ignored = Vec::new();
    for (name, t) in container.tensors {
        if !known.contains(&name) {
            log::warn!("ignoring unknown tensor `{name}` in weights file");
            ignored.push(name);
            continue;
        }
        let data = match t.data {
            TensorData::F32(v) => v,
            other => {
                return Err(AtmError::MalformedHeader(format!(
                    "tensor `{name}` has dtype {:?}, weights must be F32",
                    other.dtype()
                )))
            }
        };
        named.insert(name, NamedTensor { shape: t.shape, data });
    }
    Ok((ModelWeights::from_named(named, cfg)?, ignored))
}

pub fn load_weights(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ModelWeights> {
    load_weights_reporting(path, cfg).map(|(w, _)| w)
}

/// Writes `tokens` (`B x N x D`, F32) and `sizes` (`B x N`, U32).
pub fn save_token_dump(path: impl AsRef<Path>, batch: &TokenBatch) -> Result<()> {
    let (b, n, d) = (batch.batch_size(), batch.num_tokens(), batch.dim());
    let mut c = TensorContainer::new();
    let tokens: Vec<f32> = batch.tokens().iter().flat_map(|t| t.data().to_vec()).collect();
    let sizes: Vec<u32> = batch.sizes().iter().flatten().copied().collect();
    c.insert("tokens", Tensor::new(vec![b, n, d], TensorData::F32(tokens))?);
    c.insert("sizes", Tensor::new(vec![b, n], TensorData::U32(sizes))?);
    c.write(path)
}

pub fn load_token_dump(path: impl AsRef<Path>, cls_index: Option<usize>) -> Result<TokenBatch> {
    let c = TensorContainer::read(path)?;
    let tokens = c.get("tokens").ok_or_else(|| AtmError::MissingTensor("tokens".into()))?;
    let sizes = c.get("sizes").ok_or_else(|| AtmError::MissingTensor("sizes".into()))?;
    let (TensorData::F32(tdata), TensorData::U32(sdata)) = (&tokens.data, &sizes.data) else {
        return Err(AtmError::MalformedHeader("token dump needs F32 `tokens` and U32 `sizes`".into()));
    };
    let [b, n, d] = tokens.shape[..] else {
        return Err(AtmError::Shape(format!("`tokens` must be 3-D, got {:?}", tokens.shape)));
    };
    if sizes.shape != [b, n] {
        return Err(AtmError::TensorShape { name: "sizes".into(), expected: vec![b, n], found: sizes.shape.clone() });
    }
    let mats = tdata.chunks_exact(n * d).map(|chunk| Matrix::new(n, d, chunk.to_vec())).collect::<Result<Vec<_>>>()?;
    let size_rows = sdata.chunks_exact(n).map(<[u32]>::to_vec).collect();
    TokenBatch::from_dump(mats, size_rows, cls_index)
}

/// RGB image, channels interleaved, row-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(AtmError::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Per-channel `(v - mean) / std`.
    pub fn normalize(&mut self, mean: [f32; 3], std: [f32; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - mean[c]) / std[c];
            }
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(AtmError::Parse("truncated PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok).ok().and_then(|s| s.parse().ok()).ok_or_else(|| AtmError::Parse(format!("bad PPM {what}")))
}

/// Parses a binary (P6) pixmap with 8-bit channels.
pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != b"P6" {
        return Err(AtmError::Parse("not a binary PPM (expected P6 magic)".into()));
    }
    let width = ppm_number(bytes, &mut pos, "width")?;
    let height = ppm_number(bytes, &mut pos, "height")?;
    let maxval = ppm_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(AtmError::Parse(format!("bad PPM dimensions {width}x{height}")));
    }
    if maxval != 255 {
        return Err(AtmError::Parse(format!("PPM maxval {maxval}; only 8-bit (255) is supported")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(AtmError::Parse("missing whitespace after PPM header".into()));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| AtmError::Parse(format!("PPM raster truncated: need {need} bytes")))?;
    let data = raster.iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, data)
}

pub fn load_image_ppm(path: impl AsRef<Path>) -> Result<Image> {
    parse_ppm(&fs::read(path)?)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    fs::write(path, encode_ppm(image.width, image.height, &image.to_rgb8()))?;
    Ok(())
}

/// ImageNet channel statistics.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// [`synthetic_scene`] with per-pixel uniform noise of amplitude `noise`,
/// clamped to `[0, 1]`.
pub fn textured_scene(size: usize, seed: u64, noise: f32) -> Image {
    let mut img = synthetic_scene(size, seed);
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e47);
        for v in &mut img.data {
            *v = (*v + noise * rng.random_range(-1.0f32..1.0)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Deterministic test scene: a flat background with a seeded number of flat
/// or shaded rectangles and discs. Larger `seed` values do not imply more
/// shapes; the count is drawn from 1..=8.
pub fn synthetic_scene(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let bg = color(&mut rng);
    let mut data: Vec<f32> = (0..size * size).flat_map(|_| bg).collect();
    let shapes = rng.random_range(1..=8);
    for _ in 0..shapes {
        let c = color(&mut rng);
        let cx = rng.random_range(0..size) as f32;
        let cy = rng.random_range(0..size) as f32;
        let r = rng.random_range(size / 10..=size / 3).max(1) as f32;
        let disc = rng.random_bool(0.5);
        let shaded = rng.random_bool(0.3);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let inside = if disc { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= 0.6 * r };
                if inside {
                    let shade = if shaded { 0.6 + 0.4 * (y as f32 / size as f32) } else { 1.0 };
                    let i = (y * size + x) * 3;
                    for k in 0..3 {
                        data[i + k] = c[k] * shade;
                    }
                }
            }
        }
    }
    Image::new(size, size, data).expect("sized buffer")
}

/// Assignment of every patch to the token that absorbed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMap {
    pub grid_side: usize,
    /// Row-major patch index -> surviving token index.
    pub assignment: Vec<usize>,
    pub remaining_count: usize,
}

impl TokenMap {
    pub fn from_batch(x: &TokenBatch, image: usize, grid_side: usize) -> Result<Self> {
        let patches = grid_side * grid_side;
        let offset = x.original_count().checked_sub(patches).filter(|&o| o <= 1).ok_or_else(|| {
            AtmError::Shape(format!(
                "{} original tokens do not form a {grid_side}x{grid_side} grid",
                x.original_count()
            ))
        })?;
        let prov = x.provenance().get(image).ok_or_else(|| AtmError::Shape(format!("no image {image} in batch")))?;
        let mut assignment = vec![usize::MAX; patches];
        for (token, positions) in prov.iter().enumerate() {
            for &p in positions {
                let p = p as usize;
                if p < offset {
                    continue;
                }
                let patch = p - offset;
                if patch >= patches || assignment[patch] != usize::MAX {
                    return Err(AtmError::InvariantViolation(format!("patch {patch} out of range or claimed twice")));
                }
                assignment[patch] = token;
            }
        }
        if let Some(gap) = assignment.iter().position(|&a| a == usize::MAX) {
            return Err(AtmError::InvariantViolation(format!("patch {gap} is not covered by any token's provenance")));
        }
        let mut ids = assignment.clone();
        ids.sort_unstable();
        ids.dedup();
        Ok(Self { grid_side, remaining_count: ids.len(), assignment })
    }
}

/// Deterministic color for a token id.
pub fn palette(token: usize, seed: u64) -> [u8; 3] {
    let mut z = seed ^ (token as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let ch = |shift: u32| 48 + ((z >> shift) & 0xff) as u8 % 200;
    [ch(0), ch(16), ch(32)]
}

const BORDER: [u8; 3] = [16, 16, 16];

/// Rasterizes a token map: `cell` pixels per patch, one color per token
/// (the mean source-image color when `image` is given, else [`palette`]),
/// with one-pixel borders between different tokens.
pub fn rasterize_token_map(map: &TokenMap, cell: usize, seed: u64, image: Option<&Image>) -> Result<(usize, Vec<u8>)> {
    let side = map.grid_side;
    let px = side * cell;
    let colors: BTreeMap<usize, [u8; 3]> = match image {
        None => map.assignment.iter().map(|&t| (t, palette(t, seed))).collect(),
        Some(img) => {
            if img.height % side != 0 || img.width != img.height {
                return Err(AtmError::Shape(format!(
                    "{}x{} image does not tile a {side}x{side} grid",
                    img.height, img.width
                )));
            }
            let patch = img.height / side;
            let mut sums: BTreeMap<usize, ([f64; 3], usize)> = BTreeMap::new();
            for (p, &t) in map.assignment.iter().enumerate() {
                let (gy, gx) = (p / side, p % side);
                let e = sums.entry(t).or_insert(([0.0; 3], 0));
                for y in gy * patch..(gy + 1) * patch {
                    for x in gx * patch..(gx + 1) * patch {
                        let v = img.pixel(y, x);
                        for (acc, &c) in e.0.iter_mut().zip(v.iter()) {
                            *acc += c as f64;
                        }
                        e.1 += 1;
                    }
                }
            }
            sums.into_iter()
                .map(|(t, (s, n))| {
                    let c = |k: usize| ((s[k] / n as f64).clamp(0.0, 1.0) * 255.0).round() as u8;
                    (t, [c(0), c(1), c(2)])
                })
                .collect()
        }
    };
    let token_at = |gy: usize, gx: usize| map.assignment[gy * side + gx];
    let mut raster = Vec::with_capacity(px * px * 3);
    for y in 0..px {
        for x in 0..px {
            let (gy, gx, cy, cx) = (y / cell, x / cell, y % cell, x % cell);
            let t = token_at(gy, gx);
            let border =
                (cx == 0 && gx > 0 && token_at(gy, gx - 1) != t) || (cy == 0 && gy > 0 && token_at(gy - 1, gx) != t);
            raster.extend_from_slice(if border { &BORDER } else { &colors[&t] });
        }
    }
    Ok((px, raster))
}

/// Writes the token map of one image as a P6 file; returns the number of
/// remaining (non-CLS) tokens.
pub fn render_token_map(
    x: &TokenBatch,
    image_index: usize,
    grid_side: usize,
    path: impl AsRef<Path>,
    cell: usize,
    seed: u64,
    source: Option<&Image>,
) -> Result<usize> {
    let map = TokenMap::from_batch(x, image_index, grid_side)?;
    let (side_px, raster) = rasterize_token_map(&map, cell.max(1), seed, source)?;
    fs::write(path, encode_ppm(side_px, side_px, &raster))?;
    Ok(map.remaining_count)
}
