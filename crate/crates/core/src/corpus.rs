//! Slides as bags of patches: synthetic corpus generation, Otsu tiling of
//! real images, and the on-disk corpus layout.
//!
//! Negative patches are smooth low-frequency colour fields; positive patches
//! stitch three distinct sub-textures into random sub-regions, so they are
//! heterogeneous by construction. Positive patches inside a positive slide
//! form one 4-connected lesion on the slide grid.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arrays::{read_file, sha256_hex, write_atomic, ArrayFile};
use crate::error::{Result, UmtlError};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// m·m rows (row-major pixels) × 3 channels, values in [0,1].
    pub pixels: Mat,
    pub size: usize,
    pub grid_pos: (usize, usize),
    pub truth_label: Option<u8>,
}

impl Patch {
    pub fn new(pixels: Mat, size: usize, grid_pos: (usize, usize), truth: Option<u8>) -> Result<Self> {
        if pixels.rows != size * size || pixels.cols != 3 {
            return Err(UmtlError::Shape(format!(
                "patch pixels must be {}x3, got {}x{}",
                size * size,
                pixels.rows,
                pixels.cols
            )));
        }
        if pixels.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(UmtlError::Shape("patch pixel outside [0,1]".into()));
        }
        Ok(Patch {
            pixels,
            size,
            grid_pos,
            truth_label: truth,
        })
    }

    /// Channel-mean grayscale, m·m values row-major.
    pub fn gray(&self) -> Vec<f64> {
        (0..self.pixels.rows)
            .map(|r| self.pixels.row(r).iter().sum::<f64>() / 3.0)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WsiBag {
    pub slide_id: String,
    pub patches: Vec<Patch>,
    pub grid_shape: (usize, usize),
    pub truth_slide_label: Option<u8>,
    pub subtype_label: Option<usize>,
    pub patient_id: Option<String>,
}

impl WsiBag {
    pub fn validate(&self) -> Result<()> {
        if self.patches.is_empty() {
            return Err(UmtlError::EmptyBag(self.slide_id.clone()));
        }
        let mut seen = BTreeSet::new();
        for p in &self.patches {
            let (r, c) = p.grid_pos;
            if r >= self.grid_shape.0 || c >= self.grid_shape.1 {
                return Err(UmtlError::Shape(format!(
                    "{}: grid position {:?} outside {:?}",
                    self.slide_id, p.grid_pos, self.grid_shape
                )));
            }
            if !seen.insert(p.grid_pos) {
                return Err(UmtlError::Shape(format!(
                    "{}: duplicate grid position {:?}",
                    self.slide_id, p.grid_pos
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.first().map(|p| p.size).unwrap_or(0)
    }

    pub fn truths(&self) -> Option<Vec<u8>> {
        self.patches.iter().map(|p| p.truth_label).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureParams {
    /// Side of the coarse random grid upsampled into the negative field.
    pub negative_coarse_grid: usize,
    pub negative_amplitude: f64,
    pub negative_noise: f64,
    pub positive_noise: f64,
    pub positive_contrast: f64,
    /// Stripe period range in pixels.
    pub stripe_period: (f64, f64),
    /// Colour jitter applied to every patch base colour.
    pub color_jitter: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            negative_coarse_grid: 2,
            negative_amplitude: 0.15,
            negative_noise: 0.004,
            positive_noise: 0.12,
            positive_contrast: 0.2,
            stripe_period: (2.5, 5.0),
            color_jitter: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_bags: usize,
    pub patches_per_bag: usize,
    pub positive_bag_fraction: f64,
    pub positive_patch_fraction: f64,
    pub patch_size: usize,
    /// 0 disables subtype labels; K ≥ 2 assigns each positive bag one of K
    /// positive texture families.
    pub num_subtypes: usize,
    pub texture: TextureParams,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_bags: 40,
            patches_per_bag: 64,
            positive_bag_fraction: 0.5,
            positive_patch_fraction: 0.2,
            patch_size: 32,
            num_subtypes: 0,
            texture: TextureParams::default(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bags == 0 {
            return Err(UmtlError::config("num_bags", "must be positive"));
        }
        if self.patches_per_bag == 0 {
            return Err(UmtlError::config("patches_per_bag", "must be positive"));
        }
        if self.patch_size == 0 {
            return Err(UmtlError::config("patch_size", "must be positive"));
        }
        for (name, v) in [
            ("positive_bag_fraction", self.positive_bag_fraction),
            ("positive_patch_fraction", self.positive_patch_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(UmtlError::config(name, "must lie in [0,1]"));
            }
        }
        if self.num_positive_bags() > 0 && self.positive_patches_per_bag() == 0 {
            return Err(UmtlError::config(
                "positive_patch_fraction",
                "positive bags would contain no positive patches",
            ));
        }
        if self.num_subtypes == 1 {
            return Err(UmtlError::config("num_subtypes", "use 0 (none) or at least 2"));
        }
        if self.texture.negative_coarse_grid < 2 {
            return Err(UmtlError::config("texture.negative_coarse_grid", "must be >= 2"));
        }
        Ok(())
    }

    pub fn num_positive_bags(&self) -> usize {
        (self.num_bags as f64 * self.positive_bag_fraction).round() as usize
    }

    pub fn positive_patches_per_bag(&self) -> usize {
        (self.patches_per_bag as f64 * self.positive_patch_fraction).round() as usize
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        let cols = (self.patches_per_bag as f64).sqrt().ceil() as usize;
        let rows = self.patches_per_bag.div_ceil(cols);
        (rows, cols)
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagDescriptor {
    pub slide_id: String,
    pub file: String,
    pub num_patches: usize,
    pub grid_shape: (usize, usize),
    pub slide_label: Option<u8>,
    pub subtype: Option<usize>,
    pub positive_patches: Option<usize>,
    pub patient_id: Option<String>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub config_digest: String,
    pub config: Option<SyntheticConfig>,
    pub bags: Vec<BagDescriptor>,
}

impl CorpusManifest {
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("manifest serializes").as_bytes())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BAG_EXT: &str = "umtl";

/// Builds every bag in memory. Bag `i` depends only on `(cfg, i)`.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<Vec<WsiBag>> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..cfg.num_bags).collect();
    let mut top = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut top);
    let positives: BTreeSet<usize> = order[..cfg.num_positive_bags()].iter().copied().collect();
    let subtypes: Vec<usize> = {
        // round-robin over the shuffled positive order keeps subtypes balanced
        let mut s = vec![0; cfg.num_bags];
        if cfg.num_subtypes >= 2 {
            for (k, b) in order[..cfg.num_positive_bags()].iter().enumerate() {
                s[*b] = k % cfg.num_subtypes;
            }
        }
        s
    };
    (0..cfg.num_bags)
        .into_par_iter()
        .map(|i| {
            let positive = positives.contains(&i);
            let subtype = (positive && cfg.num_subtypes >= 2).then_some(subtypes[i]);
            synth_bag(cfg, i, positive, subtype)
        })
        .collect()
}

fn synth_bag(cfg: &SyntheticConfig, index: usize, positive: bool, subtype: Option<usize>) -> Result<WsiBag> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (rows, cols) = cfg.grid_shape();
    let cells: Vec<(usize, usize)> = (0..cfg.patches_per_bag)
        .map(|k| (k / cols, k % cols))
        .collect();
    let lesion = if positive {
        grow_lesion(&cells, cfg.positive_patches_per_bag(), &mut rng)
    } else {
        BTreeSet::new()
    };
    let m = cfg.patch_size;
    let mut patches = Vec::with_capacity(cells.len());
    for &pos in &cells {
        let is_pos = lesion.contains(&pos);
        let pixels = if is_pos {
            positive_texture(m, &cfg.texture, subtype.unwrap_or(0), &mut rng)
        } else {
            negative_texture(m, &cfg.texture, &mut rng)
        };
        patches.push(Patch::new(pixels, m, pos, Some(is_pos as u8))?);
    }
    Ok(WsiBag {
        slide_id: format!("slide_{index:04}"),
        patches,
        grid_shape: (rows, cols),
        truth_slide_label: Some(positive as u8),
        subtype_label: subtype,
        patient_id: None,
    })
}

/// Random 4-connected region of `size` cells grown from a random seed cell.
fn grow_lesion<R: Rng>(cells: &[(usize, usize)], size: usize, rng: &mut R) -> BTreeSet<(usize, usize)> {
    let all: BTreeSet<_> = cells.iter().copied().collect();
    let mut region = BTreeSet::new();
    region.insert(cells[rng.random_range(0..cells.len())]);
    while region.len() < size.min(cells.len()) {
        let frontier: Vec<(usize, usize)> = region
            .iter()
            .flat_map(|&(r, c)| neighbors4(r, c))
            .filter(|p| all.contains(p) && !region.contains(p))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if frontier.is_empty() {
            break;
        }
        region.insert(frontier[rng.random_range(0..frontier.len())]);
    }
    region
}

fn neighbors4(r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut v = Vec::with_capacity(4);
    if r > 0 {
        v.push((r - 1, c));
    }
    v.push((r + 1, c));
    if c > 0 {
        v.push((r, c - 1));
    }
    v.push((r, c + 1));
    v.into_iter()
}

fn jittered<R: Rng>(base: [f64; 3], jitter: f64, rng: &mut R) -> [f64; 3] {
    let mut out = base;
    for v in &mut out {
        if jitter > 0.0 {
            *v += rng.random_range(-jitter..jitter);
        }
    }
    out
}

fn negative_texture<R: Rng>(m: usize, t: &TextureParams, rng: &mut R) -> Mat {
    let base = jittered([0.88, 0.62, 0.78], t.color_jitter, rng);
    let g = t.negative_coarse_grid;
    let coarse: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weights = [1.0, 0.8, 0.9];
    let noise = Normal::new(0.0, t.negative_noise.max(1e-12)).expect("valid std");
    let mut px = Mat::zeros(m * m, 3);
    for y in 0..m {
        for x in 0..m {
            let f = bilinear(&coarse, g, y as f64 / (m - 1).max(1) as f64, x as f64 / (m - 1).max(1) as f64);
            for c in 0..3 {
                let v = base[c] + t.negative_amplitude * f * weights[c] + noise.sample(rng);
                px.data[(y * m + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    px
}

fn bilinear(grid: &[f64], g: usize, fy: f64, fx: f64) -> f64 {
    let gy = fy * (g - 1) as f64;
    let gx = fx * (g - 1) as f64;
    let y0 = (gy.floor() as usize).min(g - 2);
    let x0 = (gx.floor() as usize).min(g - 2);
    let ty = gy - y0 as f64;
    let tx = gx - x0 as f64;
    let at = |r: usize, c: usize| grid[r * g + c];
    (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
        + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1))
}

/// Three sub-textures (grain, stripes, spots) on a random three-cell Voronoi
/// partition of the patch. `family` shifts colour and stripe period so
/// subtypes are distinguishable.
fn positive_texture<R: Rng>(m: usize, t: &TextureParams, family: usize, rng: &mut R) -> Mat {
    let palette = [[0.55, 0.32, 0.62], [0.42, 0.40, 0.70], [0.62, 0.30, 0.45]];
    let base = jittered(palette[family % palette.len()], t.color_jitter, rng);
    let seeds: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.0..m as f64), rng.random_range(0.0..m as f64)))
        .collect();
    let mut kinds = [0usize, 1, 2];
    kinds.shuffle(rng);
    let (plo, phi) = t.stripe_period;
    let period = rng.random_range(plo..phi) * (1.0 + 0.6 * (family % 3) as f64);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let spot = rng.random_range(2.0..4.0);
    let noise = Normal::new(0.0, t.positive_noise.max(1e-12)).expect("valid std");
    let k = t.positive_contrast;
    let mut px = Mat::zeros(m * m, 3);
    for y in 0..m {
        for x in 0..m {
            let (yf, xf) = (y as f64, x as f64);
            let region = seeds
                .iter()
                .enumerate()
                .map(|(i, (sy, sx))| (i, (yf - sy).powi(2) + (xf - sx).powi(2)))
                .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc })
                .0;
            let shade = match kinds[region] {
                0 => noise.sample(rng),
                1 => {
                    let u = xf * theta.cos() + yf * theta.sin();
                    k * (std::f64::consts::TAU * u / period + phase).sin()
                }
                _ => {
                    let s = ((xf / spot).sin() * (yf / spot).sin()).signum();
                    k * s - 0.08
                }
            };
            for c in 0..3 {
                px.data[(y * m + x) * 3 + c] = (base[c] + shade).clamp(0.0, 1.0);
            }
        }
    }
    px
}

pub fn bag_to_file(bag: &WsiBag) -> ArrayFile {
    let m = bag.patch_size();
    let n = bag.patches.len();
    let mut f = ArrayFile::new();
    f.set_meta("slide_id", &bag.slide_id);
    f.set_meta("patch_size", m);
    f.set_meta("grid_rows", bag.grid_shape.0);
    f.set_meta("grid_cols", bag.grid_shape.1);
    if let Some(y) = bag.truth_slide_label {
        f.set_meta("slide_label", y);
    }
    if let Some(s) = bag.subtype_label {
        f.set_meta("subtype", s);
    }
    if let Some(p) = &bag.patient_id {
        f.set_meta("patient_id", p);
    }
    let mut pixels = Mat::zeros(n, m * m * 3);
    let mut pos = Mat::zeros(n, 2);
    let mut truth = Mat::zeros(n, 1);
    for (i, p) in bag.patches.iter().enumerate() {
        pixels.row_mut(i).copy_from_slice(&p.pixels.data);
        pos.data[i * 2] = p.grid_pos.0 as f64;
        pos.data[i * 2 + 1] = p.grid_pos.1 as f64;
        truth.data[i] = p.truth_label.map(f64::from).unwrap_or(-1.0);
    }
    f.push("pixels", pixels);
    f.push("grid_pos", pos);
    f.push("truth", truth);
    f
}

pub fn bag_from_file(f: &ArrayFile, origin: &Path) -> Result<WsiBag> {
    let bad = |reason: &str| UmtlError::Malformed {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let num = |key: &str| -> Result<usize> {
        f.meta(key)
            .ok_or_else(|| bad(&format!("missing meta {key}")))?
            .parse()
            .map_err(|_| bad(&format!("bad meta {key}")))
    };
    let m = num("patch_size")?;
    let pixels = f.get("pixels").ok_or_else(|| bad("missing pixels"))?;
    let pos = f.get("grid_pos").ok_or_else(|| bad("missing grid_pos"))?;
    let truth = f.get("truth").ok_or_else(|| bad("missing truth"))?;
    if pixels.cols != m * m * 3 || pos.rows != pixels.rows || truth.rows != pixels.rows {
        return Err(bad("inconsistent array shapes"));
    }
    let patches = (0..pixels.rows)
        .map(|i| {
            let t = truth.data[i];
            Patch::new(
                Mat::from_vec(m * m, 3, pixels.row(i).to_vec()),
                m,
                (pos.data[i * 2] as usize, pos.data[i * 2 + 1] as usize),
                (t >= 0.0).then_some(t as u8),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let bag = WsiBag {
        slide_id: f.meta("slide_id").ok_or_else(|| bad("missing slide_id"))?.to_string(),
        patches,
        grid_shape: (num("grid_rows")?, num("grid_cols")?),
        truth_slide_label: f.meta("slide_label").and_then(|v| v.parse().ok()),
        subtype_label: f.meta("subtype").and_then(|v| v.parse().ok()),
        patient_id: f.meta("patient_id").map(str::to_string),
    };
    bag.validate()?;
    Ok(bag)
}

/// Writes `bags` under `dir` and returns the manifest (also written).
pub fn write_corpus(dir: &Path, bags: &[WsiBag], config: Option<&SyntheticConfig>) -> Result<CorpusManifest> {
    fs::create_dir_all(dir.join("bags")).map_err(|e| UmtlError::io(dir, e))?;
    let encoded: Vec<(String, Vec<u8>)> = bags
        .par_iter()
        .map(|b| (format!("bags/{}.{BAG_EXT}", b.slide_id), bag_to_file(b).to_bytes()))
        .collect();
    let mut descriptors = Vec::with_capacity(bags.len());
    for (bag, (rel, bytes)) in bags.iter().zip(encoded) {
        write_atomic(&dir.join(&rel), &bytes)?;
        descriptors.push(BagDescriptor {
            slide_id: bag.slide_id.clone(),
            file: rel,
            num_patches: bag.patches.len(),
            grid_shape: bag.grid_shape,
            slide_label: bag.truth_slide_label,
            subtype: bag.subtype_label,
            positive_patches: bag
                .truths()
                .map(|t| t.iter().filter(|&&v| v == 1).count()),
            patient_id: bag.patient_id.clone(),
            sha256: sha256_hex(&bytes),
        });
    }
    let config_digest = config
        .map(SyntheticConfig::digest)
        .unwrap_or_else(|| sha256_hex(b"tiled"));
    let manifest = CorpusManifest {
        corpus_id: config_digest[..16].to_string(),
        config_digest,
        config: config.cloned(),
        bags: descriptors,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn generate_corpus(cfg: &SyntheticConfig, dir: &Path) -> Result<CorpusManifest> {
    let bags = synthesize(cfg)?;
    write_corpus(dir, &bags, Some(cfg))
}

pub fn read_manifest(manifest_path: &Path) -> Result<CorpusManifest> {
    let bytes = read_file(manifest_path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads every bag listed in the manifest, verifying each file's digest.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<WsiBag>> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    manifest
        .bags
        .par_iter()
        .map(|d| {
            let path = root.join(&d.file);
            let bytes = read_file(&path)?;
            let found = sha256_hex(&bytes);
            if found != d.sha256 {
                return Err(UmtlError::DigestMismatch {
                    path,
                    expected: d.sha256.clone(),
                    found,
                });
            }
            let f = ArrayFile::from_bytes(&bytes, &path)?;
            bag_from_file(&f, &path)
        })
        .collect()
}

/// An RGB image with values in [0,1], stored row-major as (H·W)×3.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Mat,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Mat) -> Result<Self> {
        if pixels.rows != height * width || pixels.cols != 3 {
            return Err(UmtlError::Shape("image pixels must be (H*W)x3".into()));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn gray(&self) -> Vec<f64> {
        (0..self.pixels.rows)
            .map(|r| self.pixels.row(r).iter().sum::<f64>() / 3.0)
            .collect()
    }
}

/// Gray level at or above which a uniform image counts as background.
pub const UNIFORM_BACKGROUND_LEVEL: f64 = 0.8;
const OTSU_BINS: usize = 256;

/// Otsu threshold over [0,1] gray values. Pixels with `gray <= threshold`
/// are tissue. `None` when the histogram has a single occupied bin.
pub fn otsu_threshold(gray: &[f64]) -> Option<f64> {
    let mut hist = [0usize; OTSU_BINS];
    for &v in gray {
        let b = ((v.clamp(0.0, 1.0) * (OTSU_BINS - 1) as f64).round()) as usize;
        hist[b] += 1;
    }
    if hist.iter().filter(|&&h| h > 0).count() < 2 {
        return None;
    }
    let total = gray.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (t, &h) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += h as f64;
        sum0 += t as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if between > best.0 {
            best = (between, t);
        }
    }
    Some((best.1 as f64 + 0.5) / (OTSU_BINS - 1) as f64)
}

/// Per-pixel tissue mask from Otsu on channel-mean gray.
pub fn tissue_mask(image: &Image) -> Vec<bool> {
    let gray = image.gray();
    match otsu_threshold(&gray) {
        Some(t) => gray.iter().map(|&v| v <= t).collect(),
        None => gray.iter().map(|&v| v < UNIFORM_BACKGROUND_LEVEL).collect(),
    }
}

/// Splits an image into a non-overlapping grid of m×m cells and keeps the
/// cells whose tissue fraction reaches `tissue_threshold`.
pub fn tile_image(image: &Image, patch_size: usize, tissue_threshold: f64, slide_id: &str) -> Result<WsiBag> {
    let m = patch_size;
    if m == 0 || image.height < m || image.width < m {
        return Err(UmtlError::ImageTooSmall {
            height: image.height,
            width: image.width,
            patch: m,
        });
    }
    if !(0.0..=1.0).contains(&tissue_threshold) {
        return Err(UmtlError::config("tissue_threshold", "must lie in [0,1]"));
    }
    let mask = tissue_mask(image);
    let rows = image.height / m;
    let cols = image.width / m;
    let mut patches = Vec::new();
    for gr in 0..rows {
        for gc in 0..cols {
            let mut fg = 0usize;
            let mut px = Mat::zeros(m * m, 3);
            for y in 0..m {
                for x in 0..m {
                    let src = (gr * m + y) * image.width + gc * m + x;
                    fg += mask[src] as usize;
                    px.row_mut(y * m + x).copy_from_slice(image.pixels.row(src));
                }
            }
            if fg as f64 / (m * m) as f64 >= tissue_threshold {
                patches.push(Patch::new(px, m, (gr, gc), None)?);
            }
        }
    }
    if patches.is_empty() {
        return Err(UmtlError::EmptyBag(format!("{slide_id}: no tissue cells")));
    }
    Ok(WsiBag {
        slide_id: slide_id.to_string(),
        patches,
        grid_shape: (rows, cols),
        truth_slide_label: None,
        subtype_label: None,
        patient_id: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            num_bags: 4,
            patches_per_bag: 16,
            patch_size: 8,
            seed: 11,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let bags = synthesize(&small_cfg()).unwrap();
        assert_eq!(bags.len(), 4);
        let pos = bags.iter().filter(|b| b.truth_slide_label == Some(1)).count();
        assert_eq!(pos, 2);
        for b in &bags {
            b.validate().unwrap();
            let k = b.truths().unwrap().iter().filter(|&&v| v == 1).count();
            assert_eq!(k, if b.truth_slide_label == Some(1) { 3 } else { 0 });
        }
    }

    #[test]
    fn zero_positive_patch_fraction_is_degenerate() {
        let cfg = SyntheticConfig {
            positive_patch_fraction: 0.0,
            ..small_cfg()
        };
        assert!(matches!(cfg.validate(), Err(UmtlError::InvalidConfig { .. })));
        let cfg = SyntheticConfig {
            num_bags: 0,
            ..small_cfg()
        };
        assert!(synthesize(&cfg).is_err());
    }

    #[test]
    fn lesion_is_connected() {
        let bags = synthesize(&SyntheticConfig {
            num_bags: 6,
            patches_per_bag: 64,
            patch_size: 8,
            ..SyntheticConfig::default()
        })
        .unwrap();
        for b in bags.iter().filter(|b| b.truth_slide_label == Some(1)) {
            let pos: Vec<(usize, usize)> = b
                .patches
                .iter()
                .filter(|p| p.truth_label == Some(1))
                .map(|p| p.grid_pos)
                .collect();
            let comps = crate::slide::connected_components_on(&pos);
            assert_eq!(comps.len(), 1);
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = synthesize(&small_cfg()).unwrap();
        let b = synthesize(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&SyntheticConfig { seed: 12, ..small_cfg() }).unwrap();
        assert_ne!(a, c);
    }

    fn image_from_gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        let mut px = Mat::zeros(h * w, 3);
        for y in 0..h {
            for x in 0..w {
                let v = f(y, x);
                px.row_mut(y * w + x).copy_from_slice(&[v, v, v]);
            }
        }
        Image::new(h, w, px).unwrap()
    }

    #[test]
    fn all_white_image_has_no_tissue() {
        let img = image_from_gray(448, 448, |_, _| 1.0);
        assert!(matches!(tile_image(&img, 224, 0.5, "w"), Err(UmtlError::EmptyBag(_))));
    }

    #[test]
    fn all_tissue_image_yields_full_grid() {
        let img = image_from_gray(448, 448, |_, _| 0.55);
        let bag = tile_image(&img, 224, 0.5, "t").unwrap();
        let pos: Vec<_> = bag.patches.iter().map(|p| p.grid_pos).collect();
        assert_eq!(pos, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = image_from_gray(10, 40, |_, _| 0.5);
        assert!(matches!(tile_image(&img, 16, 0.5, "s"), Err(UmtlError::ImageTooSmall { .. })));
    }

    #[test]
    fn tiling_matches_per_cell_foreground_count() {
        // tissue (dark) where x < 36 on a 32x64 canvas with m = 8: cell column
        // 4 is half tissue, columns 0..4 full, columns 5.. empty
        let img = image_from_gray(32, 64, |y, x| if x < 36 { 0.3 + 0.01 * ((x + y) % 3) as f64 } else { 0.97 });
        let m = 8;
        let bag = tile_image(&img, m, 0.5, "h").unwrap();
        let mask = tissue_mask(&img);
        let mut expected = Vec::new();
        for gr in 0..4 {
            for gc in 0..8 {
                let mut fg = 0;
                for y in 0..m {
                    for x in 0..m {
                        fg += mask[(gr * m + y) * 64 + gc * m + x] as usize;
                    }
                }
                if fg * 2 >= m * m {
                    expected.push((gr, gc));
                }
            }
        }
        let got: Vec<_> = bag.patches.iter().map(|p| p.grid_pos).collect();
        assert_eq!(got, expected);
        assert_eq!(got.len(), 4 * 5);
    }
}
