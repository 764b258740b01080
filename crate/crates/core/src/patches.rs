//! Training patch generation.
//!
//! Two recipes are supported:
//!
//! * **aerial**: the image is tiled (320 px, 50 % overlap by default), and
//!   from every tile two 256 px crops are drawn. The first is used as is,
//!   the second receives one augmentation picked uniformly from three
//!   rotations, two flips and two rescalings.
//! * **cctv**: twenty random 224 px crops per image, each mirrored
//!   left-right with probability 0.3, converted to grayscale and replicated
//!   to three channels.
//!
//! Ground truth is rendered once per source image and cropped alongside the
//! pixels, so every transform is applied identically to image and density.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;
use crate::density::{downsample_density, DensityMap, GtMode};
use crate::inference::EvalItem;
use crate::error::{Error, Result};
use crate::raster::{center_fit, pad_reflect, GeomOp, ImageBuf};

/// Spatial reduction between the full-resolution and counting grids.
pub const LOW_RES_FACTOR: usize = 4;
/// Total encoder downsampling; patch sides must be multiples of this.
pub const ENCODER_STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Aerial,
    Cctv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Aerial: draw from the 90/180/270° rotations.
    #[serde(default = "yes")]
    pub rotations: bool,
    /// Aerial: draw from left-right and up-down flips.
    #[serde(default = "yes")]
    pub flips: bool,
    /// Aerial: rescale factors (first below 1 is "downscale", above 1 "upscale").
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
    /// CCTV: probability of a left-right flip per crop.
    #[serde(default = "default_flip_probability")]
    pub flip_probability: f64,
}

fn yes() -> bool {
    true
}

fn default_scales() -> Vec<f64> {
    vec![0.75, 1.25]
}

fn default_flip_probability() -> f64 {
    0.3
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            rotations: true,
            flips: true,
            scales: default_scales(),
            flip_probability: default_flip_probability(),
        }
    }
}

impl AugmentationPolicy {
    fn choices(&self) -> Vec<Augmentation> {
        let mut out = Vec::new();
        if self.rotations {
            out.extend([GeomOp::Rot90, GeomOp::Rot180, GeomOp::Rot270].map(Augmentation::Geom));
        }
        if self.flips {
            out.extend([GeomOp::FlipLr, GeomOp::FlipUd].map(Augmentation::Geom));
        }
        out.extend(self.scales.iter().map(|&s| Augmentation::Scale(s)));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineProfile {
    pub mode: PipelineMode,
    pub tile_size: usize,
    pub tile_overlap: f64,
    pub crop_size: usize,
    /// Aerial: crops per tile (the first unaugmented). CCTV: crops per image.
    pub crops_per_tile_or_image: usize,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    pub grayscale: bool,
    pub rng_seed: u64,
}

impl PipelineProfile {
    pub fn aerial() -> Self {
        Self {
            mode: PipelineMode::Aerial,
            tile_size: 320,
            tile_overlap: 0.5,
            crop_size: 256,
            crops_per_tile_or_image: 2,
            augmentation: AugmentationPolicy::default(),
            grayscale: false,
            rng_seed: 0,
        }
    }

    pub fn cctv() -> Self {
        Self {
            mode: PipelineMode::Cctv,
            tile_size: 224,
            tile_overlap: 0.0,
            crop_size: 224,
            crops_per_tile_or_image: 20,
            augmentation: AugmentationPolicy::default(),
            grayscale: true,
            rng_seed: 0,
        }
    }

    /// All violations, for reporting at once.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.crop_size == 0 || self.crop_size % ENCODER_STRIDE != 0 {
            v.push(format!(
                "pipeline.crop_size {} must be a positive multiple of {ENCODER_STRIDE}",
                self.crop_size
            ));
        }
        if self.mode == PipelineMode::Aerial && self.crop_size > self.tile_size {
            v.push(format!(
                "pipeline.crop_size {} exceeds tile_size {}",
                self.crop_size, self.tile_size
            ));
        }
        if !(0.0..1.0).contains(&self.tile_overlap) {
            v.push(format!("pipeline.tile_overlap {} outside [0, 1)", self.tile_overlap));
        }
        if self.crops_per_tile_or_image == 0 {
            v.push("pipeline.crops_per_tile_or_image must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.augmentation.flip_probability) {
            v.push("pipeline.augmentation.flip_probability outside [0, 1]".into());
        }
        if self.augmentation.scales.iter().any(|s| !(*s > 0.0)) {
            v.push("pipeline.augmentation.scales must be positive".into());
        }
        if self.mode == PipelineMode::Aerial
            && self.crops_per_tile_or_image > 1
            && self.augmentation.choices().is_empty()
        {
            v.push("pipeline.augmentation enables no aerial augmentation".into());
        }
        v
    }
}

/// Transform applied to a patch after cropping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    Identity,
    Geom(GeomOp),
    /// Rescale by the factor, then center-crop or zero-pad back to size.
    Scale(f64),
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Augmentation::Identity => f.write_str("none"),
            Augmentation::Geom(op) => f.write_str(match op {
                GeomOp::Rot90 => "rot90",
                GeomOp::Rot180 => "rot180",
                GeomOp::Rot270 => "rot270",
                GeomOp::FlipLr => "flip_lr",
                GeomOp::FlipUd => "flip_ud",
            }),
            Augmentation::Scale(s) => write!(f, "scale_{s}"),
        }
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Augmentation::Identity,
            "rot90" => Augmentation::Geom(GeomOp::Rot90),
            "rot180" => Augmentation::Geom(GeomOp::Rot180),
            "rot270" => Augmentation::Geom(GeomOp::Rot270),
            "flip_lr" => Augmentation::Geom(GeomOp::FlipLr),
            "flip_ud" => Augmentation::Geom(GeomOp::FlipUd),
            other => match other.strip_prefix("scale_").and_then(|v| v.parse().ok()) {
                Some(v) => Augmentation::Scale(v),
                None => return Err(Error::invalid(format!("unknown augmentation tag {s:?}"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source_id: String,
    pub tile_index: usize,
    /// `(row, col)` of the tile in the source image (aerial); `(0, 0)` for CCTV.
    pub tile_origin: (usize, usize),
    /// `(row, col)` of the crop in the source image.
    pub crop_origin: (usize, usize),
    pub augmentations: Vec<Augmentation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub image: ImageBuf,
    pub gt_full: DensityMap,
    pub gt_low: DensityMap,
    pub provenance: Provenance,
}

impl PatchSample {
    fn new(image: ImageBuf, gt_full: DensityMap, provenance: Provenance) -> Self {
        let gt_low = downsample_density(&gt_full, LOW_RES_FACTOR).expect("factor is positive");
        Self {
            image,
            gt_full,
            gt_low,
            provenance,
        }
    }

    /// Applies `aug` to pixels and density alike; `gt_low` is re-pooled.
    pub fn augment(&self, aug: Augmentation) -> Self {
        let (image, gt) = match aug {
            Augmentation::Identity => (self.image.clone(), self.gt_full.clone()),
            Augmentation::Geom(op) => (self.image.apply(op), self.gt_full.apply(op)),
            Augmentation::Scale(s) => {
                let (h, w) = (self.image.height, self.image.width);
                let nh = ((h as f64 * s).round() as usize).max(1);
                let nw = ((w as f64 * s).round() as usize).max(1);
                let scaled = self.image.resize_bilinear(nh, nw);
                let c = scaled.channels;
                let image = ImageBuf::new(h, w, c, center_fit(&scaled.data, nh, nw, c, h, w))
                    .expect("center_fit length");
                let dens = self.gt_full.rescale(s);
                let values = center_fit(&dens.values, dens.height, dens.width, 1, h, w);
                let gt = DensityMap::from_values(self.gt_full.image_id.clone(), h, w, 1, values)
                    .expect("center_fit length");
                (image, gt)
            }
        };
        let mut provenance = self.provenance.clone();
        provenance.augmentations.push(aug);
        Self::new(image, gt, provenance)
    }
}

/// Pixels and pre-rendered full-resolution ground truth of one image.
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub id: String,
    pub image: ImageBuf,
    pub gt: DensityMap,
}

impl SourceImage {
    pub fn from_item(item: &EvalItem, mode: &GtMode) -> Result<Self> {
        Ok(Self {
            id: item.record.id.clone(),
            image: item.image.clone(),
            gt: item.render_gt(mode)?,
        })
    }
}

/// A tile window inside a source image.
#[derive(Debug, Clone, Copy)]
pub struct TileView<'a> {
    pub source: &'a SourceImage,
    pub index: usize,
    /// `(row, col)`.
    pub origin: (usize, usize),
    pub size: usize,
}

pub(crate) fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let last = len - tile;
    let mut out: Vec<usize> = (0..=last / stride).map(|k| k * stride).collect();
    if *out.last().unwrap() < last {
        // shift the final tile to the border when the previous one still
        // reaches it, otherwise add a border-aligned tile
        let n = out.len();
        if n >= 2 && out[n - 2] + tile >= last {
            out[n - 1] = last;
        } else {
            out.push(last);
        }
    }
    out
}

/// Tile origins `(row, col)` in row-major order. Stride is
/// `tile·(1 − overlap)`; the last row/column is clamped to end exactly at
/// the image border.
pub fn tile_image(record: &ImageRecord, tile: usize, overlap: f64) -> Result<Vec<(usize, usize)>> {
    tile_origins(record.height as usize, record.width as usize, tile, overlap)
}

pub fn tile_origins(height: usize, width: usize, tile: usize, overlap: f64) -> Result<Vec<(usize, usize)>> {
    if tile == 0 || tile > height.min(width) {
        return Err(Error::invalid(format!(
            "tile {tile} does not fit a {height}x{width} image"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(format!("overlap {overlap} outside [0, 1)")));
    }
    let stride = ((tile as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let rows = axis_origins(height, tile, stride);
    let cols = axis_origins(width, tile, stride);
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

/// Stable 64-bit FNV-1a.
fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Independent RNG stream for one (seed, image, tile) triple.
pub fn stream_rng(seed: u64, image_id: &str, tile_index: usize) -> ChaCha8Rng {
    let mut h = fnv1a(&seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(image_id.as_bytes(), h);
    h = fnv1a(&(tile_index as u64).to_le_bytes(), h);
    ChaCha8Rng::seed_from_u64(h)
}

fn crop_sample(
    source: &SourceImage,
    tile_index: usize,
    tile_origin: (usize, usize),
    crop_origin: (usize, usize),
    size: usize,
) -> Result<PatchSample> {
    let (r, c) = crop_origin;
    let image = source.image.crop(r, c, size, size)?;
    let gt = source.gt.crop(r, c, size, size)?;
    Ok(PatchSample::new(
        image,
        gt,
        Provenance {
            source_id: source.id.clone(),
            tile_index,
            tile_origin,
            crop_origin,
            augmentations: Vec::new(),
        },
    ))
}

/// Aerial recipe for one tile: one plain crop plus augmented crops.
pub fn sample_aerial(tile: &TileView<'_>, profile: &PipelineProfile, rng: &mut impl Rng) -> Result<Vec<PatchSample>> {
    if profile.mode != PipelineMode::Aerial {
        return Err(Error::invalid("sample_aerial requires an aerial profile"));
    }
    let crop = profile.crop_size;
    if crop > tile.size {
        return Err(Error::invalid(format!("crop {crop} exceeds tile {}", tile.size)));
    }
    let choices = profile.augmentation.choices();
    let mut out = Vec::with_capacity(profile.crops_per_tile_or_image);
    for i in 0..profile.crops_per_tile_or_image {
        let dr = rng.random_range(0..=tile.size - crop);
        let dc = rng.random_range(0..=tile.size - crop);
        let origin = (tile.origin.0 + dr, tile.origin.1 + dc);
        let mut sample = crop_sample(tile.source, tile.index, tile.origin, origin, crop)?;
        if i > 0 {
            let aug = choices[rng.random_range(0..choices.len())];
            sample = sample.augment(aug);
        }
        if profile.grayscale {
            sample.image = sample.image.to_grayscale(3);
        }
        out.push(sample);
    }
    Ok(out)
}

/// CCTV recipe for one image: random crops, random mirroring, grayscale.
pub fn sample_cctv(source: &SourceImage, profile: &PipelineProfile, rng: &mut impl Rng) -> Result<Vec<PatchSample>> {
    if profile.mode != PipelineMode::Cctv {
        return Err(Error::invalid("sample_cctv requires a cctv profile"));
    }
    let crop = profile.crop_size;
    let padded;
    let src = if source.image.height < crop || source.image.width < crop {
        // pixels are mirrored, density is zero-padded so no person is duplicated
        let (h, w) = (source.image.height.max(crop), source.image.width.max(crop));
        let image = ImageBuf::new(
            h,
            w,
            source.image.channels,
            pad_reflect(&source.image.data, source.image.height, source.image.width, source.image.channels, h, w),
        )?;
        let mut gt = DensityMap::zeros(source.gt.image_id.clone(), h, w, 1);
        for r in 0..source.gt.height {
            let row = &source.gt.values[r * source.gt.width..(r + 1) * source.gt.width];
            gt.values[r * w..r * w + source.gt.width].copy_from_slice(row);
        }
        padded = SourceImage {
            id: source.id.clone(),
            image,
            gt,
        };
        &padded
    } else {
        source
    };
    let p_flip = profile.augmentation.flip_probability;
    let mut out = Vec::with_capacity(profile.crops_per_tile_or_image);
    for _ in 0..profile.crops_per_tile_or_image {
        let r = rng.random_range(0..=src.image.height - crop);
        let c = rng.random_range(0..=src.image.width - crop);
        let mut sample = crop_sample(src, 0, (0, 0), (r, c), crop)?;
        if rng.random_bool(p_flip) {
            sample = sample.augment(Augmentation::Geom(GeomOp::FlipLr));
        }
        if profile.grayscale {
            sample.image = sample.image.to_grayscale(3);
        }
        out.push(sample);
    }
    Ok(out)
}

/// Every sample the profile produces for `sources`, in source then tile
/// order. Work is spread over threads; each unit draws from its own
/// [`stream_rng`], so the result is independent of scheduling.
pub fn generate_samples(sources: &[SourceImage], profile: &PipelineProfile) -> Result<Vec<PatchSample>> {
    let violations = profile.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    let seed = profile.rng_seed;
    let batches: Vec<Vec<PatchSample>> = match profile.mode {
        PipelineMode::Aerial => {
            let mut units = Vec::new();
            for source in sources {
                let origins = tile_origins(source.image.height, source.image.width, profile.tile_size, profile.tile_overlap)?;
                units.extend(origins.into_iter().enumerate().map(|(index, origin)| TileView {
                    source,
                    index,
                    origin,
                    size: profile.tile_size,
                }));
            }
            units
                .par_iter()
                .map(|t| sample_aerial(t, profile, &mut stream_rng(seed, &t.source.id, t.index)))
                .collect::<Result<_>>()?
        }
        PipelineMode::Cctv => sources
            .par_iter()
            .map(|s| sample_cctv(s, profile, &mut stream_rng(seed, &s.id, 0)))
            .collect::<Result<_>>()?,
    };
    Ok(batches.into_iter().flatten().collect())
}

const RASTER_MAGIC: &[u8; 8] = b"MRCRAST1";

fn write_raster(path: &Path, img: &ImageBuf) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + img.data.len() * 4);
    buf.extend_from_slice(RASTER_MAGIC);
    for d in [img.height, img.width, img.channels] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_raster(path: &Path) -> Result<ImageBuf> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        message: m.into(),
    };
    if bytes.len() < 20 || &bytes[..8] != RASTER_MAGIC {
        return Err(bad("not a raster file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (word(8), word(12), word(16));
    if bytes.len() != 20 + h * w * c * 4 {
        return Err(bad("raster payload length does not match header"));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ImageBuf::new(h, w, c, data)
}

const INDEX_HEADER: &str = "index,source_id,tile_index,tile_row,tile_col,crop_row,crop_col,augmentations";

/// Persists samples as `NNNNNN.img` / `NNNNNN.full` / `NNNNNN.low` plus
/// `index.csv`. Density files use the density-map layout.
pub fn write_sample_cache(dir: &Path, samples: &[PatchSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for (i, s) in samples.iter().enumerate() {
        write_raster(&dir.join(format!("{i:06}.img")), &s.image)?;
        s.gt_full.write(&dir.join(format!("{i:06}.full")))?;
        s.gt_low.write(&dir.join(format!("{i:06}.low")))?;
        let p = &s.provenance;
        let augs: Vec<String> = p.augmentations.iter().map(|a| a.to_string()).collect();
        index.push_str(&format!(
            "{i},{},{},{},{},{},{},{}\n",
            p.source_id,
            p.tile_index,
            p.tile_origin.0,
            p.tile_origin.1,
            p.crop_origin.0,
            p.crop_origin.1,
            if augs.is_empty() { "none".to_string() } else { augs.join("+") }
        ));
    }
    let path = dir.join("index.csv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(index.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn read_sample_cache(dir: &Path) -> Result<Vec<PatchSample>> {
    let path = dir.join("index.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = || Error::MalformedRow {
            path: path.clone(),
            line: lineno + 1,
            row: line.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(malformed());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| malformed());
        let i = num(f[0])?;
        let augmentations = if f[7] == "none" {
            Vec::new()
        } else {
            f[7].split('+').map(str::parse).collect::<Result<_>>()?
        };
        let id = f[1].to_string();
        out.push(PatchSample {
            image: read_raster(&dir.join(format!("{i:06}.img")))?,
            gt_full: DensityMap::read(&dir.join(format!("{i:06}.full")), id.clone())?,
            gt_low: DensityMap::read(&dir.join(format!("{i:06}.low")), id.clone())?,
            provenance: Provenance {
                source_id: id,
                tile_index: num(f[2])?,
                tile_origin: (num(f[3])?, num(f[4])?),
                crop_origin: (num(f[5])?, num(f[6])?),
                augmentations,
            },
        });
    }
    Ok(out)
}
