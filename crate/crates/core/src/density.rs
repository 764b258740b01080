//! Ground-truth density maps rendered from point annotations.
//!
//! Each person contributes a unit-mass isotropic Gaussian truncated at 3σ.
//! Kernels clipped by the image border are renormalized, so a density map
//! always sums to its annotation count.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{in_bounds, PointAnnotationSet};
use crate::error::{Error, Result};

/// Magic prefix of the density-map file layout.
pub const DENSITY_MAGIC: &[u8; 8] = b"MRCDMAP1";

/// Fallback σ (pixels) for kNN mode when there are too few neighbours.
pub const KNN_FALLBACK_SIGMA: f64 = 15.0;
pub const KNN_DEFAULT_K: usize = 3;
pub const KNN_DEFAULT_BETA: f64 = 0.3;

/// Assumed ground footprint of one person seen from above, in meters.
pub const PERSON_FOOTPRINT_M: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    /// 1 for full resolution, 4 for the counting head's grid.
    pub resolution_divisor: u32,
    pub values: Vec<f32>,
}

impl DensityMap {
    pub fn zeros(image_id: impl Into<String>, height: usize, width: usize, divisor: u32) -> Self {
        Self {
            image_id: image_id.into(),
            height,
            width,
            resolution_divisor: divisor,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_values(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        divisor: u32,
        values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "density values length {} does not match {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            height,
            width,
            resolution_divisor: divisor,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Total mass, accumulated in double precision.
    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        let values = crate::raster::crop(&self.values, self.height, self.width, 1, row, col, h, w)?;
        Ok(Self {
            image_id: self.image_id.clone(),
            height: h,
            width: w,
            resolution_divisor: self.resolution_divisor,
            values,
        })
    }

    pub fn apply(&self, op: crate::raster::GeomOp) -> Self {
        let (values, h, w) = crate::raster::apply_geom(&self.values, self.height, self.width, 1, op);
        Self {
            values,
            height: h,
            width: w,
            ..self.clone()
        }
    }

    /// Mass-preserving spatial rescale by `scale` (area resampling; values
    /// end up multiplied by the inverse area ratio).
    pub fn rescale(&self, scale: f64) -> Self {
        let (values, h, w) = crate::raster::resample_mass(&self.values, self.height, self.width, scale);
        Self {
            values,
            height: h,
            width: w,
            ..self.clone()
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.values.len() * 4);
        buf.extend_from_slice(DENSITY_MAGIC);
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&self.resolution_divisor.to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, image_id: impl Into<String>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 20 || &bytes[..8] != DENSITY_MAGIC {
            return Err(bad("not a density map (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (height, width, divisor) = (word(8) as usize, word(12) as usize, word(16));
        let expected = 20 + height * width * 4;
        if bytes.len() != expected {
            return Err(bad(format!(
                "{height}x{width} map needs {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let values = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_values(image_id, height, width, divisor, values)
    }
}

/// Per-person Gaussian widths used for rendering.
#[derive(Debug, Clone, PartialEq)]
pub enum GaussianSpec {
    /// One σ for every person (GSD-adaptive mode).
    Uniform { sigma_px: u32 },
    /// One σ per person, aligned with the annotation order (kNN mode).
    PerPoint { sigmas: Vec<f64> },
}

impl GaussianSpec {
    fn sigma(&self, i: usize) -> f64 {
        match self {
            GaussianSpec::Uniform { sigma_px } => *sigma_px as f64,
            GaussianSpec::PerPoint { sigmas } => sigmas[i],
        }
    }

    /// Truncation radius in whole pixels for a given σ.
    pub fn truncation_radius(sigma: f64) -> usize {
        (3.0 * sigma).ceil() as usize
    }
}

/// How ground truth is produced for a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GtMode {
    GsdAdaptive,
    KnnAdaptive {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

fn default_k() -> usize {
    KNN_DEFAULT_K
}

fn default_beta() -> f64 {
    KNN_DEFAULT_BETA
}

impl Default for GtMode {
    fn default() -> Self {
        GtMode::GsdAdaptive
    }
}

impl GtMode {
    pub fn knn_default() -> Self {
        GtMode::KnnAdaptive {
            k: KNN_DEFAULT_K,
            beta: KNN_DEFAULT_BETA,
        }
    }

    /// Kernel widths for one image. GSD mode requires `gsd`.
    pub fn gaussian_spec(&self, points: &PointAnnotationSet, gsd: Option<f64>) -> Result<GaussianSpec> {
        match *self {
            GtMode::GsdAdaptive => {
                let gsd = gsd.ok_or_else(|| {
                    Error::invalid(format!(
                        "image {}: field `gsd` is required for gsd_adaptive ground truth",
                        points.image_id
                    ))
                })?;
                Ok(GaussianSpec::Uniform {
                    sigma_px: sigma_from_gsd(gsd)?,
                })
            }
            GtMode::KnnAdaptive { k, beta } => Ok(GaussianSpec::PerPoint {
                sigmas: sigma_knn(points, k, beta),
            }),
        }
    }
}

/// Gaussian σ in pixels for a person footprint of 0.5 m:
/// `max(1, floor((1/3)·(0.5/gsd)))`.
pub fn sigma_from_gsd(gsd: f64) -> Result<u32> {
    if !(gsd > 0.0) || !gsd.is_finite() {
        return Err(Error::invalid(format!("gsd must be positive, got {gsd}")));
    }
    let sigma = (PERSON_FOOTPRINT_M / gsd / 3.0).floor();
    Ok(sigma.max(1.0) as u32)
}

/// Geometry-adaptive σ: `beta` times the mean distance to the `k` nearest
/// neighbours, clamped to ≥ 1 px. Falls back to a fixed 15 px when fewer
/// than `k + 1` points exist. Quadratic in the number of points.
pub fn sigma_knn(points: &PointAnnotationSet, k: usize, beta: f64) -> Vec<f64> {
    let pts = &points.points;
    if k == 0 || pts.len() < k + 1 {
        return vec![KNN_FALLBACK_SIGMA; pts.len()];
    }
    let mut dists = Vec::with_capacity(pts.len() - 1);
    pts.iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            dists.clear();
            dists.extend(
                pts.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &(u, v))| ((u - x).powi(2) + (v - y).powi(2)).sqrt()),
            );
            dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            let mean = dists[..k].iter().sum::<f64>() / k as f64;
            (beta * mean).max(1.0)
        })
        .collect()
}

/// 1-D Gaussian taps for a kernel centered at continuous coordinate `c`,
/// restricted to in-bounds pixels. Returns `(first_pixel, weights)`.
fn taps_1d(c: f64, sigma: f64, n: usize) -> (usize, Vec<f64>) {
    let radius = GaussianSpec::truncation_radius(sigma) as isize;
    let center = c.floor() as isize;
    let lo = (center - radius).max(0);
    let hi = (center + radius).min(n as isize - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let w = (lo..=hi)
        .map(|p| {
            let d = p as f64 + 0.5 - c;
            (-d * d * inv).exp()
        })
        .collect();
    (lo as usize, w)
}

/// Renders a density map of `shape = (height, width)`. Every person adds
/// exactly unit mass.
pub fn render_density(
    points: &PointAnnotationSet,
    shape: (usize, usize),
    spec: &GaussianSpec,
) -> Result<DensityMap> {
    let (height, width) = shape;
    if let GaussianSpec::PerPoint { sigmas } = spec {
        if sigmas.len() != points.len() {
            return Err(Error::invalid(format!(
                "{} sigmas for {} points",
                sigmas.len(),
                points.len()
            )));
        }
    }
    let mut acc = vec![0.0f64; height * width];
    for (i, &(x, y)) in points.points.iter().enumerate() {
        if !in_bounds(x, y, width, height) {
            return Err(Error::invalid(format!(
                "image {}: point {i} ({x}, {y}) outside {width}x{height}",
                points.image_id
            )));
        }
        let sigma = spec.sigma(i);
        if !(sigma >= 1.0) {
            return Err(Error::invalid(format!("sigma {sigma} below 1 pixel")));
        }
        let (x0, wx) = taps_1d(x, sigma, width);
        let (y0, wy) = taps_1d(y, sigma, height);
        let norm = wx.iter().sum::<f64>() * wy.iter().sum::<f64>();
        for (dy, &gy) in wy.iter().enumerate() {
            let row = &mut acc[(y0 + dy) * width + x0..][..wx.len()];
            let gy = gy / norm;
            for (cell, &gx) in row.iter_mut().zip(&wx) {
                *cell += gx * gy;
            }
        }
    }
    Ok(DensityMap {
        image_id: points.image_id.clone(),
        height,
        width,
        resolution_divisor: 1,
        values: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// Non-overlapping `factor × factor` sum pooling. Maps whose sides are not
/// multiples of `factor` are zero-padded on the bottom/right first.
pub fn downsample_density(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor < 1 {
        return Err(Error::invalid("downsample factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let oh = map.height.div_ceil(factor);
    let ow = map.width.div_ceil(factor);
    let mut acc = vec![0.0f64; oh * ow];
    for r in 0..map.height {
        let orow = (r / factor) * ow;
        for (q, &v) in map.values[r * map.width..(r + 1) * map.width].iter().enumerate() {
            acc[orow + q / factor] += v as f64;
        }
    }
    Ok(DensityMap {
        image_id: map.image_id.clone(),
        height: oh,
        width: ow,
        resolution_divisor: map.resolution_divisor * factor as u32,
        values: acc.into_iter().map(|v| v as f32).collect(),
    })
}
