//! Shared fixtures and independent reference computations for the
//! integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device};
use mrcnet::dataset::{load_manifest, DatasetManifest};
use mrcnet::density::GtMode;
use mrcnet::inference::{load_items, EvalItem};
use mrcnet::model::{Model, ModelConfig};
use mrcnet::patches::{generate_samples, PatchSample, PipelineProfile, SourceImage};
use mrcnet::synthetic::{write_fixture, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct 2-D evaluation of a truncated, border-renormalized Gaussian per
/// point: every pixel of the image is visited for every point.
pub fn brute_force_render(points: &[(f64, f64)], sigmas: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for (&(x, y), &s) in points.iter().zip(sigmas) {
        let radius = (3.0 * s).ceil() as i64;
        let (cx, cy) = (x.floor() as i64, y.floor() as i64);
        let mut kernel = vec![0.0; h * w];
        let mut mass = 0.0;
        for r in 0..h {
            for c in 0..w {
                if (r as i64 - cy).abs() > radius || (c as i64 - cx).abs() > radius {
                    continue;
                }
                let dx = c as f64 + 0.5 - x;
                let dy = r as f64 + 0.5 - y;
                let v = (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
                kernel[r * w + c] = v;
                mass += v;
            }
        }
        for (o, k) in out.iter_mut().zip(&kernel) {
            *o += k / mass;
        }
    }
    out
}

/// Counting metrics from their textbook definitions.
pub fn brute_force_metrics(pairs: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pairs.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut norm = 0.0;
    for &(c, p) in pairs {
        abs += (c - p).abs();
        sq += (c - p) * (c - p);
        norm += (c - p).abs() / c;
    }
    (abs / n, norm / n, (sq / n).sqrt())
}

/// Encoder/decoder widths small enough to train on one CPU core.
pub fn small_config(init_std: f64) -> ModelConfig {
    let mut cfg = ModelConfig::with_widths([8, 16, 32, 32, 32], [32, 32, 16, 8, 8]);
    cfg.init_std = init_std;
    cfg
}

pub fn seeded_model(cfg: &ModelConfig, dtype: DType, seed: u64) -> Model {
    let model = Model::build(cfg, dtype, &Device::Cpu).unwrap();
    model.initialize(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    model
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifest: DatasetManifest,
    pub items: Vec<EvalItem>,
}

pub fn fixture(count: usize, spec: &SceneSpec, seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path(), count, spec, seed, 0).unwrap();
    let manifest = load_manifest(&path).unwrap();
    let items = load_items(&manifest, &manifest.records).unwrap();
    Fixture { dir, manifest, items }
}

pub fn samples(items: &[EvalItem], profile: &PipelineProfile) -> Vec<PatchSample> {
    let sources: Vec<SourceImage> = items
        .iter()
        .map(|i| SourceImage::from_item(i, &GtMode::GsdAdaptive).unwrap())
        .collect();
    generate_samples(&sources, profile).unwrap()
}

/// Aerial profile cut down to small synthetic images.
pub fn small_profile(tile: usize, crop: usize, seed: u64) -> PipelineProfile {
    PipelineProfile {
        tile_size: tile,
        crop_size: crop,
        rng_seed: seed,
        ..PipelineProfile::aerial()
    }
}
