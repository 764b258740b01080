//! Synthetic "blob people" scenes: dark round blobs on a flat, lightly
//! noisy background, with exact point annotations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_annotations, DatasetManifest, DeclaredTotals, EventType, ImageRecord, PointAnnotationSet, Split};
use crate::error::{Error, Result};
use crate::patches::stream_rng;
use crate::raster::ImageBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_people: usize,
    pub max_people: usize,
    /// Meters per pixel; also sets the blob radius and minimum spacing.
    pub gsd: f64,
    /// Minimum distance between people, in meters.
    pub min_spacing_m: f64,
    /// Blob radius in meters.
    pub blob_radius_m: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            min_people: 20,
            max_people: 150,
            gsd: 0.08,
            min_spacing_m: 0.5,
            blob_radius_m: 0.2,
        }
    }
}

/// A rendered scene and its annotations.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ImageBuf,
    pub points: PointAnnotationSet,
}

/// Draws up to `count` points with rejection sampling for the minimum
/// spacing; gives up on a point after a bounded number of attempts.
fn place_points(rng: &mut impl Rng, count: usize, h: usize, w: usize, spacing: f64, margin: f64) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(count);
    let (lo_x, hi_x) = (margin, (w as f64 - margin).max(margin + 1e-3));
    let (lo_y, hi_y) = (margin, (h as f64 - margin).max(margin + 1e-3));
    for _ in 0..count {
        for _ in 0..200 {
            let p = (rng.random_range(lo_x..hi_x), rng.random_range(lo_y..hi_y));
            if pts.iter().all(|q| (p.0 - q.0).hypot(p.1 - q.1) >= spacing) {
                pts.push(p);
                break;
            }
        }
    }
    pts
}

pub fn generate_scene(id: &str, spec: &SceneSpec, seed: u64) -> Scene {
    let mut rng = stream_rng(seed, id, 0);
    let count = rng.random_range(spec.min_people..=spec.max_people.max(spec.min_people));
    let radius = (spec.blob_radius_m / spec.gsd).max(1.0);
    let points = place_points(
        &mut rng,
        count,
        spec.height,
        spec.width,
        spec.min_spacing_m / spec.gsd,
        0.5,
    );

    let background: [f32; 3] = [
        rng.random_range(0.55..0.8),
        rng.random_range(0.55..0.8),
        rng.random_range(0.55..0.8),
    ];
    let mut image = ImageBuf::filled(spec.height, spec.width, 3, 0.0);
    for px in image.data.chunks_mut(3) {
        for (c, v) in px.iter_mut().enumerate() {
            *v = background[c] + rng.random_range(-0.03f32..0.03);
        }
    }
    let reach = radius.ceil() as isize + 1;
    for &(x, y) in &points {
        let shade: f32 = rng.random_range(0.05..0.25);
        let (cx, cy) = (x.floor() as isize, y.floor() as isize);
        for r in (cy - reach).max(0)..(cy + reach + 1).min(spec.height as isize) {
            for c in (cx - reach).max(0)..(cx + reach + 1).min(spec.width as isize) {
                let d = (c as f64 + 0.5 - x).hypot(r as f64 + 0.5 - y);
                // soft edge over one pixel
                let a = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
                if a > 0.0 {
                    let base = (r as usize * spec.width + c as usize) * 3;
                    for v in &mut image.data[base..base + 3] {
                        *v = *v * (1.0 - a) + shade * a;
                    }
                }
            }
        }
    }
    Scene {
        image,
        points: PointAnnotationSet::new(id, points),
    }
}

/// Writes `count` scenes as a corpus: `images/*.png`, `annotations/*.csv`
/// and `manifest.toml` with declared totals. Every `test_every`-th image
/// (1-based) goes to the test split; 0 puts all in train.
pub fn write_fixture(dir: &Path, count: usize, spec: &SceneSpec, seed: u64, test_every: usize) -> Result<PathBuf> {
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    for d in [&images, &annotations] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = DatasetManifest::default();
    let mut totals = DeclaredTotals {
        train_count: 0,
        test_count: 0,
    };
    for i in 0..count {
        let id = format!("S{:02}", i + 1);
        let scene = generate_scene(&id, spec, seed);
        let split = if test_every > 0 && (i + 1) % test_every == 0 {
            Split::Test
        } else {
            Split::Train
        };
        match split {
            Split::Train => totals.train_count += scene.points.len() as u64,
            Split::Test => totals.test_count += scene.points.len() as u64,
        }
        let image_path = PathBuf::from("images").join(format!("{id}.png"));
        let annotation_path = PathBuf::from("annotations").join(format!("{id}.csv"));
        scene.image.save_png(&dir.join(&image_path))?;
        write_annotations(&dir.join(&annotation_path), &scene.points)?;
        manifest.records.push(ImageRecord {
            id,
            width: spec.width as u32,
            height: spec.height as u32,
            gsd: Some(spec.gsd),
            event_type: EventType::Other,
            split,
            image_path,
            annotation_path,
        });
    }
    manifest.declared_totals = Some(totals);
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}
