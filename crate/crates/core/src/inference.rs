//! Whole-image prediction: reflect padding to the encoder stride and
//! overlapped tiling with interior-crop stitching for large images.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ImageRecord, PointAnnotationSet};
use crate::density::{render_density, DensityMap, GtMode, downsample_density};
use crate::error::{Error, Result};
use crate::model::{Model, ModelOutput};
use crate::patches::{ENCODER_STRIDE, LOW_RES_FACTOR};
use crate::raster::ImageBuf;

/// Anything that maps an image with sides divisible by 32 to both density maps.
pub trait DensityModel: Sync {
    fn forward_image(&self, image: &ImageBuf, image_id: &str) -> Result<ModelOutput>;
}

impl DensityModel for Model {
    fn forward_image(&self, image: &ImageBuf, image_id: &str) -> Result<ModelOutput> {
        Model::forward_image(self, image, image_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub tile: usize,
    pub overlap: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tile: 1024,
            overlap: 0.25,
        }
    }
}

impl InferenceConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.tile == 0 || self.tile % ENCODER_STRIDE != 0 {
            v.push(format!("inference.tile {} must be a positive multiple of {ENCODER_STRIDE}", self.tile));
        }
        if !(self.overlap > 0.0 && self.overlap <= 0.5) {
            v.push(format!("inference.overlap {} outside (0, 0.5]", self.overlap));
        }
        v
    }
}

/// Which head's sum is reported as the image count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountHead {
    #[default]
    Low,
    High,
}

impl ModelOutput {
    pub fn count(&self, head: CountHead) -> f64 {
        match head {
            CountHead::Low => count_from_map(&self.density_low),
            CountHead::High => count_from_map(&self.density_high),
        }
    }
}

/// Person count of a density map: the sum of its values.
pub fn count_from_map(map: &DensityMap) -> f64 {
    map.sum()
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

fn crop_output(out: &ModelOutput, h: usize, w: usize) -> Result<ModelOutput> {
    let (lh, lw) = (h.div_ceil(LOW_RES_FACTOR), w.div_ceil(LOW_RES_FACTOR));
    Ok(ModelOutput {
        density_low: out.density_low.crop(0, 0, lh, lw)?,
        density_high: out.density_high.crop(0, 0, h, w)?,
    })
}

/// Reflect-pads to the next multiple of 32, runs the model once and crops
/// back: the full-resolution map is `H × W`, the counting map
/// `⌈H/4⌉ × ⌈W/4⌉`.
pub fn predict_padded(model: &impl DensityModel, image: &ImageBuf, image_id: &str) -> Result<ModelOutput> {
    let (h, w) = (image.height, image.width);
    if h < ENCODER_STRIDE || w < ENCODER_STRIDE {
        return Err(Error::invalid(format!(
            "image {image_id} is {h}x{w}; both sides must be at least {ENCODER_STRIDE}"
        )));
    }
    let (ph, pw) = (round_up(h, ENCODER_STRIDE), round_up(w, ENCODER_STRIDE));
    if (ph, pw) == (h, w) {
        return model.forward_image(image, image_id);
    }
    let out = model.forward_image(&image.pad_reflect_to(ph, pw), image_id)?;
    crop_output(&out, h, w)
}

/// One tile of a stitching plan: where it is read from and which part of
/// its prediction is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileRegion {
    /// `(row, col)` of the tile in the padded image.
    pub origin: (usize, usize),
    /// Kept rows `[r0, r1)` in padded-image coordinates.
    pub rows: (usize, usize),
    /// Kept columns `[c0, c1)`.
    pub cols: (usize, usize),
}

fn axis_plan(len: usize, tile: usize, stride: usize) -> Vec<(usize, (usize, usize))> {
    let origins = crate::patches::axis_origins(len, tile, stride);
    let mut cuts = Vec::with_capacity(origins.len() + 1);
    cuts.push(0);
    for pair in origins.windows(2) {
        // middle of the overlap, kept on the counting grid
        let mid = (pair[1] + pair[0] + tile) / 2;
        cuts.push(mid / LOW_RES_FACTOR * LOW_RES_FACTOR);
    }
    cuts.push(len);
    origins
        .iter()
        .enumerate()
        .map(|(i, &o)| (o, (cuts[i], cuts[i + 1])))
        .collect()
}

/// Tiling of a padded `height × width` image (both multiples of 32) in
/// which every pixel is kept from exactly one tile.
pub fn stitch_plan(height: usize, width: usize, tile: usize, overlap: f64) -> Vec<TileRegion> {
    let stride = ((tile as f64 * (1.0 - overlap)) as usize / LOW_RES_FACTOR * LOW_RES_FACTOR).max(LOW_RES_FACTOR);
    let rows = axis_plan(height, tile, stride);
    let cols = axis_plan(width, tile, stride);
    rows.iter()
        .flat_map(|&(r, rr)| {
            cols.iter().map(move |&(c, cc)| TileRegion {
                origin: (r, c),
                rows: rr,
                cols: cc,
            })
        })
        .collect()
}

/// How many plan regions write each pixel; all ones for a valid plan.
pub fn coverage_counts(plan: &[TileRegion], height: usize, width: usize) -> Vec<u32> {
    let mut cover = vec![0u32; height * width];
    for t in plan {
        for r in t.rows.0..t.rows.1 {
            for c in t.cols.0..t.cols.1 {
                cover[r * width + c] += 1;
            }
        }
    }
    cover
}

fn paste(dst: &mut DensityMap, src: &DensityMap, origin: (usize, usize), rows: (usize, usize), cols: (usize, usize)) {
    for r in rows.0..rows.1 {
        let s = (r - origin.0) * src.width + (cols.0 - origin.1);
        let d = r * dst.width + cols.0;
        let n = cols.1 - cols.0;
        dst.values[d..d + n].copy_from_slice(&src.values[s..s + n]);
    }
}

/// Predicts a large image tile by tile and stitches the interior of each
/// tile (half of every overlap trimmed, image borders kept) so that each
/// output pixel comes from exactly one tile. Images no larger than one tile
/// go through [`predict_padded`].
pub fn predict_tiled(
    model: &impl DensityModel,
    image: &ImageBuf,
    image_id: &str,
    tile: usize,
    overlap: f64,
) -> Result<ModelOutput> {
    let violations = InferenceConfig { tile, overlap }.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    let (h, w) = (image.height, image.width);
    if tile >= h || tile >= w {
        return predict_padded(model, image, image_id);
    }
    let (ph, pw) = (round_up(h, ENCODER_STRIDE), round_up(w, ENCODER_STRIDE));
    let padded = image.pad_reflect_to(ph, pw);
    let plan = stitch_plan(ph, pw, tile, overlap);
    let outputs = plan
        .par_iter()
        .map(|t| {
            let crop = padded.crop(t.origin.0, t.origin.1, tile, tile)?;
            model.forward_image(&crop, image_id)
        })
        .collect::<Result<Vec<_>>>()?;

    let f = LOW_RES_FACTOR;
    let mut high = DensityMap::zeros(image_id, ph, pw, 1);
    let mut low = DensityMap::zeros(image_id, ph / f, pw / f, f as u32);
    for (t, out) in plan.iter().zip(&outputs) {
        paste(&mut high, &out.density_high, t.origin, t.rows, t.cols);
        paste(
            &mut low,
            &out.density_low,
            (t.origin.0 / f, t.origin.1 / f),
            (t.rows.0 / f, t.rows.1 / f),
            (t.cols.0 / f, t.cols.1 / f),
        );
    }
    crop_output(
        &ModelOutput {
            density_low: low,
            density_high: high,
        },
        h,
        w,
    )
}

/// An image plus everything needed to score a prediction on it.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub record: ImageRecord,
    pub image: ImageBuf,
    pub points: PointAnnotationSet,
}

impl EvalItem {
    /// Reads the image and annotations of `record`, checking that the
    /// pixel dimensions agree with the manifest.
    pub fn load(manifest: &DatasetManifest, record: &ImageRecord) -> Result<Self> {
        let path = manifest.resolve(&record.image_path);
        let image = ImageBuf::open(&path)?;
        let declared = (record.height as usize, record.width as usize);
        if (image.height, image.width) != declared {
            return Err(Error::Format {
                path,
                message: format!(
                    "image is {}x{} but the manifest declares {}x{}",
                    image.width, image.height, record.width, record.height
                ),
            });
        }
        let points = manifest.load_annotations(record)?;
        Ok(Self {
            record: record.clone(),
            image,
            points,
        })
    }

    /// Rendered full-resolution ground truth.
    pub fn render_gt(&self, mode: &GtMode) -> Result<DensityMap> {
        let spec = mode.gaussian_spec(&self.points, self.record.gsd)?;
        render_density(&self.points, (self.image.height, self.image.width), &spec)
    }
}

/// Loads every record, in parallel, keeping order.
pub fn load_items(manifest: &DatasetManifest, records: &[ImageRecord]) -> Result<Vec<EvalItem>> {
    records.par_iter().map(|r| EvalItem::load(manifest, r)).collect()
}

/// Produces full-image density predictions for evaluation.
pub trait FullImagePredictor: Sync {
    fn predict(&self, item: &EvalItem) -> Result<ModelOutput>;
}

/// A network run through [`predict_tiled`].
pub struct TiledPredictor<'a, M: DensityModel> {
    pub model: &'a M,
    pub config: InferenceConfig,
}

impl<M: DensityModel> FullImagePredictor for TiledPredictor<'_, M> {
    fn predict(&self, item: &EvalItem) -> Result<ModelOutput> {
        predict_tiled(self.model, &item.image, &item.record.id, self.config.tile, self.config.overlap)
    }
}

/// Returns the rendered ground truth; an upper bound for sanity checks of
/// the evaluation harness.
pub struct OraclePredictor {
    pub gt_mode: GtMode,
}

impl FullImagePredictor for OraclePredictor {
    fn predict(&self, item: &EvalItem) -> Result<ModelOutput> {
        let high = item.render_gt(&self.gt_mode)?;
        Ok(ModelOutput {
            density_low: downsample_density(&high, LOW_RES_FACTOR)?,
            density_high: high,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Low head = 4×4 sum pooling of channel 0, high head = channel 0.
    struct Identity;

    impl DensityModel for Identity {
        fn forward_image(&self, image: &ImageBuf, image_id: &str) -> Result<ModelOutput> {
            assert!(image.height % 32 == 0 && image.width % 32 == 0);
            let values: Vec<f32> = image.data.chunks_exact(image.channels).map(|p| p[0]).collect();
            let high = DensityMap::from_values(image_id, image.height, image.width, 1, values)?;
            Ok(ModelOutput {
                density_low: downsample_density(&high, 4)?,
                density_high: high,
            })
        }
    }

    fn ramp(h: usize, w: usize) -> ImageBuf {
        let data = (0..h * w).flat_map(|i| [((i * 31) % 97) as f32 / 97.0; 3]).collect();
        ImageBuf::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn padded_shapes() {
        let out = predict_padded(&Identity, &ramp(250, 250), "a").unwrap();
        assert_eq!(out.density_high.shape(), (250, 250));
        assert_eq!(out.density_low.shape(), (63, 63));
        assert!(predict_padded(&Identity, &ramp(31, 64), "a").is_err());
    }

    #[test]
    fn padding_is_a_no_op_for_aligned_input() {
        let img = ramp(256, 256);
        let a = predict_padded(&Identity, &img, "a").unwrap();
        let b = Identity.forward_image(&img, "a").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plan_covers_every_pixel_once() {
        for (h, w, tile, ov) in [(640, 640, 320, 0.5), (1024, 800, 256, 0.25), (544, 1056, 512, 0.1), (96, 96, 64, 0.5)] {
            let plan = stitch_plan(h, w, tile, ov);
            assert!(coverage_counts(&plan, h, w).iter().all(|&c| c == 1), "{h}x{w} tile {tile}");
            for t in &plan {
                assert!(t.rows.0 >= t.origin.0 && t.rows.1 <= t.origin.0 + tile);
                assert!(t.cols.0 >= t.origin.1 && t.cols.1 <= t.origin.1 + tile);
                assert_eq!(t.rows.0 % 4, 0);
                assert_eq!(t.cols.0 % 4, 0);
            }
        }
    }

    #[test]
    fn tiled_identity_reproduces_input() {
        let img = ramp(300, 420);
        let tiled = predict_tiled(&Identity, &img, "a", 128, 0.25).unwrap();
        let direct = predict_padded(&Identity, &img, "a").unwrap();
        assert_eq!(tiled.density_high, direct.density_high);
        assert_eq!(tiled.density_low.shape(), (75, 105));
        assert_eq!(tiled.density_low, direct.density_low);
    }

    #[test]
    fn tiled_rejects_bad_parameters() {
        let img = ramp(256, 256);
        assert!(predict_tiled(&Identity, &img, "a", 100, 0.25).is_err());
        assert!(predict_tiled(&Identity, &img, "a", 128, 0.0).is_err());
        assert!(predict_tiled(&Identity, &img, "a", 128, 0.6).is_err());
        // larger than the image: padded path
        assert!(predict_tiled(&Identity, &img, "a", 512, 0.25).is_ok());
    }

    #[test]
    fn count_is_linear() {
        let mut m = DensityMap::zeros("c", 4, 4, 1);
        assert_eq!(count_from_map(&m), 0.0);
        m.values[3] = 1.5;
        m.values[6] = 0.25;
        let mirrored = m.apply(crate::raster::GeomOp::FlipLr);
        let both: Vec<f32> = m.values.iter().zip(&mirrored.values).map(|(a, b)| a + b).collect();
        let both = DensityMap::from_values("c", 4, 4, 1, both).unwrap();
        assert_eq!(count_from_map(&both), 2.0 * count_from_map(&m));
    }
}
