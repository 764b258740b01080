//! Interleaved float rasters and the geometric operations shared by images
//! and density maps.
//!
//! All buffers are row-major, height × width × channels. Pixel `(row, col)`
//! covers the square `[col, col + 1) × [row, row + 1)` in continuous image
//! coordinates, so its center sits at `(col + 0.5, row + 0.5)`.

use std::path::Path;

use crate::error::{Error, Result};

/// Luminance weights used for grayscale conversion.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "raster data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Decodes any raster format supported by the `image` crate into RGB.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data: rgb.into_raw(),
        })
    }

    /// `(height, width)` from the file header, without decoding pixels.
    pub fn dimensions(path: &Path) -> Result<(usize, usize)> {
        let (w, h) = image::image_dimensions(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok((h as usize, w as usize))
    }

    /// Writes an 8-bit PNG (1 or 3 channels).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::invalid(format!("cannot write {c}-channel PNG"))),
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color).map_err(
            |source| Error::Image {
                path: path.to_path_buf(),
                source,
            },
        )
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        let data = crop(&self.data, self.height, self.width, self.channels, row, col, h, w)?;
        Ok(Self::new(h, w, self.channels, data).expect("crop length"))
    }

    /// Reflect-pads on the bottom and right edges to at least `h × w`.
    pub fn pad_reflect_to(&self, h: usize, w: usize) -> Self {
        let data = pad_reflect(&self.data, self.height, self.width, self.channels, h, w);
        Self {
            height: h.max(self.height),
            width: w.max(self.width),
            channels: self.channels,
            data,
        }
    }

    pub fn apply(&self, op: GeomOp) -> Self {
        let (data, h, w) = apply_geom(&self.data, self.height, self.width, self.channels, op);
        Self {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }

    /// Bilinear resample to `h × w` (pixel-area convention, edge clamped).
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Self {
        let data = resize_bilinear(&self.data, self.height, self.width, self.channels, h, w);
        Self {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }

    /// Luminance conversion replicated to `out_channels` identical planes.
    pub fn to_grayscale(&self, out_channels: usize) -> Self {
        let mut data = Vec::with_capacity(self.height * self.width * out_channels);
        for px in self.data.chunks_exact(self.channels) {
            let y = if self.channels >= 3 {
                LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2]
            } else {
                px[0]
            };
            data.extend(std::iter::repeat_n(y, out_channels));
        }
        Self {
            height: self.height,
            width: self.width,
            channels: out_channels,
            data,
        }
    }

    /// Channel-planar (CHW) copy, the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + i] = *v;
            }
        }
        out
    }
}

/// Lossless geometric transform of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeomOp {
    /// 90° counter-clockwise.
    Rot90,
    Rot180,
    /// 270° counter-clockwise (90° clockwise).
    Rot270,
    FlipLr,
    FlipUd,
}

impl GeomOp {
    /// Output `(height, width)` for an input of `(h, w)`.
    pub fn output_shape(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            GeomOp::Rot90 | GeomOp::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Maps a continuous point `(x, y)` of an `h × w` raster through the
    /// transform, consistent with [`apply_geom`].
    pub fn map_point(self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let (h, w) = (h as f64, w as f64);
        match self {
            GeomOp::Rot90 => (y, w - x),
            GeomOp::Rot180 => (w - x, h - y),
            GeomOp::Rot270 => (h - y, x),
            GeomOp::FlipLr => (w - x, y),
            GeomOp::FlipUd => (x, h - y),
        }
    }
}

pub(crate) fn apply_geom(
    src: &[f32],
    h: usize,
    w: usize,
    c: usize,
    op: GeomOp,
) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = op.output_shape(h, w);
    let mut out = vec![0.0; src.len()];
    for r in 0..oh {
        for q in 0..ow {
            // source pixel for output (r, q)
            let (sr, sq) = match op {
                GeomOp::Rot90 => (q, w - 1 - r),
                GeomOp::Rot180 => (h - 1 - r, w - 1 - q),
                GeomOp::Rot270 => (h - 1 - q, r),
                GeomOp::FlipLr => (r, w - 1 - q),
                GeomOp::FlipUd => (h - 1 - r, q),
            };
            let s = (sr * w + sq) * c;
            let d = (r * ow + q) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    (out, oh, ow)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn crop(
    src: &[f32],
    h: usize,
    w: usize,
    c: usize,
    row: usize,
    col: usize,
    ch: usize,
    cw: usize,
) -> Result<Vec<f32>> {
    if row + ch > h || col + cw > w {
        return Err(Error::invalid(format!(
            "crop {ch}x{cw} at ({row}, {col}) exceeds {h}x{w} raster"
        )));
    }
    let mut out = Vec::with_capacity(ch * cw * c);
    for r in row..row + ch {
        let s = (r * w + col) * c;
        out.extend_from_slice(&src[s..s + cw * c]);
    }
    Ok(out)
}

/// Mirror index without edge repetition (`dcb|abcd|cba`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub(crate) fn pad_reflect(src: &[f32], h: usize, w: usize, c: usize, th: usize, tw: usize) -> Vec<f32> {
    let (oh, ow) = (th.max(h), tw.max(w));
    if oh == h && ow == w {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(oh * ow * c);
    for r in 0..oh {
        let sr = reflect_index(r as isize, h);
        for q in 0..ow {
            let sq = reflect_index(q as isize, w);
            let s = (sr * w + sq) * c;
            out.extend_from_slice(&src[s..s + c]);
        }
    }
    out
}

/// Zero-pads symmetrically (extra pixel on the bottom/right) or center-crops
/// to exactly `th × tw`.
pub(crate) fn center_fit(src: &[f32], h: usize, w: usize, c: usize, th: usize, tw: usize) -> Vec<f32> {
    let mut out = vec![0.0; th * tw * c];
    // offset of the target window inside the source (may be negative)
    let off_r = (h as isize - th as isize) / 2;
    let off_q = (w as isize - tw as isize) / 2;
    for r in 0..th {
        let sr = r as isize + off_r;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for q in 0..tw {
            let sq = q as isize + off_q;
            if sq < 0 || sq >= w as isize {
                continue;
            }
            let s = (sr as usize * w + sq as usize) * c;
            let d = (r * tw + q) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    out
}

/// Per-output linear interpolation taps `(i0, i1, frac)` under the
/// pixel-area (align-corners-false) convention.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

pub(crate) fn resize_bilinear(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; oh * ow * c];
    for (r, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (q, &(x0, x1, fx)) in tx.iter().enumerate() {
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(r * ow + q) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Overlap weights between output cell `o` (covering `[o/s, (o+1)/s)` in
/// input units) and input cells, for mass-preserving area resampling.
fn area_weights(n_in: usize, n_out: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    (0..n_out)
        .map(|o| {
            let lo = o as f64 / scale;
            let hi = (o + 1) as f64 / scale;
            let first = lo.floor().max(0.0) as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|i| {
                    let overlap = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                    (overlap > 0.0).then_some((i, overlap))
                })
                .collect()
        })
        .collect()
}

/// Resamples a density-like single-channel field by `scale` so that each
/// output cell holds the mass of the input area it covers. Total mass is
/// preserved whenever the output footprint covers the input.
pub(crate) fn resample_mass(src: &[f32], h: usize, w: usize, scale: f64) -> (Vec<f32>, usize, usize) {
    let oh = ((h as f64 * scale).round() as usize).max(1);
    let ow = ((w as f64 * scale).round() as usize).max(1);
    let wy = area_weights(h, oh, scale);
    let wx = area_weights(w, ow, scale);
    // rows first, accumulate in f64
    let mut tmp = vec![0.0f64; h * ow];
    for r in 0..h {
        for (q, taps) in wx.iter().enumerate() {
            tmp[r * ow + q] = taps.iter().map(|&(i, a)| a * src[r * w + i] as f64).sum();
        }
    }
    let mut out = vec![0.0f32; oh * ow];
    for (r, taps) in wy.iter().enumerate() {
        for q in 0..ow {
            let v: f64 = taps.iter().map(|&(i, a)| a * tmp[i * ow + q]).sum();
            out[r * ow + q] = v as f32;
        }
    }
    (out, oh, ow)
}
