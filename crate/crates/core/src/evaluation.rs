//! Counting metrics and density-based person detection.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::dataset::PointAnnotationSet;
use crate::density::{sigma_from_gsd, DensityMap, PERSON_FOOTPRINT_M};
use crate::inference::count_from_map;
use crate::model::ModelOutput;
use crate::error::{Error, Result};

/// Matching radius around a ground-truth person, in meters.
pub const MATCH_RADIUS_M: f64 = PERSON_FOOTPRINT_M;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountPair {
    pub image_id: String,
    /// Annotated count `C`.
    pub truth: f64,
    /// Predicted count `Ĉ`.
    pub predicted: f64,
}

impl CountPair {
    pub fn new(image_id: impl Into<String>, truth: f64, predicted: f64) -> Self {
        Self {
            image_id: image_id.into(),
            truth,
            predicted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_image: Vec<CountPair>,
    pub mae: f64,
    /// `None` when every image has a zero true count.
    pub mnae: Option<f64>,
    pub rmse: f64,
    /// Images left out of MNAE because their true count is zero.
    pub mnae_excluded: Vec<String>,
}

/// MAE, MNAE and RMSE over per-image counts.
pub fn counting_metrics(pairs: &[CountPair]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("counting metrics need at least one image"));
    }
    let n = pairs.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut norm_sum = 0.0;
    let mut norm_n = 0usize;
    let mut excluded = Vec::new();
    for p in pairs {
        let err = (p.truth - p.predicted).abs();
        abs_sum += err;
        sq_sum += err * err;
        if p.truth > 0.0 {
            norm_sum += err / p.truth;
            norm_n += 1;
        } else {
            log::warn!("image {} has zero true count; excluded from MNAE", p.image_id);
            excluded.push(p.image_id.clone());
        }
    }
    Ok(MetricsReport {
        per_image: pairs.to_vec(),
        mae: abs_sum / n,
        mnae: (norm_n > 0).then(|| norm_sum / norm_n as f64),
        rmse: (sq_sum / n).sqrt(),
        mnae_excluded: excluded,
    })
}

impl MetricsReport {
    /// Per-image rows followed by one `aggregate` row holding the means
    /// (MAE in `abs_error`, MNAE in `normalized_abs_error`, RMSE in `rmse`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,true_count,predicted_count,abs_error,normalized_abs_error,rmse\n");
        for p in &self.per_image {
            let err = (p.truth - p.predicted).abs();
            let norm = if p.truth > 0.0 { format!("{}", err / p.truth) } else { String::new() };
            let _ = writeln!(out, "{},{},{},{err},{norm},{err}", p.image_id, p.truth, p.predicted);
        }
        let n = self.per_image.len() as f64;
        let mean_c = self.per_image.iter().map(|p| p.truth).sum::<f64>() / n;
        let mean_p = self.per_image.iter().map(|p| p.predicted).sum::<f64>() / n;
        let mnae = self.mnae.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "aggregate,{mean_c},{mean_p},{},{mnae},{}", self.mae, self.rmse);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Fixed-width summary in the layout of a results table.
pub fn format_table(method: &str, report: &MetricsReport, detection: Option<&DetectionSummary>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>10} {:>8} {:>10} {:>9} {:>9} {:>9}",
        "Method", "MAE", "MNAE", "RMSE", "Precision", "Recall", "F1"
    );
    let mnae = report.mnae.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
    let (p, r, f) = match detection {
        Some(d) => (
            format!("{:.3}", d.precision),
            format!("{:.3}", d.recall),
            format!("{:.3}", d.f1),
        ),
        None => ("-".into(), "-".into(), "-".into()),
    };
    let _ = writeln!(
        out,
        "{method:<16} {:>10.2} {mnae:>8} {:>10.2} {p:>9} {r:>9} {f:>9}",
        report.mae, report.rmse
    );
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    /// Pixel-center coordinates.
    pub x: f64,
    pub y: f64,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Detections {
    pub items: Vec<Detection>,
    /// How many fewer maxima than requested were found.
    pub shortfall: usize,
}

/// Running max over a window of `2r + 1` along rows then columns.
fn max_filter(map: &DensityMap, r: usize) -> Vec<f32> {
    let (h, w) = map.shape();
    let mut rows = vec![0.0f32; h * w];
    for y in 0..h {
        let line = &map.values[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = line[lo..=hi].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).fold(f32::NEG_INFINITY, f32::max);
        }
    }
    out
}

/// Strongest `target_count` local maxima of a full-resolution density map.
///
/// A pixel is a candidate when it is positive and equals the maximum of its
/// `(2·min_sep_px + 1)²` neighbourhood. Candidates are ranked by value
/// (ties in row-major order) and accepted greedily unless an accepted peak
/// already lies within `min_sep_px` (Chebyshev), which resolves plateaus.
pub fn detect_persons(map: &DensityMap, target_count: usize, min_sep_px: usize) -> Detections {
    if target_count == 0 || map.values.is_empty() {
        return Detections::default();
    }
    let w = map.width;
    let filtered = max_filter(map, min_sep_px);
    let mut candidates: Vec<usize> = (0..map.values.len())
        .filter(|&i| map.values[i] > 0.0 && map.values[i] == filtered[i])
        .collect();
    // stable sort keeps row-major order among equal values
    candidates.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]));

    let sep = min_sep_px as isize;
    let mut taken: Vec<(isize, isize)> = Vec::new();
    let mut items = Vec::with_capacity(target_count.min(candidates.len()));
    for i in candidates {
        if items.len() == target_count {
            break;
        }
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        if taken.iter().any(|&(ty, tx)| (ty - y).abs() <= sep && (tx - x).abs() <= sep) {
            continue;
        }
        taken.push((y, x));
        items.push(Detection {
            x: x as f64 + 0.5,
            y: y as f64 + 0.5,
            score: map.values[i],
        });
    }
    Detections {
        shortfall: target_count - items.len(),
        items,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Match {
    pub detection: usize,
    pub gt: usize,
    pub distance_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DetectionSummary {
    pub true_positives: usize,
    pub detections: usize,
    pub ground_truth: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl DetectionSummary {
    /// Precision, recall and F1 from raw tallies (zero when undefined).
    pub fn from_counts(true_positives: usize, detections: usize, ground_truth: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(true_positives, detections);
        let recall = ratio(true_positives, ground_truth);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            true_positives,
            detections,
            ground_truth,
            precision,
            recall,
            f1,
        }
    }

    /// Micro-averaged summary over several images.
    pub fn merge(parts: &[DetectionSummary]) -> Self {
        let sum = |f: fn(&DetectionSummary) -> usize| parts.iter().map(f).sum();
        Self::from_counts(sum(|d| d.true_positives), sum(|d| d.detections), sum(|d| d.ground_truth))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub detections: Vec<Detection>,
    pub matches: Vec<Match>,
    pub summary: DetectionSummary,
}

impl DetectionResult {
    pub fn precision(&self) -> f64 {
        self.summary.precision
    }
    pub fn recall(&self) -> f64 {
        self.summary.recall
    }
    pub fn f1(&self) -> f64 {
        self.summary.f1
    }

    pub fn to_csv(&self) -> String {
        let mut matched = vec![None; self.detections.len()];
        for m in &self.matches {
            matched[m.detection] = Some(*m);
        }
        let mut out = String::from("x,y,score,gt_index,distance_m\n");
        for (d, m) in self.detections.iter().zip(&matched) {
            match m {
                Some(m) => {
                    let _ = writeln!(out, "{},{},{},{},{}", d.x, d.y, d.score, m.gt, m.distance_m);
                }
                None => {
                    let _ = writeln!(out, "{},{},{},,", d.x, d.y, d.score);
                }
            }
        }
        out
    }
}

/// Detects `round(sum(low))` persons in the high-resolution map and matches
/// them against `gt`. The peak separation defaults to the GT σ for `gsd`.
pub fn detect_and_match(
    output: &ModelOutput,
    gt: &PointAnnotationSet,
    gsd: f64,
    min_sep_px: Option<usize>,
) -> Result<DetectionResult> {
    let sep = match min_sep_px {
        Some(s) => s,
        None => sigma_from_gsd(gsd)? as usize,
    };
    let target = count_from_map(&output.density_low).round().max(0.0) as usize;
    let found = detect_persons(&output.density_high, target, sep);
    if found.shortfall > 0 {
        log::warn!(
            "image {}: found {} of {target} requested maxima",
            gt.image_id,
            found.items.len()
        );
    }
    match_detections(&found.items, gt, gsd)
}

/// Greedy one-to-one matching: detections in descending score order each
/// take the nearest unmatched ground-truth point within `0.5 / gsd` pixels.
pub fn match_detections(detections: &[Detection], gt: &PointAnnotationSet, gsd: f64) -> Result<DetectionResult> {
    if !(gsd > 0.0) {
        return Err(Error::invalid(format!("gsd must be positive, got {gsd}")));
    }
    let radius = MATCH_RADIUS_M / gsd;
    // bucket ground truth on a grid with cell = radius
    let cell = |x: f64, y: f64| ((x / radius).floor() as i64, (y / radius).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, &(x, y)) in gt.points.iter().enumerate() {
        grid.entry(cell(x, y)).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));

    let mut used = vec![false; gt.len()];
    let mut matches = Vec::new();
    for di in order {
        let d = detections[di];
        let (cx, cy) = cell(d.x, d.y);
        let mut best: Option<(f64, usize)> = None;
        for gx in cx - 1..=cx + 1 {
            for gy in cy - 1..=cy + 1 {
                for &gi in grid.get(&(gx, gy)).map(Vec::as_slice).unwrap_or(&[]) {
                    if used[gi] {
                        continue;
                    }
                    let (px, py) = gt.points[gi];
                    let dist = ((px - d.x).powi(2) + (py - d.y).powi(2)).sqrt();
                    let better = match best {
                        None => true,
                        Some((bd, bi)) => dist < bd || (dist == bd && gi < bi),
                    };
                    if dist <= radius && better {
                        best = Some((dist, gi));
                    }
                }
            }
        }
        if let Some((dist, gi)) = best {
            used[gi] = true;
            matches.push(Match {
                detection: di,
                gt: gi,
                distance_m: dist * gsd,
            });
        }
    }
    matches.sort_by_key(|m| m.detection);
    Ok(DetectionResult {
        detections: detections.to_vec(),
        summary: DetectionSummary::from_counts(matches.len(), detections.len(), gt.len()),
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let r = counting_metrics(&[CountPair::new("a", 100.0, 110.0)]).unwrap();
        assert!((r.mae - 10.0).abs() < 1e-12);
        assert!((r.mnae.unwrap() - 0.1).abs() < 1e-12);
        assert!((r.rmse - 10.0).abs() < 1e-12);

        let r = counting_metrics(&[CountPair::new("a", 7.0, 7.0), CountPair::new("b", 3.0, 3.0)]).unwrap();
        assert_eq!((r.mae, r.mnae, r.rmse), (0.0, Some(0.0), 0.0));
        assert!(counting_metrics(&[]).is_err());
    }

    #[test]
    fn zero_count_images_leave_mnae() {
        let r = counting_metrics(&[CountPair::new("z", 0.0, 2.0), CountPair::new("a", 10.0, 12.0)]).unwrap();
        assert_eq!(r.mnae_excluded, vec!["z".to_string()]);
        assert!((r.mnae.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(r.mae, 2.0);
        let r = counting_metrics(&[CountPair::new("z", 0.0, 2.0)]).unwrap();
        assert_eq!(r.mnae, None);
    }

    #[test]
    fn csv_has_aggregate_footer() {
        let r = counting_metrics(&[CountPair::new("a", 10.0, 0.0), CountPair::new("b", 20.0, 0.0)]).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("aggregate,15,0,15,1,"));
    }

    #[test]
    fn empty_and_zero_target_detection() {
        let zero = DensityMap::zeros("z", 16, 16, 1);
        let d = detect_persons(&zero, 3, 2);
        assert!(d.items.is_empty());
        assert_eq!(d.shortfall, 3);
        let mut m = DensityMap::zeros("z", 16, 16, 1);
        m.values[5 * 16 + 5] = 1.0;
        assert_eq!(detect_persons(&m, 0, 2), Detections::default());
    }

    #[test]
    fn plateau_yields_single_detection() {
        let mut m = DensityMap::zeros("p", 8, 8, 1);
        for i in [3 * 8 + 3, 3 * 8 + 4, 4 * 8 + 3, 4 * 8 + 4] {
            m.values[i] = 0.5;
        }
        let d = detect_persons(&m, 4, 1);
        assert_eq!(d.items.len(), 1);
        assert_eq!((d.items[0].x, d.items[0].y), (3.5, 3.5));
        assert_eq!(d.shortfall, 3);
    }

    #[test]
    fn ranking_is_by_value() {
        let mut m = DensityMap::zeros("r", 1, 20, 1);
        m.values[2] = 0.2;
        m.values[10] = 0.9;
        m.values[17] = 0.5;
        let d = detect_persons(&m, 2, 2);
        let xs: Vec<f64> = d.items.iter().map(|d| d.x).collect();
        assert_eq!(xs, vec![10.5, 17.5]);
    }

    #[test]
    fn matching_examples() {
        let gsd = 0.1; // radius 5 px
        let gt = PointAnnotationSet::new("g", vec![(10.0, 10.0)]);

        let exact = [Detection { x: 10.0, y: 10.0, score: 1.0 }];
        let r = match_detections(&exact, &gt, gsd).unwrap();
        assert_eq!((r.precision(), r.recall(), r.f1()), (1.0, 1.0, 1.0));

        // 0.6 m away
        let far = [Detection { x: 16.0, y: 10.0, score: 1.0 }];
        let r = match_detections(&far, &gt, gsd).unwrap();
        assert_eq!((r.precision(), r.recall(), r.f1()), (0.0, 0.0, 0.0));

        // higher score at 0.3 m wins over lower score at 0.2 m
        let two = [
            Detection { x: 13.0, y: 10.0, score: 0.9 },
            Detection { x: 10.0, y: 12.0, score: 0.4 },
        ];
        let r = match_detections(&two, &gt, gsd).unwrap();
        assert_eq!(r.matches.len(), 1);
        assert_eq!(r.matches[0].detection, 0);
        assert!((r.matches[0].distance_m - 0.3).abs() < 1e-12);
        assert_eq!(r.precision(), 0.5);
        assert_eq!(r.recall(), 1.0);
        assert!((r.f1() - 2.0 / 3.0).abs() < 1e-12);

        assert!(match_detections(&two, &gt, 0.0).is_err());
    }

    #[test]
    fn boundary_distance_counts_as_match() {
        let gt = PointAnnotationSet::new("g", vec![(0.0, 0.0)]);
        let d = [Detection { x: 5.0, y: 0.0, score: 1.0 }];
        assert_eq!(match_detections(&d, &gt, 0.1).unwrap().matches.len(), 1);
    }
}
