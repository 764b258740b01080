mod common;

use common::{brute_force_metrics, brute_force_render};
use mrcnet::dataset::PointAnnotationSet;
use mrcnet::density::{downsample_density, render_density, sigma_knn, GaussianSpec, GtMode};
use mrcnet::evaluation::{counting_metrics, match_detections, CountPair, Detection};
use mrcnet::inference::{coverage_counts, stitch_plan};
use mrcnet::patches::tile_origins;
use mrcnet::raster::GeomOp;
use proptest::prelude::*;

fn uniform(sigma: u32) -> GaussianSpec {
    GaussianSpec::Uniform { sigma_px: sigma }
}

fn points_in(h: usize, w: usize, max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..w as f64, 0.0..h as f64), 0..max)
}

fn set(points: Vec<(f64, f64)>) -> PointAnnotationSet {
    PointAnnotationSet::new("p", points)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rendering_matches_direct_evaluation(pts in points_in(24, 30, 12), sigma in 1u32..4) {
        let map = render_density(&set(pts.clone()), (24, 30), &uniform(sigma)).unwrap();
        let oracle = brute_force_render(&pts, &vec![sigma as f64; pts.len()], 24, 30);
        for (a, b) in map.values.iter().zip(&oracle) {
            prop_assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mass_is_conserved_in_both_modes(pts in points_in(40, 50, 80), sigma in 1u32..4) {
        let n = pts.len() as f64;
        let tol = 1e-3 * (n / 1000.0).max(1.0);
        let s = set(pts);
        let a = render_density(&s, (40, 50), &uniform(sigma)).unwrap();
        prop_assert!((a.sum() - n).abs() <= tol);
        let spec = GtMode::knn_default().gaussian_spec(&s, None).unwrap();
        let b = render_density(&s, (40, 50), &spec).unwrap();
        prop_assert!((b.sum() - n).abs() <= tol);
        prop_assert!(a.values.iter().chain(&b.values).all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn superposition(a in points_in(32, 32, 10), b in points_in(32, 32, 10), sigma in 1u32..4) {
        let spec = uniform(sigma);
        let ra = render_density(&set(a.clone()), (32, 32), &spec).unwrap();
        let rb = render_density(&set(b.clone()), (32, 32), &spec).unwrap();
        let both = render_density(&set([a, b].concat()), (32, 32), &spec).unwrap();
        for ((x, y), z) in ra.values.iter().zip(&rb.values).zip(&both.values) {
            prop_assert!((x + y - z).abs() < 1e-6);
        }
    }

    #[test]
    fn integer_translation_shifts_the_map(
        pts in prop::collection::vec((12.0..20.0f64, 12.0..20.0f64), 1..6),
        dx in 0usize..8,
        dy in 0usize..8,
        sigma in 1u32..3,
    ) {
        let spec = uniform(sigma);
        let base = render_density(&set(pts.clone()), (40, 40), &spec).unwrap();
        let moved: Vec<_> = pts.iter().map(|&(x, y)| (x + dx as f64, y + dy as f64)).collect();
        let shifted = render_density(&set(moved), (40, 40), &spec).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                prop_assert!((base.get(r, c) - shifted.get(r + dy, c + dx)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sum_pooling_keeps_the_count(pts in points_in(37, 45, 40), factor in 1usize..6) {
        let map = render_density(&set(pts), (37, 45), &uniform(2)).unwrap();
        let low = downsample_density(&map, factor).unwrap();
        prop_assert_eq!(low.shape(), (37usize.div_ceil(factor), 45usize.div_ceil(factor)));
        prop_assert!((low.sum() - map.sum()).abs() <= 1e-5 * map.sum().max(1.0));
    }

    #[test]
    fn geometric_transforms_commute_with_rendering(
        pts in points_in(20, 28, 8),
        op in prop::sample::select(vec![GeomOp::Rot90, GeomOp::Rot180, GeomOp::Rot270, GeomOp::FlipLr, GeomOp::FlipUd]),
    ) {
        let spec = uniform(2);
        let map = render_density(&set(pts.clone()), (20, 28), &spec).unwrap();
        let moved: Vec<_> = pts.iter().map(|&(x, y)| op.map_point(x, y, 20, 28)).collect();
        // a source coordinate of exactly 0 lands on the far border
        let (oh, ow) = op.output_shape(20, 28);
        prop_assume!(moved.iter().all(|&(x, y)| x < ow as f64 && y < oh as f64));
        let direct = render_density(&set(moved), (oh, ow), &spec).unwrap();
        let transformed = map.apply(op);
        prop_assert_eq!(transformed.shape(), direct.shape());
        for (a, b) in transformed.values.iter().zip(&direct.values) {
            prop_assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn rescaling_matches_rendering_scaled_points(
        pts in prop::collection::vec((12.0..52.0f64, 12.0..52.0f64), 1..6),
        scale in prop::sample::select(vec![0.75f64, 1.25, 2.0]),
    ) {
        let sigma = 3.0;
        let spec = GaussianSpec::PerPoint { sigmas: vec![sigma; pts.len()] };
        let map = render_density(&set(pts.clone()), (64, 64), &spec).unwrap();
        let scaled = map.rescale(scale);
        let (h, w) = scaled.shape();
        let moved: Vec<_> = pts.iter().map(|&(x, y)| (x * scale, y * scale)).collect();
        let direct = render_density(
            &set(moved),
            (h, w),
            &GaussianSpec::PerPoint { sigmas: vec![sigma * scale; pts.len()] },
        ).unwrap();
        prop_assert!((scaled.sum() - map.sum()).abs() < 1e-3);
        for (a, b) in scaled.values.iter().zip(&direct.values) {
            prop_assert!((a - b).abs() < 1e-2);
        }
    }

    #[test]
    fn knn_sigma_is_at_least_one(pts in prop::collection::vec((0.0..50.0f64, 0.0..50.0f64), 0..30)) {
        let s = sigma_knn(&set(pts.clone()), 3, 0.3);
        prop_assert_eq!(s.len(), pts.len());
        prop_assert!(s.iter().all(|v| *v >= 1.0));
    }

    #[test]
    fn metrics_agree_with_definitions(pairs in prop::collection::vec((1.0..5000.0f64, 0.0..6000.0f64), 1..40)) {
        let cp: Vec<_> = pairs.iter().enumerate().map(|(i, &(c, p))| CountPair::new(i.to_string(), c, p)).collect();
        let r = counting_metrics(&cp).unwrap();
        let (mae, mnae, rmse) = brute_force_metrics(&pairs);
        prop_assert!((r.mae - mae).abs() <= 1e-9 * mae.max(1.0));
        prop_assert!((r.rmse - rmse).abs() <= 1e-9 * rmse.max(1.0));
        prop_assert!((r.mnae.unwrap() - mnae).abs() <= 1e-9 * mnae.max(1.0));
        prop_assert!(r.mae <= r.rmse * (1.0 + 1e-12));
    }

    #[test]
    fn metric_scaling(pairs in prop::collection::vec((1.0..500.0f64, 0.0..600.0f64), 1..20), k in 0.1..10.0f64) {
        let make = |f: f64| -> Vec<CountPair> {
            pairs.iter().map(|&(c, p)| CountPair::new("i", c * f, p * f)).collect()
        };
        let a = counting_metrics(&make(1.0)).unwrap();
        let b = counting_metrics(&make(k)).unwrap();
        prop_assert!((b.mae - k * a.mae).abs() <= 1e-9 * b.mae.max(1.0));
        prop_assert!((b.rmse - k * a.rmse).abs() <= 1e-9 * b.rmse.max(1.0));
        prop_assert!((b.mnae.unwrap() - a.mnae.unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn matching_is_a_partial_injection(
        gt in points_in(60, 60, 25),
        dets in prop::collection::vec((0.0..60.0f64, 0.0..60.0f64, 0.0..1.0f32), 0..25),
        gsd in 0.05..0.2f64,
    ) {
        let detections: Vec<Detection> = dets.iter().map(|&(x, y, score)| Detection { x, y, score }).collect();
        let gt = set(gt);
        let r = match_detections(&detections, &gt, gsd).unwrap();
        let mut used_d = std::collections::HashSet::new();
        let mut used_g = std::collections::HashSet::new();
        for m in &r.matches {
            prop_assert!(used_d.insert(m.detection));
            prop_assert!(used_g.insert(m.gt));
            prop_assert!(m.distance_m <= 0.5 + 1e-12);
        }
        prop_assert!((0.0..=1.0).contains(&r.f1()));

        // an extra detection far outside the image never raises precision
        let mut more = detections.clone();
        more.push(Detection { x: 1e4, y: 1e4, score: 2.0 });
        let r2 = match_detections(&more, &gt, gsd).unwrap();
        prop_assert!(r2.precision() <= r.precision() + 1e-12);
    }

    #[test]
    fn tiles_cover_the_image(h in 64usize..700, w in 64usize..700, tile in 32usize..64, overlap in 0.0..0.9f64) {
        let origins = tile_origins(h, w, tile, overlap).unwrap();
        let mut cover = vec![false; h * w];
        for &(r, c) in &origins {
            prop_assert!(r + tile <= h && c + tile <= w);
            for rr in r..r + tile {
                for cc in c..c + tile {
                    cover[rr * w + cc] = true;
                }
            }
        }
        prop_assert!(cover.iter().all(|&c| c));
    }

    #[test]
    fn stitching_writes_every_pixel_once(
        hb in 2usize..24,
        wb in 2usize..24,
        tile_blocks in 1usize..8,
        overlap in prop::sample::select(vec![0.125f64, 0.25, 0.375, 0.5]),
    ) {
        let (h, w, tile) = (hb * 32, wb * 32, tile_blocks * 32);
        prop_assume!(tile < h && tile < w);
        let plan = stitch_plan(h, w, tile, overlap);
        prop_assert!(coverage_counts(&plan, h, w).iter().all(|&c| c == 1));
        for t in &plan {
            prop_assert!(t.rows.0 >= t.origin.0 && t.rows.1 <= t.origin.0 + tile);
            prop_assert!(t.cols.0 >= t.origin.1 && t.cols.1 <= t.origin.1 + tile);
            prop_assert!(t.rows.0 % 4 == 0 && t.cols.0 % 4 == 0);
        }
    }
}
