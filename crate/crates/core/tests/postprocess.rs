mod common;

use common::{exhaustive_match, flood_fill, rng};
use dcst::instance::{
    binarize, connected_components, extract_instances, format_predictions, localize, parse_predictions, BinaryMap,
    Connectivity,
};
use dcst::metrics::{f1_score, hungarian, match_points, CountingMetrics, HeadAnnotation, LocalizationMetrics, LocalizationReport};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;

fn random_map(r: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMap {
    BinaryMap::new(h, w, (0..h * w).map(|_| r.random_bool(density)).collect()).unwrap()
}

#[test]
fn labels_match_flood_fill() {
    let mut r = rng(1);
    for trial in 0..200 {
        let (h, w) = (r.random_range(1..=64), r.random_range(1..=64));
        let density = r.random_range(0.05..0.7);
        let m = random_map(&mut r, h, w, density);
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let cc = connected_components(&m, conn);
            let (labels, count) = flood_fill(&m.data, h, w, conn.offsets());
            assert_eq!(cc.count, count, "trial {trial} {conn:?}");
            assert_eq!(cc.labels, labels, "trial {trial} {conn:?}");
        }
    }
}

#[test]
fn instance_statistics_match_pixels() {
    let mut r = rng(2);
    for _ in 0..50 {
        let (h, w) = (r.random_range(1..=40), r.random_range(1..=40));
        let m = random_map(&mut r, h, w, 0.3);
        let cc = connected_components(&m, Connectivity::Eight);
        let inst = extract_instances(&cc, 1);
        assert_eq!(inst.len(), cc.count);
        assert_eq!(inst.iter().map(|i| i.area).sum::<usize>(), m.foreground());
        for i in &inst {
            let px: Vec<(usize, usize)> = (0..h * w).filter(|&k| cc.labels[k] == i.id).map(|k| (k % w, k / w)).collect();
            let cx = px.iter().map(|p| p.0 as f64).sum::<f64>() / px.len() as f64;
            let cy = px.iter().map(|p| p.1 as f64).sum::<f64>() / px.len() as f64;
            assert!((i.centroid.0 - cx).abs() < 1e-9 && (i.centroid.1 - cy).abs() < 1e-9);
            let x0 = px.iter().map(|p| p.0).min().unwrap();
            let y1 = px.iter().map(|p| p.1).max().unwrap();
            assert_eq!((i.bbox.0, i.bbox.3), (x0, y1));
        }
        let big = extract_instances(&cc, 3);
        assert!(big.iter().all(|i| i.area >= 3));
        assert_eq!(big.len(), inst.iter().filter(|i| i.area >= 3).count());
    }
}

#[test]
fn single_pixels_and_extremes() {
    let score = vec![0.9, 0.1, 0.9, 0.1, 0.1, 0.1, 0.9, 0.1, 0.9];
    assert_eq!(localize(&score, 3, 3, 0.5, Connectivity::Eight).unwrap().len(), 4);
    assert_eq!(localize(&score, 3, 3, 0.5, Connectivity::Four).unwrap().len(), 4);
    let full = vec![0.8f32; 12];
    let one = localize(&full, 3, 4, 0.5, Connectivity::Four).unwrap();
    assert_eq!((one.len(), one[0].area, one[0].centroid), (1, 12, (1.5, 1.0)));
    assert!(localize(&full, 3, 4, 0.9, Connectivity::Eight).unwrap().is_empty());
    assert!(localize(&full, 3, 3, 0.5, Connectivity::Eight).is_err());
}

#[test]
fn predictions_roundtrip() {
    let mut r = rng(3);
    let score: Vec<f32> = (0..30 * 20).map(|_| r.random()).collect();
    let inst = localize(&score, 30, 20, 0.7, Connectivity::Eight).unwrap();
    let text = format_predictions(&inst, 0.7);
    let (t, back) = parse_predictions(&text, Path::new("p.txt")).unwrap();
    assert_eq!(t, 0.7);
    assert_eq!(back.len(), inst.len());
    for (a, b) in inst.iter().zip(&back) {
        assert!((a.centroid.0 - b.0).abs() < 1e-3 && (a.centroid.1 - b.1).abs() < 1e-3);
        assert_eq!(a.area, b.2);
    }
    assert!(parse_predictions("count 2 threshold 0.5\n1 2 3\n", Path::new("p")).is_err());
    assert!(parse_predictions("nope", Path::new("p")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn foreground_monotone_in_threshold(seed in any::<u64>(), t1 in 0.01f32..0.99, t2 in 0.01f32..0.99) {
        let mut r = rng(seed);
        let score: Vec<f32> = (0..24 * 24).map(|_| r.random()).collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = binarize(&score, 24, 24, lo).unwrap();
        let b = binarize(&score, 24, 24, hi).unwrap();
        prop_assert!(a.foreground() >= b.foreground());
        prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| *x || !*y));
    }

    #[test]
    fn eight_never_has_more_components_than_four(seed in any::<u64>()) {
        let m = random_map(&mut rng(seed), 20, 17, 0.4);
        prop_assert!(connected_components(&m, Connectivity::Eight).count <= connected_components(&m, Connectivity::Four).count);
    }
}

fn random_points(r: &mut impl Rng, n: usize) -> Vec<(f64, f64)> {
    (0..n).map(|_| (r.random_range(0.0..20.0), r.random_range(0.0..20.0))).collect()
}

fn random_heads(r: &mut impl Rng, n: usize) -> Vec<HeadAnnotation> {
    (0..n)
        .map(|_| HeadAnnotation::new(r.random_range(0.0..20.0), r.random_range(0.0..20.0), r.random_range(1.0..8.0), r.random_range(1.0..8.0)))
        .collect()
}

fn total_distance(preds: &[(f64, f64)], gts: &[HeadAnnotation], pairs: &[(usize, usize)]) -> f64 {
    pairs
        .iter()
        .map(|&(i, j)| ((preds[i].0 - gts[j].x).powi(2) + (preds[i].1 - gts[j].y).powi(2)).sqrt())
        .sum()
}

#[test]
fn matching_is_optimal() {
    let mut r = rng(4);
    for trial in 0..500 {
        let (np, ng) = (r.random_range(0..=6), r.random_range(0..=6));
        let preds = random_points(&mut r, np);
        let gts = random_heads(&mut r, ng);
        let m = match_points(&preds, &gts);
        let oracle: Vec<(f64, f64, f64)> = gts.iter().map(|g| (g.x, g.y, g.sigma())).collect();
        let (count, dist) = exhaustive_match(&preds, &oracle);
        assert_eq!(m.tp(), count, "trial {trial}");
        assert!((total_distance(&preds, &gts, &m.matched) - dist).abs() < 1e-9, "trial {trial}");
        assert_eq!(m.tp() + m.fp(), np);
        assert_eq!(m.tp() + m.fn_count(), ng);
        for &(i, j) in &m.matched {
            let d = ((preds[i].0 - gts[j].x).powi(2) + (preds[i].1 - gts[j].y).powi(2)).sqrt();
            assert!(d <= gts[j].sigma());
        }
        let mut seen_p = vec![false; np];
        let mut seen_g = vec![false; ng];
        for &(i, j) in &m.matched {
            assert!(!seen_p[i] && !seen_g[j]);
            seen_p[i] = true;
            seen_g[j] = true;
        }
    }
}

#[test]
fn hungarian_against_permutations() {
    fn perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        perms(n - 1)
            .into_iter()
            .flat_map(|p| (0..n).map(move |k| {
                let mut q = p.clone();
                q.insert(k, n - 1);
                q
            }))
            .collect()
    }
    let mut r = rng(5);
    for _ in 0..100 {
        let n = r.random_range(1..=5);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        let a = hungarian(&cost);
        let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        let best = perms(n).iter().map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>()).fold(f64::INFINITY, f64::min);
        assert!((got - best).abs() < 1e-9);
    }
}

#[test]
fn matching_invariant_under_reordering() {
    let mut r = rng(6);
    for _ in 0..100 {
        let preds = random_points(&mut r, 5);
        let gts = random_heads(&mut r, 5);
        let base = match_points(&preds, &gts);
        let mut pi: Vec<usize> = (0..5).collect();
        let mut gi: Vec<usize> = (0..5).collect();
        pi.shuffle(&mut r);
        gi.shuffle(&mut r);
        let p2: Vec<_> = pi.iter().map(|&i| preds[i]).collect();
        let g2: Vec<_> = gi.iter().map(|&j| gts[j]).collect();
        let m = match_points(&p2, &g2);
        assert_eq!(m.tp(), base.tp());
        let d1 = total_distance(&preds, &gts, &base.matched);
        let d2 = total_distance(&p2, &g2, &m.matched);
        assert!((d1 - d2).abs() < 1e-9);
    }
}

#[test]
fn empty_sides() {
    let gts = random_heads(&mut rng(7), 3);
    let m = match_points(&[], &gts);
    assert_eq!((m.tp(), m.fp(), m.fn_count()), (0, 0, 3));
    let m = match_points(&[(1.0, 1.0)], &[]);
    assert_eq!((m.tp(), m.fp(), m.fn_count()), (0, 1, 0));
    let l = LocalizationMetrics::from_match(&match_points(&[], &gts));
    assert_eq!((l.precision, l.recall, l.f1), (0.0, 0.0, 0.0));
    let rep = LocalizationReport::from_matches(&[match_points(&[], &gts)]).unwrap();
    assert_eq!(rep.counting.mae, 3.0);
    assert!(LocalizationReport::from_matches(&[]).is_err());
}

#[test]
fn radius_boundary_is_inclusive() {
    // 6-8-10 box: circumradius exactly 5
    let g = [HeadAnnotation::new(0.0, 0.0, 6.0, 8.0)];
    assert_eq!(match_points(&[(3.0, 4.0)], &g).tp(), 1);
    assert_eq!(match_points(&[(3.0, 4.001)], &g).tp(), 0);
}

#[test]
fn counting_metrics_by_hand() {
    let c = CountingMetrics::compute(&[10.0, 0.0, 4.0], &[7.0, 2.0, 4.0]).unwrap();
    assert!((c.mae - 5.0 / 3.0).abs() < 1e-12);
    assert!((c.mse - (13.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((c.nae - 0.15).abs() < 1e-12);
    assert!(CountingMetrics::compute(&[1.0], &[]).is_err());
}

proptest! {
    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((0u32..50, 0u32..50), 1..30)) {
        let gt: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let pred: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let c = CountingMetrics::compute(&gt, &pred).unwrap();
        prop_assert!(c.mse + 1e-12 >= c.mae);
        prop_assert!(c.mae >= 0.0 && c.nae >= 0.0);
    }

    #[test]
    fn f1_is_scale_free(tp in 0usize..100, fp in 0usize..100, fn_ in 0usize..100, k in 1usize..10) {
        let a = LocalizationMetrics::from_counts(tp, fp, fn_);
        let b = LocalizationMetrics::from_counts(k * tp, k * fp, k * fn_);
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        prop_assert!(a.f1 <= a.precision.max(a.recall) + 1e-12);
        prop_assert!(a.f1 >= a.precision.min(a.recall) - 1e-12);
        prop_assert!((f1_score(a.precision, a.recall) - a.f1).abs() < 1e-15);
    }
}
