use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{ElementClass, MapElement, Point, Polyline, VectorMap};

use super::*;

fn pts(v: &[(f64, f64)]) -> Vec<Point> {
    v.iter().map(|&(x, y)| Point::new(x, y)).collect()
}

fn open(v: &[(f64, f64)]) -> Polyline {
    Polyline::open(pts(v)).unwrap()
}

#[test]
fn chamfer_of_identical_curves_is_zero() {
    let p = open(&[(0.0, 0.0), (3.0, 1.0), (6.0, 0.0)]);
    assert_eq!(chamfer_distance(&p, &p, 100).unwrap(), 0.0);
}

#[test]
fn chamfer_raw_sets_matches_hand_value() {
    // single points: 0.5 * (5 + 5) = 5
    let a = pts(&[(0.0, 0.0)]);
    let b = pts(&[(3.0, 4.0)]);
    assert_eq!(chamfer_points(&a, &b), 5.0);
}

#[test]
fn chamfer_of_parallel_unit_segments_is_one() {
    let p = open(&[(0.0, 0.0), (1.0, 0.0)]);
    let q = open(&[(0.0, 1.0), (1.0, 1.0)]);
    let d = chamfer_distance(&p, &q, 100).unwrap();
    assert!((d - 1.0).abs() < 1e-12, "got {d}");
}

#[test]
fn frechet_of_identical_curves_is_zero() {
    let p = open(&[(0.0, 0.0), (2.0, 2.0), (4.0, 0.0)]);
    assert_eq!(frechet_distance(&p, &p, 100).unwrap(), 0.0);
}

#[test]
fn frechet_of_parallel_segments_is_one() {
    let p = open(&[(0.0, 0.0), (1.0, 0.0)]);
    let q = open(&[(0.0, 1.0), (1.0, 1.0)]);
    let d = frechet_distance(&p, &q, 100).unwrap();
    assert!((d - 1.0).abs() < 1e-12, "got {d}");
}

#[test]
fn frechet_penalizes_reversed_direction() {
    let p = open(&[(0.0, 0.0), (1.0, 0.0)]);
    let q = open(&[(0.0, 1.0), (1.0, 1.0)]);
    let fwd = frechet_distance(&p, &q, 100).unwrap();
    let rev = frechet_distance(&p, &q.reversed(), 100).unwrap();
    assert!((rev - 2.0f64.sqrt()).abs() < 1e-12, "got {rev}");
    assert!(rev > fwd);
    // chamfer ignores direction entirely
    let c_fwd = chamfer_distance(&p, &q, 100).unwrap();
    let c_rev = chamfer_distance(&p, &q.reversed(), 100).unwrap();
    assert!((c_fwd - c_rev).abs() < 1e-12);
}

#[test]
fn frechet_two_vertex_couplings() {
    let u = pts(&[(0.0, 0.0), (4.0, 0.0)]);
    let v = pts(&[(0.0, 1.0), (4.0, 1.0)]);
    // the diagonal coupling (max of endpoint pairs) beats the stair ones
    assert_eq!(frechet_bruteforce(&u, &v).unwrap(), 1.0);
    assert_eq!(frechet_points(&u, &v), 1.0);
}

#[test]
fn frechet_bruteforce_guard_rejects_long_inputs() {
    let long: Vec<Point> = (0..9).map(|i| Point::new(i as f64, 0.0)).collect();
    assert!(matches!(
        frechet_bruteforce(&long, &long),
        Err(EvalError::BruteForceGuard(9))
    ));
}

#[test]
fn frechet_dp_equals_bruteforce_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.gen_range(2..=6);
        let m = rng.gen_range(2..=6);
        let mk = |rng: &mut ChaCha8Rng, k: usize| -> Vec<Point> {
            (0..k)
                .map(|_| Point::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
                .collect()
        };
        let u = mk(&mut rng, n);
        let v = mk(&mut rng, m);
        assert_eq!(frechet_points(&u, &v), frechet_bruteforce(&u, &v).unwrap());
    }
}

fn divider(v: &[(f64, f64)]) -> MapElement {
    MapElement::new(ElementClass::Divider, open(v))
}

fn one_scene(gt: Vec<MapElement>) -> BTreeMap<String, VectorMap> {
    let mut m = BTreeMap::new();
    m.insert("s0".to_string(), VectorMap::new(gt));
    m
}

fn pred(el: MapElement, score: f64) -> ScoredPrediction {
    ScoredPrediction {
        element: el,
        score,
        scene_id: "s0".to_string(),
    }
}

#[test]
fn perfect_predictions_score_full_ap() {
    let gt = vec![divider(&[(0.0, 0.0), (5.0, 0.0)]), divider(&[(0.0, 2.0), (5.0, 2.0)])];
    let preds: Vec<ScoredPrediction> = gt
        .iter()
        .enumerate()
        .map(|(i, e)| pred(e.clone(), 0.9 - 0.1 * i as f64))
        .collect();
    let gts = one_scene(gt);
    let ap = instance_ap(&preds, &gts, ElementClass::Divider, 1.0, MetricKind::Chamfer).unwrap();
    assert_eq!(ap, 1.0);
}

#[test]
fn no_predictions_scores_zero_when_gt_exists() {
    let gts = one_scene(vec![divider(&[(0.0, 0.0), (5.0, 0.0)])]);
    let ap = instance_ap(&[], &gts, ElementClass::Divider, 1.0, MetricKind::Chamfer).unwrap();
    assert_eq!(ap, 0.0);
}

#[test]
fn empty_empty_scores_one_by_convention() {
    let gts = one_scene(vec![]);
    let ap = instance_ap(&[], &gts, ElementClass::Divider, 1.0, MetricKind::Chamfer).unwrap();
    assert_eq!(ap, 1.0);
}

#[test]
fn pr_curve_hand_example() {
    // 1 GT; a high-scored miss at distance 2.0 and a low-scored hit at 0.3
    let gt = divider(&[(0.0, 0.0), (5.0, 0.0)]);
    let miss = divider(&[(0.0, 2.0), (5.0, 2.0)]);
    let hit = divider(&[(0.0, 0.3), (5.0, 0.3)]);
    let preds = vec![pred(miss, 0.9), pred(hit, 0.8)];
    let gts = one_scene(vec![gt]);
    let ap = instance_ap(&preds, &gts, ElementClass::Divider, 1.0, MetricKind::Chamfer).unwrap();
    assert!((ap - 0.5).abs() < 1e-12, "got {ap}");
}

#[test]
fn scene_mismatch_is_an_error() {
    let gts = one_scene(vec![divider(&[(0.0, 0.0), (5.0, 0.0)])]);
    let mut p = pred(divider(&[(0.0, 0.0), (5.0, 0.0)]), 0.9);
    p.scene_id = "unknown".to_string();
    assert!(matches!(
        instance_ap(&[p], &gts, ElementClass::Divider, 1.0, MetricKind::Chamfer),
        Err(EvalError::SceneMismatch(_))
    ));
}

#[test]
fn evaluate_identical_maps_gives_perfect_report() {
    let gt = vec![
        MapElement::new(
            ElementClass::Boundary,
            open(&[(0.0, 0.0), (10.0, 1.0), (20.0, 0.0)]),
        ),
        divider(&[(0.0, 3.0), (20.0, 3.0)]),
        MapElement::new(
            ElementClass::Crossing,
            Polyline::closed_from_ring(pts(&[(5.0, 2.0), (7.0, 2.0), (7.0, 4.0), (5.0, 4.0)]))
                .unwrap(),
        ),
    ];
    let preds: Vec<ScoredPrediction> =
        gt.iter().map(|e| pred(e.clone(), 1.0)).collect();
    let gts = one_scene(gt);
    let report =
        evaluate_map_set(&preds, &gts, &DEFAULT_THRESHOLDS, &MetricKind::ALL).unwrap();
    for cell in &report.cells {
        assert_eq!(cell.ap, 1.0, "cell {cell:?}");
    }
    assert_eq!(report.map(MetricKind::Chamfer), Some(1.0));
    assert_eq!(report.map(MetricKind::Frechet), Some(1.0));
}

#[test]
fn evaluate_empty_predictions_gives_zero_map() {
    let gts = one_scene(vec![divider(&[(0.0, 0.0), (5.0, 0.0)])]);
    let report = evaluate_map_set(&[], &gts, &DEFAULT_THRESHOLDS, &[MetricKind::Chamfer]).unwrap();
    // divider AP is 0 at every threshold; absent classes count 1.0
    assert_eq!(report.ap(MetricKind::Chamfer, ElementClass::Divider, 1.0), Some(0.0));
    assert_eq!(report.ap(MetricKind::Chamfer, ElementClass::Boundary, 1.0), Some(1.0));
}

#[test]
fn per_threshold_matching_hand_example() {
    let gt = vec![
        divider(&[(0.0, 0.0), (10.0, 0.0)]),
        divider(&[(0.0, 3.0), (10.0, 3.0)]),
        divider(&[(0.0, 6.0), (10.0, 6.0)]),
    ];
    let mut preds = vec![
        pred(gt[0].clone(), 0.9),
        pred(gt[1].clone(), 0.8),
        // displaced by 0.7 m: outside tau = 0.5, inside tau = 1.0
        pred(divider(&[(0.0, 6.7), (10.0, 6.7)]), 0.7),
    ];
    let gts = one_scene(gt);
    let report = evaluate_map_set(&preds, &gts, &[0.5, 1.0], &[MetricKind::Chamfer]).unwrap();
    let at_05 = report.ap(MetricKind::Chamfer, ElementClass::Divider, 0.5).unwrap();
    assert!((at_05 - 2.0 / 3.0).abs() < 1e-12, "got {at_05}");
    let at_10 = report.ap(MetricKind::Chamfer, ElementClass::Divider, 1.0).unwrap();
    assert_eq!(at_10, 1.0);
    // repeated evaluation of the same inputs is identical
    preds.truncate(3);
    let again = evaluate_map_set(&preds, &gts, &[0.5, 1.0], &[MetricKind::Chamfer]).unwrap();
    assert_eq!(report, again);
}

#[test]
fn ap_monotonicity_under_added_predictions() {
    // gt[0] is deliberately never predicted in the base set, so the
    // added top-scored correct prediction fixes a miss instead of
    // stealing a ground truth from an existing match.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let n_gt = rng.gen_range(2..6);
        let gt: Vec<MapElement> = (0..n_gt)
            .map(|i| divider(&[(0.0, 4.0 * i as f64), (8.0, 4.0 * i as f64)]))
            .collect();
        let mut preds = Vec::new();
        for e in gt.iter().skip(1) {
            if rng.gen_bool(0.7) {
                let dy = rng.gen_range(-1.8..1.8);
                let shifted: Vec<(f64, f64)> =
                    e.poly.vertices().iter().map(|p| (p.x, p.y + dy)).collect();
                preds.push(pred(divider(&shifted), rng.gen_range(0.1..0.9)));
            }
        }
        let gts = one_scene(gt.clone());
        let base =
            instance_ap(&preds, &gts, ElementClass::Divider, 1.0, MetricKind::Chamfer).unwrap();

        // a correct, top-scored prediction of a missed element never decreases AP
        let mut better = preds.clone();
        better.push(pred(gt[0].clone(), 1.0));
        let improved =
            instance_ap(&better, &gts, ElementClass::Divider, 1.0, MetricKind::Chamfer).unwrap();
        assert!(improved >= base - 1e-12, "{improved} < {base}");

        // a bottom-scored false positive never increases AP
        let mut worse = preds.clone();
        worse.push(pred(divider(&[(0.0, 100.0), (8.0, 100.0)]), 0.0));
        let degraded =
            instance_ap(&worse, &gts, ElementClass::Divider, 1.0, MetricKind::Chamfer).unwrap();
        assert!(degraded <= base + 1e-12, "{degraded} > {base}");
    }
}

#[test]
fn report_table_shows_all_classes_and_map() {
    let gts = one_scene(vec![divider(&[(0.0, 0.0), (5.0, 0.0)])]);
    let report = evaluate_map_set(&[], &gts, &DEFAULT_THRESHOLDS, &MetricKind::ALL).unwrap();
    let table = report.to_table();
    for needle in ["AP_ped", "AP_divider", "AP_boundary", "mAP", "chamfer", "frechet"] {
        assert!(table.contains(needle), "missing {needle} in:\n{table}");
    }
}

fn arb_polyline() -> impl Strategy<Value = Polyline> {
    proptest::collection::vec((0.0..20.0f64, 0.0..20.0f64), 2..10).prop_map(|raw| {
        let mut verts: Vec<Point> = Vec::with_capacity(raw.len());
        for (x, y) in raw {
            let p = Point::new(x, y);
            match verts.last() {
                Some(prev) if prev.dist(&p) < 0.25 => {
                    verts.push(Point::new(p.x + 1.0, (p.y + 1.0) % 20.0))
                }
                _ => verts.push(p),
            }
        }
        Polyline::open(verts).unwrap()
    })
}

proptest! {
    #[test]
    fn chamfer_is_symmetric(p in arb_polyline(), q in arb_polyline()) {
        let pq = chamfer_distance(&p, &q, 50).unwrap();
        let qp = chamfer_distance(&q, &p, 50).unwrap();
        prop_assert_eq!(pq, qp);
    }

    #[test]
    fn chamfer_is_reversal_invariant(p in arb_polyline(), q in arb_polyline()) {
        let base = chamfer_distance(&p, &q, 50).unwrap();
        let rev = chamfer_distance(&p, &q.reversed(), 50).unwrap();
        prop_assert!((base - rev).abs() < 1e-12);
    }

    #[test]
    fn frechet_bounded_below_by_endpoint_pairs(p in arb_polyline(), q in arb_polyline()) {
        let d = frechet_distance(&p, &q, 20).unwrap();
        let p1 = p.vertices()[0];
        let pm = *p.vertices().last().unwrap();
        let q1 = q.vertices()[0];
        let qm = *q.vertices().last().unwrap();
        // endpoints are always coupled in a monotone coupling
        prop_assert!(d >= p1.dist(&q1).max(pm.dist(&qm)) - 1e-12);
    }
}
