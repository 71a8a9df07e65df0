use proptest::prelude::*;
use route_detr::assignment::hungarian;
use route_detr::boxes::{giou, iou};
use route_detr::metrics::{duplicate_rate, Detection};
use route_detr::Tensor;

fn unit_box() -> impl Strategy<Value = [f64; 4]> {
    (0.05..0.95f64, 0.05..0.95f64, 0.01..0.6f64, 0.01..0.6f64).prop_map(|(x, y, w, h)| [x, y, w, h])
}

fn cost_matrix() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..=7)
        .prop_flat_map(|n| (Just(n), 0..=n.min(6)))
        .prop_flat_map(|(n, k)| (Just(n), Just(k), prop::collection::vec(-5.0..5.0f64, n * k)))
        .prop_map(|(n, k, data)| Tensor::new(&[n, k], data).unwrap())
}

proptest! {
    #[test]
    fn overlap_measures_are_symmetric_and_bounded(a in unit_box(), b in unit_box()) {
        let (i, g) = (iou(a, b), giou(a, b));
        prop_assert_eq!(i, iou(b, a));
        prop_assert!((g - giou(b, a)).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert!((-1.0..=1.0).contains(&g) && g <= i + 1e-15);
        prop_assert!((iou(a, a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matching_is_injective_and_beats_the_diagonal(cost in cost_matrix()) {
        let (n, k) = (cost.rows(), cost.cols());
        let m = hungarian(&cost).unwrap();
        let mut queries: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let mut objects: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        queries.sort_unstable();
        objects.sort_unstable();
        queries.dedup();
        prop_assert_eq!(queries.len(), k);
        prop_assert_eq!(objects, (0..k).collect::<Vec<_>>());
        prop_assert_eq!(m.unmatched.len(), n - k);
        let diagonal: f64 = (0..k).map(|o| cost.at(o, o)).sum();
        prop_assert!(m.total_cost(&cost) <= diagonal + 1e-9);
    }

    #[test]
    fn duplicate_rate_is_a_fraction(
        raw in prop::collection::vec((0usize..3, 1usize..3, 0.0..1.0f64, unit_box()), 0..20),
        thresh in 0.0..1.0f64,
    ) {
        let dets: Vec<Detection> = raw
            .iter()
            .enumerate()
            .map(|(q, &(scene, class, score, bbox))| Detection { scene, query: q, class, score, bbox })
            .collect();
        let r = duplicate_rate(&dets, 0.3, thresh);
        prop_assert!((0.0..=1.0).contains(&r));
        if dets.iter().filter(|d| d.score >= 0.3).count() < 2 {
            prop_assert_eq!(r, 0.0);
        }
    }
}
