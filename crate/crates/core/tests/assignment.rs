use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use route_detr::assignment::{hungarian, match_cost, set_loss, LossWeights};
use route_detr::decoder::{PredVars, Prediction};
use route_detr::synthdata::Scene;
use route_detr::{Graph, Tensor};

/// Minimum total over every injective object → query map, and the first
/// minimizer in lexicographic order of the query list.
fn brute_force(cost: &Tensor<f64>) -> (f64, Vec<usize>) {
    let (n, k) = (cost.rows(), cost.cols());
    let mut best = (f64::INFINITY, Vec::new());
    let mut current = Vec::with_capacity(k);
    let mut used = vec![false; n];
    fn recurse(
        cost: &Tensor<f64>,
        n: usize,
        k: usize,
        current: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut (f64, Vec<usize>),
    ) {
        if current.len() == k {
            let total: f64 = current
                .iter()
                .enumerate()
                .map(|(o, &q)| cost.at(q, o))
                .sum();
            if total < best.0 {
                *best = (total, current.clone());
            }
            return;
        }
        for q in 0..n {
            if !used[q] {
                used[q] = true;
                current.push(q);
                recurse(cost, n, k, current, used, best);
                current.pop();
                used[q] = false;
            }
        }
    }
    recurse(cost, n, k, &mut current, &mut used, &mut best);
    if k == 0 {
        best.0 = 0.0;
    }
    best
}

fn object_to_query(pairs: &[(usize, usize)], k: usize) -> Vec<usize> {
    let mut v = vec![usize::MAX; k];
    for &(q, o) in pairs {
        v[o] = q;
    }
    v
}

fn random_cost(rng: &mut ChaCha8Rng, n: usize, k: usize, integer: bool) -> Tensor<f64> {
    let data = (0..n * k)
        .map(|_| {
            if integer {
                rng.gen_range(0..20) as f64
            } else {
                rng.gen_range(-3.0..3.0)
            }
        })
        .collect();
    Tensor::new(&[n, k], data).unwrap()
}

fn total_in_object_order(cost: &Tensor<f64>, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(o, &q)| cost.at(q, o)).sum()
}

#[test]
fn hungarian_equals_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for case in 0..400 {
        let n = rng.gen_range(1..=7);
        let k = rng.gen_range(0..=n.min(6));
        let integer = case % 2 == 0;
        let cost = random_cost(&mut rng, n, k, integer);
        let m = hungarian(&cost).unwrap();
        let (best, best_assign) = brute_force(&cost);
        let assign = object_to_query(&m.pairs, k);
        assert_eq!(m.pairs.len(), k);
        assert_eq!(m.unmatched.len(), n - k);
        if integer {
            // Integer costs make every total exact, so ties are real ties and
            // the lexicographic rule selects the brute-force minimizer.
            assert_eq!(m.total_cost(&cost), best, "case {case}");
            assert_eq!(assign, best_assign, "case {case}");
        } else {
            assert_eq!(assign, best_assign, "case {case}");
            assert_eq!(total_in_object_order(&cost, &assign), best, "case {case}");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn six_by_five_over_two_hundred_seeds() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cost = random_cost(&mut rng, 6, 5, false);
        let m = hungarian(&cost).unwrap();
        let (best, _) = brute_force(&cost);
        let assign = object_to_query(&m.pairs, 5);
        assert_eq!(total_in_object_order(&cost, &assign), best, "seed {seed}");
    }
}

#[test]
fn adding_a_constant_to_a_row_keeps_the_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(2..=6);
        let cost = random_cost(&mut rng, n, n, false);
        let base = hungarian(&cost).unwrap();
        let row = rng.gen_range(0..n);
        let shift = rng.gen_range(-5.0..5.0);
        let mut shifted = cost.clone();
        for j in 0..n {
            shifted.data_mut()[row * n + j] += shift;
        }
        assert_eq!(hungarian(&shifted).unwrap().pairs, base.pairs);
    }
}

fn pred_vars(g: &mut Graph<f64>, logits: &Tensor<f64>, boxes: &Tensor<f64>) -> PredVars {
    let class_logits = g.param(logits.clone());
    let boxes = g.param(boxes.clone());
    PredVars {
        class_logits,
        boxes,
        box_logits: boxes,
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v.exp() / z).collect()
}

fn corners(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

fn giou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

#[test]
fn three_by_two_cost_matches_oracle() {
    let w = LossWeights::default();
    let logits = Tensor::new(&[3, 3], vec![0.2, 1.0, -0.5, -1.0, 0.3, 2.0, 0.0, 0.0, 0.0]).unwrap();
    let boxes = Tensor::new(
        &[3, 4],
        vec![0.3, 0.3, 0.2, 0.2, 0.6, 0.7, 0.3, 0.1, 0.5, 0.5, 0.9, 0.9],
    )
    .unwrap();
    let scene = Scene {
        seed: 0,
        boxes: vec![[0.35, 0.3, 0.2, 0.25], [0.6, 0.6, 0.2, 0.2]],
        classes: vec![1, 2],
    };
    let cost = match_cost(
        &Prediction {
            boxes: boxes.clone(),
            class_logits: logits.clone(),
        },
        &scene,
        &w,
    )
    .unwrap();
    assert_eq!(cost.shape(), [3, 2]);
    for i in 0..3 {
        let p = softmax(logits.row(i));
        let bi: [f64; 4] = std::array::from_fn(|c| boxes.at(i, c));
        for (j, (bj, &cls)) in scene.boxes.iter().zip(&scene.classes).enumerate() {
            let l1: f64 = bi.iter().zip(bj).map(|(a, b)| (a - b).abs()).sum();
            let expect = -2.0 * p[cls] + 5.0 * l1 - 2.0 * giou_oracle(bi, *bj);
            assert!((cost.at(i, j) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn two_queries_one_object_loss_matches_oracle() {
    let w = LossWeights::default();
    let logits = Tensor::new(&[2, 3], vec![0.5, 1.5, -0.2, 1.0, 0.1, 0.4]).unwrap();
    let boxes = Tensor::new(&[2, 4], vec![0.42, 0.5, 0.3, 0.25, 0.7, 0.2, 0.1, 0.3]).unwrap();
    let target = [0.45, 0.48, 0.28, 0.3];
    let scene = Scene {
        seed: 0,
        boxes: vec![target],
        classes: vec![1],
    };
    let mut g = Graph::new();
    let p = pred_vars(&mut g, &logits, &boxes);
    let (_, loss) = set_loss(&mut g, &[p], &scene, &w).unwrap();

    let row = |i: usize| -> [f64; 4] { std::array::from_fn(|c| boxes.at(i, c)) };
    let cost = |i: usize| {
        let l1: f64 = row(i).iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
        -2.0 * softmax(logits.row(i))[1] + 5.0 * l1 - 2.0 * giou_oracle(row(i), target)
    };
    let (m, other) = if cost(0) <= cost(1) { (0, 1) } else { (1, 0) };
    let logp = |i: usize, c: usize| softmax(logits.row(i))[c].ln();
    let ce = -(logp(m, 1) + 0.1 * logp(other, 0)) / 1.1;
    let l1: f64 = row(m).iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
    let gl = 1.0 - giou_oracle(row(m), target);
    assert!((loss.cls - ce).abs() < 1e-10);
    assert!((loss.l1 - l1).abs() < 1e-10);
    assert!((loss.giou - gl).abs() < 1e-10);
    assert!((loss.total - (2.0 * ce + 5.0 * l1 + 2.0 * gl)).abs() < 1e-10);
}

#[test]
fn perfect_predictions_have_vanishing_loss() {
    let scene = Scene {
        seed: 0,
        boxes: vec![[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3]],
        classes: vec![2, 1],
    };
    let logits = Tensor::new(&[2, 3], vec![-40.0, -40.0, 40.0, -40.0, 40.0, -40.0]).unwrap();
    let boxes = Tensor::new(&[2, 4], scene.boxes.concat()).unwrap();
    let mut g = Graph::new();
    let p = pred_vars(&mut g, &logits, &boxes);
    let (_, loss) = set_loss(&mut g, &[p], &scene, &LossWeights::default()).unwrap();
    assert_eq!(loss.l1, 0.0);
    assert!(loss.giou.abs() < 1e-12);
    assert!(loss.cls < 1e-30);
}

#[test]
fn empty_scene_only_pays_background_classification() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = Tensor::new(&[3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let boxes = Tensor::full(&[3, 4], 0.4);
    let mut g = Graph::new();
    let p = pred_vars(&mut g, &logits, &boxes);
    let (l, loss) = set_loss(&mut g, &[p], &Scene::empty(0), &LossWeights::default()).unwrap();
    assert_eq!((loss.l1, loss.giou), (0.0, 0.0));
    let ce = -(0..3).map(|i| softmax(logits.row(i))[0].ln()).sum::<f64>() / 3.0;
    assert!((loss.cls - ce).abs() < 1e-12);
    assert!((loss.total - 2.0 * ce).abs() < 1e-12);
    g.backward(l).unwrap();
    assert!(g
        .grad(p.boxes)
        .is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn set_loss_ignores_query_and_object_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 5;
    let logits = Tensor::new(
        &[n, 4],
        (0..n * 4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let boxes = Tensor::new(
        &[n, 4],
        (0..n * 4).map(|_| rng.gen_range(0.1..0.9)).collect(),
    )
    .unwrap();
    let scene = Scene {
        seed: 0,
        boxes: vec![
            [0.2, 0.3, 0.2, 0.1],
            [0.6, 0.5, 0.3, 0.3],
            [0.8, 0.2, 0.1, 0.2],
        ],
        classes: vec![3, 1, 2],
    };
    let loss = |logits: &Tensor<f64>, boxes: &Tensor<f64>, scene: &Scene| {
        let mut g = Graph::new();
        let p = pred_vars(&mut g, logits, boxes);
        set_loss(&mut g, &[p, p], scene, &LossWeights::default())
            .unwrap()
            .1
    };
    let base = loss(&logits, &boxes, &scene);
    let perm = [3, 1, 4, 0, 2];
    let permute = |t: &Tensor<f64>| {
        let rows: Vec<&[f64]> = perm.iter().map(|&i| t.row(i)).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let q = loss(&permute(&logits), &permute(&boxes), &scene);
    let reversed = Scene {
        seed: 0,
        boxes: scene.boxes.iter().rev().copied().collect(),
        classes: scene.classes.iter().rev().copied().collect(),
    };
    let o = loss(&logits, &boxes, &reversed);
    for other in [q, o] {
        assert!((other.total - base.total).abs() < 1e-12);
        assert!((other.cls - base.cls).abs() < 1e-12);
        assert!((other.l1 - base.l1).abs() < 1e-12);
        assert!((other.giou - base.giou).abs() < 1e-12);
    }
    let weighted = 2.0 * base.cls + 5.0 * base.l1 + 2.0 * base.giou;
    assert!((base.total - weighted).abs() < 1e-12);
    assert_eq!(base.per_layer.len(), 2);
}
