//! One-to-one matching of queries to ground truth and the per-layer set loss.

use serde::{Deserialize, Serialize};

use crate::boxes::{giou, giou_rows};
use crate::decoder::{PredVars, Prediction};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::synthdata::Scene;
use crate::tensor::{softmax_slice, Scalar, Tensor};

/// Weights shared by the matching cost and the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Cross-entropy weight of queries assigned to background.
    pub background: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            background: 0.1,
        }
    }
}

/// `(query, object)` pairs sorted by query index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Matching {
    /// Matched object per query.
    pub fn targets(&self, n: usize) -> Vec<Option<usize>> {
        let mut t = vec![None; n];
        for &(q, o) in &self.pairs {
            t[q] = Some(o);
        }
        t
    }

    pub fn total_cost(&self, cost: &Tensor<f64>) -> f64 {
        self.pairs.iter().map(|&(q, o)| cost.at(q, o)).sum()
    }
}

/// `cost[i, j] = −λ_cls p_i(class_j) + λ_l1 ‖b_i − b_j‖₁ − λ_giou GIoU(b_i, b_j)`.
pub fn match_cost<T: Scalar>(
    pred: &Prediction<T>,
    scene: &Scene,
    w: &LossWeights,
) -> Result<Tensor<f64>> {
    let [n, four] = pred.boxes.dims2()?;
    let [nl, classes] = pred.class_logits.dims2()?;
    if four != 4 || nl != n {
        return Err(Error::Dimension(format!(
            "prediction boxes {:?} / logits {:?}",
            pred.boxes.shape(),
            pred.class_logits.shape()
        )));
    }
    let k = scene.len();
    let mut cost = Vec::with_capacity(n * k);
    let mut probs = vec![T::zero(); classes];
    for i in 0..n {
        softmax_slice(pred.class_logits.row(i), &mut probs);
        let bi: [f64; 4] = std::array::from_fn(|c| pred.boxes.at(i, c).as_f64());
        for (bj, &cls) in scene.boxes.iter().zip(&scene.classes) {
            if cls == 0 || cls >= classes {
                return Err(Error::Contract(format!(
                    "object class {cls} outside 1..{}",
                    classes - 1
                )));
            }
            let l1: f64 = bi.iter().zip(bj).map(|(a, b)| (a - b).abs()).sum();
            cost.push(-w.cls * probs[cls].as_f64() + w.l1 * l1 - w.giou * giou(bi, *bj));
        }
    }
    Tensor::new(&[n, k], cost)
}

/// Minimum-cost assignment of every object (column) to a distinct query (row).
///
/// Among optimal assignments the one whose object-to-query list is
/// lexicographically smallest is returned, with totals compared at a relative
/// tolerance of 1e-12.
pub fn hungarian(cost: &Tensor<f64>) -> Result<Matching> {
    let [n, k] = cost.dims2()?;
    if k > n {
        return Err(Error::Contract(format!(
            "{k} objects cannot be matched to {n} queries"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("matching cost".into()));
    }
    let all_queries: Vec<usize> = (0..n).collect();
    let all_objects: Vec<usize> = (0..k).collect();
    let (opt, mut assign) = solve(cost, &all_objects, &all_queries);
    let tol = 1e-12 * (1.0 + opt.abs());

    // Lexicographic refinement: for each object in order, move it to the
    // smallest free query that still achieves the optimum.
    let mut fixed_cost = 0.0;
    let mut used = vec![false; n];
    for j in 0..k {
        let current = assign[j];
        let rest_objects: Vec<usize> = (j + 1..k).collect();
        for i in 0..current {
            if used[i] {
                continue;
            }
            let rest_queries: Vec<usize> = (0..n).filter(|&q| !used[q] && q != i).collect();
            let (rest, rest_assign) = solve(cost, &rest_objects, &rest_queries);
            if fixed_cost + cost.at(i, j) + rest <= opt + tol {
                assign[j] = i;
                for (idx, &o) in rest_objects.iter().enumerate() {
                    assign[o] = rest_assign[idx];
                }
                break;
            }
        }
        used[assign[j]] = true;
        fixed_cost += cost.at(assign[j], j);
    }

    let mut pairs: Vec<(usize, usize)> = assign.iter().enumerate().map(|(o, &q)| (q, o)).collect();
    pairs.sort_unstable();
    let unmatched = (0..n).filter(|q| !used[*q]).collect();
    Ok(Matching { pairs, unmatched })
}

/// Shortest-augmenting-path assignment of `objects` to `queries` (both index
/// subsets of `cost`). Returns the optimal total and, per object position, the
/// chosen query index.
fn solve(cost: &Tensor<f64>, objects: &[usize], queries: &[usize]) -> (f64, Vec<usize>) {
    let (rows, cols) = (objects.len(), queries.len());
    if rows == 0 {
        return (0.0, Vec::new());
    }
    let c = |r: usize, col: usize| cost.at(queries[col - 1], objects[r - 1]);
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut visited = vec![false; cols + 1];
        loop {
            visited[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if !visited[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if visited[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assign[owner[j] - 1] = queries[j - 1];
        }
    }
    let total = assign
        .iter()
        .enumerate()
        .map(|(r, &q)| cost.at(q, objects[r]))
        .sum();
    (total, assign)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

/// Unweighted components summed over layers; `total` applies the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
    pub per_layer: Vec<LayerLoss>,
}

impl LossBreakdown {
    /// Element-wise mean over several breakdowns of equal depth.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let depth = items.first().map_or(0, |b| b.per_layer.len());
        let mut out = LossBreakdown {
            per_layer: vec![LayerLoss::default(); depth],
            ..Default::default()
        };
        for b in items {
            out.cls += b.cls / n;
            out.l1 += b.l1 / n;
            out.giou += b.giou / n;
            out.total += b.total / n;
            for (o, l) in out.per_layer.iter_mut().zip(&b.per_layer) {
                o.cls += l.cls / n;
                o.l1 += l.l1 / n;
                o.giou += l.giou / n;
                o.total += l.total / n;
            }
        }
        out
    }
}

const GIOU_FLOOR: f64 = 1e-9;

/// Set loss of one layer's predictions. The matching is computed on values
/// and treated as a constant by backward.
pub fn layer_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: &PredVars,
    scene: &Scene,
    w: &LossWeights,
) -> Result<(Var, LayerLoss)> {
    let values = pred.values(g);
    let cost = match_cost(&values, scene, w)?;
    let matching = hungarian(&cost)?;
    let [n, classes] = values.class_logits.dims2()?;
    let k = scene.len();

    let mut onehot = vec![T::zero(); n * classes];
    let mut weight_sum = 0.0;
    for (q, t) in matching.targets(n).into_iter().enumerate() {
        let (col, wt) = match t {
            Some(o) => (scene.classes[o], 1.0),
            None => (0, w.background),
        };
        onehot[q * classes + col] = T::lit(wt);
        weight_sum += wt;
    }
    let logp = g.log_softmax_rows(pred.class_logits)?;
    let onehot = g.constant(Tensor::new(&[n, classes], onehot)?);
    let picked = g.mul(logp, onehot)?;
    let picked = g.sum(picked);
    let ce = g.scale(picked, T::lit(-1.0 / weight_sum));

    let normalizer = T::lit(1.0 / k.max(1) as f64);
    let (l1, gl) = if k > 0 {
        let (qs, targets): (Vec<usize>, Vec<T>) = {
            let mut qs = Vec::with_capacity(k);
            let mut tb = Vec::with_capacity(4 * k);
            for &(q, o) in &matching.pairs {
                qs.push(q);
                tb.extend(scene.boxes[o].iter().map(|&v| T::lit(v)));
            }
            (qs, tb)
        };
        let matched = g.select_rows(pred.boxes, &qs)?;
        let target = g.constant(Tensor::new(&[k, 4], targets)?);
        let diff = g.sub(matched, target)?;
        let diff = g.abs(diff);
        let l1 = g.sum(diff);
        let l1 = g.scale(l1, normalizer);
        let gi = giou_rows(g, matched, target, T::lit(GIOU_FLOOR))?;
        let one_minus = g.neg(gi);
        let one_minus = g.add_scalar(one_minus, T::one());
        let gl = g.sum(one_minus);
        (Some(l1), Some(g.scale(gl, normalizer)))
    } else {
        (None, None)
    };

    let mut total = g.scale(ce, T::lit(w.cls));
    let mut rec = LayerLoss {
        cls: g.value(ce).item().as_f64(),
        ..Default::default()
    };
    if let (Some(l1), Some(gl)) = (l1, gl) {
        let a = g.scale(l1, T::lit(w.l1));
        let b = g.scale(gl, T::lit(w.giou));
        total = g.add(total, a)?;
        total = g.add(total, b)?;
        rec.l1 = g.value(l1).item().as_f64();
        rec.giou = g.value(gl).item().as_f64();
    }
    rec.total = g.value(total).item().as_f64();
    Ok((total, rec))
}

/// Deep-supervised set loss: the sum of `layer_loss` over all layers.
pub fn set_loss<T: Scalar>(
    g: &mut Graph<T>,
    preds: &[PredVars],
    scene: &Scene,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut total: Option<Var> = None;
    let mut out = LossBreakdown::default();
    for p in preds {
        let (l, rec) = layer_loss(g, p, scene, w)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
        out.cls += rec.cls;
        out.l1 += rec.l1;
        out.giou += rec.giou;
        out.per_layer.push(rec);
    }
    let total = total.ok_or_else(|| Error::Contract("set loss over zero layers".into()))?;
    out.total = g.value(total).item().as_f64();
    Ok((total, out))
}
