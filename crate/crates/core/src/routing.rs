//! Pairwise query routing: route embeddings, low-rank suppressor and
//! delegator deltas, descriptor-driven bilinear gating, signed magnitudes
//! and the combined self-attention bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{cosine, softmax_slice, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    /// Route-embedding width.
    pub d_z: usize,
    /// Rank of the suppressor/delegator deltas.
    pub rank: usize,
    /// Rank of the bilinear gate.
    pub gate_rank: usize,
    /// Added to the box area inside the log.
    pub descriptor_eps: f64,
    /// Initial value of both raw magnitudes.
    pub gamma_init: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            d_z: 16,
            rank: 16,
            gate_rank: 32,
            descriptor_eps: 1e-7,
            gamma_init: -2.0,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 || self.rank == 0 || self.gate_rank == 0 {
            return Err(Error::Config(format!(
                "routing widths must be positive (d_z={}, r={}, r_g={})",
                self.d_z, self.rank, self.gate_rank
            )));
        }
        Ok(())
    }
}

/// Which route terms enter the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteSwitch {
    pub suppressor: bool,
    pub delegator: bool,
}

impl Default for RouteSwitch {
    fn default() -> Self {
        Self {
            suppressor: true,
            delegator: true,
        }
    }
}

/// Zero-norm guard in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;

/// Parameter handles of one layer's routing module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingParams {
    pub phi_w: ParamId,
    pub phi_b: ParamId,
    pub w_u_sup: ParamId,
    pub w_v_sup: ParamId,
    pub w_u_del: ParamId,
    pub w_v_del: ParamId,
    pub w_a: ParamId,
    pub w_b: ParamId,
    pub gamma_sup: ParamId,
    pub gamma_del: ParamId,
}

/// Names of the routing tensors, in registration order.
pub const ROUTING_PARAM_NAMES: [&str; 10] = [
    "phi_w",
    "phi_b",
    "w_u_sup",
    "w_v_sup",
    "w_u_del",
    "w_v_del",
    "w_a",
    "w_b",
    "gamma_sup",
    "gamma_del",
];

impl RoutingParams {
    /// Registers a fresh parameter set under `{prefix}.routing.*`.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        cfg: &RoutingConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let name = |p: &str| format!("{prefix}.routing.{p}");
        let (dz, r, rg) = (cfg.d_z, cfg.rank, cfg.gate_rank);
        Self {
            phi_w: store.insert_uniform(name("phi_w"), &[d_in, dz], d_in, rng),
            phi_b: store.insert_uniform(name("phi_b"), &[dz], d_in, rng),
            w_u_sup: store.insert_uniform(name("w_u_sup"), &[dz, r], dz, rng),
            w_v_sup: store.insert_uniform(name("w_v_sup"), &[dz, r], dz, rng),
            w_u_del: store.insert_uniform(name("w_u_del"), &[dz, r], dz, rng),
            w_v_del: store.insert_uniform(name("w_v_del"), &[dz, r], dz, rng),
            w_a: store.insert_uniform(name("w_a"), &[3, rg], 3, rng),
            w_b: store.insert_uniform(name("w_b"), &[3, rg], 3, rng),
            gamma_sup: store.insert(name("gamma_sup"), Tensor::scalar(T::lit(cfg.gamma_init))),
            gamma_del: store.insert(name("gamma_del"), Tensor::scalar(T::lit(cfg.gamma_init))),
        }
    }

    /// Looks up an existing set registered under `{prefix}.routing.*`.
    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let id = |p: &str| {
            let name = format!("{prefix}.routing.{p}");
            store
                .id(&name)
                .ok_or_else(|| Error::Contract(format!("missing routing parameter {name}")))
        };
        Ok(Self {
            phi_w: id("phi_w")?,
            phi_b: id("phi_b")?,
            w_u_sup: id("w_u_sup")?,
            w_v_sup: id("w_v_sup")?,
            w_u_del: id("w_u_del")?,
            w_v_del: id("w_v_del")?,
            w_a: id("w_a")?,
            w_b: id("w_b")?,
            gamma_sup: id("gamma_sup")?,
            gamma_del: id("gamma_del")?,
        })
    }

    pub fn ids(&self) -> [ParamId; 10] {
        [
            self.phi_w,
            self.phi_b,
            self.w_u_sup,
            self.w_v_sup,
            self.w_u_del,
            self.w_v_del,
            self.w_a,
            self.w_b,
            self.gamma_sup,
            self.gamma_del,
        ]
    }
}

/// Graph handles of every intermediate of the routed bias.
#[derive(Debug, Clone, Copy)]
pub struct RoutedBiasVars {
    pub z: Var,
    pub delta_sup: Var,
    pub delta_del: Var,
    pub descriptors: Var,
    pub p_sup: Var,
    pub p_del: Var,
    pub gamma_sup: Var,
    pub gamma_del: Var,
    pub bias: Var,
}

/// Values of the routed bias and its intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedBias<T: Scalar> {
    pub z: Tensor<T>,
    pub delta_sup: Tensor<T>,
    pub delta_del: Tensor<T>,
    pub descriptors: Tensor<T>,
    pub p_sup: Tensor<T>,
    pub gamma_sup: T,
    pub gamma_del: T,
    pub bias: Tensor<T>,
}

impl RoutedBiasVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> RoutedBias<T> {
        RoutedBias {
            z: g.value(self.z).clone(),
            delta_sup: g.value(self.delta_sup).clone(),
            delta_del: g.value(self.delta_del).clone(),
            descriptors: g.value(self.descriptors).clone(),
            p_sup: g.value(self.p_sup).clone(),
            gamma_sup: g.value(self.gamma_sup).item(),
            gamma_del: g.value(self.gamma_del).item(),
            bias: g.value(self.bias).clone(),
        }
    }
}

/// `Z = φ([q ∥ pos])` with an affine `φ`.
pub fn route_embed<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    queries: Var,
    pos: Var,
    p: &RoutingParams,
) -> Result<Var> {
    let w = b.var(g, p.phi_w);
    let bias = b.var(g, p.phi_b);
    let d_in = g.shape(w)[0];
    let qp = g.concat(&[queries, pos])?;
    if g.value(qp).cols() != d_in {
        return Err(Error::Dimension(format!(
            "route_embed: [q ∥ pos] has width {} but φ expects {}",
            g.value(qp).cols(),
            d_in
        )));
    }
    g.linear(qp, w, bias)
}

/// `Δ = (Z W_U)(Z W_V)ᵀ`.
pub fn low_rank_delta<T: Scalar>(g: &mut Graph<T>, z: Var, w_u: Var, w_v: Var) -> Result<Var> {
    let u = g.matmul(z, w_u)?;
    let v = g.matmul(z, w_v)?;
    g.matmul_nt(u, v)
}

/// Per-query descriptors `[s, c, g]`: mean cosine similarity to the other
/// queries, the top foreground probability and the log box area.
///
/// Class index 0 of `class_logits` is background. The result is a plain
/// tensor; callers feed it to the graph as a constant.
pub fn compute_descriptors<T: Scalar>(
    queries: &Tensor<T>,
    class_logits: &Tensor<T>,
    boxes: &Tensor<T>,
    area_eps: f64,
) -> Result<Tensor<T>> {
    let [n, _] = queries.dims2()?;
    let [nl, classes] = class_logits.dims2()?;
    let [nb, four] = boxes.dims2()?;
    if nl != n || nb != n || four != 4 {
        return Err(Error::Dimension(format!(
            "descriptors: queries {:?}, logits {:?}, boxes {:?}",
            queries.shape(),
            class_logits.shape(),
            boxes.shape()
        )));
    }
    if classes < 2 {
        return Err(Error::Dimension(
            "descriptors need at least one foreground class".into(),
        ));
    }
    let eps = T::lit(COSINE_EPS);
    let mut out = Vec::with_capacity(n * 3);
    let mut probs = vec![T::zero(); classes];
    for i in 0..n {
        let s = if n > 1 {
            let mut acc = T::zero();
            for j in 0..n {
                if j != i {
                    acc = acc + cosine(queries.row(i), queries.row(j), eps);
                }
            }
            acc / T::lit((n - 1) as f64)
        } else {
            T::zero()
        };
        softmax_slice(class_logits.row(i), &mut probs);
        let c = probs[1..].iter().fold(T::zero(), |m, &p| m.max(p));
        let bx = boxes.row(i);
        let area = bx[2].max(T::zero()) * bx[3].max(T::zero());
        let geo = (area + T::lit(area_eps)).ln();
        out.extend([s, c, geo]);
    }
    Tensor::new(&[n, 3], out)
}

/// `P_sup[i,j] = σ((x_i W_a)·(x_j W_b))`.
pub fn pairwise_gate<T: Scalar>(g: &mut Graph<T>, x: Var, w_a: Var, w_b: Var) -> Result<Var> {
    if g.value(x).cols() != 3 {
        return Err(Error::Dimension(format!(
            "gate descriptors must have width 3, got {:?}",
            g.shape(x)
        )));
    }
    let a = g.matmul(x, w_a)?;
    let bb = g.matmul(x, w_b)?;
    let logits = g.matmul_nt(a, bb)?;
    Ok(g.sigmoid(logits))
}

/// `(γ_sup, γ_del) = (−softplus(γ̃_sup), +softplus(γ̃_del))`.
pub fn magnitudes<T: Scalar>(g: &mut Graph<T>, raw_sup: Var, raw_del: Var) -> (Var, Var) {
    let s = g.softplus(raw_sup);
    let sup = g.neg(s);
    let del = g.softplus(raw_del);
    (sup, del)
}

/// Full routing pipeline producing the `n×n` bias with a zero diagonal.
///
/// `descriptors` must already be detached (a plain tensor).
pub fn routed_bias<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    queries: Var,
    pos: Var,
    descriptors: &Tensor<T>,
    p: &RoutingParams,
    switch: RouteSwitch,
) -> Result<RoutedBiasVars> {
    let n = g.value(queries).rows();
    if g.value(pos).rows() != n || descriptors.rows() != n {
        return Err(Error::Dimension(format!(
            "routed_bias: {} queries, {} positions, {} descriptors",
            n,
            g.value(pos).rows(),
            descriptors.rows()
        )));
    }
    let z = route_embed(g, b, queries, pos, p)?;
    let (u_sup, v_sup) = (b.var(g, p.w_u_sup), b.var(g, p.w_v_sup));
    let (u_del, v_del) = (b.var(g, p.w_u_del), b.var(g, p.w_v_del));
    let delta_sup = low_rank_delta(g, z, u_sup, v_sup)?;
    let delta_del = low_rank_delta(g, z, u_del, v_del)?;

    let x = g.constant(descriptors.clone());
    let (w_a, w_b) = (b.var(g, p.w_a), b.var(g, p.w_b));
    let p_sup = pairwise_gate(g, x, w_a, w_b)?;
    let neg = g.neg(p_sup);
    let p_del = g.add_scalar(neg, T::one());

    let (raw_sup, raw_del) = (b.var(g, p.gamma_sup), b.var(g, p.gamma_del));
    let (gamma_sup, gamma_del) = magnitudes(g, raw_sup, raw_del);

    let sup_term = {
        let scaled = g.mul_scalar_var(delta_sup, gamma_sup)?;
        g.mul(p_sup, scaled)?
    };
    let del_term = {
        let scaled = g.mul_scalar_var(delta_del, gamma_del)?;
        g.mul(p_del, scaled)?
    };
    let combined = match (switch.suppressor, switch.delegator) {
        (true, true) => g.add(sup_term, del_term)?,
        (true, false) => sup_term,
        (false, true) => del_term,
        (false, false) => g.scale(sup_term, T::zero()),
    };
    let mut mask = Tensor::ones(&[n, n]);
    for i in 0..n {
        mask.data_mut()[i * n + i] = T::zero();
    }
    let mask = g.constant(mask);
    let bias = g.mul(combined, mask)?;
    Ok(RoutedBiasVars {
        z,
        delta_sup,
        delta_del,
        descriptors: x,
        p_sup,
        p_del,
        gamma_sup,
        gamma_del,
        bias,
    })
}

/// Evaluates the routed bias on plain tensors, outside any training graph.
pub fn routed_bias_values<T: Scalar>(
    store: &ParamStore<T>,
    p: &RoutingParams,
    queries: &Tensor<T>,
    pos: &Tensor<T>,
    class_logits: &Tensor<T>,
    boxes: &Tensor<T>,
    cfg: &RoutingConfig,
    switch: RouteSwitch,
) -> Result<RoutedBias<T>> {
    let descriptors = compute_descriptors(queries, class_logits, boxes, cfg.descriptor_eps)?;
    let mut g = Graph::new();
    let mut b = Bound::new(store);
    let q = g.constant(queries.clone());
    let ps = g.constant(pos.clone());
    let vars = routed_bias(&mut g, &mut b, q, ps, &descriptors, p, switch)?;
    Ok(vars.values(&g))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::softplus;

    fn store(d_in: usize, cfg: &RoutingConfig, seed: u64) -> (ParamStore<f64>, RoutingParams) {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = RoutingParams::init(&mut s, "layer0", d_in, cfg, &mut rng);
        (s, p)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn naming_follows_layer_prefix() {
        let (s, p) = store(8, &RoutingConfig::default(), 0);
        assert_eq!(s.name(p.gamma_del), "layer0.routing.gamma_del");
        assert_eq!(RoutingParams::lookup(&s, "layer0").unwrap(), p);
        assert!(RoutingParams::lookup(&s, "layer1").is_err());
    }

    #[test]
    fn zero_phi_gives_zero_embeddings_and_bias() {
        let cfg = RoutingConfig {
            d_z: 4,
            rank: 2,
            gate_rank: 3,
            ..Default::default()
        };
        let (mut s, p) = store(4, &cfg, 1);
        *s.get_mut(p.phi_w) = Tensor::zeros(&[4, 4]);
        *s.get_mut(p.phi_b) = Tensor::zeros(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_tensor(&mut rng, &[3, 2]);
        let pos = rand_tensor(&mut rng, &[3, 2]);
        let logits = rand_tensor(&mut rng, &[3, 3]);
        let boxes = Tensor::full(&[3, 4], 0.3);
        let rb = routed_bias_values(
            &s,
            &p,
            &q,
            &pos,
            &logits,
            &boxes,
            &cfg,
            RouteSwitch::default(),
        )
        .unwrap();
        assert!(rb.z.data().iter().all(|&v| v == 0.0));
        assert!(rb.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let cfg = RoutingConfig::default();
        let (s, p) = store(8, &cfg, 1);
        let mut g = Graph::new();
        let mut b = Bound::new(&s);
        let q = g.constant(Tensor::zeros(&[3, 3]));
        let pos = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(
            route_embed(&mut g, &mut b, q, pos, &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn descriptors_edge_cases() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        let unit = Tensor::new(&[2, 4], vec![0.5, 0.5, 1.0, 1.0, 0.5, 0.5, 1.0, 1.0]).unwrap();

        let same = Tensor::new(&[2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let x = compute_descriptors(&same, &logits, &unit, 1e-7).unwrap();
        assert!((x.at(0, 0) - 1.0).abs() < 1e-12 && (x.at(1, 0) - 1.0).abs() < 1e-12);
        assert!((x.at(0, 2) - (1.0f64 + 1e-7).ln()).abs() < 1e-20);
        assert!((x.at(0, 1) - 1.0 / 3.0).abs() < 1e-15);

        let ortho = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let x = compute_descriptors(&ortho, &logits, &unit, 1e-7).unwrap();
        assert_eq!((x.at(0, 0), x.at(1, 0)), (0.0, 0.0));

        let zero = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let x = compute_descriptors(&zero, &logits, &unit, 1e-7).unwrap();
        assert_eq!(x.at(0, 0), 0.0);

        let single = compute_descriptors(
            &Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(),
            &Tensor::zeros(&[1, 3]),
            &Tensor::full(&[1, 4], 0.5),
            1e-7,
        )
        .unwrap();
        assert_eq!(single.at(0, 0), 0.0);
    }

    #[test]
    fn magnitudes_signs_and_limits() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(0.0));
        let (s, d) = magnitudes(&mut g, a, a);
        assert!((g.value(s).item() + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g.value(d).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let lo = g.constant(Tensor::scalar(-30.0));
        let (s, d) = magnitudes(&mut g, lo, lo);
        let (sv, dv) = (g.value(s).item(), g.value(d).item());
        assert!(sv < 0.0 && sv > -1e-13);
        assert!(dv > 0.0 && dv < 1e-13);

        // softplus(5) = 5 + ln(1 + e^-5); series oracle for ln(1+u).
        let u = (-5.0f64).exp();
        let series: f64 = (1..30)
            .map(|k| (-1.0f64).powi(k + 1) * u.powi(k) / k as f64)
            .sum();
        assert!((softplus(5.0) - (5.0 + series)).abs() < 1e-14);
        assert!((softplus(5.0f64) - 5.00672).abs() < 1e-5);
    }

    #[test]
    fn zero_gate_weights_give_half() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            Tensor::new(
                &[3, 3],
                vec![0.2, 0.9, -1.0, 0.5, 0.1, -2.0, -0.3, 0.7, -0.5],
            )
            .unwrap(),
        );
        let wa = g.constant(Tensor::zeros(&[3, 4]));
        let wb = g.constant(Tensor::full(&[3, 4], 0.7));
        let p = pairwise_gate(&mut g, x, wa, wb).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_is_asymmetric_when_factors_differ() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let wa = g.constant(Tensor::new(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap());
        let wb = g.constant(Tensor::new(&[3, 1], vec![0.0, 2.0, 0.0]).unwrap());
        let p = pairwise_gate(&mut g, x, wa, wb).unwrap();
        let v = g.value(p);
        assert!((v.at(0, 1) - v.at(1, 0)).abs() > 0.3);
    }

    #[test]
    fn bias_vanishes_at_very_negative_magnitudes() {
        let cfg = RoutingConfig {
            d_z: 6,
            rank: 3,
            gate_rank: 4,
            gamma_init: -30.0,
            ..Default::default()
        };
        let (s, p) = store(8, &cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = rand_tensor(&mut rng, &[5, 4]);
        let pos = rand_tensor(&mut rng, &[5, 4]);
        let logits = rand_tensor(&mut rng, &[5, 3]);
        let boxes = Tensor::full(&[5, 4], 0.2);
        let rb = routed_bias_values(
            &s,
            &p,
            &q,
            &pos,
            &logits,
            &boxes,
            &cfg,
            RouteSwitch::default(),
        )
        .unwrap();
        assert!(rb.bias.data().iter().all(|v| v.abs() < 1e-12));
        for i in 0..5 {
            assert_eq!(rb.bias.at(i, i), 0.0);
        }
    }
}
