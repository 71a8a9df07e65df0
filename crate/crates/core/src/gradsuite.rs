//! The f64 gradient-check suite: every graph primitive, the routing pieces,
//! biased attention, the set loss and the full dual-branch objective on a
//! small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{set_loss, LossWeights};
use crate::boxes::giou_rows;
use crate::decoder::{
    biased_self_attention, decoder_forward, encode_memory, initial_queries, DecoderConfig, Mode,
    Model, ModelConfig,
};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::routing::{
    low_rank_delta, magnitudes, pairwise_gate, route_embed, routed_bias, RouteSwitch,
    RoutingConfig, RoutingParams,
};
use crate::synthdata::{render_tokens, Scene, SceneSpec};
use crate::tensor::Tensor;

type Builder = Box<dyn Fn(&mut Graph<f64>, &mut Bound<'_, f64>) -> Result<Var>>;

pub struct Case {
    pub label: String,
    pub params: ParamStore<f64>,
    pub loss: Builder,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values of random sign and magnitude in `[0.2, 1.5)`, clear of kinks at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// `Σ W ⊙ y` with fixed random `W`, so no output direction is left unchecked.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

fn case(
    label: &str,
    inputs: Vec<(&str, Tensor<f64>)>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let mut params = ParamStore::new();
    for (name, t) in inputs {
        params.insert(name, t);
    }
    let seed = label
        .bytes()
        .fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    Case {
        label: label.to_string(),
        params,
        loss: Box::new(move |g, b| {
            let vars: Vec<Var> = (0..b.store().len())
                .map(|i| b.var(g, crate::params::ParamId(i)))
                .collect();
            let y = f(g, &vars)?;
            probe(g, y, seed)
        }),
    }
}

fn primitive_cases() -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let mut t = |shape: &[usize]| random(&mut r, shape, -1.0, 1.0);
    let a34 = t(&[3, 4]);
    let b42 = t(&[4, 2]);
    let b54 = t(&[5, 4]);
    let x34 = t(&[3, 4]);
    let y34 = t(&[3, 4]);
    let bias4 = t(&[4]);
    let s = t(&[1, 1]);
    let gain = t(&[4]);
    let lnb = t(&[4]);
    let logits = t(&[3, 5]).map(|v| 3.0 * v);
    let mut r2 = ChaCha8Rng::seed_from_u64(99);
    let pos = random(&mut r2, &[3, 4], 0.3, 2.0);
    let unit = random(&mut r2, &[3, 4], 0.1, 0.9);
    let kinked = away_from_zero(&mut r2, &[3, 4]);
    // Distinct operands for min/max, separated by far more than the step.
    let lo = random(&mut r2, &[3, 4], -1.0, -0.1);
    let hi = random(&mut r2, &[3, 4], 0.1, 1.0);
    let mixed_a = Tensor::new(
        &[3, 4],
        lo.data()
            .iter()
            .zip(hi.data())
            .enumerate()
            .map(|(i, (l, h))| if i % 2 == 0 { *l } else { *h })
            .collect(),
    )
    .unwrap();
    let mixed_b = Tensor::new(
        &[3, 4],
        lo.data()
            .iter()
            .zip(hi.data())
            .enumerate()
            .map(|(i, (l, h))| if i % 2 == 0 { *h } else { *l })
            .collect(),
    )
    .unwrap();
    let pred_boxes = Tensor::from_rows(&[
        &[0.4, 0.5, 0.3, 0.2],
        &[0.2, 0.25, 0.1, 0.3],
        &[0.7, 0.6, 0.2, 0.2],
    ])
    .unwrap();

    vec![
        case("matmul", vec![("a", a34.clone()), ("b", b42)], |g, v| {
            g.matmul(v[0], v[1])
        }),
        case("matmul_nt", vec![("a", a34.clone()), ("b", b54)], |g, v| {
            g.matmul_nt(v[0], v[1])
        }),
        case("transpose", vec![("x", x34.clone())], |g, v| {
            g.transpose(v[0])
        }),
        case(
            "add",
            vec![("x", x34.clone()), ("y", y34.clone())],
            |g, v| g.add(v[0], v[1]),
        ),
        case(
            "sub",
            vec![("x", x34.clone()), ("y", y34.clone())],
            |g, v| g.sub(v[0], v[1]),
        ),
        case(
            "mul",
            vec![("x", x34.clone()), ("y", y34.clone())],
            |g, v| g.mul(v[0], v[1]),
        ),
        case(
            "div",
            vec![("x", x34.clone()), ("y", pos.clone())],
            |g, v| g.div(v[0], v[1]),
        ),
        case(
            "minimum",
            vec![("x", mixed_a.clone()), ("y", mixed_b.clone())],
            |g, v| g.minimum(v[0], v[1]),
        ),
        case("maximum", vec![("x", mixed_a), ("y", mixed_b)], |g, v| {
            g.maximum(v[0], v[1])
        }),
        case(
            "add_bias",
            vec![("x", x34.clone()), ("b", bias4.clone())],
            |g, v| g.add_bias(v[0], v[1]),
        ),
        case(
            "linear",
            vec![("x", x34.clone()), ("w", t(&[4, 3])), ("b", t(&[3]))],
            |g, v| g.linear(v[0], v[1], v[2]),
        ),
        case("scale", vec![("x", x34.clone())], |g, v| {
            Ok(g.scale(v[0], -1.7))
        }),
        case("add_scalar", vec![("x", x34.clone())], |g, v| {
            let y = g.add_scalar(v[0], 0.3);
            g.mul(y, y)
        }),
        case(
            "mul_scalar_var",
            vec![("x", x34.clone()), ("s", s)],
            |g, v| g.mul_scalar_var(v[0], v[1]),
        ),
        case("sigmoid", vec![("x", x34.map(|v| 3.0 * v))], |g, v| {
            Ok(g.sigmoid(v[0]))
        }),
        case("softplus", vec![("x", x34.map(|v| 4.0 * v))], |g, v| {
            Ok(g.softplus(v[0]))
        }),
        case("relu", vec![("x", kinked.clone())], |g, v| Ok(g.relu(v[0]))),
        case("abs", vec![("x", kinked)], |g, v| Ok(g.abs(v[0]))),
        case("exp", vec![("x", x34.clone())], |g, v| Ok(g.exp(v[0]))),
        case("log", vec![("x", pos)], |g, v| Ok(g.log(v[0]))),
        case("inverse_sigmoid", vec![("x", unit)], |g, v| {
            Ok(g.inverse_sigmoid(v[0], 1e-5))
        }),
        case("softmax_rows", vec![("x", logits.clone())], |g, v| {
            g.softmax_rows(v[0])
        }),
        case("log_softmax_rows", vec![("x", logits)], |g, v| {
            g.log_softmax_rows(v[0])
        }),
        case(
            "layer_norm",
            vec![("x", x34.map(|v| 2.0 * v)), ("gain", gain), ("bias", lnb)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case("concat", vec![("x", x34.clone()), ("y", a34)], |g, v| {
            g.concat(&[v[0], v[1], v[0]])
        }),
        case("slice_cols", vec![("x", x34.clone())], |g, v| {
            g.slice_cols(v[0], 1, 2)
        }),
        case("select_rows", vec![("x", x34.clone())], |g, v| {
            g.select_rows(v[0], &[2, 0, 2])
        }),
        case("sum", vec![("x", x34.clone())], |g, v| {
            let s = g.sum(v[0]);
            g.mul(s, s)
        }),
        case("mean", vec![("x", x34.clone())], |g, v| {
            let s = g.mean(v[0]);
            Ok(g.exp(s))
        }),
        case("detach", vec![("x", x34)], |g, v| {
            let d = g.detach(v[0]);
            let y = g.mul(v[0], d)?;
            g.add(y, v[0])
        }),
        case("giou_rows", vec![("b", pred_boxes)], |g, v| {
            let target = g.constant(
                Tensor::from_rows(&[
                    &[0.45, 0.5, 0.25, 0.25],
                    &[0.6, 0.7, 0.2, 0.1],
                    &[0.7, 0.62, 0.18, 0.22],
                ])
                .unwrap(),
            );
            giou_rows(g, v[0], target, 1e-9)
        }),
    ]
}

fn routing_cases() -> Vec<Case> {
    let cfg = RoutingConfig {
        d_z: 4,
        rank: 3,
        gate_rank: 5,
        gamma_init: 0.3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 4;
    let (d, dpos) = (6, 6);
    let queries = random(&mut rng, &[n, d], -1.0, 1.0);
    let pos = random(&mut rng, &[n, dpos], -1.0, 1.0);
    let descriptors = Tensor::from_rows(&[
        &[0.1, 0.8, -3.0],
        &[0.3, 0.2, -2.0],
        &[-0.2, 0.5, -4.0],
        &[0.05, 0.9, -2.5],
    ])
    .unwrap();
    let mut out = Vec::new();

    let store = |rng: &mut ChaCha8Rng| {
        let mut s = ParamStore::new();
        let p = RoutingParams::init(&mut s, "layer0", d + dpos, &cfg, rng);
        s.insert("queries", queries.clone());
        (s, p)
    };

    let (s, p) = store(&mut rng);
    let pos_c = pos.clone();
    out.push(Case {
        label: "route_embed+low_rank_delta".into(),
        params: s,
        loss: Box::new(move |g, b| {
            let q = b.var(g, b.store().id("queries").unwrap());
            let ps = g.constant(pos_c.clone());
            let z = route_embed(g, b, q, ps, &p)?;
            let (u, v) = (b.var(g, p.w_u_sup), b.var(g, p.w_v_sup));
            let delta = low_rank_delta(g, z, u, v)?;
            probe(g, delta, 1)
        }),
    });

    let (s, p) = store(&mut rng);
    let desc = descriptors.clone();
    out.push(Case {
        label: "pairwise_gate+magnitudes".into(),
        params: s,
        loss: Box::new(move |g, b| {
            let x = g.constant(desc.clone());
            let (wa, wb) = (b.var(g, p.w_a), b.var(g, p.w_b));
            let gate = pairwise_gate(g, x, wa, wb)?;
            let (rs, rd) = (b.var(g, p.gamma_sup), b.var(g, p.gamma_del));
            let (gs, gd) = magnitudes(g, rs, rd);
            let m = g.add(gs, gd)?;
            let y = g.mul_scalar_var(gate, m)?;
            probe(g, y, 2)
        }),
    });

    for (label, switch) in [
        ("routed_bias", RouteSwitch::default()),
        (
            "routed_bias[suppressor]",
            RouteSwitch {
                suppressor: true,
                delegator: false,
            },
        ),
        (
            "routed_bias[delegator]",
            RouteSwitch {
                suppressor: false,
                delegator: true,
            },
        ),
    ] {
        let (s, p) = store(&mut rng);
        let (pos_c, desc) = (pos.clone(), descriptors.clone());
        out.push(Case {
            label: label.into(),
            params: s,
            loss: Box::new(move |g, b| {
                let q = b.var(g, b.store().id("queries").unwrap());
                let ps = g.constant(pos_c.clone());
                let rb = routed_bias(g, b, q, ps, &desc, &p, switch)?;
                probe(g, rb.bias, 3)
            }),
        });
    }

    // Biased multi-head attention with a tracked bias.
    let mut s = ParamStore::new();
    let dm = 8;
    let attn = crate::decoder::AttnParams {
        wq: s.insert_uniform("wq", &[dm, dm], dm, &mut rng),
        bq: s.insert_uniform("bq", &[dm], dm, &mut rng),
        wk: s.insert_uniform("wk", &[dm, dm], dm, &mut rng),
        bk: s.insert_uniform("bk", &[dm], dm, &mut rng),
        wv: s.insert_uniform("wv", &[dm, dm], dm, &mut rng),
        bv: s.insert_uniform("bv", &[dm], dm, &mut rng),
        wo: s.insert_uniform("wo", &[dm, dm], dm, &mut rng),
        bo: s.insert_uniform("bo", &[dm], dm, &mut rng),
    };
    s.insert("content", random(&mut rng, &[n, dm], -1.0, 1.0));
    s.insert("bias", random(&mut rng, &[n, n], -2.0, 2.0));
    let pos_q = random(&mut rng, &[n, dm], -1.0, 1.0);
    out.push(Case {
        label: "biased_self_attention".into(),
        params: s,
        loss: Box::new(move |g, b| {
            let c = b.var(g, b.store().id("content").unwrap());
            let bias = b.var(g, b.store().id("bias").unwrap());
            let ps = g.constant(pos_q.clone());
            let o = biased_self_attention(g, b, &attn, c, ps, 2, Some(bias))?;
            probe(g, o.out, 4)
        }),
    });
    out
}

/// The small model of the end-to-end check: `n = 4` queries, `L = 2` layers.
pub fn small_model(switch: RouteSwitch) -> Result<(Model<f64>, SceneSpec)> {
    let spec = SceneSpec {
        image_size: 16,
        patch_size: 4,
        classes: 2,
        min_objects: 1,
        max_objects: 3,
        min_side: 3,
        max_side: 8,
        ..Default::default()
    };
    let config = ModelConfig {
        decoder: DecoderConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            queries: 4,
            classes: spec.classes,
            d_ffn: 16,
            encoder_layers: 1,
            grid: spec.grid(),
            patch_dim: spec.patch_dim(),
        },
        routing: RoutingConfig {
            d_z: 4,
            rank: 3,
            gate_rank: 4,
            gamma_init: 0.2,
            ..Default::default()
        },
        routing_enabled: true,
        switch,
        routed_layers: Vec::new(),
    };
    let mut model = Model::<f64>::init(config, 31)?;
    // Break the zero-initialized box head so every parameter has a live path.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in ["head.box_w2", "head.box_b2"] {
        let t = model.params.by_name_mut(name)?;
        *t = random(&mut rng, t.shape(), -0.3, 0.3);
    }
    Ok((model, spec))
}

pub fn small_scene() -> Scene {
    Scene {
        seed: 0,
        boxes: vec![[0.3, 0.35, 0.25, 0.3], [0.7, 0.6, 0.3, 0.2]],
        classes: vec![1, 2],
    }
}

/// `L_main + α L_aux` on the small model, as one graph.
pub fn dual_branch_case(alpha: f64, switch: RouteSwitch) -> Result<Case> {
    let (model, spec) = small_model(switch)?;
    let scene = small_scene();
    let patches: Tensor<f64> = render_tokens(&scene, &spec);
    let params = model.params.clone();
    let weights = LossWeights::default();
    Ok(Case {
        label: format!("dual_branch_loss[alpha={alpha}]"),
        params,
        loss: Box::new(move |g, b| {
            let mut mem = encode_memory(g, b, &model, &patches)?;
            let init = initial_queries(g, b, &model)?;
            let main = decoder_forward(g, b, &model, init, &mut mem, Mode::Main)?;
            let (lm, _) = set_loss(g, &main.preds, &scene, &weights)?;
            let aux = decoder_forward(g, b, &model, init, &mut mem, Mode::Aux)?;
            let (la, _) = set_loss(g, &aux.preds, &scene, &weights)?;
            let la = g.scale(la, alpha);
            g.add(lm, la)
        }),
    })
}

pub fn all_cases() -> Result<Vec<Case>> {
    let mut cases = primitive_cases();
    cases.extend(routing_cases());
    cases.push(dual_branch_case(0.7, RouteSwitch::default())?);
    Ok(cases)
}

pub fn run_case(c: &Case, opts: GradCheckOptions) -> Result<GradCheckReport> {
    grad_check(&c.label, &c.loss, &c.params, opts)
}

pub fn run_suite(opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    all_cases()?.iter().map(|c| run_case(c, opts)).collect()
}
