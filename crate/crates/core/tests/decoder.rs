#![allow(clippy::needless_range_loop)]

mod common;

use common::{randomize_routing, scene_and_patches, tiny_model, tiny_model_config, tiny_spec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use route_detr::decoder::{
    biased_self_attention, cross_attention, decoder_layer, encode_memory, forward, infer,
    initial_queries, predict_heads, AttnParams, HeadParams, Mode, Model, Prediction,
};
use route_detr::{Bound, Error, Graph, ParamStore, Tensor};

fn linear(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    (0..w.cols())
        .map(|k| {
            b.data()[k]
                + x.iter()
                    .enumerate()
                    .map(|(m, v)| v * w.at(m, k))
                    .sum::<f64>()
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn attn_store(d: usize, seed: u64) -> (ParamStore<f64>, AttnParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let mut lin = |name: &str| {
        let w = s.insert_uniform(format!("{name}_w"), &[d, d], d, &mut rng);
        let b = s.insert_uniform(format!("{name}_b"), &[d], d, &mut rng);
        (w, b)
    };
    let (wq, bq) = lin("q");
    let (wk, bk) = lin("k");
    let (wv, bv) = lin("v");
    let (wo, bo) = lin("o");
    (
        s,
        AttnParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        },
    )
}

fn self_attention(
    store: &ParamStore<f64>,
    p: &AttnParams,
    content: &Tensor<f64>,
    pos: &Tensor<f64>,
    heads: usize,
    bias: Option<Tensor<f64>>,
) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let mut b = Bound::new(store);
    let (c, ps) = (g.constant(content.clone()), g.constant(pos.clone()));
    let bias = bias.map(|t| g.constant(t));
    let out = biased_self_attention(&mut g, &mut b, p, c, ps, heads, bias).unwrap();
    let maps = out.maps.iter().map(|&m| g.value(m).clone()).collect();
    (g.value(out.out).clone(), maps)
}

#[test]
fn zero_bias_is_bit_identical_to_no_bias() {
    let (store, p) = attn_store(8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let content = common::rand_tensor(&mut rng, &[5, 8], 1.0);
    let pos = common::rand_tensor(&mut rng, &[5, 8], 1.0);
    let (plain, _) = self_attention(&store, &p, &content, &pos, 2, None);
    let (zero, _) = self_attention(&store, &p, &content, &pos, 2, Some(Tensor::zeros(&[5, 5])));
    assert_eq!(plain, zero);
}

#[test]
fn masking_bias_makes_each_query_attend_to_itself() {
    let (store, p) = attn_store(8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let content = common::rand_tensor(&mut rng, &[4, 8], 1.0);
    let pos = common::rand_tensor(&mut rng, &[4, 8], 1.0);
    let mut mask = Tensor::full(&[4, 4], -1e9);
    for i in 0..4 {
        mask.data_mut()[i * 4 + i] = 0.0;
    }
    let (out, maps) = self_attention(&store, &p, &content, &pos, 2, Some(mask));
    for m in &maps {
        assert_eq!(*m, Tensor::eye(4));
    }
    for i in 0..4 {
        let v = linear(content.row(i), store.get(p.wv), store.get(p.bv));
        let expect = linear(&v, store.get(p.wo), store.get(p.bo));
        for (a, e) in out.row(i).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn single_head_attention_matches_straight_line_oracle() {
    let (store, p) = attn_store(2, 5);
    let content = Tensor::new(&[2, 2], vec![0.4, -1.0, 1.3, 0.2]).unwrap();
    let pos = Tensor::new(&[2, 2], vec![0.1, 0.5, -0.3, 0.8]).unwrap();
    let bias = Tensor::new(&[2, 2], vec![0.0, -0.7, 1.1, 0.0]).unwrap();
    let (out, maps) = self_attention(&store, &p, &content, &pos, 1, Some(bias.clone()));

    let qk: Vec<Vec<f64>> = (0..2)
        .map(|i| {
            content
                .row(i)
                .iter()
                .zip(pos.row(i))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let q: Vec<Vec<f64>> = qk
        .iter()
        .map(|x| linear(x, store.get(p.wq), store.get(p.bq)))
        .collect();
    let k: Vec<Vec<f64>> = qk
        .iter()
        .map(|x| linear(x, store.get(p.wk), store.get(p.bk)))
        .collect();
    let v: Vec<Vec<f64>> = (0..2)
        .map(|i| linear(content.row(i), store.get(p.wv), store.get(p.bv)))
        .collect();
    for i in 0..2 {
        let logits: Vec<f64> = (0..2)
            .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt() + bias.at(i, j))
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let a: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let mixed = [
            a[0] * v[0][0] + a[1] * v[1][0],
            a[0] * v[0][1] + a[1] * v[1][1],
        ];
        let expect = linear(&mixed, store.get(p.wo), store.get(p.bo));
        for j in 0..2 {
            assert!((maps[0].at(i, j) - a[j]).abs() < 1e-10);
            assert!((out.at(i, j) - expect[j]).abs() < 1e-10);
        }
    }
}

#[test]
fn bias_shape_mismatch_is_a_dimension_error() {
    let (store, p) = attn_store(4, 6);
    let mut g = Graph::new();
    let mut b = Bound::new(&store);
    let c = g.constant(Tensor::zeros(&[3, 4]));
    let bias = g.constant(Tensor::zeros(&[2, 2]));
    let r = biased_self_attention(&mut g, &mut b, &p, c, c, 2, Some(bias));
    assert!(matches!(r, Err(Error::Dimension(_))));
}

fn one_token_model() -> Model<f64> {
    let spec = route_detr::synthdata::SceneSpec {
        image_size: 4,
        patch_size: 4,
        min_side: 1,
        max_side: 4,
        ..tiny_spec()
    };
    tiny_model(tiny_model_config(&spec), 8)
}

#[test]
fn single_memory_token_passes_its_value_through() {
    let model = one_token_model();
    let c = model.config.decoder;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let patches = common::rand_tensor(&mut rng, &[1, c.patch_dim], 1.0);
    let mut g = Graph::new();
    let mut b = Bound::new(&model.params);
    let mut mem = encode_memory(&mut g, &mut b, &model, &patches).unwrap();
    let token = g.value(mem.tokens).row(0).to_vec();
    let content = g.constant(common::rand_tensor(&mut rng, &[4, c.d_model], 1.0));
    let pos = g.constant(common::rand_tensor(&mut rng, &[4, c.d_model], 1.0));
    let p = model.layout.layers[0].cross_attn;
    let out = cross_attention(&mut g, &mut b, &p, content, pos, &mut mem, 0, c.heads).unwrap();
    let v = linear(&token, model.params.get(p.wv), model.params.get(p.bv));
    let expect = linear(&v, model.params.get(p.wo), model.params.get(p.bo));
    for i in 0..4 {
        for (a, e) in g.value(out.out).row(i).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_maps_are_row_stochastic() {
    let spec = tiny_spec();
    let mut model = tiny_model::<f64>(tiny_model_config(&spec), 10);
    randomize_routing(&mut model, 11);
    let (_, patches) = scene_and_patches::<f64>(&spec, 12);
    for mode in [Mode::Main, Mode::Aux] {
        let mut g = Graph::new();
        let mut b = Bound::new(&model.params);
        let out = forward(&mut g, &mut b, &model, &patches, mode).unwrap();
        for &m in out
            .self_attn_maps
            .iter()
            .chain(&out.cross_attn_maps)
            .flatten()
        {
            let t = g.value(m);
            for i in 0..t.rows() {
                let s: f64 = t.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12 && t.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn main_mode_equals_a_decoder_without_routing() {
    let spec = tiny_spec();
    let cfg = tiny_model_config(&spec);
    let mut routed = tiny_model::<f64>(cfg.clone(), 13);
    let plain = tiny_model::<f64>(
        route_detr::decoder::ModelConfig {
            routing_enabled: false,
            ..cfg
        },
        13,
    );
    assert!(plain.routing_param_ids().is_empty());
    let (_, patches) = scene_and_patches::<f64>(&spec, 14);
    let reference = infer(&plain, &patches, Mode::Main).unwrap();
    assert_eq!(infer(&routed, &patches, Mode::Main).unwrap(), reference);
    randomize_routing(&mut routed, 15);
    assert_eq!(infer(&routed, &patches, Mode::Main).unwrap(), reference);
    assert_eq!(infer(&plain, &patches, Mode::Aux).unwrap(), reference);
    assert_ne!(infer(&routed, &patches, Mode::Aux).unwrap(), reference);
}

#[test]
fn aux_mode_at_vanishing_magnitudes_matches_main() {
    let spec = tiny_spec();
    let mut cfg = tiny_model_config(&spec);
    cfg.routing.gamma_init = -30.0;
    let model = tiny_model::<f64>(cfg, 16);
    let (_, patches) = scene_and_patches::<f64>(&spec, 17);
    let mut maps = Vec::new();
    for mode in [Mode::Main, Mode::Aux] {
        let mut g = Graph::new();
        let mut b = Bound::new(&model.params);
        let out = forward(&mut g, &mut b, &model, &patches, mode).unwrap();
        let preds: Vec<Prediction<f64>> = out.preds.iter().map(|p| p.values(&g)).collect();
        let attn: Vec<Tensor<f64>> = out
            .self_attn_maps
            .iter()
            .flatten()
            .map(|&m| g.value(m).clone())
            .collect();
        maps.push((preds, attn));
    }
    let (main, aux) = (&maps[0], &maps[1]);
    for (a, m) in aux.1.iter().zip(&main.1) {
        assert!(a.max_abs_diff(m) < 1e-6);
    }
    for (a, m) in aux.0.iter().zip(&main.0) {
        assert!(a.boxes.max_abs_diff(&m.boxes) < 1e-6);
        assert!(a.class_logits.max_abs_diff(&m.class_logits) < 1e-6);
    }
}

#[test]
fn query_permutation_permutes_predictions() {
    let spec = tiny_spec();
    let model = tiny_model::<f64>(tiny_model_config(&spec), 18);
    let (_, patches) = scene_and_patches::<f64>(&spec, 19);
    let perm = [2, 0, 3, 1];
    let permute = |t: &Tensor<f64>| {
        let rows: Vec<&[f64]> = perm.iter().map(|&i| t.row(i)).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let mut permuted = model.clone();
    for id in [model.layout.query_content, model.layout.query_ref] {
        *permuted.params.get_mut(id) = permute(model.params.get(id));
    }
    let (base, _) = infer(&model, &patches, Mode::Main).unwrap();
    let (moved, _) = infer(&permuted, &patches, Mode::Main).unwrap();
    for (b, m) in base.iter().zip(&moved) {
        assert!(permute(&b.boxes).max_abs_diff(&m.boxes) < 1e-12);
        assert!(permute(&b.class_logits).max_abs_diff(&m.class_logits) < 1e-12);
    }
}

#[test]
fn zero_box_head_keeps_reference_boxes() {
    let spec = tiny_spec();
    let model: Model<f64> = Model::init(tiny_model_config(&spec), 20).unwrap();
    let (_, patches) = scene_and_patches::<f64>(&spec, 21);
    let mut g = Graph::new();
    let mut b = Bound::new(&model.params);
    let init = initial_queries(&mut g, &mut b, &model).unwrap();
    let refs = init.ref_boxes(&g);
    let mut mem = encode_memory(&mut g, &mut b, &model, &patches).unwrap();
    let out =
        route_detr::decoder::decoder_forward(&mut g, &mut b, &model, init, &mut mem, Mode::Main)
            .unwrap();
    assert_eq!(*g.value(out.preds[0].boxes), refs);
    // Every later layer starts from the previous layer's boxes, so nothing moves.
    assert_eq!(*g.value(out.last().boxes), refs);
}

#[test]
fn heads_match_scalar_oracle() {
    let mut s = ParamStore::<f64>::new();
    let t = |shape: &[usize], v: Vec<f64>| Tensor::new(shape, v).unwrap();
    let h = HeadParams {
        class_w: s.insert("cw", t(&[2, 3], vec![0.5, -0.2, 0.1, 0.3, 0.8, -0.6])),
        class_b: s.insert("cb", t(&[3], vec![0.05, 0.0, -0.1])),
        box_w1: s.insert("w1", t(&[2, 2], vec![1.0, -1.0, 0.5, 2.0])),
        box_b1: s.insert("b1", t(&[2], vec![0.1, -0.3])),
        box_w2: s.insert(
            "w2",
            t(&[2, 4], vec![0.2, -0.1, 0.3, 0.0, -0.4, 0.6, 0.1, 0.5]),
        ),
        box_b2: s.insert("b2", t(&[4], vec![0.0, 0.1, -0.2, 0.3])),
    };
    let q = t(&[2, 2], vec![0.7, -0.4, -1.2, 0.9]);
    let refs = t(&[2, 4], vec![0.0, 0.3, -1.0, 2.0, 1.5, -0.5, 0.2, -2.0]);
    let mut g = Graph::new();
    let mut b = Bound::new(&s);
    let (qv, rv) = (g.constant(q.clone()), g.constant(refs.clone()));
    let pred = predict_heads(&mut g, &mut b, &h, qv, rv)
        .unwrap()
        .values(&g);
    for i in 0..2 {
        let logits = linear(q.row(i), s.get(h.class_w), s.get(h.class_b));
        let hidden: Vec<f64> = linear(q.row(i), s.get(h.box_w1), s.get(h.box_b1))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let delta = linear(&hidden, s.get(h.box_w2), s.get(h.box_b2));
        for k in 0..3 {
            assert!((pred.class_logits.at(i, k) - logits[k]).abs() < 1e-12);
        }
        for k in 0..4 {
            assert!((pred.boxes.at(i, k) - sigmoid(delta[k] + refs.at(i, k))).abs() < 1e-12);
        }
    }

    let zero = s.insert("z", Tensor::zeros(&[2, 4]));
    let zb = s.insert("zb", Tensor::zeros(&[4]));
    let centered = HeadParams {
        box_w2: zero,
        box_b2: zb,
        ..h
    };
    let mut g = Graph::new();
    let mut b = Bound::new(&s);
    let qv = g.constant(q);
    let rv = g.constant(Tensor::zeros(&[2, 4]));
    let pred = predict_heads(&mut g, &mut b, &centered, qv, rv)
        .unwrap()
        .values(&g);
    assert!(pred.boxes.data().iter().all(|&v| v == 0.5));
}

#[test]
fn single_layer_is_one_block_plus_heads() {
    let spec = tiny_spec();
    let mut cfg = tiny_model_config(&spec);
    cfg.decoder.layers = 1;
    let model = tiny_model::<f64>(cfg, 22);
    let (_, patches) = scene_and_patches::<f64>(&spec, 23);
    let (preds, _) = infer(&model, &patches, Mode::Main).unwrap();

    let mut g = Graph::new();
    let mut b = Bound::new(&model.params);
    let mut mem = encode_memory(&mut g, &mut b, &model, &patches).unwrap();
    let init = initial_queries(&mut g, &mut b, &model).unwrap();
    let unused = Prediction {
        boxes: Tensor::zeros(&[0, 4]),
        class_logits: Tensor::zeros(&[0, 0]),
    };
    let lo = decoder_layer(
        &mut g,
        &mut b,
        &model,
        0,
        &init,
        &mut mem,
        Mode::Main,
        &unused,
    )
    .unwrap();
    assert_eq!(preds, vec![lo.pred.values(&g)]);
}

#[test]
fn boxes_stay_in_unit_square_and_forward_is_pure() {
    let spec = tiny_spec();
    let mut model = tiny_model::<f64>(tiny_model_config(&spec), 24);
    randomize_routing(&mut model, 25);
    let (_, patches) = scene_and_patches::<f64>(&spec, 26);
    for mode in [Mode::Main, Mode::Aux] {
        let first = infer(&model, &patches, mode).unwrap();
        assert_eq!(first, infer(&model, &patches, mode).unwrap());
        for p in &first.0 {
            assert!(p.boxes.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(p.class_logits.is_finite());
        }
    }
}

#[test]
fn gradients_reach_routing_only_through_aux() {
    let spec = tiny_spec();
    let model = tiny_model::<f64>(tiny_model_config(&spec), 27);
    let (_, patches) = scene_and_patches::<f64>(&spec, 28);
    for mode in [Mode::Main, Mode::Aux] {
        let mut g = Graph::new();
        let mut b = Bound::new(&model.params);
        let out = forward(&mut g, &mut b, &model, &patches, mode).unwrap();
        let last = out.last();
        let (l, bx) = (g.sum(last.class_logits), g.sum(last.boxes));
        let loss = g.add(l, bx).unwrap();
        g.backward(loss).unwrap();
        let grads = b.grads(&g);
        for id in model.routing_param_ids() {
            let nonzero = grads[id.index()]
                .as_ref()
                .is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
            assert_eq!(
                nonzero,
                mode == Mode::Aux,
                "{} in {mode:?}",
                model.params.name(id)
            );
        }
    }
}

fn checksum(preds: &[Prediction<f64>]) -> f64 {
    preds
        .iter()
        .flat_map(|p| p.boxes.data().iter().chain(p.class_logits.data()))
        .enumerate()
        .map(|(i, v)| v * (1.0 + (i % 17) as f64))
        .sum()
}

#[test]
fn forward_matches_recorded_golden_values() {
    let spec = tiny_spec();
    let mut model = tiny_model::<f64>(tiny_model_config(&spec), 29);
    randomize_routing(&mut model, 30);
    let (_, patches) = scene_and_patches::<f64>(&spec, 31);
    let main = checksum(&infer(&model, &patches, Mode::Main).unwrap().0);
    let aux = checksum(&infer(&model, &patches, Mode::Aux).unwrap().0);
    let golden = [GOLDEN_MAIN, GOLDEN_AUX];
    for (got, want) in [main, aux].into_iter().zip(golden) {
        assert!(
            (got - want).abs() < 1e-9 * want.abs().max(1.0),
            "checksum {got:.17e}, recorded {want:.17e}"
        );
    }
}

const GOLDEN_MAIN: f64 = 1.469_390_232_550_972e2;
const GOLDEN_AUX: f64 = 1.269_544_076_147_458_9e2;
