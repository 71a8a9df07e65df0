#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use route_detr::config::RunConfig;
use route_detr::decoder::{Model, ModelConfig};
use route_detr::routing::RoutingConfig;
use route_detr::synthdata::{generate_scene, render_tokens, Scene, SceneSpec};
use route_detr::{ParamStore, Scalar, Tensor};

pub fn tiny_spec() -> SceneSpec {
    SceneSpec {
        image_size: 16,
        patch_size: 4,
        classes: 2,
        min_objects: 1,
        max_objects: 3,
        min_side: 3,
        max_side: 8,
        ..Default::default()
    }
}

pub fn tiny_model_config(spec: &SceneSpec) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.decoder.layers = 2;
    cfg.decoder.heads = 2;
    cfg.decoder.d_model = 8;
    cfg.decoder.queries = 4;
    cfg.decoder.d_ffn = 16;
    cfg.decoder.classes = spec.classes;
    cfg.decoder.grid = spec.grid();
    cfg.decoder.patch_dim = spec.patch_dim();
    cfg.routing = RoutingConfig {
        d_z: 4,
        rank: 3,
        gate_rank: 4,
        gamma_init: 0.3,
        ..Default::default()
    };
    cfg
}

/// Model with a non-trivial box head so refinement actually moves boxes.
pub fn tiny_model<T: Scalar>(cfg: ModelConfig, seed: u64) -> Model<T> {
    let mut model = Model::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0C5);
    let h = model.layout.heads;
    for id in [h.box_w2, h.box_b2] {
        randomize(&mut model.params, id, 0.3, &mut rng);
    }
    model
}

pub fn randomize<T: Scalar>(
    store: &mut ParamStore<T>,
    id: route_detr::ParamId,
    scale: f64,
    rng: &mut ChaCha8Rng,
) {
    let t = store.get_mut(id);
    for v in t.data_mut() {
        *v = T::lit(rng.gen_range(-scale..scale));
    }
}

pub fn randomize_routing<T: Scalar>(model: &mut Model<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.routing_param_ids() {
        randomize(&mut model.params, id, 3.0, &mut rng);
    }
}

pub fn scene_and_patches<T: Scalar>(spec: &SceneSpec, seed: u64) -> (Scene, Tensor<T>) {
    let scene = generate_scene(spec, seed);
    let patches = render_tokens(&scene, spec);
    (scene, patches)
}

/// A small, fast run configuration for training tests.
pub fn tiny_run(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("image_size", "16"),
        ("patch_size", "4"),
        ("classes", "2"),
        ("min_objects", "1"),
        ("max_objects", "3"),
        ("min_side", "3"),
        ("max_side", "8"),
        ("layers", "2"),
        ("heads", "2"),
        ("d_model", "8"),
        ("queries", "4"),
        ("d_ffn", "16"),
        ("d_z", "4"),
        ("rank", "3"),
        ("gate_rank", "4"),
        ("batch_size", "3"),
        ("train_scenes", "12"),
        ("eval_scenes", "6"),
        ("eval_interval", "4"),
        ("lr", "0.003"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.set("steps", &steps.to_string()).unwrap();
    cfg
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}
