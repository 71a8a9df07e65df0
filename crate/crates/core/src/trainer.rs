//! Dual-branch training: `L = L_main + α_t · L_aux` with a cosine warm-up of α.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{set_loss, LossBreakdown, LossWeights};
use crate::config::RunConfig;
use crate::decoder::{
    decoder_forward, encode_memory, infer, initial_queries, Mode, Model, Prediction,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{report, MetricsReport};
use crate::optim::{AdamWConfig, OptimState};
use crate::params::Bound;
use crate::synthdata::{generate, render_tokens, Scene, SceneSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub warmup_frac: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// The learning rate is multiplied by `lr_drop_factor` from
    /// `round(lr_drop_frac · steps)` on.
    pub lr_drop_frac: f64,
    pub lr_drop_factor: f64,
    /// Steps between evaluation records; 0 disables evaluation.
    pub eval_interval: u64,
    pub eval_scenes: usize,
    /// Size of the generated training set when no dataset file is given.
    pub train_scenes: usize,
    /// Seed of the held-out evaluation scenes.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            warmup_frac: 0.5,
            alpha_min: 0.0,
            alpha_max: 1.0,
            lr: 2e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            seed: 0,
            lr_drop_frac: 0.9,
            lr_drop_factor: 0.1,
            eval_interval: 250,
            eval_scenes: 128,
            train_scenes: 512,
            eval_seed: 1_000_003,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=self.alpha_max).contains(&self.alpha_min) {
            return bad(format!(
                "need 0 <= alpha_min <= alpha_max, got {} and {}",
                self.alpha_min, self.alpha_max
            ));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac <= 1.0) {
            return bad(format!(
                "warmup_frac must lie in (0, 1], got {}",
                self.warmup_frac
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.lr_drop_factor > 0.0) {
            return bad("lr and lr_drop_factor must be positive, weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_frac * self.steps as f64
    }

    pub fn lr_drop_step(&self) -> u64 {
        (self.lr_drop_frac * self.steps as f64).round() as u64
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        if t >= self.lr_drop_step() {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// `α_min + (α_max − α_min)(1 − cos(π min(t/T_w, 1)))/2` with `T_w = warmup_frac · steps`.
pub fn alpha_schedule(t: u64, cfg: &TrainConfig) -> f64 {
    let tw = cfg.warmup_steps();
    let progress = if tw > 0.0 {
        (t as f64 / tw).min(1.0)
    } else {
        1.0
    };
    if progress >= 1.0 {
        return cfg.alpha_max;
    }
    let a = cfg.alpha_min + (cfg.alpha_max - cfg.alpha_min) * (1.0 - (PI * progress).cos()) / 2.0;
    a.clamp(cfg.alpha_min, cfg.alpha_max)
}

/// Scenes with their rendered patch tokens.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub scenes: Vec<Scene>,
    pub patches: Vec<Tensor<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(scenes: Vec<Scene>, spec: &SceneSpec) -> Self {
        let patches = scenes.iter().map(|s| render_tokens(s, spec)).collect();
        Self { scenes, patches }
    }

    pub fn generate(spec: &SceneSpec, count: usize) -> Result<Self> {
        Ok(Self::new(generate(spec, count)?, spec))
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; the word position is a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// One JSON-lines record per evaluation interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub alpha: f64,
    /// Mean total loss of each branch over the steps since the previous record.
    #[serde(rename = "L_main")]
    pub l_main: f64,
    #[serde(rename = "L_aux")]
    pub l_aux: f64,
    /// Main branch, held-out scenes.
    #[serde(rename = "AP")]
    pub ap: f64,
    pub ap50: f64,
    pub duplicate_rate: f64,
    pub mean_query_cos: f64,
    /// Aux branch on the same scenes.
    pub aux_ap: f64,
    pub aux_duplicate_rate: f64,
}

/// Running loss sums between two records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub steps: u64,
    pub main_sum: f64,
    pub aux_sum: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub config: RunConfig,
    pub model: Model<T>,
    pub optim: OptimState<T>,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub interval: IntervalStats,
    pub history: Vec<MetricRecord>,
}

/// Stream used for batch sampling, distinct from every initialization stream.
const BATCH_STREAM: u64 = 7;

impl<T: Scalar> TrainState<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone(), config.train.seed)?;
        let optim = OptimState::new(&model.params, config.train.adamw());
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(BATCH_STREAM);
        Ok(Self {
            config,
            model,
            optim,
            step: 0,
            rng,
            interval: IntervalStats::default(),
            history: Vec::new(),
        })
    }

    pub fn alpha(&self) -> f64 {
        alpha_schedule(self.step, &self.config.train)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.train.steps
    }
}

/// Losses and parameter gradients of one scene.
#[derive(Debug, Clone)]
pub struct SceneGrads<T: Scalar> {
    pub main: LossBreakdown,
    /// Equal to `main` when the model has no routing.
    pub aux: LossBreakdown,
    pub grads: Vec<Option<Tensor<T>>>,
}

/// Builds both branches over one shared memory in a single graph and
/// backpropagates `L_main + α · L_aux`. Without routing the aux branch is the
/// main branch and is not added to the objective.
pub fn scene_gradients<T: Scalar>(
    model: &Model<T>,
    patches: &Tensor<T>,
    scene: &Scene,
    weights: &LossWeights,
    alpha: f64,
) -> Result<SceneGrads<T>> {
    let mut g = Graph::new();
    let mut b = Bound::new(&model.params);
    let mut mem = encode_memory(&mut g, &mut b, model, patches)?;
    let init = initial_queries(&mut g, &mut b, model)?;
    let main_out = decoder_forward(&mut g, &mut b, model, init, &mut mem, Mode::Main)?;
    let (main_loss, main) = set_loss(&mut g, &main_out.preds, scene, weights)?;
    let (total, aux) = if model.config.routing_enabled {
        let aux_out = decoder_forward(&mut g, &mut b, model, init, &mut mem, Mode::Aux)?;
        let (aux_loss, aux) = set_loss(&mut g, &aux_out.preds, scene, weights)?;
        let weighted = g.scale(aux_loss, T::lit(alpha));
        (g.add(main_loss, weighted)?, aux)
    } else {
        (main_loss, main.clone())
    };
    if !main.total.is_finite() || !aux.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss of scene {} (main {}, aux {})",
            scene.seed, main.total, aux.total
        )));
    }
    g.backward(total)?;
    Ok(SceneGrads {
        main,
        aux,
        grads: b.grads(&g),
    })
}

/// Worker pool sized by `ROUTE_DETR_THREADS` (default 1, meaning no pool).
pub fn thread_pool() -> Result<Option<rayon::ThreadPool>> {
    let threads = match std::env::var("ROUTE_DETR_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            Error::Config(format!(
                "ROUTE_DETR_THREADS must be a positive integer, got {v:?}"
            ))
        })?,
        Err(_) => 1,
    };
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn map_indexed<R: Send, F>(pool: Option<&rayon::ThreadPool>, n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
{
    match pool {
        Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub main: LossBreakdown,
    pub aux: LossBreakdown,
    pub alpha: f64,
    pub lr: f64,
}

/// One optimizer step on the batch mean of the per-scene gradients, reduced
/// in batch order. A non-finite loss or gradient aborts the step and leaves
/// the state untouched.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    data: &Dataset<T>,
    batch: &[usize],
    pool: Option<&rayon::ThreadPool>,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let alpha = state.alpha();
    let lr = state.config.train.lr_at(state.step);
    let model = &state.model;
    let weights = state.config.loss;
    let per_scene = map_indexed(pool, batch.len(), |i| {
        let idx = batch[i];
        scene_gradients(
            model,
            &data.patches[idx],
            &data.scenes[idx],
            &weights,
            alpha,
        )
    });
    let per_scene: Vec<SceneGrads<T>> = per_scene.into_iter().collect::<Result<_>>()?;

    let inv = T::lit(1.0 / batch.len() as f64);
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.params.len()];
    for sg in &per_scene {
        for (acc, gr) in grads.iter_mut().zip(&sg.grads) {
            if let Some(gr) = gr {
                match acc {
                    Some(a) => a
                        .data_mut()
                        .iter_mut()
                        .zip(gr.data())
                        .for_each(|(x, &y)| *x = *x + y * inv),
                    None => *acc = Some(gr.map(|v| v * inv)),
                }
            }
        }
    }
    state.optim.step(&mut state.model.params, &grads, lr)?;
    state.step += 1;

    let mains: Vec<LossBreakdown> = per_scene.iter().map(|s| s.main.clone()).collect();
    let auxes: Vec<LossBreakdown> = per_scene.iter().map(|s| s.aux.clone()).collect();
    Ok(StepOutcome {
        main: LossBreakdown::mean(&mains),
        aux: LossBreakdown::mean(&auxes),
        alpha,
        lr,
    })
}

/// Draws the next batch: distinct indices, uniformly without replacement.
pub fn next_batch(state: &mut TrainState<impl Scalar>, dataset_len: usize) -> Result<Vec<usize>> {
    if dataset_len == 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    let k = state.config.train.batch_size.min(dataset_len);
    Ok(sample(&mut state.rng, dataset_len, k).into_vec())
}

/// Metrics of last-layer predictions in `mode`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    mode: Mode,
    pool: Option<&rayon::ThreadPool>,
) -> Result<MetricsReport> {
    let outs = map_indexed(pool, data.len(), |i| infer(model, &data.patches[i], mode));
    let mut preds: Vec<Prediction<T>> = Vec::with_capacity(data.len());
    let mut queries = Vec::with_capacity(data.len());
    for out in outs {
        let (mut p, q) = out?;
        preds.push(
            p.pop()
                .ok_or_else(|| Error::Contract("decoder produced no layers".into()))?,
        );
        queries.push(q);
    }
    Ok(report(
        &preds,
        &queries,
        &data.scenes,
        model.config.decoder.classes,
    ))
}

/// Runs until `until` completed steps (capped at the configured total),
/// emitting a record every `eval_interval` steps and at the final step.
pub fn train_until<T: Scalar>(
    state: &mut TrainState<T>,
    data: &Dataset<T>,
    eval: &Dataset<T>,
    until: u64,
    pool: Option<&rayon::ThreadPool>,
    mut on_record: impl FnMut(&MetricRecord) -> Result<()>,
) -> Result<()> {
    let end = until.min(state.config.train.steps);
    while state.step < end {
        let batch = next_batch(state, data.len())?;
        let out = train_step(state, data, &batch, pool)?;
        state.interval.steps += 1;
        state.interval.main_sum += out.main.total;
        state.interval.aux_sum += out.aux.total;
        let interval = state.config.train.eval_interval;
        let due = (interval > 0 && state.step.is_multiple_of(interval))
            || state.step == state.config.train.steps;
        if due {
            let rec = make_record(state, eval, pool)?;
            on_record(&rec)?;
            state.history.push(rec);
            state.interval = IntervalStats::default();
        }
    }
    Ok(())
}

fn make_record<T: Scalar>(
    state: &TrainState<T>,
    eval: &Dataset<T>,
    pool: Option<&rayon::ThreadPool>,
) -> Result<MetricRecord> {
    let main = evaluate(&state.model, eval, Mode::Main, pool)?;
    let aux = if state.model.config.routing_enabled {
        evaluate(&state.model, eval, Mode::Aux, pool)?
    } else {
        main.clone()
    };
    let n = state.interval.steps.max(1) as f64;
    Ok(MetricRecord {
        step: state.step,
        alpha: alpha_schedule(state.step, &state.config.train),
        l_main: state.interval.main_sum / n,
        l_aux: state.interval.aux_sum / n,
        ap: main.ap,
        ap50: main.ap50,
        duplicate_rate: main.duplicate_rate,
        mean_query_cos: main.mean_pairwise_query_cos,
        aux_ap: aux.ap,
        aux_duplicate_rate: aux.duplicate_rate,
    })
}

/// Training scenes generated from the run seed.
pub fn train_dataset<T: Scalar>(config: &RunConfig) -> Result<Dataset<T>> {
    let spec = SceneSpec {
        seed: config.train.seed,
        ..config.data
    };
    Dataset::generate(&spec, config.train.train_scenes)
}

/// Held-out scenes drawn with the evaluation seed.
pub fn eval_dataset<T: Scalar>(config: &RunConfig) -> Result<Dataset<T>> {
    let spec = SceneSpec {
        seed: config.train.eval_seed,
        ..config.data
    };
    Dataset::generate(&spec, config.train.eval_scenes)
}
