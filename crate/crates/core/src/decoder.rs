//! Toy DETR decoder: patch-embedding memory, post-norm decoder layers with
//! optionally biased self-attention, plain cross-attention, and shared
//! class/box heads with iterative refinement in logit space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::routing::{
    compute_descriptors, routed_bias, RouteSwitch, RoutedBiasVars, RoutingConfig, RoutingParams,
};
use crate::synthdata::SceneSpec;
use crate::tensor::{sigmoid, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Detached reference logits are clamped to `±ln((1-ε)/ε)` with this ε.
pub const REF_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub queries: usize,
    /// Foreground classes; logits carry one extra background column at index 0.
    pub classes: usize,
    pub d_ffn: usize,
    pub encoder_layers: usize,
    /// Memory tokens form a `grid × grid` lattice.
    pub grid: usize,
    pub patch_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        let spec = SceneSpec::default();
        Self {
            layers: 3,
            heads: 4,
            d_model: 64,
            queries: 20,
            classes: spec.classes,
            d_ffn: 128,
            encoder_layers: 0,
            grid: spec.grid(),
            patch_dim: spec.patch_dim(),
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.queries == 0 || self.classes == 0 || self.heads == 0 {
            return bad("layers, queries, classes and heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if !self.d_model.is_multiple_of(8) {
            return bad(format!(
                "d_model {} must be a multiple of 8 for box encodings",
                self.d_model
            ));
        }
        if self.encoder_layers > 2 {
            return bad(format!(
                "at most 2 encoder layers, got {}",
                self.encoder_layers
            ));
        }
        if self.grid == 0 || self.patch_dim == 0 {
            return bad("memory grid must be non-empty".into());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub routing: RoutingConfig,
    /// Without routing no routing parameters exist and aux mode equals main mode.
    pub routing_enabled: bool,
    pub switch: RouteSwitch,
    /// Per-layer on/off for the routed bias; empty means every layer.
    pub routed_layers: Vec<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            routing: RoutingConfig::default(),
            routing_enabled: true,
            switch: RouteSwitch::default(),
            routed_layers: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.routing.validate()?;
        if !self.routed_layers.is_empty() && self.routed_layers.len() != self.decoder.layers {
            return Err(Error::Config(format!(
                "routed layer mask has {} entries for {} layers",
                self.routed_layers.len(),
                self.decoder.layers
            )));
        }
        Ok(())
    }

    fn layer_routed(&self, l: usize) -> bool {
        self.routing_enabled && self.routed_layers.get(l).copied().unwrap_or(true)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerParams {
    pub attn: AttnParams,
    pub norm1: NormParams,
    pub ffn: FfnParams,
    pub norm2: NormParams,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerParams {
    pub self_attn: AttnParams,
    pub norm1: NormParams,
    pub cross_attn: AttnParams,
    pub norm2: NormParams,
    pub ffn: FfnParams,
    pub norm3: NormParams,
    pub routing: Option<RoutingParams>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub class_w: ParamId,
    pub class_b: ParamId,
    pub box_w1: ParamId,
    pub box_b1: ParamId,
    pub box_w2: ParamId,
    pub box_b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    pub query_content: ParamId,
    pub query_ref: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub heads: HeadParams,
}

struct Init<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        self.store
            .insert_uniform(name, shape, fan_in, &mut self.rng)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.insert(name, Tensor::zeros(shape))
    }

    fn linear(
        &mut self,
        prefix: &str,
        w: &str,
        b: &str,
        d_in: usize,
        d_out: usize,
    ) -> (ParamId, ParamId) {
        (
            self.uniform(format!("{prefix}.{w}"), &[d_in, d_out], d_in),
            self.zeros(format!("{prefix}.{b}"), &[d_out]),
        )
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        let (wq, bq) = self.linear(prefix, "wq", "bq", d, d);
        let (wk, bk) = self.linear(prefix, "wk", "bk", d, d);
        let (wv, bv) = self.linear(prefix, "wv", "bv", d, d);
        let (wo, bo) = self.linear(prefix, "wo", "bo", d, d);
        AttnParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams {
        NormParams {
            gain: self
                .store
                .insert(format!("{prefix}.gain"), Tensor::ones(&[d])),
            bias: self.zeros(format!("{prefix}.bias"), &[d]),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FfnParams {
        let (w1, b1) = self.linear(prefix, "w1", "b1", d, hidden);
        let (w2, b2) = self.linear(prefix, "w2", "b2", hidden, d);
        FfnParams { w1, b1, w2, b2 }
    }
}

/// Parameters plus the handles that locate them.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub layout: Layout,
}

impl<T: Scalar> Model<T> {
    /// Routing parameters draw from a separate stream, so the transformer
    /// weights for a given seed do not depend on whether routing is enabled.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.decoder;
        let d = c.d_model;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (patch_w, patch_b) = init.linear("embed", "patch_w", "patch_b", c.patch_dim, d);
        let encoder = (0..c.encoder_layers)
            .map(|i| {
                let p = format!("encoder{i}");
                EncoderLayerParams {
                    attn: init.attn(&format!("{p}.attn"), d),
                    norm1: init.norm(&format!("{p}.norm1"), d),
                    ffn: init.ffn(&format!("{p}.ffn"), d, c.d_ffn),
                    norm2: init.norm(&format!("{p}.norm2"), d),
                }
            })
            .collect();
        let query_content = init.uniform("query.content".into(), &[c.queries, d], 1);
        let mut ref_logits = Vec::with_capacity(c.queries * 4);
        for _ in 0..c.queries {
            let cx: f64 = init.rng.gen_range(0.05..0.95);
            let cy: f64 = init.rng.gen_range(0.05..0.95);
            let logit = |p: f64| (p / (1.0 - p)).ln();
            ref_logits.extend([logit(cx), logit(cy), logit(0.2), logit(0.2)].map(T::lit));
        }
        let query_ref = init
            .store
            .insert("query.ref_logit", Tensor::new(&[c.queries, 4], ref_logits)?);

        let mut layers: Vec<DecoderLayerParams> = (0..c.layers)
            .map(|l| {
                let p = format!("layer{l}");
                DecoderLayerParams {
                    self_attn: init.attn(&format!("{p}.self_attn"), d),
                    norm1: init.norm(&format!("{p}.norm1"), d),
                    cross_attn: init.attn(&format!("{p}.cross_attn"), d),
                    norm2: init.norm(&format!("{p}.norm2"), d),
                    ffn: init.ffn(&format!("{p}.ffn"), d, c.d_ffn),
                    norm3: init.norm(&format!("{p}.norm3"), d),
                    routing: None,
                }
            })
            .collect();

        let (class_w, class_b) = init.linear("head", "class_w", "class_b", d, c.classes + 1);
        let (box_w1, box_b1) = init.linear("head", "box_w1", "box_b1", d, d);
        let box_w2 = init.zeros("head.box_w2".into(), &[d, 4]);
        let box_b2 = init.zeros("head.box_b2".into(), &[4]);

        if config.routing_enabled {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05EE_D0F7_207E);
            for (l, layer) in layers.iter_mut().enumerate() {
                layer.routing = Some(RoutingParams::init(
                    init.store,
                    &format!("layer{l}"),
                    2 * d,
                    &config.routing,
                    &mut rng,
                ));
            }
        }

        let layout = Layout {
            patch_w,
            patch_b,
            encoder,
            query_content,
            query_ref,
            layers,
            heads: HeadParams {
                class_w,
                class_b,
                box_w1,
                box_b1,
                box_w2,
                box_b2,
            },
        };
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    /// Copy with every parameter converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn routing_param_ids(&self) -> Vec<ParamId> {
        self.layout
            .layers
            .iter()
            .filter_map(|l| l.routing)
            .flat_map(|r| r.ids())
            .collect()
    }

    pub fn is_routing_param(&self, id: ParamId) -> bool {
        self.params.name(id).contains(".routing.")
    }

    /// Overwrites every tensor that exists under the same name in `other`.
    pub fn copy_matching_params(&mut self, other: &ParamStore<T>) {
        for (name, tensor) in other.iter().map(|(_, n, t)| (n.to_string(), t.clone())) {
            if let Ok(dst) = self.params.by_name_mut(&name) {
                if dst.shape() == tensor.shape() {
                    *dst = tensor;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Plain self-attention; the only mode used at inference.
    Main,
    /// Self-attention logits receive the routed bias.
    Aux,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Mode::Main),
            "aux" => Ok(Mode::Aux),
            other => Err(Error::Config(format!(
                "mode must be main or aux, got {other}"
            ))),
        }
    }
}

/// Sinusoidal encoding of `cx, cy, w, h`: `d/4` channels per component,
/// interleaved `sin, cos` pairs at geometric frequencies.
pub fn box_encoding<T: Scalar>(boxes: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    let [n, four] = boxes.dims2()?;
    if four != 4 || !d.is_multiple_of(8) {
        return Err(Error::Dimension(format!(
            "box encoding of {:?} into width {d}",
            boxes.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for &v in boxes.row(i) {
            encode_scalar(v.as_f64(), d / 4, &mut out);
        }
    }
    Tensor::new(&[n, d], out)
}

fn encode_scalar<T: Scalar>(x: f64, width: usize, out: &mut Vec<T>) {
    let pairs = width / 2;
    for k in 0..pairs {
        let freq = 10000f64.powf(-(2.0 * k as f64) / width as f64);
        let a = x * std::f64::consts::TAU * freq;
        out.push(T::lit(a.sin()));
        out.push(T::lit(a.cos()));
    }
}

/// Fixed 2-D encoding of token centers: `d/2` channels for x, `d/2` for y.
pub fn token_positions<T: Scalar>(grid: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(4) {
        return Err(Error::Dimension(format!(
            "token positions need width divisible by 4, got {d}"
        )));
    }
    let mut out = Vec::with_capacity(grid * grid * d);
    for gy in 0..grid {
        for gx in 0..grid {
            encode_scalar((gx as f64 + 0.5) / grid as f64, d / 2, &mut out);
            encode_scalar((gy as f64 + 0.5) / grid as f64, d / 2, &mut out);
        }
    }
    Tensor::new(&[grid * grid, d], out)
}

/// Encoded image tokens plus per-layer cached key/value projections.
#[derive(Debug)]
pub struct Memory {
    pub tokens: Var,
    pub pos: Var,
    kv_cache: Vec<Option<(Var, Var)>>,
}

pub struct AttnOutput {
    pub out: Var,
    /// One row-stochastic map per head.
    pub maps: Vec<Var>,
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Vec<Var>> {
    let dh = g.value(x).cols() / heads;
    (0..heads).map(|h| g.slice_cols(x, h * dh, dh)).collect()
}

fn attend<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    p: &AttnParams,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<Var>,
) -> Result<AttnOutput> {
    let (wq, bq) = (b.var(g, p.wq), b.var(g, p.bq));
    let qp = g.linear(q, wq, bq)?;
    let qh = split_heads(g, qp, heads)?;
    let dh = g.value(qp).cols() / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    if let Some(bias) = bias {
        let n = g.value(q).rows();
        let m = g.value(k).rows();
        if g.shape(bias) != [n, m] {
            return Err(Error::Dimension(format!(
                "attention bias has shape {:?}, logits are {n}×{m}",
                g.shape(bias)
            )));
        }
    }
    let (kh, vh) = project_kv(g, b, p, k, v, heads)?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let logits = g.matmul_nt(qh[h], kh[h])?;
        let mut logits = g.scale(logits, scale);
        if let Some(bias) = bias {
            logits = g.add(logits, bias)?;
        }
        let attn = g.softmax_rows(logits)?;
        outs.push(g.matmul(attn, vh[h])?);
        maps.push(attn);
    }
    let cat = g.concat(&outs)?;
    let (wo, bo) = (b.var(g, p.wo), b.var(g, p.bo));
    Ok(AttnOutput {
        out: g.linear(cat, wo, bo)?,
        maps,
    })
}

fn project_kv<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    p: &AttnParams,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let (wk, bk) = (b.var(g, p.wk), b.var(g, p.bk));
    let (wv, bv) = (b.var(g, p.wv), b.var(g, p.bv));
    let kp = g.linear(k, wk, bk)?;
    let vp = g.linear(v, wv, bv)?;
    Ok((split_heads(g, kp, heads)?, split_heads(g, vp, heads)?))
}

/// Multi-head self-attention over `content + pos` keys/queries and `content`
/// values. Every head's logits receive the same additive `bias` when given.
pub fn biased_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    p: &AttnParams,
    content: Var,
    pos: Var,
    heads: usize,
    bias: Option<Var>,
) -> Result<AttnOutput> {
    let qk = g.add(content, pos)?;
    attend(g, b, p, qk, qk, content, heads, bias)
}

/// Queries attend to memory tokens; keys carry the token positions.
pub fn cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    p: &AttnParams,
    content: Var,
    pos: Var,
    mem: &mut Memory,
    layer: usize,
    heads: usize,
) -> Result<AttnOutput> {
    if g.value(content).cols() != g.value(mem.tokens).cols() {
        return Err(Error::Dimension(format!(
            "cross attention: queries {:?} vs memory {:?}",
            g.shape(content),
            g.shape(mem.tokens)
        )));
    }
    let q = g.add(content, pos)?;
    let (wq, bq) = (b.var(g, p.wq), b.var(g, p.bq));
    let qp = g.linear(q, wq, bq)?;
    let qh = split_heads(g, qp, heads)?;
    let dh = g.value(qp).cols() / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    if mem.kv_cache.len() <= layer {
        mem.kv_cache.resize(layer + 1, None);
    }
    let (kp, vp) = match mem.kv_cache[layer] {
        Some(kv) => kv,
        None => {
            let k_in = g.add(mem.tokens, mem.pos)?;
            let (wk, bk) = (b.var(g, p.wk), b.var(g, p.bk));
            let (wv, bv) = (b.var(g, p.wv), b.var(g, p.bv));
            let kp = g.linear(k_in, wk, bk)?;
            let vp = g.linear(mem.tokens, wv, bv)?;
            mem.kv_cache[layer] = Some((kp, vp));
            (kp, vp)
        }
    };
    let kh = split_heads(g, kp, heads)?;
    let vh = split_heads(g, vp, heads)?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let logits = g.matmul_nt(qh[h], kh[h])?;
        let logits = g.scale(logits, scale);
        let attn = g.softmax_rows(logits)?;
        outs.push(g.matmul(attn, vh[h])?);
        maps.push(attn);
    }
    let cat = g.concat(&outs)?;
    let (wo, bo) = (b.var(g, p.wo), b.var(g, p.bo));
    Ok(AttnOutput {
        out: g.linear(cat, wo, bo)?,
        maps,
    })
}

fn ffn<T: Scalar>(g: &mut Graph<T>, b: &mut Bound<'_, T>, p: &FfnParams, x: Var) -> Result<Var> {
    let (w1, b1) = (b.var(g, p.w1), b.var(g, p.b1));
    let (w2, b2) = (b.var(g, p.w2), b.var(g, p.b2));
    let h = g.linear(x, w1, b1)?;
    let h = g.relu(h);
    g.linear(h, w2, b2)
}

fn add_norm<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    p: &NormParams,
    x: Var,
    delta: Var,
) -> Result<Var> {
    let s = g.add(x, delta)?;
    let (gain, bias) = (b.var(g, p.gain), b.var(g, p.bias));
    g.layer_norm(s, gain, bias, T::lit(LAYER_NORM_EPS))
}

/// Embeds raw patches into memory tokens and runs the optional encoder layers.
pub fn encode_memory<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    model: &Model<T>,
    patches: &Tensor<T>,
) -> Result<Memory> {
    let c = &model.config.decoder;
    if patches.shape() != [c.tokens(), c.patch_dim] {
        return Err(Error::Dimension(format!(
            "expected {}×{} patches, got {:?}",
            c.tokens(),
            c.patch_dim,
            patches.shape()
        )));
    }
    let x = g.constant(patches.clone());
    let (w, bias) = (
        b.var(g, model.layout.patch_w),
        b.var(g, model.layout.patch_b),
    );
    let mut tokens = g.linear(x, w, bias)?;
    let pos = g.constant(token_positions(c.grid, c.d_model)?);
    for enc in &model.layout.encoder {
        let att = biased_self_attention(g, b, &enc.attn, tokens, pos, c.heads, None)?;
        tokens = add_norm(g, b, &enc.norm1, tokens, att.out)?;
        let f = ffn(g, b, &enc.ffn, tokens)?;
        tokens = add_norm(g, b, &enc.norm2, tokens, f)?;
    }
    Ok(Memory {
        tokens,
        pos,
        kv_cache: Vec::new(),
    })
}

/// Decoder state between layers.
#[derive(Debug, Clone, Copy)]
pub struct QuerySet {
    pub content: Var,
    /// Reference boxes in logit space; tracked only for the learned initial boxes.
    pub ref_logits: Var,
    pub pos: Var,
}

impl QuerySet {
    pub fn ref_boxes<T: Scalar>(&self, g: &Graph<T>) -> Tensor<T> {
        g.value(self.ref_logits).map(sigmoid)
    }
}

/// Graph handles of one layer's predictions.
#[derive(Debug, Clone, Copy)]
pub struct PredVars {
    pub class_logits: Var,
    pub boxes: Var,
    /// Box logits before the sigmoid; the next layer's reference.
    pub box_logits: Var,
}

/// Plain prediction values.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T: Scalar> {
    /// `n×4` normalized `cx, cy, w, h`.
    pub boxes: Tensor<T>,
    /// `n×(c+1)`, background at column 0.
    pub class_logits: Tensor<T>,
}

impl PredVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> Prediction<T> {
        Prediction {
            boxes: g.value(self.boxes).clone(),
            class_logits: g.value(self.class_logits).clone(),
        }
    }
}

/// Initial queries: learned content and learned reference boxes.
pub fn initial_queries<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    model: &Model<T>,
) -> Result<QuerySet> {
    let content = b.var(g, model.layout.query_content);
    let ref_logits = b.var(g, model.layout.query_ref);
    let boxes = g.value(ref_logits).map(sigmoid);
    let pos = g.constant(box_encoding(&boxes, model.config.decoder.d_model)?);
    Ok(QuerySet {
        content,
        ref_logits,
        pos,
    })
}

/// Class logits and refined boxes `σ(Δ + ref_logits)`.
pub fn predict_heads<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    p: &HeadParams,
    queries: Var,
    ref_logits: Var,
) -> Result<PredVars> {
    let (cw, cb) = (b.var(g, p.class_w), b.var(g, p.class_b));
    let class_logits = g.linear(queries, cw, cb)?;
    let (w1, b1) = (b.var(g, p.box_w1), b.var(g, p.box_b1));
    let (w2, b2) = (b.var(g, p.box_w2), b.var(g, p.box_b2));
    let h = g.linear(queries, w1, b1)?;
    let h = g.relu(h);
    let delta = g.linear(h, w2, b2)?;
    let box_logits = g.add(delta, ref_logits)?;
    let boxes = g.sigmoid(box_logits);
    Ok(PredVars {
        class_logits,
        boxes,
        box_logits,
    })
}

/// Output of one decoder layer.
pub struct LayerOutput {
    pub next: QuerySet,
    pub pred: PredVars,
    pub bias: Option<RoutedBiasVars>,
    pub self_attn_maps: Vec<Var>,
    pub cross_attn_maps: Vec<Var>,
}

/// One decoder block: (biased) self-attention, cross-attention and FFN, each
/// with residual and layer norm, followed by the shared heads.
///
/// `descriptor_source` supplies the class logits and boxes of the layer-input
/// queries; it is only read in aux mode on a routed layer.
pub fn decoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    model: &Model<T>,
    layer: usize,
    qs: &QuerySet,
    mem: &mut Memory,
    mode: Mode,
    descriptor_source: &Prediction<T>,
) -> Result<LayerOutput> {
    let cfg = &model.config;
    let c = &cfg.decoder;
    let p = &model.layout.layers[layer];

    let bias = match (mode, p.routing) {
        (Mode::Aux, Some(rp)) if cfg.layer_routed(layer) => {
            let x = compute_descriptors(
                g.value(qs.content),
                &descriptor_source.class_logits,
                &descriptor_source.boxes,
                cfg.routing.descriptor_eps,
            )?;
            Some(routed_bias(g, b, qs.content, qs.pos, &x, &rp, cfg.switch)?)
        }
        _ => None,
    };

    let sa = biased_self_attention(
        g,
        b,
        &p.self_attn,
        qs.content,
        qs.pos,
        c.heads,
        bias.map(|v| v.bias),
    )?;
    let x = add_norm(g, b, &p.norm1, qs.content, sa.out)?;
    let ca = cross_attention(g, b, &p.cross_attn, x, qs.pos, mem, layer, c.heads)?;
    let x = add_norm(g, b, &p.norm2, x, ca.out)?;
    let f = ffn(g, b, &p.ffn, x)?;
    let x = add_norm(g, b, &p.norm3, x, f)?;

    let pred = predict_heads(g, b, &model.layout.heads, x, qs.ref_logits)?;
    let limit = T::lit(((1.0 - REF_EPS) / REF_EPS).ln());
    let next_logits = g.value(pred.box_logits).map(|v| v.max(-limit).min(limit));
    let next_boxes = next_logits.map(sigmoid);
    let pos = g.constant(box_encoding(&next_boxes, c.d_model)?);
    let ref_logits = g.constant(next_logits);
    Ok(LayerOutput {
        next: QuerySet {
            content: x,
            ref_logits,
            pos,
        },
        pred,
        bias,
        self_attn_maps: sa.maps,
        cross_attn_maps: ca.maps,
    })
}

pub struct DecoderOutput {
    /// One prediction per layer, first to last.
    pub preds: Vec<PredVars>,
    /// Content embeddings after each layer.
    pub queries: Vec<Var>,
    pub biases: Vec<Option<RoutedBiasVars>>,
    pub self_attn_maps: Vec<Vec<Var>>,
    pub cross_attn_maps: Vec<Vec<Var>>,
}

impl DecoderOutput {
    pub fn last(&self) -> PredVars {
        *self.preds.last().expect("at least one layer")
    }
}

pub fn decoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    model: &Model<T>,
    init: QuerySet,
    mem: &mut Memory,
    mode: Mode,
) -> Result<DecoderOutput> {
    let layers = model.config.decoder.layers;
    let mut out = DecoderOutput {
        preds: Vec::with_capacity(layers),
        queries: Vec::with_capacity(layers),
        biases: Vec::with_capacity(layers),
        self_attn_maps: Vec::with_capacity(layers),
        cross_attn_maps: Vec::with_capacity(layers),
    };
    let needs_descriptors = mode == Mode::Aux && model.config.routing_enabled;
    // Descriptors of the initial queries come from the heads applied to them.
    let mut source = if needs_descriptors {
        let content = g.detach(init.content);
        let refs = g.detach(init.ref_logits);
        predict_heads(g, b, &model.layout.heads, content, refs)?.values(g)
    } else {
        Prediction {
            boxes: Tensor::zeros(&[0, 4]),
            class_logits: Tensor::zeros(&[0, 0]),
        }
    };
    let mut qs = init;
    for l in 0..layers {
        let lo = decoder_layer(g, b, model, l, &qs, mem, mode, &source)?;
        if needs_descriptors {
            source = lo.pred.values(g);
        }
        out.preds.push(lo.pred);
        out.queries.push(lo.next.content);
        out.biases.push(lo.bias);
        out.self_attn_maps.push(lo.self_attn_maps);
        out.cross_attn_maps.push(lo.cross_attn_maps);
        qs = lo.next;
    }
    Ok(out)
}

/// Encodes `patches` and runs the full decoder in one graph.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Bound<'_, T>,
    model: &Model<T>,
    patches: &Tensor<T>,
    mode: Mode,
) -> Result<DecoderOutput> {
    let mut mem = encode_memory(g, b, model, patches)?;
    let init = initial_queries(g, b, model)?;
    decoder_forward(g, b, model, init, &mut mem, mode)
}

/// Per-layer predictions and query embeddings.
pub type Inference<T> = (Vec<Prediction<T>>, Vec<Tensor<T>>);

/// Forward pass without gradients.
pub fn infer<T: Scalar>(model: &Model<T>, patches: &Tensor<T>, mode: Mode) -> Result<Inference<T>> {
    let mut g = Graph::new();
    let mut b = Bound::new(&model.params);
    let out = forward(&mut g, &mut b, model, patches, mode)?;
    let preds = out.preds.iter().map(|p| p.values(&g)).collect();
    let queries = out.queries.iter().map(|&q| g.value(q).clone()).collect();
    Ok((preds, queries))
}
