//! The decision network: token embeddings, retention blocks, the causal
//! pooling layer, and the reward / action heads.
//!
//! A minibatch of `B` segments is stacked into one `[B·3C × d_h]` matrix.
//! Everything except retention itself is row-wise, so only the MSR call
//! needs to know where one segment ends and the next begins.

use std::collections::BTreeMap;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::RankingExample;
use crate::numerics::{Backend, Eager, Tensor};
use crate::retention::{msr_stacked, MsrWeights, RetentionConfig, RetentionMode};
use crate::simulator::{Policy, Simulator};
use crate::trajectory::{
    build_segment, inference_segment, MaskedSegment, SlotKind, Step, Token, Trajectory,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_h: usize,
    pub heads: usize,
    pub layers: usize,
    pub context: usize,
    /// Segment length for chunkwise retention.
    pub seg_len: usize,
    pub d_s: usize,
    pub catalog: usize,
    pub dropout: f64,
    pub ffn_mult: usize,
    pub mode: RetentionMode,
    /// Normalizer for the timestep fed alongside the RTG.
    pub max_timestep: usize,
    /// Multiplier applied to RTG values before embedding.
    pub rtg_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 32,
            heads: 2,
            layers: 2,
            context: 8,
            seg_len: 8,
            d_s: 8,
            catalog: 20,
            dropout: 0.1,
            ffn_mult: 4,
            mode: RetentionMode::Chunkwise,
            max_timestep: 32,
            rtg_scale: 1.0 / 32.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.retention()?;
        if self.layers == 0 {
            return Err(invalid("at least one block is required"));
        }
        if self.context == 0 || self.seg_len == 0 {
            return Err(invalid("context and segment length must be positive"));
        }
        if self.d_s == 0 || self.catalog == 0 || self.ffn_mult == 0 || self.max_timestep == 0 {
            return Err(invalid(
                "state dim, catalog, ffn_mult and max_timestep must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.rtg_scale.is_finite() && self.rtg_scale > 0.0) {
            return Err(invalid("rtg_scale must be positive and finite"));
        }
        Ok(())
    }

    pub fn retention(&self) -> Result<RetentionConfig> {
        RetentionConfig::new(self.d_h, self.heads)
    }

    pub fn tokens(&self) -> usize {
        3 * self.context
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// `N(0, 1/fan_in)` with fan-in the leading dimension.
    FanIn,
    Normal(u32),
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_h;
    let f = d * cfg.ffn_mult;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));
    for (src, fan) in [("state", cfg.d_s), ("action", cfg.catalog), ("rtg", 2)] {
        let init = if src == "action" {
            Init::Normal(100)
        } else {
            Init::FanIn
        };
        add(format!("embed.{src}.w"), vec![fan, d], init);
        add(format!("embed.{src}.b"), vec![d], Init::Zeros);
        add(format!("embed.{src}.ln.g"), vec![d], Init::Ones);
        add(format!("embed.{src}.ln.b"), vec![d], Init::Zeros);
    }
    add("embed.mask".into(), vec![d], Init::Normal(100));
    add("embed.pos".into(), vec![cfg.tokens(), d], Init::Normal(10));
    for l in 0..cfg.layers {
        let p = format!("block{l}");
        add(format!("{p}.ln1.g"), vec![d], Init::Ones);
        add(format!("{p}.ln1.b"), vec![d], Init::Zeros);
        for w in ["w_q", "w_k", "w_v", "w_p", "w_o"] {
            add(format!("{p}.msr.{w}"), vec![d, d], Init::FanIn);
        }
        add(format!("{p}.msr.gn.g"), vec![d], Init::Ones);
        add(format!("{p}.msr.gn.b"), vec![d], Init::Zeros);
        add(format!("{p}.ln2.g"), vec![d], Init::Ones);
        add(format!("{p}.ln2.b"), vec![d], Init::Zeros);
        add(format!("{p}.ffn.w1"), vec![d, f], Init::FanIn);
        add(format!("{p}.ffn.b1"), vec![f], Init::Zeros);
        add(format!("{p}.ffn.w2"), vec![f, d], Init::FanIn);
        add(format!("{p}.ffn.b2"), vec![d], Init::Zeros);
    }
    for c in ["action", "state"] {
        add(format!("causal.{c}.w"), vec![d, d], Init::FanIn);
        add(format!("causal.{c}.b"), vec![d], Init::Zeros);
    }
    for (head, fan, outd) in [("reward", 2 * d, 1), ("action", d + 1, cfg.catalog)] {
        add(format!("{head}.w1"), vec![fan, d], Init::FanIn);
        add(format!("{head}.b1"), vec![d], Init::Zeros);
        add(format!("{head}.w2"), vec![d, outd], Init::FanIn);
        add(format!("{head}.b2"), vec![outd], Init::Zeros);
    }
    out
}

/// Expected `(name, shape)` of every parameter, in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let std = match init {
                Init::FanIn => 1.0 / (shape[0] as f64).sqrt(),
                Init::Normal(c) => c as f64 / 100.0,
                Init::Zeros => 0.0,
                Init::Ones => {
                    tensors.insert(name, Tensor::full(&shape, 1.0));
                    continue;
                }
            };
            let data = (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    /// Checks names and shapes against the config.
    pub fn from_map(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected = param_shapes(cfg);
        if expected.len() != tensors.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in expected {
            match tensors.get(&name) {
                None => return Err(invalid(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(invalid(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(invalid(format!("parameter {name} is not finite")))
                }
                _ => {}
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor with the backend as a differentiable input.
    pub fn bind<B: Backend>(&self, b: &mut B) -> Weights<B::Value> {
        Weights {
            values: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), b.param(t.clone())))
                .collect(),
        }
    }
}

/// Parameters as backend values.
#[derive(Clone, Debug)]
pub struct Weights<V> {
    values: BTreeMap<String, V>,
}

impl<V> Weights<V> {
    pub fn get(&self, name: &str) -> &V {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &V)> {
        self.values.iter()
    }
}

fn check_segments(cfg: &ModelConfig, segs: &[&MaskedSegment]) -> Result<()> {
    if segs.is_empty() {
        return Err(invalid("empty batch"));
    }
    for s in segs {
        if s.context != cfg.context || s.tokens.len() != cfg.tokens() {
            return Err(invalid(format!(
                "segment context {} does not match model context {}",
                s.context, cfg.context
            )));
        }
    }
    Ok(())
}

fn embed_source<B: Backend>(
    b: &mut B,
    p: &Weights<B::Value>,
    src: &str,
    rows: B::Value,
    lookup: bool,
) -> Result<B::Value> {
    let w = p.get(&format!("embed.{src}.w"));
    let x = if lookup { rows } else { b.matmul(&rows, w)? };
    let x = b.add_row(&x, p.get(&format!("embed.{src}.b")))?;
    b.layer_norm(
        &x,
        p.get(&format!("embed.{src}.ln.g")),
        p.get(&format!("embed.{src}.ln.b")),
        LAYER_NORM_EPS,
    )
}

/// Initial hidden states `[B·3C × d_h]`. Only visible slots read their
/// token content; every other slot takes the mask embedding.
pub fn embed<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    p: &Weights<B::Value>,
    segs: &[&MaskedSegment],
) -> Result<B::Value> {
    check_segments(cfg, segs)?;
    let n_tok = cfg.tokens();
    let mut states: Vec<&[f64]> = Vec::new();
    let mut actions: Vec<usize> = Vec::new();
    let mut rtgs: Vec<[f64; 2]> = Vec::with_capacity(segs.len());
    // (kind, index within kind) per slot; None = mask
    let mut slot_src: Vec<Option<(SlotKind, usize)>> = Vec::with_capacity(segs.len() * n_tok);
    for s in segs {
        for (tok, &vis) in s.tokens.iter().zip(&s.visible) {
            if !vis {
                slot_src.push(None);
                continue;
            }
            match tok {
                Token::State(v) => {
                    if v.len() != cfg.d_s {
                        return Err(invalid(format!(
                            "state has {} dims, model expects {}",
                            v.len(),
                            cfg.d_s
                        )));
                    }
                    slot_src.push(Some((SlotKind::State, states.len())));
                    states.push(v);
                }
                Token::Action(a) => {
                    if *a >= cfg.catalog {
                        return Err(invalid(format!(
                            "action {a} outside catalog {}",
                            cfg.catalog
                        )));
                    }
                    slot_src.push(Some((SlotKind::Action, actions.len())));
                    actions.push(*a);
                }
                Token::Rtg(g) => {
                    slot_src.push(Some((SlotKind::Rtg, rtgs.len())));
                    rtgs.push([g * cfg.rtg_scale, s.end as f64 / cfg.max_timestep as f64]);
                }
                Token::Padding => return Err(invalid("padding slot marked visible")),
            }
        }
    }
    if rtgs.len() != segs.len() {
        return Err(invalid("each segment needs exactly one visible RTG"));
    }

    let mut parts = Vec::with_capacity(4);
    let s_rows = b.constant(Tensor::from_rows(&states)?);
    parts.push(embed_source(b, p, "state", s_rows, false)?);
    if !actions.is_empty() {
        let a_rows = b.gather_rows(p.get("embed.action.w"), &actions)?;
        parts.push(embed_source(b, p, "action", a_rows, true)?);
    }
    let g_rows = b.constant(Tensor::from_rows(&rtgs)?);
    parts.push(embed_source(b, p, "rtg", g_rows, false)?);
    parts.push(b.reshape(p.get("embed.mask"), &[1, cfg.d_h])?);

    let (n_s, n_a) = (states.len(), actions.len());
    let mask_row = n_s + n_a + rtgs.len();
    let idx: Vec<usize> = slot_src
        .iter()
        .map(|src| match src {
            Some((SlotKind::State, i)) => *i,
            Some((SlotKind::Action, i)) => n_s + i,
            Some((SlotKind::Rtg, i)) => n_s + n_a + i,
            None => mask_row,
        })
        .collect();
    let table = b.concat_rows(&parts)?;
    let h = b.gather_rows(&table, &idx)?;
    let pos_idx: Vec<usize> = (0..idx.len()).map(|i| i % n_tok).collect();
    let pos = b.gather_rows(p.get("embed.pos"), &pos_idx)?;
    b.add(&h, &pos)
}

/// One pre-norm block: `X = H + MSR(LN(H))`, `H' = X + FFN(LN(X))`.
pub fn block<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    ret: &RetentionConfig,
    p: &Weights<B::Value>,
    layer: usize,
    h: &B::Value,
) -> Result<B::Value> {
    let k = |s: &str| format!("block{layer}.{s}");
    let w = MsrWeights {
        w_q: p.get(&k("msr.w_q")).clone(),
        w_k: p.get(&k("msr.w_k")).clone(),
        w_v: p.get(&k("msr.w_v")).clone(),
        w_p: p.get(&k("msr.w_p")).clone(),
        w_o: p.get(&k("msr.w_o")).clone(),
        gn_gain: p.get(&k("msr.gn.g")).clone(),
        gn_bias: p.get(&k("msr.gn.b")).clone(),
    };
    let n = b.layer_norm(h, p.get(&k("ln1.g")), p.get(&k("ln1.b")), LAYER_NORM_EPS)?;
    let m = msr_stacked(b, &n, &w, ret, cfg.mode, cfg.seg_len, cfg.tokens())?;
    let x = b.add(h, &m)?;
    let n = b.layer_norm(&x, p.get(&k("ln2.g")), p.get(&k("ln2.b")), LAYER_NORM_EPS)?;
    let f = b.linear(&n, p.get(&k("ffn.w1")), p.get(&k("ffn.b1")))?;
    let f = b.gelu(&f)?;
    let f = b.linear(&f, p.get(&k("ffn.w2")), p.get(&k("ffn.b2")))?;
    b.add(&x, &f)
}

fn dropout<B: Backend>(
    b: &mut B,
    x: B::Value,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<B::Value> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = b.value(&x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = b.constant(Tensor::new(shape, mask)?);
    b.mul(&x, &mask)
}

/// Pools visible rows of the final hidden states into `(Ψᵃ, Ψˢ)`, each `[B × d_h]`.
///
/// Each group (states, actions, RTG) is mean-pooled over its visible rows;
/// an empty action group contributes zero. Dropout is applied after each
/// projection when `rng` is given.
pub fn causal_layer<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    p: &Weights<B::Value>,
    h: &B::Value,
    segs: &[&MaskedSegment],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(B::Value, B::Value)> {
    let n_tok = cfg.tokens();
    let cols = segs.len() * n_tok;
    let mut pool_a = Tensor::zeros(&[segs.len(), cols]);
    let mut pool_s = Tensor::zeros(&[segs.len(), cols]);
    for (i, s) in segs.iter().enumerate() {
        let states = s.visible_state_slots();
        let actions = s.visible_action_slots();
        let base = i * cols + i * n_tok;
        for &slot in &states {
            let w = 1.0 / states.len() as f64;
            pool_s.data_mut()[base + slot] = w;
            pool_a.data_mut()[base + slot] = w;
        }
        for &slot in &actions {
            pool_a.data_mut()[base + slot] = 1.0 / actions.len() as f64;
        }
        pool_a.data_mut()[base + s.rtg_slot()] = 1.0;
    }
    let pool_a = b.constant(pool_a);
    let pool_s = b.constant(pool_s);
    let pre_a = b.matmul(&pool_a, h)?;
    let s_bar = b.matmul(&pool_s, h)?;

    let a = b.linear(&pre_a, p.get("causal.action.w"), p.get("causal.action.b"))?;
    let a = b.gelu(&a)?;
    let psi_a = dropout(b, a, cfg.dropout, rng.as_deref_mut())?;
    let pre_s = b.add(&s_bar, &psi_a)?;
    let s = b.linear(&pre_s, p.get("causal.state.w"), p.get("causal.state.b"))?;
    let s = b.gelu(&s)?;
    let psi_s = dropout(b, s, cfg.dropout, rng)?;
    Ok((psi_a, psi_s))
}

fn two_layer<B: Backend>(
    b: &mut B,
    p: &Weights<B::Value>,
    head: &str,
    x: &B::Value,
) -> Result<B::Value> {
    let h = b.linear(
        x,
        p.get(&format!("{head}.w1")),
        p.get(&format!("{head}.b1")),
    )?;
    let h = b.gelu(&h)?;
    b.linear(
        &h,
        p.get(&format!("{head}.w2")),
        p.get(&format!("{head}.b2")),
    )
}

/// `r̂ = N_e([Ψˢ, Ψᵃ])`, shape `[B × 1]`.
pub fn predict_reward<B: Backend>(
    b: &mut B,
    p: &Weights<B::Value>,
    psi_s: &B::Value,
    psi_a: &B::Value,
) -> Result<B::Value> {
    let x = b.concat_cols(&[psi_s.clone(), psi_a.clone()])?;
    two_layer(b, p, "reward", &x)
}

/// `logits = N_g([Ψᵃ, r̂])`, shape `[B × |I|]`.
pub fn predict_action<B: Backend>(
    b: &mut B,
    p: &Weights<B::Value>,
    psi_a: &B::Value,
    reward: &B::Value,
) -> Result<B::Value> {
    let x = b.concat_cols(&[psi_a.clone(), reward.clone()])?;
    two_layer(b, p, "action", &x)
}

#[derive(Clone, Debug)]
pub struct Outputs<V> {
    /// `[B × 1]`
    pub reward: V,
    /// `[B × |I|]`
    pub logits: V,
}

/// Full forward pass over a minibatch of segments. Passing `rng` enables dropout.
pub fn forward<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    p: &Weights<B::Value>,
    segs: &[&MaskedSegment],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Outputs<B::Value>> {
    let ret = cfg.retention()?;
    let mut h = embed(b, cfg, p, segs)?;
    for l in 0..cfg.layers {
        h = block(b, cfg, &ret, p, l, &h)?;
    }
    let (psi_a, psi_s) = causal_layer(b, cfg, p, &h, segs, rng)?;
    let reward = predict_reward(b, p, &psi_s, &psi_a)?;
    let logits = predict_action(b, p, &psi_a, &reward)?;
    Ok(Outputs { reward, logits })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::from_map(&config, params.tensors)?;
        Ok(Self { config, params })
    }

    /// Inference without dropout.
    pub fn predict(&self, segs: &[&MaskedSegment]) -> Result<Outputs<Tensor>> {
        let mut b = Eager;
        let w = self.params.bind(&mut b);
        forward(&mut b, &self.config, &w, segs, None)
    }

    /// Greedy argmax (lowest id on ties), or a softmax sample when `rng` is given.
    pub fn act(
        &self,
        history: &[Step],
        state: &[f64],
        target_return: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<usize> {
        let seg = inference_segment(history, state, target_return, self.config.context)?;
        let out = self.predict(&[&seg])?;
        let logits = out.logits.row(0);
        match rng {
            None => Ok(argmax(logits)),
            Some(rng) => {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let dist = WeightedIndex::new(&w).map_err(|e| invalid(e.to_string()))?;
                Ok(dist.sample(rng))
            }
        }
    }
}

impl Model {
    /// Fully exposed prediction at every step of every trajectory, paired
    /// with the logged action.
    pub fn ranking_examples(
        &self,
        trajs: &[Trajectory],
        chunk: usize,
    ) -> Result<Vec<RankingExample>> {
        let mut segs = Vec::new();
        for tr in trajs {
            for t in 0..tr.len() {
                let m = self.config.context.min(t + 1);
                segs.push(build_segment(tr, t, self.config.context, m)?);
            }
        }
        let mut out = Vec::with_capacity(segs.len());
        for part in segs.chunks(chunk.max(1)) {
            let refs: Vec<&MaskedSegment> = part.iter().collect();
            let logits = self.predict(&refs)?.logits;
            for (i, s) in part.iter().enumerate() {
                out.push(RankingExample {
                    logits: logits.row(i).to_vec(),
                    target: s.target_action,
                });
            }
        }
        Ok(out)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Rolls the model out in the simulator conditioned on a fixed target return.
#[derive(Clone, Debug)]
pub struct ModelPolicy<'a> {
    pub model: &'a Model,
    pub target_return: f64,
    pub sample: bool,
}

impl Policy for ModelPolicy<'_> {
    fn act(
        &self,
        _sim: &Simulator,
        history: &[Step],
        observed: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let rng = if self.sample { Some(rng) } else { None };
        self.model.act(history, observed, self.target_return, rng)
    }
}
