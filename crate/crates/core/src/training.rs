//! Losses, AdamW, and the minibatch loop over randomly masked segments.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{forward, Model, ModelConfig, ModelParams};
use crate::numerics::{Backend, Eager, Tape, Tensor};
use crate::trajectory::{build_segment, sample_mask, MaskedSegment, Trajectory};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const METRICS_HEADER: &str = "step,loss_reward,loss_action,loss_total";

/// Stream used for parameter initialization; step `k` draws from stream `k`.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Sample the exposed length per segment; off means always fully exposed.
    pub adaptive_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            steps: 2000,
            beta: 1.0,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 10,
            adaptive_mask: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(invalid("batch_size and eval_every must be at least 1"));
        }
        if [self.beta, self.grad_clip, self.weight_decay]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return Err(invalid(
                "beta, grad_clip and weight_decay must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Mean squared error between `pred` (`[B × 1]`) and `target`.
pub fn loss_reward<B: Backend>(b: &mut B, pred: &B::Value, target: &[f64]) -> Result<B::Value> {
    if target.is_empty() {
        return Err(invalid("empty batch"));
    }
    let shape = b.value(pred).shape().to_vec();
    if shape.iter().product::<usize>() != target.len() {
        return Err(invalid(format!(
            "{shape:?} predictions for {} targets",
            target.len()
        )));
    }
    let t = b.constant(Tensor::new(shape, target.to_vec())?);
    let d = b.sub(pred, &t)?;
    let sq = b.mul(&d, &d)?;
    b.mean(&sq, None)
}

/// Mean negative log-softmax of each row's target class.
pub fn loss_action<B: Backend>(b: &mut B, logits: &B::Value, target: &[usize]) -> Result<B::Value> {
    if target.is_empty() {
        return Err(invalid("empty batch"));
    }
    let (rows, cols) = {
        let v = b.value(logits);
        (v.rows(), v.cols())
    };
    if rows != target.len() {
        return Err(invalid(format!(
            "{rows} logit rows for {} targets",
            target.len()
        )));
    }
    let mut onehot = Tensor::zeros(&[rows, cols]);
    for (i, &t) in target.iter().enumerate() {
        if t >= cols {
            return Err(invalid(format!("target {t} outside {cols} classes")));
        }
        onehot.data_mut()[i * cols + t] = 1.0;
    }
    let ls = b.log_softmax_rows(logits)?;
    let oh = b.constant(onehot);
    let picked = b.mul(&ls, &oh)?;
    let s = b.sum(&picked, None)?;
    b.scale(&s, -1.0 / rows as f64)
}

/// `l_e + β·l_g`; with `β = 0` the action loss is left out of the graph.
pub fn total_loss<B: Backend>(
    b: &mut B,
    l_e: &B::Value,
    l_g: &B::Value,
    beta: f64,
) -> Result<B::Value> {
    if beta == 0.0 {
        return Ok(l_e.clone());
    }
    let g = b.scale(l_g, beta)?;
    b.add(l_e, &g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub reward: f64,
    pub action: f64,
    pub total: f64,
}

fn targets(segs: &[&MaskedSegment]) -> (Vec<f64>, Vec<usize>) {
    (
        segs.iter().map(|s| s.target_reward).collect(),
        segs.iter().map(|s| s.target_action).collect(),
    )
}

/// Builds the loss for a batch on `b`. Passing `rng` enables dropout.
pub fn batch_loss<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    weights: &crate::model::Weights<B::Value>,
    segs: &[&MaskedSegment],
    beta: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(B::Value, Losses)> {
    let out = forward(b, cfg, weights, segs, rng)?;
    let (r, a) = targets(segs);
    let l_e = loss_reward(b, &out.reward, &r)?;
    let l_g = loss_action(b, &out.logits, &a)?;
    let total = total_loss(b, &l_e, &l_g, beta)?;
    let losses = Losses {
        reward: b.value(&l_e).item(),
        action: b.value(&l_g).item(),
        total: b.value(&total).item(),
    };
    Ok((total, losses))
}

/// Dropout-free loss averaged over `segs`, evaluated in chunks.
pub fn evaluate_loss(
    model: &Model,
    segs: &[MaskedSegment],
    beta: f64,
    chunk: usize,
) -> Result<Losses> {
    if segs.is_empty() {
        return Err(invalid("no segments to evaluate"));
    }
    let mut b = Eager;
    let w = model.params.bind(&mut b);
    let mut acc = Losses {
        reward: 0.0,
        action: 0.0,
        total: 0.0,
    };
    for part in segs.chunks(chunk.max(1)) {
        let refs: Vec<&MaskedSegment> = part.iter().collect();
        let (_, l) = batch_loss(&mut b, &model.config, &w, &refs, beta, None)?;
        let f = part.len() as f64 / segs.len() as f64;
        acc.reward += l.reward * f;
        acc.action += l.action * f;
        acc.total += l.total * f;
    }
    Ok(acc)
}

/// Uniform `(trajectory, t)` sampler over every step in the dataset.
#[derive(Clone, Debug)]
pub struct StepSampler {
    /// Cumulative step counts.
    offsets: Vec<usize>,
}

impl StepSampler {
    pub fn new(data: &[Trajectory]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(data.len());
        let mut total = 0;
        for t in data {
            total += t.len();
            offsets.push(total);
        }
        if total == 0 {
            return Err(invalid("dataset has no steps"));
        }
        Ok(Self { offsets })
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().expect("non-empty")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let flat = rng.random_range(0..self.total());
        let traj = self.offsets.partition_point(|&o| o <= flat);
        let start = if traj == 0 { 0 } else { self.offsets[traj - 1] };
        (traj, flat - start)
    }
}

/// Draws `n` segments; `m` is sampled per segment when `adaptive` is set.
pub fn sample_segments<R: Rng + ?Sized>(
    data: &[Trajectory],
    sampler: &StepSampler,
    context: usize,
    n: usize,
    adaptive: bool,
    rng: &mut R,
) -> Result<Vec<MaskedSegment>> {
    (0..n)
        .map(|_| {
            let (i, t) = sampler.sample(rng);
            let m = if adaptive {
                sample_mask(t, context, rng)
            } else {
                context.min(t + 1)
            };
            build_segment(&data[i], t, context, m)
        })
        .collect()
}

/// Decoupled-weight-decay Adam with per-tensor moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(params: &ModelParams, lr: f64, weight_decay: f64) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            lr,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| invalid(format!("no gradient for {name}")))?;
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| invalid(format!("no moment for {name}")))?;
            let v = self
                .v
                .get_mut(name)
                .ok_or_else(|| invalid(format!("no moment for {name}")))?;
            let (lr, wd) = (self.lr, self.weight_decay);
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + wd * pd[i]);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: usize,
    pub losses: Losses,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.step, self.losses.reward, self.losses.action, self.losses.total
        )
    }
}

/// Model plus optimizer state; everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub train: TrainConfig,
    pub opt: AdamW,
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { step },
        other => other,
    }
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let params = ModelParams::init(&model_cfg, &mut init_rng(train.seed))?;
        let model = Model::new(model_cfg, params)?;
        let opt = AdamW::new(&model.params, train.lr, train.weight_decay);
        Ok(Self { model, train, opt })
    }

    /// Number of completed optimizer steps.
    pub fn steps_done(&self) -> usize {
        self.opt.step as usize
    }

    /// Gradients of the loss for one sampled batch, without updating.
    pub fn gradients(
        &self,
        data: &[Trajectory],
        sampler: &StepSampler,
    ) -> Result<(Losses, BTreeMap<String, Tensor>)> {
        let step = self.steps_done() + 1;
        let mut rng = step_rng(self.train.seed, self.opt.step);
        let cfg = &self.model.config;
        let segs = sample_segments(
            data,
            sampler,
            cfg.context,
            self.train.batch_size,
            self.train.adaptive_mask,
            &mut rng,
        )?;
        let refs: Vec<&MaskedSegment> = segs.iter().collect();
        let mut tape = Tape::new();
        let w = self.model.params.bind(&mut tape);
        let (loss, losses) = batch_loss(&mut tape, cfg, &w, &refs, self.train.beta, Some(&mut rng))
            .map_err(diverged(step))?;
        if !losses.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        let mut g = tape.backward(loss).map_err(diverged(step))?;
        let grads = w.iter().map(|(k, v)| (k.clone(), g.take(*v))).collect();
        Ok((losses, grads))
    }

    /// One optimizer step. On divergence the parameters are left untouched.
    pub fn step(&mut self, data: &[Trajectory], sampler: &StepSampler) -> Result<StepRecord> {
        let (losses, mut grads) = self.gradients(data, sampler)?;
        let grad_norm = clip_grad_norm(&mut grads, self.train.grad_clip);
        let step = self.steps_done() + 1;
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step });
        }
        let mut next = self.model.params.clone();
        let mut opt = self.opt.clone();
        opt.update(&mut next, &grads)?;
        if next.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged { step });
        }
        self.model.params = next;
        self.opt = opt;
        Ok(StepRecord {
            step,
            losses,
            grad_norm,
        })
    }

    /// Trains until `train.steps` steps are done, writing a metrics row every
    /// `eval_every` steps and on the final step.
    pub fn run<W: Write>(
        &mut self,
        data: &[Trajectory],
        mut metrics: Option<&mut W>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        let sampler = StepSampler::new(data)?;
        let mut records = Vec::new();
        while self.steps_done() < self.train.steps {
            let rec = self.step(data, &sampler)?;
            if rec.step % self.train.eval_every == 0 || rec.step == self.train.steps {
                if let Some(w) = metrics.as_deref_mut() {
                    writeln!(w, "{}", rec.csv_row())?;
                }
            }
            on_step(&rec);
            records.push(rec);
        }
        if let Some(w) = metrics {
            w.flush()?;
        }
        Ok(records)
    }
}
