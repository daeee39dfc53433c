//! Part-conditioned embedding prior.
//!
//! Two objectives share one dense network and one input layout:
//!
//! * diffusion prior: the network sees a noised target `e_t` and predicts the
//!   clean embedding `e` directly, loss `‖e − P(e_t, t, c)‖²`;
//! * rectified flow: the network sees `x_t = (1−t)·x₀ + t·e` and predicts the
//!   velocity `e − x₀`.
//!
//! Network input is `[state (d) | time features (16) | slots (4d) | mask (4)]`.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::nn::{adam_step, read_checkpoint, write_checkpoint, AdamState, DenseNet, Gradients, NnError};
use crate::seed::{gaussian_vec, mix_seed, rng_from};
use crate::world::{condition_block, ConditionSet, Embedding, TrainingPair, WorldHeader, WorldSpec, SLOT_COUNT};

pub const TIME_FEATURES: usize = 16;
pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch or dataset")]
    Empty,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "diffusion")]
    DiffusionPrior,
    #[serde(rename = "flow")]
    RectifiedFlow,
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diffusion" | "diffusion_prior" => Ok(Objective::DiffusionPrior),
            "flow" | "rectified_flow" => Ok(Objective::RectifiedFlow),
            other => Err(format!("unknown objective `{other}` (expected flow or diffusion)")),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::DiffusionPrior => "diffusion",
            Objective::RectifiedFlow => "flow",
        })
    }
}

/// Linear β schedule. Index `t − 1` holds step `t`, so `alpha_bar(1) = α₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 2, "schedule needs at least two steps");
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        NoiseSchedule { betas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ [1, T]`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `e_t = √ᾱ_t · e + √(1−ᾱ_t) · ε`
    pub fn q_sample(&self, e: &[f64], t: usize, noise: &[f64]) -> Vec<f64> {
        assert!((1..=self.steps()).contains(&t), "timestep {t} outside [1, T]");
        let ab = self.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        e.iter().zip(noise).map(|(x, z)| s * x + n * z).collect()
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, BETA_START, BETA_END)
    }
}

/// Sinusoidal features of a time normalized to `[0, 1]`: `sin(ω_j t)` then
/// `cos(ω_j t)` with `ω_j = π · 2^(j−1)`, `j = 0..8`.
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut f = [0.0; TIME_FEATURES];
    for j in 0..TIME_FEATURES / 2 {
        let w = std::f64::consts::PI * 2f64.powi(j as i32 - 1);
        f[j] = (w * t).sin();
        f[j + TIME_FEATURES / 2] = (w * t).cos();
    }
    f
}

pub fn input_dim(d: usize) -> usize {
    d + TIME_FEATURES + SLOT_COUNT * d + SLOT_COUNT
}

pub fn cond_dim(d: usize) -> usize {
    SLOT_COUNT * d + SLOT_COUNT
}

/// Appends one network input row.
pub fn encode_input(state: &[f64], t: f64, cond: Option<&[f64]>, out: &mut Vec<f64>) {
    let d = state.len();
    out.extend_from_slice(state);
    out.extend_from_slice(&time_features(t));
    match cond {
        Some(c) => {
            debug_assert_eq!(c.len(), cond_dim(d));
            out.extend_from_slice(c);
        }
        None => out.extend(std::iter::repeat_n(0.0, cond_dim(d))),
    }
}

/// One training item: flattened condition block and target embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorExample {
    pub cond: Vec<f64>,
    pub target: Vec<f64>,
}

impl PriorExample {
    pub fn from_pair(pair: &TrainingPair) -> Self {
        let d = pair.target.dim();
        PriorExample { cond: condition_block(&pair.cond, d), target: pair.target.0.clone() }
    }
}

/// Noised state of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    /// `e_t` (diffusion) or `x_t` (flow).
    pub state: Vec<f64>,
    /// Integer step for diffusion, `[0, 1]` for flow.
    pub t: f64,
    /// `ε` (diffusion) or `x₀` (flow).
    pub noise: Vec<f64>,
    pub dropped: bool,
}

/// A drawn minibatch: network inputs and regression targets, row-major.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub d: usize,
    pub batch: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub clean: Vec<f64>,
    pub states: Vec<DiffusionState>,
}

/// Samples `t ~ U{1..T}`, `ε ~ N(0, I)` and condition dropout per item.
pub fn draw_diffusion_batch<R: Rng + ?Sized>(
    examples: &[&PriorExample],
    sched: &NoiseSchedule,
    cond_dropout: f64,
    rng: &mut R,
) -> LossBatch {
    draw_batch(examples, cond_dropout, rng, |e, rng| {
        let t = rng.random_range(1..=sched.steps());
        let noise = gaussian_vec(rng, e.len());
        let state = sched.q_sample(e, t, &noise);
        (state, t as f64, t as f64 / sched.steps() as f64, noise, e.to_vec())
    })
}

/// Samples `x₀ ~ N(0, I)`, `t ~ U[0, 1]` and condition dropout per item.
pub fn draw_flow_batch<R: Rng + ?Sized>(examples: &[&PriorExample], cond_dropout: f64, rng: &mut R) -> LossBatch {
    draw_batch(examples, cond_dropout, rng, |e, rng| {
        let x0 = gaussian_vec(rng, e.len());
        let t: f64 = rng.random();
        let state: Vec<f64> = x0.iter().zip(e).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let velocity = e.iter().zip(&x0).map(|(a, b)| a - b).collect();
        (state, t, t, x0, velocity)
    })
}

type Draw = (Vec<f64>, f64, f64, Vec<f64>, Vec<f64>);

fn draw_batch<R, F>(examples: &[&PriorExample], cond_dropout: f64, rng: &mut R, mut draw: F) -> LossBatch
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], &mut R) -> Draw,
{
    let d = examples.first().map_or(0, |e| e.target.len());
    let mut out = LossBatch {
        d,
        batch: examples.len(),
        inputs: Vec::with_capacity(examples.len() * input_dim(d)),
        targets: Vec::with_capacity(examples.len() * d),
        clean: Vec::with_capacity(examples.len() * d),
        states: Vec::with_capacity(examples.len()),
    };
    for ex in examples {
        let (state, t, t_norm, noise, target) = draw(&ex.target, rng);
        let dropped = cond_dropout > 0.0 && rng.random::<f64>() < cond_dropout;
        encode_input(&state, t_norm, (!dropped).then_some(&ex.cond[..]), &mut out.inputs);
        out.targets.extend_from_slice(&target);
        out.clean.extend_from_slice(&ex.target);
        out.states.push(DiffusionState { state, t, noise, dropped });
    }
    out
}

/// Mean over items of `‖prediction − target‖²`.
pub fn batch_loss(predictions: &[f64], batch: &LossBatch) -> f64 {
    let sum: f64 = predictions.iter().zip(&batch.targets).map(|(p, t)| (p - t) * (p - t)).sum();
    sum / batch.batch as f64
}

/// Loss and exact gradients of [`batch_loss`]. With `shards > 1` rows are
/// split into contiguous shards evaluated through `exec` and summed in shard
/// order.
pub fn loss_and_grad(net: &DenseNet, batch: &LossBatch, shards: usize, exec: Exec) -> Result<(f64, Gradients), PriorError> {
    if batch.batch == 0 {
        return Err(PriorError::Empty);
    }
    let shards = shards.clamp(1, batch.batch);
    let in_dim = net.input_dim();
    let d = batch.d;
    let bounds: Vec<(usize, usize)> =
        (0..shards).map(|s| (s * batch.batch / shards, (s + 1) * batch.batch / shards)).collect();
    let parts = exec.map_slice(&bounds, |&(lo, hi)| -> Result<(f64, Gradients), NnError> {
        let (y, tape) = net.forward_batch(&batch.inputs[lo * in_dim..hi * in_dim], hi - lo)?;
        let targets = &batch.targets[lo * d..hi * d];
        let mut sum = 0.0;
        let dy: Vec<f64> = y
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                let r = p - t;
                sum += r * r;
                2.0 * r / batch.batch as f64
            })
            .collect();
        let (g, _) = net.backward(&tape, &dy)?;
        Ok((sum, g))
    });
    let mut total = 0.0;
    let mut grads: Option<Gradients> = None;
    for part in parts {
        let (s, g) = part?;
        total += s;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.add_assign(&g),
        }
    }
    Ok((total / batch.batch as f64, grads.expect("at least one shard")))
}

/// Diffusion-prior objective on a freshly drawn minibatch.
pub fn loss_diffusion_prior<R: Rng + ?Sized>(
    net: &DenseNet,
    examples: &[&PriorExample],
    sched: &NoiseSchedule,
    cond_dropout: f64,
    rng: &mut R,
) -> Result<(f64, Gradients), PriorError> {
    let batch = draw_diffusion_batch(examples, sched, cond_dropout, rng);
    let (loss, g) = loss_and_grad(net, &batch, 1, Exec::Sequential)?;
    if !loss.is_finite() {
        return Err(PriorError::NonFiniteLoss { step: 0 });
    }
    Ok((loss, g))
}

/// Rectified-flow objective on a freshly drawn minibatch.
pub fn loss_rectified_flow<R: Rng + ?Sized>(
    net: &DenseNet,
    examples: &[&PriorExample],
    cond_dropout: f64,
    rng: &mut R,
) -> Result<(f64, Gradients), PriorError> {
    let batch = draw_flow_batch(examples, cond_dropout, rng);
    let (loss, g) = loss_and_grad(net, &batch, 1, Exec::Sequential)?;
    if !loss.is_finite() {
        return Err(PriorError::NonFiniteLoss { step: 0 });
    }
    Ok((loss, g))
}

/// Anything that maps a batch of prior inputs to a batch of outputs.
pub trait Predictor: Sync {
    fn predict(&self, inputs: &[f64], batch: usize) -> Vec<f64>;
}

impl Predictor for DenseNet {
    fn predict(&self, inputs: &[f64], batch: usize) -> Vec<f64> {
        self.predict_batch(inputs, batch).expect("prior input width matches the network")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub steps: usize,
    pub cond_dropout: f64,
    pub cfg_scale: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub timesteps: usize,
    pub log_every: usize,
    /// Gradient shards per step; 1 keeps the reduction order of a single pass.
    pub grad_shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::RectifiedFlow,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            batch_size: 64,
            steps: 20_000,
            cond_dropout: 0.1,
            cfg_scale: 1.0,
            seed: 0,
            hidden: vec![256, 256, 256],
            timesteps: DEFAULT_TIMESTEPS,
            log_every: 100,
            grad_shards: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PriorError> {
        let bad = |m: &str| Err(PriorError::InvalidConfig(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return bad("cond_dropout must be in [0, 1)");
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.timesteps < 2 {
            return bad("timesteps must be at least 2");
        }
        if self.log_every == 0 || self.grad_shards == 0 {
            return bad("log_every and grad_shards must be positive");
        }
        Ok(())
    }

    pub fn layer_dims(&self, d: usize) -> Vec<usize> {
        let mut dims = vec![input_dim(d)];
        dims.extend(&self.hidden);
        dims.push(d);
        dims
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / self.steps as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: DenseNet,
    pub adam: AdamState,
    /// Loss of every step.
    pub losses: Vec<f64>,
    /// `(step, mean loss since the previous row)`; step 0 is its own row.
    pub curve: Vec<(usize, f64)>,
}

impl TrainOutput {
    pub fn write_loss_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss")?;
        for (s, l) in &self.curve {
            writeln!(w, "{s},{l:.9e}")?;
        }
        w.flush()
    }

    /// Mean loss of the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64
    }
}

/// Runs `config.steps` Adam steps over `examples`, reshuffled every epoch.
/// Deterministic given the config, the data and the shard count.
pub fn train(config: &TrainConfig, examples: &[PriorExample], exec: Exec) -> Result<TrainOutput, PriorError> {
    config.validate()?;
    let d = examples.first().ok_or(PriorError::Empty)?.target.len();
    let mut net = DenseNet::new(&config.layer_dims(d), mix_seed(config.seed, 1))?;
    let mut adam = AdamState::new(&net, config.lr);
    let sched = NoiseSchedule::linear(config.timesteps, BETA_START, BETA_END);
    let mut rng = rng_from(mix_seed(config.seed, 2));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut losses = Vec::with_capacity(config.steps);
    let mut curve = Vec::new();
    let mut window = (0.0, 0usize);
    for step in 0..config.steps {
        let mut batch_refs = Vec::with_capacity(config.batch_size);
        while batch_refs.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_refs.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let batch = match config.objective {
            Objective::DiffusionPrior => draw_diffusion_batch(&batch_refs, &sched, config.cond_dropout, &mut rng),
            Objective::RectifiedFlow => draw_flow_batch(&batch_refs, config.cond_dropout, &mut rng),
        };
        let (loss, grads) = loss_and_grad(&net, &batch, config.grad_shards, exec)?;
        if !loss.is_finite() {
            return Err(PriorError::NonFiniteLoss { step });
        }
        adam.lr = config.lr_at(step);
        adam_step(&mut net, &grads, &mut adam).map_err(|e| match e {
            NnError::NonFiniteGradient(_) => PriorError::NonFiniteLoss { step },
            other => other.into(),
        })?;
        losses.push(loss);
        window.0 += loss;
        window.1 += 1;
        if step == 0 || (step + 1) % config.log_every == 0 || step + 1 == config.steps {
            let row_step = if step == 0 { 0 } else { step + 1 };
            curve.push((row_step, window.0 / window.1 as f64));
            window = (0.0, 0);
        }
    }
    adam.lr = config.lr;
    Ok(TrainOutput { net, adam, losses, curve })
}

/// Euler integration of the learned velocity field from `x₀ ~ N(0, I)`,
/// renormalized. `cfg_scale == 1` evaluates the conditional branch only.
pub fn sample_flow<P: Predictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    cond: &[f64],
    d: usize,
    n_steps: usize,
    cfg_scale: f64,
    rng: &mut R,
) -> Embedding {
    let x0 = gaussian_vec(rng, d);
    flow_from(net, &[cond.to_vec()], vec![x0], n_steps, cfg_scale).pop().unwrap()
}

fn flow_from<P: Predictor + ?Sized>(
    net: &P,
    conds: &[Vec<f64>],
    mut xs: Vec<Vec<f64>>,
    n_steps: usize,
    cfg_scale: f64,
) -> Vec<Embedding> {
    assert!(n_steps >= 1, "n_steps must be at least 1");
    let b = xs.len();
    let dt = 1.0 / n_steps as f64;
    for s in 0..n_steps {
        let t = s as f64 * dt;
        let v_cond = predict_rows(net, &xs, t, conds.iter().map(|c| Some(&c[..])));
        let v = if cfg_scale == 1.0 {
            v_cond
        } else {
            let v_unc = predict_rows(net, &xs, t, std::iter::repeat_n(None, b));
            v_cond
                .iter()
                .zip(&v_unc)
                .map(|(c, u)| c.iter().zip(u).map(|(c, u)| u + cfg_scale * (c - u)).collect())
                .collect()
        };
        for (x, v) in xs.iter_mut().zip(&v) {
            x.iter_mut().zip(v).for_each(|(x, v)| *x += dt * v);
        }
    }
    xs.into_iter().map(|x| Embedding(x).normalized()).collect()
}

fn predict_rows<'a, P: Predictor + ?Sized>(
    net: &P,
    xs: &[Vec<f64>],
    t: f64,
    conds: impl Iterator<Item = Option<&'a [f64]>>,
) -> Vec<Vec<f64>> {
    let d = xs[0].len();
    let mut inputs = Vec::with_capacity(xs.len() * input_dim(d));
    for (x, c) in xs.iter().zip(conds) {
        encode_input(x, t, c, &mut inputs);
    }
    net.predict(&inputs, xs.len()).chunks_exact(d).map(<[f64]>::to_vec).collect()
}

/// Deterministic DDIM (η = 0) reverse loop with the clean-sample
/// parameterization over `n_steps` evenly spaced timesteps, renormalized.
pub fn sample_diffusion<P: Predictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    cond: &[f64],
    d: usize,
    sched: &NoiseSchedule,
    n_steps: usize,
    rng: &mut R,
) -> Embedding {
    let x = gaussian_vec(rng, d);
    ddim_from(net, &[cond.to_vec()], vec![x], sched, n_steps).pop().unwrap()
}

fn ddim_timesteps(total: usize, n_steps: usize) -> Vec<usize> {
    let n = n_steps.clamp(1, total);
    (0..n).map(|i| total - i * total / n).collect()
}

fn ddim_from<P: Predictor + ?Sized>(
    net: &P,
    conds: &[Vec<f64>],
    mut xs: Vec<Vec<f64>>,
    sched: &NoiseSchedule,
    n_steps: usize,
) -> Vec<Embedding> {
    let ts = ddim_timesteps(sched.steps(), n_steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
        let t_norm = t as f64 / sched.steps() as f64;
        let clean = predict_rows(net, &xs, t_norm, conds.iter().map(|c| Some(&c[..])));
        for (x, e_hat) in xs.iter_mut().zip(&clean) {
            for (xv, &ev) in x.iter_mut().zip(e_hat) {
                let eps = (*xv - ab.sqrt() * ev) / (1.0 - ab).sqrt();
                *xv = ab_prev.sqrt() * ev + (1.0 - ab_prev).sqrt() * eps;
            }
        }
    }
    xs.into_iter().map(|x| Embedding(x).normalized()).collect()
}

/// Sampler settings shared by the batch entry points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub n_steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { n_steps: 50, cfg_scale: 1.0, seed: 0 }
    }
}

const SAMPLE_CHUNK: usize = 32;

/// Samples one embedding per condition block. Sample `i` starts from noise
/// drawn from its own stream `mix_seed(seed, i)`; chunks run through `exec`.
pub fn sample_batch<P: Predictor + ?Sized>(
    net: &P,
    objective: Objective,
    conds: &[Vec<f64>],
    d: usize,
    sched: &NoiseSchedule,
    opts: SampleOptions,
    exec: Exec,
) -> Vec<Embedding> {
    let chunks: Vec<usize> = (0..conds.len().div_ceil(SAMPLE_CHUNK)).collect();
    exec.map_slice(&chunks, |&c| {
        let lo = c * SAMPLE_CHUNK;
        let hi = (lo + SAMPLE_CHUNK).min(conds.len());
        let xs: Vec<Vec<f64>> =
            (lo..hi).map(|i| gaussian_vec(&mut rng_from(mix_seed(opts.seed, i as u64)), d)).collect();
        match objective {
            Objective::RectifiedFlow => flow_from(net, &conds[lo..hi], xs, opts.n_steps, opts.cfg_scale),
            Objective::DiffusionPrior => ddim_from(net, &conds[lo..hi], xs, sched, opts.n_steps),
        }
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Metadata stored next to a prior checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMeta {
    pub objective: Objective,
    pub world: WorldHeader,
    pub train: TrainConfig,
}

/// A trained prior: network plus the settings needed to sample from it.
#[derive(Debug, Clone)]
pub struct PriorModel {
    pub meta: PriorMeta,
    pub net: DenseNet,
}

impl PriorModel {
    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.meta.train.timesteps, BETA_START, BETA_END)
    }

    /// Writes `<path>` (binary checkpoint) and `<path>.json` (metadata).
    pub fn save(&self, path: &Path, adam: Option<&AdamState>) -> Result<(), PriorError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&self.net, adam, file)?;
        std::fs::write(meta_path(path), serde_json::to_vec_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PriorError> {
        let (net, _) = read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let meta: PriorMeta = serde_json::from_slice(&std::fs::read(meta_path(path))?)?;
        if net.output_dim() != meta.world.d || net.input_dim() != input_dim(meta.world.d) {
            return Err(PriorError::InvalidConfig("checkpoint shape does not match its metadata".into()));
        }
        Ok(PriorModel { meta, net })
    }

    pub fn sample(&self, conds: &[Vec<f64>], opts: SampleOptions, exec: Exec) -> Vec<Embedding> {
        sample_batch(&self.net, self.meta.objective, conds, self.meta.world.d, &self.schedule(), opts, exec)
    }

    pub fn sample_condition(&self, cond: &ConditionSet, opts: SampleOptions) -> Embedding {
        let block = condition_block(cond, self.meta.world.d);
        self.sample(&[block], opts, Exec::Sequential).pop().unwrap()
    }
}

pub fn meta_path(ckpt: &Path) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Analytic predictors over a known world, used as zero-loss references.
pub mod oracle {
    use super::*;

    /// Composite target encoded by a condition block, or `None` when all slots
    /// are dropped.
    pub fn target_from_block(world: &WorldSpec, block: &[f64]) -> Option<Vec<f64>> {
        let d = world.dim();
        let slots: Vec<&[f64]> =
            (0..SLOT_COUNT).filter(|&i| block[SLOT_COUNT * d + i] > 0.5).map(|i| &block[i * d..(i + 1) * d]).collect();
        (!slots.is_empty()).then(|| world.compose_embeddings(slots.into_iter()).0)
    }

    /// Time in `[0, 1]` recovered from the lowest-frequency feature pair.
    pub fn time_from_features(f: &[f64]) -> f64 {
        f[0].atan2(f[TIME_FEATURES / 2]) / (std::f64::consts::PI / 2.0)
    }

    /// Predicts the clean target regardless of the noised state.
    pub struct CleanOracle<'a>(pub &'a WorldSpec);

    /// Exact rectified-flow velocity `(e − x_t)/(1 − t)`.
    pub struct VelocityOracle<'a>(pub &'a WorldSpec);

    impl Predictor for CleanOracle<'_> {
        fn predict(&self, inputs: &[f64], batch: usize) -> Vec<f64> {
            let d = self.0.dim();
            inputs
                .chunks_exact(input_dim(d))
                .take(batch)
                .flat_map(|row| {
                    target_from_block(self.0, &row[d + TIME_FEATURES..]).unwrap_or_else(|| vec![0.0; d])
                })
                .collect()
        }
    }

    impl Predictor for VelocityOracle<'_> {
        fn predict(&self, inputs: &[f64], batch: usize) -> Vec<f64> {
            let d = self.0.dim();
            inputs
                .chunks_exact(input_dim(d))
                .take(batch)
                .flat_map(|row| {
                    let x = &row[..d];
                    let t = time_from_features(&row[d..d + TIME_FEATURES]);
                    let e = target_from_block(self.0, &row[d + TIME_FEATURES..]).unwrap_or_else(|| vec![0.0; d]);
                    e.iter().zip(x).map(|(e, x)| (e - x) / (1.0 - t)).collect::<Vec<_>>()
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::{CleanOracle, VelocityOracle};
    use super::*;
    use crate::nn::grad_check;
    use crate::taxonomy::{generate_corpus, Taxonomy};
    use crate::world::make_dataset;

    fn setup(n: usize) -> (WorldSpec, Vec<PriorExample>) {
        let t = Taxonomy::default_shipped();
        let w = WorldSpec::new(0, 64, &t).unwrap();
        let corpus = generate_corpus(&t, n, 1, 0.5, Exec::Parallel).unwrap();
        let ex = make_dataset(&corpus, &w, Exec::Parallel).unwrap().iter().map(PriorExample::from_pair).collect();
        (w, ex)
    }

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        // ᾱ_T from the product, independent of the cached values
        let prod: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!(prod < 1e-4);
    }

    #[test]
    fn q_sample_endpoints_and_variance() {
        let s = NoiseSchedule::default();
        let e = vec![0.6, -0.8];
        let near = s.q_sample(&e, 1, &[0.0, 0.0]);
        assert!((near[0] - 0.6 * (1.0f64 - 1e-4).sqrt()).abs() < 1e-15);
        let far = s.q_sample(&e, 1000, &[0.0, 0.0]);
        assert!((far[0] * far[0] + far[1] * far[1]).sqrt() <= s.alpha_bar(1000).sqrt() + 1e-15);

        let mut rng = rng_from(3);
        let t = 300;
        let draws: Vec<f64> = (0..10_000).map(|_| s.q_sample(&[0.0], t, &gaussian_vec(&mut rng, 1))[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let expected = 1.0 - s.alpha_bar(t);
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn input_layout() {
        assert_eq!(input_dim(64), 64 + 16 + 256 + 4);
        let mut row = Vec::new();
        encode_input(&[1.0; 4], 0.25, None, &mut row);
        assert_eq!(row.len(), input_dim(4));
        assert!(row[4 + TIME_FEATURES..].iter().all(|&v| v == 0.0));
        assert!((oracle::time_from_features(&time_features(0.37)) - 0.37).abs() < 1e-14);
    }

    #[test]
    fn zero_net_losses() {
        let (_, ex) = setup(256);
        let refs: Vec<&PriorExample> = ex.iter().collect();
        let net = DenseNet::zeros(&[input_dim(64), 8, 64]).unwrap();
        let (l, _) = loss_diffusion_prior(&net, &refs, &NoiseSchedule::default(), 0.0, &mut rng_from(1)).unwrap();
        assert!((l - 1.0).abs() < 1e-12, "{l}");
        // E‖e − x₀‖² = 1 + d
        let mut acc = 0.0;
        let mut rng = rng_from(2);
        for _ in 0..40 {
            acc += loss_rectified_flow(&net, &refs, 0.0, &mut rng).unwrap().0;
        }
        let mean = acc / 40.0;
        assert!((mean - 65.0).abs() < 0.65, "{mean}");
    }

    #[test]
    fn oracle_predictors_have_zero_loss() {
        let (w, ex) = setup(128);
        let refs: Vec<&PriorExample> = ex.iter().collect();
        let b = draw_diffusion_batch(&refs, &NoiseSchedule::default(), 0.0, &mut rng_from(5));
        assert!(batch_loss(&CleanOracle(&w).predict(&b.inputs, b.batch), &b) < 1e-10);
        let b = draw_flow_batch(&refs, 0.0, &mut rng_from(6));
        assert!(batch_loss(&VelocityOracle(&w).predict(&b.inputs, b.batch), &b) < 1e-10);
        // harness-side oracle: e − x₀ from the recorded noise
        let direct: Vec<f64> = b
            .states
            .iter()
            .zip(b.clean.chunks_exact(64))
            .flat_map(|(s, e)| e.iter().zip(&s.noise).map(|(e, x)| e - x).collect::<Vec<_>>())
            .collect();
        assert!(batch_loss(&direct, &b) < 1e-10);
    }

    #[test]
    fn flow_interpolation_endpoints() {
        let (_, ex) = setup(4);
        let refs: Vec<&PriorExample> = ex.iter().collect();
        let b = draw_flow_batch(&refs, 0.0, &mut rng_from(1));
        for (s, e) in b.states.iter().zip(b.clean.chunks_exact(64)) {
            let at = |t: f64| -> Vec<f64> { s.noise.iter().zip(e).map(|(x, e)| (1.0 - t) * x + t * e).collect() };
            assert_eq!(at(0.0), s.noise);
            assert_eq!(at(1.0), e.to_vec());
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig { hidden: vec![32, 32], batch_size: 8, steps: 1, ..TrainConfig::default() }
    }

    #[test]
    fn both_losses_pass_grad_check() {
        let (_, ex) = setup(64);
        let refs: Vec<&PriorExample> = ex[..16].iter().collect();
        let net = DenseNet::new(&small_config().layer_dims(64), 3).unwrap();
        let sched = NoiseSchedule::default();
        let mut rng = rng_from(9);
        let e1 = grad_check(
            &net,
            |n| loss_diffusion_prior(n, &refs, &sched, 0.1, &mut rng_from(4)).unwrap(),
            20,
            1e-3,
            &mut rng,
        );
        let e2 = grad_check(&net, |n| loss_rectified_flow(n, &refs, 0.1, &mut rng_from(4)).unwrap(), 20, 1e-3, &mut rng);
        assert!(e1 < 1e-4 && e2 < 1e-4, "{e1} {e2}");
    }

    #[test]
    fn sharded_gradients_match_single_pass() {
        let (_, ex) = setup(32);
        let refs: Vec<&PriorExample> = ex.iter().collect();
        let net = DenseNet::new(&small_config().layer_dims(64), 3).unwrap();
        let b = draw_flow_batch(&refs, 0.1, &mut rng_from(1));
        let (l1, g1) = loss_and_grad(&net, &b, 1, Exec::Sequential).unwrap();
        let (l4, g4) = loss_and_grad(&net, &b, 4, Exec::Parallel).unwrap();
        assert!((l1 - l4).abs() < 1e-12);
        assert!(g1.iter().zip(g4.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let (_, g4b) = loss_and_grad(&net, &b, 4, Exec::Sequential).unwrap();
        assert_eq!(g4, g4b);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (_, ex) = setup(200);
        let cfg = TrainConfig { steps: 300, log_every: 100, ..small_config() };
        let a = train(&cfg, &ex, Exec::Sequential).unwrap();
        let b = train(&cfg, &ex, Exec::Parallel).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.net, b.net);
        assert_eq!(a.curve.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 100, 200, 300]);
        assert!(a.tail_mean(50) < a.losses[0]);
        let mut csv = Vec::new();
        a.write_loss_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("step,loss\n0,"));
    }

    #[test]
    fn bad_configs_rejected() {
        let (_, ex) = setup(4);
        for cfg in [
            TrainConfig { steps: 0, ..small_config() },
            TrainConfig { cond_dropout: 1.0, ..small_config() },
            TrainConfig { batch_size: 0, ..small_config() },
        ] {
            assert!(matches!(train(&cfg, &ex, Exec::Sequential), Err(PriorError::InvalidConfig(_))));
        }
        assert!(matches!(train(&small_config(), &[], Exec::Sequential), Err(PriorError::Empty)));
    }

    #[test]
    fn flow_sampler_straight_paths_with_oracle() {
        let (w, ex) = setup(8);
        let o = VelocityOracle(&w);
        for e in &ex {
            let one = sample_flow(&o, &e.cond, 64, 1, 1.0, &mut rng_from(3));
            let many = sample_flow(&o, &e.cond, 64, 50, 1.0, &mut rng_from(3));
            for ((a, b), t) in one.0.iter().zip(&many.0).zip(&e.target) {
                assert!((a - b).abs() < 1e-12);
                assert!((a - t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cfg_scale_one_is_conditional_branch() {
        let (_, ex) = setup(4);
        let net = DenseNet::new(&small_config().layer_dims(64), 1).unwrap();
        let a = sample_flow(&net, &ex[0].cond, 64, 10, 1.0, &mut rng_from(8));
        let x0 = gaussian_vec(&mut rng_from(8), 64);
        let b = flow_from(&net, &[ex[0].cond.clone()], vec![x0], 10, 1.0).pop().unwrap();
        assert_eq!(a, b);
        let guided = sample_flow(&net, &ex[0].cond, 64, 10, 3.0, &mut rng_from(8));
        assert_ne!(a, guided);
    }

    #[test]
    fn ddim_with_clean_oracle_returns_target() {
        let (w, ex) = setup(8);
        let sched = NoiseSchedule::default();
        for (i, e) in ex.iter().enumerate() {
            let s = sample_diffusion(&CleanOracle(&w), &e.cond, 64, &sched, 50, &mut rng_from(i as u64));
            for (a, b) in s.0.iter().zip(&e.target) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let net = DenseNet::new(&small_config().layer_dims(64), 1).unwrap();
        let a = sample_diffusion(&net, &ex[0].cond, 64, &sched, 20, &mut rng_from(2));
        let b = sample_diffusion(&net, &ex[0].cond, 64, &sched, 20, &mut rng_from(2));
        assert_eq!(a, b);
    }

    #[test]
    fn batch_sampling_is_mode_independent() {
        let (w, ex) = setup(70);
        let conds: Vec<Vec<f64>> = ex.iter().map(|e| e.cond.clone()).collect();
        let sched = NoiseSchedule::default();
        let opts = SampleOptions { n_steps: 5, cfg_scale: 1.0, seed: 4 };
        let o = CleanOracle(&w);
        let a = sample_batch(&o, Objective::DiffusionPrior, &conds, 64, &sched, opts, Exec::Sequential);
        let b = sample_batch(&o, Objective::DiffusionPrior, &conds, 64, &sched, opts, Exec::Parallel);
        assert_eq!(a, b);
        assert_eq!(a.len(), 70);
    }

    #[test]
    fn model_save_load() {
        let (_, ex) = setup(16);
        let cfg = TrainConfig { steps: 3, ..small_config() };
        let out = train(&cfg, &ex, Exec::Sequential).unwrap();
        let model = PriorModel {
            meta: PriorMeta { objective: cfg.objective, world: WorldHeader { world_seed: 0, d: 64 }, train: cfg },
            net: out.net,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prior.ckpt");
        model.save(&p, Some(&out.adam)).unwrap();
        let back = PriorModel::load(&p).unwrap();
        assert_eq!(back.net, model.net);
        assert_eq!(back.meta, model.meta);
    }
}
