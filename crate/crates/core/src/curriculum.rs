//! Two-stage training: teacher forcing on clean contexts, then flow forcing
//! on conditions mixed with the model's own partially denoised rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowformer::{forward, loss_mask, ConditionTokens, ModelConfig, ModelError, ModelParams};
use crate::flowmatch::{corrupt, loss_vpred_graph, mse_graph, ode_solve, s1_weight, sample_tau, FlowError, Parameterization, SolverConfig};
use crate::numerics::{Gradients, Graph, NumericsError, ParamSet, ParamVars, Scalar, Tensor, Var};
use crate::toyworld::Dataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("episodes need {need} frames, shortest has {got}")]
    DatasetTooShort { need: usize, got: usize },
    #[error("mixing weight {0} outside [0, 1]")]
    Lambda(f64),
    #[error("step {step} outside schedule of {total} steps")]
    Schedule { step: usize, total: usize },
    /// Parameters are left at their values from before `step`.
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl TrainError {
    fn is_non_finite(&self) -> bool {
        matches!(
            self,
            Self::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))
                | Self::Model(ModelError::Block {
                    source: NumericsError::NonFinite { .. },
                    ..
                })
                | Self::Numerics(NumericsError::NonFinite { .. })
                | Self::Flow(FlowError::NonFinite { .. } | FlowError::NonFiniteLoss)
        )
    }
}

/// Mixing-weight schedule over Stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSchedule {
    /// `λ = step / total`.
    #[default]
    Linear,
    Static(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Global ℓ2 gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_stage1: usize,
    pub batch_stage2: usize,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub tau_mid_min: f64,
    pub tau_mid_max: f64,
    pub lambda_schedule: LambdaSchedule,
    /// Euler steps of the Stage-2 partial rollout over `[τ_mid, 1]`.
    pub rollout_steps: usize,
    pub parameterization: Parameterization,
    /// Apply the `(1−τ)⁻²` weight in Stage 1.
    pub stage1_weighted: bool,
    /// Apply the `(1−τ)⁻²` weight in Stage 2.
    pub stage2_weighted: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.05,
            grad_clip: Some(1.0),
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_stage1: 8,
            batch_stage2: 8,
            steps_stage1: 1000,
            steps_stage2: 1000,
            tau_mid_min: 0.1,
            tau_mid_max: 0.9,
            lambda_schedule: LambdaSchedule::Linear,
            rollout_steps: 8,
            parameterization: Parameterization::Clean,
            stage1_weighted: true,
            stage2_weighted: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0) {
            return err("lr must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return err("grad_clip must be positive");
        }
        if self.batch_stage1 == 0 || self.batch_stage2 == 0 {
            return err("batch sizes must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return err("need 0 ≤ β < 1 and adam_eps > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay must be non-negative");
        }
        if !(0.0 < self.tau_mid_min && self.tau_mid_min <= self.tau_mid_max && self.tau_mid_max < 1.0) {
            return err("need 0 < tau_mid_min ≤ tau_mid_max < 1");
        }
        if self.rollout_steps == 0 {
            return err("rollout_steps must be ≥ 1");
        }
        if let LambdaSchedule::Static(l) = self.lambda_schedule {
            if !(0.0..=1.0).contains(&l) {
                return Err(TrainError::Lambda(l));
            }
        }
        Ok(())
    }
}

/// `λ` at `step` of `total`.
pub fn lambda_at(step: usize, total: usize, schedule: LambdaSchedule) -> Result<f64, TrainError> {
    match schedule {
        LambdaSchedule::Static(l) => Ok(l),
        LambdaSchedule::Linear => {
            if total == 0 || step > total {
                return Err(TrainError::Schedule { step, total });
            }
            Ok(step as f64 / total as f64)
        }
    }
}

/// Condition frame built from a clean frame and its partial rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedCondition<T> {
    pub tokens: Tensor<T>,
    pub lambda: f64,
    pub tau_mid: f64,
    /// `‖Ẑ_partial − Z‖`.
    pub rollout_error_norm: f64,
}

/// `(1−λ)·Z + λ·Ẑ`, exact at both ends.
pub fn mix_condition<T: Scalar>(clean: &Tensor<T>, partial: &Tensor<T>, lambda: f64, tau_mid: f64) -> Result<MixedCondition<T>, TrainError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TrainError::Lambda(lambda));
    }
    let diff = partial.sub(clean)?;
    let tokens = if lambda == 0.0 {
        clean.clone()
    } else if lambda == 1.0 {
        partial.clone()
    } else {
        let (a, b) = (T::lit(1.0 - lambda), T::lit(lambda));
        clean.zip_map(partial, |z, p| a * z + b * p)?
    };
    Ok(MixedCondition {
        tokens,
        lambda,
        tau_mid,
        rollout_error_norm: diff.norm().as_f64(),
    })
}

/// One teacher-forced training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Sample<T> {
    pub episode: usize,
    pub start: usize,
    pub cond: ConditionTokens<T>,
    pub target: Tensor<T>,
    pub target_frames: Vec<usize>,
    pub tau: f64,
    pub eps: Tensor<T>,
}

/// One flow-forcing example over a window of `k + m + 1` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Sample<T> {
    pub episode: usize,
    pub start: usize,
    pub window: Vec<Tensor<T>>,
    pub tau_mid: f64,
    /// Initial state of the partial rollout.
    pub rollout_noise: Tensor<T>,
    pub tau: f64,
    pub eps: Tensor<T>,
}

fn gaussian<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::matrix(rows, cols, data).expect("noise layout")
}

fn pick_window<T: Scalar, R: Rng>(ds: &Dataset<T>, span: usize, rng: &mut R) -> Result<(usize, usize), TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if ds.min_frames() < span {
        return Err(TrainError::DatasetTooShort {
            need: span,
            got: ds.min_frames(),
        });
    }
    let e = rng.random_range(0..ds.len());
    let start = rng.random_range(0..=ds.episodes[e].frames.len() - span);
    Ok((e, start))
}

fn stack<T: Scalar>(frames: &[Tensor<T>]) -> Result<Tensor<T>, TrainError> {
    let refs: Vec<&Tensor<T>> = frames.iter().collect();
    Ok(Tensor::concat_rows(&refs)?)
}

/// Uniform episode and window, clamped-uniform τ, standard normal ε.
pub fn sample_stage1_batch<T: Scalar, R: Rng>(ds: &Dataset<T>, model: &ModelConfig, batch: usize, rng: &mut R) -> Result<Vec<Stage1Sample<T>>, TrainError> {
    let (k, m) = (model.context_frames, model.chunk_frames);
    (0..batch)
        .map(|_| {
            let (e, start) = pick_window(ds, k + m, rng)?;
            let frames = &ds.episodes[e].frames;
            let cond = ConditionTokens {
                tokens: stack(&frames[start..start + k])?,
                frame_indices: (start..start + k).collect(),
            };
            let target = stack(&frames[start + k..start + k + m])?;
            let tau = sample_tau(rng);
            let eps = gaussian(target.rows(), target.cols(), rng);
            Ok(Stage1Sample {
                episode: e,
                start,
                cond,
                target,
                target_frames: (start + k..start + k + m).collect(),
                tau,
                eps,
            })
        })
        .collect()
}

pub fn sample_stage2_batch<T: Scalar, R: Rng>(
    ds: &Dataset<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Stage2Sample<T>>, TrainError> {
    let (k, m) = (model.context_frames, model.chunk_frames);
    let rows = m * model.tokens_per_frame;
    (0..batch)
        .map(|_| {
            let (e, start) = pick_window(ds, k + m + 1, rng)?;
            let window = ds.episodes[e].frames[start..start + k + m + 1].to_vec();
            let tau_mid = rng.random_range(cfg.tau_mid_min..=cfg.tau_mid_max);
            let rollout_noise = gaussian(rows, model.d_model, rng);
            let tau = sample_tau(rng);
            let eps = gaussian(rows, model.d_model, rng);
            Ok(Stage2Sample {
                episode: e,
                start,
                window,
                tau_mid,
                rollout_noise,
                tau,
                eps,
            })
        })
        .collect()
}

/// Loss of one noisy chunk on the graph.
#[allow(clippy::too_many_arguments)]
fn chunk_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    model: &ModelConfig,
    cond: &ConditionTokens<T>,
    target: &Tensor<T>,
    target_frames: &[usize],
    tau: f64,
    eps: &Tensor<T>,
    param: Parameterization,
    weighted: bool,
) -> Result<Var, TrainError> {
    let z_tau = corrupt(target, eps, T::lit(tau))?;
    let zv = g.constant(z_tau);
    let out = forward(g, vars, model, zv, T::lit(tau), cond, target_frames)?;
    let mask = loss_mask::<T>(model);
    Ok(match param {
        Parameterization::Clean => {
            let w = if weighted { s1_weight(tau) } else { 1.0 };
            mse_graph(g, out, target, mask.as_ref(), w)?
        }
        Parameterization::Velocity => loss_vpred_graph(g, out, target, eps, mask.as_ref())?,
    })
}

/// Untracked teacher-forced loss of one chunk.
#[allow(clippy::too_many_arguments)]
pub fn teacher_forced_loss<T: Scalar>(
    params: &ModelParams<T>,
    cond: &ConditionTokens<T>,
    target: &Tensor<T>,
    target_frames: &[usize],
    tau: f64,
    eps: &Tensor<T>,
    param: Parameterization,
    weighted: bool,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let vars = params.tensors.register(&mut g, false);
    let l = chunk_loss_graph(&mut g, &vars, &params.config, cond, target, target_frames, tau, eps, param, weighted)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Graph of the Stage-1 loss of one sample.
pub fn stage1_loss_graph<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, model: &ModelConfig, cfg: &TrainConfig, s: &Stage1Sample<T>) -> Result<Var, TrainError> {
    chunk_loss_graph(g, vars, model, &s.cond, &s.target, &s.target_frames, s.tau, &s.eps, cfg.parameterization, cfg.stage1_weighted)
}

/// Partial rollout of the frames after `cond`, integrated from τ = 1 down
/// to `tau_mid`, untracked.
pub fn make_partial_rollout<T: Scalar>(
    params: &ModelParams<T>,
    cond: &ConditionTokens<T>,
    noise: &Tensor<T>,
    tau_mid: f64,
    steps: usize,
    param: Parameterization,
) -> Result<Tensor<T>, TrainError> {
    if !(tau_mid > 0.0 && tau_mid <= 1.0) {
        return Err(FlowError::FlowTime(tau_mid).into());
    }
    let frames = cond.following_frames(params.config.chunk_frames);
    let solver = SolverConfig {
        steps,
        tau_start: 1.0,
        tau_end: tau_mid,
    };
    ode_solve(|z: &Tensor<T>, tau| Ok::<_, TrainError>(params.predict(z, tau, cond, &frames)?), noise, &solver, param)
}

/// Stage-2 outputs that do not live on the graph.
struct Stage2Extras<T> {
    mixed: MixedCondition<T>,
}

/// Records a Stage-2 example. The partial rollout runs on `g` with
/// `rollout_vars`, and only its value enters the mixed condition.
#[allow(clippy::too_many_arguments)]
fn stage2_graph<T: Scalar>(
    g: &mut Graph<T>,
    train_vars: &ParamVars,
    rollout_vars: &ParamVars,
    model: &ModelConfig,
    cfg: &TrainConfig,
    s: &Stage2Sample<T>,
    lambda: f64,
) -> Result<(Var, Stage2Extras<T>), TrainError> {
    let (k, m, n) = (model.context_frames, model.chunk_frames, model.tokens_per_frame);
    let cond0 = ConditionTokens {
        tokens: stack(&s.window[..k])?,
        frame_indices: (s.start..s.start + k).collect(),
    };
    let rollout_frames = cond0.following_frames(m);
    let solver = SolverConfig {
        steps: cfg.rollout_steps,
        tau_start: 1.0,
        tau_end: s.tau_mid,
    };
    let partial = ode_solve(
        |z: &Tensor<T>, tau| -> Result<Tensor<T>, TrainError> {
            let zv = g.constant(z.clone());
            let out = forward(g, rollout_vars, model, zv, tau, &cond0, &rollout_frames)?;
            Ok(g.value(out).clone())
        },
        &s.rollout_noise,
        &solver,
        cfg.parameterization,
    )?;
    let first = partial.slice_rows(0, n)?;
    let mixed = mix_condition(&s.window[k], &first, lambda, s.tau_mid)?;

    let mut cond_frames: Vec<Tensor<T>> = s.window[1..k].to_vec();
    cond_frames.push(mixed.tokens.clone());
    let cond1 = ConditionTokens {
        tokens: stack(&cond_frames)?,
        frame_indices: (s.start + 1..s.start + k + 1).collect(),
    };
    let target = stack(&s.window[k + 1..k + m + 1])?;
    let target_frames: Vec<usize> = (s.start + k + 1..s.start + k + m + 1).collect();
    let loss = chunk_loss_graph(g, train_vars, model, &cond1, &target, &target_frames, s.tau, &s.eps, cfg.parameterization, cfg.stage2_weighted)?;
    Ok((loss, Stage2Extras { mixed }))
}

/// Untracked Stage-2 loss of one example (the value a training step sees).
pub fn stage2_loss<T: Scalar>(params: &ModelParams<T>, cfg: &TrainConfig, s: &Stage2Sample<T>, lambda: f64) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let vars = params.tensors.register(&mut g, false);
    let (l, _) = stage2_graph(&mut g, &vars, &vars, &params.config, cfg, s, lambda)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Gradients of a Stage-2 example split by pass: the supervised pass and a
/// separately registered copy of the parameters driving the partial rollout.
#[derive(Debug, Clone)]
pub struct RolloutProbe<T> {
    pub supervised: ParamSet<T>,
    pub rollout: ParamSet<T>,
}

impl<T: Scalar> RolloutProbe<T> {
    /// Largest gradient magnitude reaching the rollout copy.
    pub fn rollout_max_abs(&self) -> f64 {
        self.rollout.iter().map(|(_, t)| t.max_abs().as_f64()).fold(0.0, f64::max)
    }
}

const ROLLOUT_PREFIX: &str = "rollout/";

/// Backpropagates one Stage-2 example with the rollout pass reading its own
/// copy of the parameters.
pub fn detached_rollout_probe<T: Scalar>(params: &ModelParams<T>, cfg: &TrainConfig, s: &Stage2Sample<T>, lambda: f64) -> Result<RolloutProbe<T>, TrainError> {
    let mut g = Graph::new();
    let train_vars = params.tensors.register(&mut g, true);
    let rollout_vars = params.tensors.register_prefixed(&mut g, ROLLOUT_PREFIX);
    let (loss, _) = stage2_graph(&mut g, &train_vars, &rollout_vars, &params.config, cfg, s, lambda)?;
    let grads = g.backward(loss)?;
    let mut supervised = ParamSet::new();
    let mut rollout = ParamSet::new();
    for (name, t) in grads.iter() {
        match name.strip_prefix(ROLLOUT_PREFIX) {
            Some(base) => rollout.insert(base, t.clone())?,
            None => supervised.insert(name.clone(), t.clone())?,
        }
    }
    Ok(RolloutProbe { supervised, rollout })
}

/// First and second moment estimates, aligned with the parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Weight decay applies to matrices only, not to bias or modulation rows.
fn decays<T: Scalar>(p: &Tensor<T>) -> bool {
    p.shape().len() == 2 && p.rows() > 1 && p.cols() > 1
}

/// Decoupled-weight-decay adaptive-moment update.
pub fn adamw_update<T: Scalar>(params: &mut ParamSet<T>, grads: &Gradients<T>, state: &mut AdamState<T>, cfg: &TrainConfig) -> Result<(), TrainError> {
    if grads.len() != params.len() {
        return Err(NumericsError::ParamMismatch.into());
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = T::lit(1.0 - b1.powi(state.t as i32));
    let c2 = T::lit(1.0 - b2.powi(state.t as i32));
    let (b1, b2, eps, lr, wd) = (T::lit(b1), T::lit(b2), T::lit(cfg.adam_eps), T::lit(cfg.lr), T::lit(cfg.weight_decay));
    for (((name, p), (gname, g)), (m, v)) in params.iter_mut().zip(grads.iter()).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        if name != gname || p.shape() != g.shape() {
            return Err(NumericsError::ParamMismatch.into());
        }
        let decay = if decays(p) { wd } else { T::zero() };
        let pd = p.data_mut();
        for (i, pi) in pd.iter_mut().enumerate() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi / c1) / ((vi / c2).sqrt() + eps) + decay * *pi;
            *pi = *pi - lr * update;
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: u8,
    pub lambda: f64,
    pub tau_mean: f64,
    pub loss: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    /// Mean partial-rollout error; Stage 2 only.
    pub rollout_err: Option<f64>,
}

/// Independent random stream per (seed, stage, step).
pub fn step_rng(seed: u64, stage: u8, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 56) | step as u64);
    rng
}

/// Parameters, optimizer state and the running log.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub params: ModelParams<T>,
    pub cfg: TrainConfig,
    pub state: AdamState<T>,
    pub log: Vec<LogRow>,
}

struct SampleResult<T> {
    loss: f64,
    grads: Gradients<T>,
    rollout_err: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(params: ModelParams<T>, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        params.config.validate()?;
        let state = AdamState::new(&params.tensors);
        Ok(Self {
            params,
            cfg,
            state,
            log: Vec::new(),
        })
    }

    /// The batch a Stage-1 step at `step` trains on.
    pub fn stage1_batch(&self, ds: &Dataset<T>, step: usize) -> Result<Vec<Stage1Sample<T>>, TrainError> {
        let mut rng = step_rng(self.cfg.seed, 1, step);
        sample_stage1_batch(ds, &self.params.config, self.cfg.batch_stage1, &mut rng)
    }

    /// The batch a Stage-2 step at `step` trains on.
    pub fn stage2_batch(&self, ds: &Dataset<T>, step: usize) -> Result<Vec<Stage2Sample<T>>, TrainError> {
        let mut rng = step_rng(self.cfg.seed, 2, step);
        sample_stage2_batch(ds, &self.params.config, &self.cfg, self.cfg.batch_stage2, &mut rng)
    }

    fn apply(&mut self, step: usize, results: Vec<Result<SampleResult<T>, TrainError>>) -> Result<(f64, f64, Option<f64>), TrainError> {
        let n = results.len();
        let mut total: Option<Gradients<T>> = None;
        let mut loss = 0.0;
        let mut errs = Vec::new();
        for r in results {
            let r = r.map_err(|e| if e.is_non_finite() { TrainError::NonFinite { step } } else { e })?;
            loss += r.loss;
            errs.extend(r.rollout_err);
            match &mut total {
                Some(t) => t.accumulate(&r.grads)?,
                None => total = Some(r.grads),
            }
        }
        let mut grads = total.ok_or(TrainError::Config("empty batch".into()))?;
        grads.scale(T::lit(1.0 / n as f64));
        loss /= n as f64;
        let norm = grads.global_norm().as_f64();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        if let Some(c) = self.cfg.grad_clip {
            if norm > c {
                grads.scale(T::lit(c / norm));
            }
        }
        let mut next = self.params.tensors.clone();
        let mut state = self.state.clone();
        adamw_update(&mut next, &grads, &mut state, &self.cfg)?;
        if !next.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        self.params.tensors = next;
        self.state = state;
        let rollout_err = (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64);
        Ok((loss, norm, rollout_err))
    }

    /// One teacher-forced step. On error the parameters are unchanged.
    pub fn stage1_step(&mut self, ds: &Dataset<T>, step: usize) -> Result<LogRow, TrainError> {
        let batch = self.stage1_batch(ds, step)?;
        let (params, cfg) = (&self.params, &self.cfg);
        let results: Vec<_> = batch
            .par_iter()
            .map(|s| {
                let mut g = Graph::new();
                let vars = params.tensors.register(&mut g, true);
                let l = stage1_loss_graph(&mut g, &vars, &params.config, cfg, s)?;
                Ok(SampleResult {
                    loss: g.value(l).data()[0].as_f64(),
                    grads: g.backward(l)?,
                    rollout_err: None,
                })
            })
            .collect();
        let (loss, grad_norm, _) = self.apply(step, results)?;
        let row = LogRow {
            step,
            stage: 1,
            lambda: 0.0,
            tau_mean: batch.iter().map(|s| s.tau).sum::<f64>() / batch.len() as f64,
            loss,
            grad_norm,
            rollout_err: None,
        };
        self.log.push(row.clone());
        Ok(row)
    }

    /// One flow-forcing step at `step` of a Stage 2 lasting `total` steps.
    pub fn stage2_step(&mut self, ds: &Dataset<T>, step: usize, total: usize) -> Result<LogRow, TrainError> {
        let lambda = lambda_at(step, total, self.cfg.lambda_schedule)?;
        let batch = self.stage2_batch(ds, step)?;
        let (params, cfg) = (&self.params, &self.cfg);
        let results: Vec<_> = batch
            .par_iter()
            .map(|s| {
                let mut g = Graph::new();
                let vars = params.tensors.register(&mut g, true);
                let (l, extras) = stage2_graph(&mut g, &vars, &vars, &params.config, cfg, s, lambda)?;
                Ok(SampleResult {
                    loss: g.value(l).data()[0].as_f64(),
                    grads: g.backward(l)?,
                    rollout_err: Some(extras.mixed.rollout_error_norm),
                })
            })
            .collect();
        let (loss, grad_norm, rollout_err) = self.apply(step, results)?;
        let row = LogRow {
            step,
            stage: 2,
            lambda,
            tau_mean: batch.iter().map(|s| s.tau).sum::<f64>() / batch.len() as f64,
            loss,
            grad_norm,
            rollout_err,
        };
        self.log.push(row.clone());
        Ok(row)
    }

    /// Runs `cfg.steps_stage1` teacher-forced steps, calling `on_step` after each.
    pub fn train_stage1(&mut self, ds: &Dataset<T>, mut on_step: impl FnMut(&LogRow, &ModelParams<T>)) -> Result<(), TrainError> {
        for step in 0..self.cfg.steps_stage1 {
            let row = self.stage1_step(ds, step)?;
            on_step(&row, &self.params);
        }
        Ok(())
    }

    /// Runs `cfg.steps_stage2` flow-forcing steps with a fresh optimizer state.
    pub fn train_stage2(&mut self, ds: &Dataset<T>, mut on_step: impl FnMut(&LogRow, &ModelParams<T>)) -> Result<(), TrainError> {
        self.state = AdamState::new(&self.params.tensors);
        let total = self.cfg.steps_stage2;
        for step in 0..total {
            let row = self.stage2_step(ds, step, total)?;
            on_step(&row, &self.params);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use crate::toyworld::{Episode, World, WorldConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 12,
            n_heads: 2,
            depth_dual: 1,
            depth_single: 1,
            mlp_ratio: 2,
            time_freqs: 8,
            time_dim: 6,
            tokens_per_frame: 6,
            patch_side: 1,
            ..ModelConfig::default()
        }
    }

    fn tiny_data(episodes: usize, frames: usize) -> Dataset<f64> {
        let world = World::new(WorldConfig {
            d: 12,
            n_patch: 1,
            ..WorldConfig::default()
        })
        .unwrap();
        Dataset::generate(&world, 0..episodes as u64, frames).unwrap()
    }

    #[test]
    fn lambda_schedule_cases() {
        assert_eq!(lambda_at(0, 10, LambdaSchedule::Linear).unwrap(), 0.0);
        assert_eq!(lambda_at(10, 10, LambdaSchedule::Linear).unwrap(), 1.0);
        assert_eq!(lambda_at(5, 10, LambdaSchedule::Linear).unwrap(), 0.5);
        for s in 0..5 {
            assert_eq!(lambda_at(s, 4, LambdaSchedule::Static(0.7)).unwrap(), 0.7);
        }
        assert!(lambda_at(0, 0, LambdaSchedule::Linear).is_err());
        assert!(lambda_at(11, 10, LambdaSchedule::Linear).is_err());
    }

    #[test]
    fn mix_condition_boundaries_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let p = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(mix_condition(&z, &p, 0.0, 0.5).unwrap().tokens, z);
        assert_eq!(mix_condition(&z, &p, 1.0, 0.5).unwrap().tokens, p);
        let m = mix_condition(&Tensor::from_vec(vec![2.0]), &Tensor::from_vec(vec![0.0]), 0.5, 0.5).unwrap();
        assert_eq!(m.tokens.data(), &[1.0]);
        assert!(mix_condition(&z, &p, 1.5, 0.5).is_err());
        assert!((m.rollout_error_norm - 2.0).abs() < 1e-15);
    }

    #[test]
    fn injected_condition_moment_scales_with_lambda_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let p = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let moment = |l: f64| mix_condition(&z, &p, l, 0.5).unwrap().tokens.sub(&z).unwrap().sum_squares();
        let base = moment(0.25);
        assert!((moment(0.5) / base - 4.0).abs() < 1e-12);
        assert!((moment(1.0) / base - 16.0).abs() < 1e-12);
        let e2 = p.sub(&z).unwrap().sum_squares();
        assert!((base - 0.0625 * e2).abs() < 1e-12 * e2);
    }

    #[test]
    fn forced_window_on_minimal_episode() {
        let ds = tiny_data(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_stage1_batch(&ds, &tiny_model(), 5, &mut rng).unwrap();
        for s in &batch {
            assert_eq!(s.start, 0);
            assert_eq!(s.cond.frame_indices, vec![0, 1]);
            assert_eq!(s.target_frames, vec![2, 3]);
        }
        let short = tiny_data(1, 3);
        assert!(matches!(sample_stage1_batch(&short, &tiny_model(), 1, &mut rng), Err(TrainError::DatasetTooShort { .. })));
    }

    #[test]
    fn batch_sequence_is_seed_determined() {
        let ds = tiny_data(3, 8);
        let a = sample_stage1_batch(&ds, &tiny_model(), 4, &mut step_rng(7, 1, 3)).unwrap();
        let b = sample_stage1_batch(&ds, &tiny_model(), 4, &mut step_rng(7, 1, 3)).unwrap();
        let c = sample_stage1_batch(&ds, &tiny_model(), 4, &mut step_rng(7, 1, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    /// χ² goodness of fit of window starts over a length-10 episode
    /// (7 starts, 6 dof; the 0.99 quantile is 16.81).
    #[test]
    fn window_starts_are_uniform() {
        let ds = tiny_data(1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 7];
        for _ in 0..10_000 {
            let (_, start) = pick_window(&ds, 4, &mut rng).unwrap();
            counts[start] += 1;
        }
        let expected = 10_000.0 / 7.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 16.81, "{chi2} {counts:?}");
    }

    #[test]
    fn zero_init_stage1_loss_matches_closed_form() {
        let ds = tiny_data(2, 6);
        let params = ModelParams::init(tiny_model(), 0).unwrap();
        let mut tr = Trainer::new(params, TrainConfig::default()).unwrap();
        let batch = tr.stage1_batch(&ds, 0).unwrap();
        let want = batch.iter().map(|s| s.target.sum_squares() / s.target.len() as f64 / (1.0 - s.tau).powi(2)).sum::<f64>() / batch.len() as f64;
        let row = tr.stage1_step(&ds, 0).unwrap();
        assert!((row.loss - want).abs() <= 1e-10 * want.max(1.0), "{} vs {want}", row.loss);
    }

    #[test]
    fn partial_rollout_cases() {
        let cfg = tiny_model();
        let params = ModelParams::<f64>::init(cfg.clone(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cond = ConditionTokens {
            tokens: Tensor::randn(&[12, 12], 1.0, &mut rng),
            frame_indices: vec![0, 1],
        };
        let noise = Tensor::randn(&[12, 12], 1.0, &mut rng);
        let same = make_partial_rollout(&params, &cond, &noise, 1.0, 4, Parameterization::Clean).unwrap();
        assert_eq!(same, noise);
        // zero-init network predicts the constant 0
        let p = make_partial_rollout(&params, &cond, &noise, 0.3, 4, Parameterization::Clean).unwrap();
        let want = corrupt(&Tensor::zeros(&[12, 12]), &noise, 0.3).unwrap();
        assert!(p.sub(&want).unwrap().max_abs() <= 1e-12);
        let dense = ModelParams::<f64>::init_dense(cfg, 2, 1.0).unwrap();
        let a = make_partial_rollout(&dense, &cond, &noise, 0.4, 4, Parameterization::Clean).unwrap();
        let b = make_partial_rollout(&dense, &cond, &noise, 0.4, 4, Parameterization::Clean).unwrap();
        assert_eq!(a, b);
    }

    fn stage2_sample(seed: u64) -> (Dataset<f64>, Stage2Sample<f64>) {
        let ds = tiny_data(2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_stage2_batch(&ds, &tiny_model(), &TrainConfig::default(), 1, &mut rng).unwrap().remove(0);
        (ds, s)
    }

    #[test]
    fn stage2_with_zero_lambda_reduces_to_teacher_forcing() {
        let params = ModelParams::<f64>::init_dense(tiny_model(), 4, 1.0).unwrap();
        let cfg = TrainConfig::default();
        let (_, s) = stage2_sample(9);
        let l2 = stage2_loss(&params, &cfg, &s, 0.0).unwrap();
        let cond = ConditionTokens {
            tokens: stack(&s.window[1..3]).unwrap(),
            frame_indices: vec![s.start + 1, s.start + 2],
        };
        let target = stack(&s.window[3..5]).unwrap();
        let l1 = teacher_forced_loss(&params, &cond, &target, &[s.start + 3, s.start + 4], s.tau, &s.eps, Parameterization::Clean, false).unwrap();
        assert!((l1 - l2).abs() <= 1e-12, "{l1} {l2}");
        assert_ne!(stage2_loss(&params, &cfg, &s, 0.8).unwrap(), l2);
    }

    #[test]
    fn rollout_pass_receives_no_gradient() {
        let params = ModelParams::<f64>::init_dense(tiny_model(), 4, 1.0).unwrap();
        let (_, s) = stage2_sample(3);
        let probe = detached_rollout_probe(&params, &TrainConfig::default(), &s, 0.6).unwrap();
        assert_eq!(probe.rollout_max_abs(), 0.0);
        assert_eq!(probe.rollout.len(), params.tensors.len());
        assert!(probe.supervised.iter().any(|(_, t)| t.max_abs() > 0.0));
    }

    /// With the rollout held at fixed parameters, the training gradient is the
    /// derivative of the supervised pass alone.
    #[test]
    fn stage2_gradient_matches_finite_differences_with_frozen_rollout() {
        let params = ModelParams::<f64>::init_dense(tiny_model(), 6, 1.0).unwrap();
        let cfg = TrainConfig::default();
        let (_, s) = stage2_sample(4);
        let frozen = params.tensors.clone();
        let report = finite_difference_check(&params.tensors, 60, 1e-3, 1, |g, vars| -> Result<Var, TrainError> {
            let rollout_vars = frozen.register(g, false);
            Ok(stage2_graph(g, vars, &rollout_vars, &params.config, &cfg, &s, 0.6)?.0)
        })
        .unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{report:#?}");
        let probe = detached_rollout_probe(&params, &cfg, &s, 0.6).unwrap();
        let mut g = Graph::new();
        let vars = params.tensors.register(&mut g, true);
        let rv = frozen.register(&mut g, false);
        let (l, _) = stage2_graph(&mut g, &vars, &rv, &params.config, &cfg, &s, 0.6).unwrap();
        let direct = g.backward(l).unwrap();
        for (name, t) in direct.iter() {
            assert_eq!(probe.supervised.get(name).unwrap(), t);
        }
    }

    #[test]
    fn clipping_inactive_below_threshold() {
        let ds = tiny_data(1, 5);
        let params = ModelParams::<f64>::init(tiny_model(), 1).unwrap();
        let cfg = TrainConfig {
            grad_clip: Some(1e6),
            ..TrainConfig::default()
        };
        let mut a = Trainer::new(params.clone(), cfg.clone()).unwrap();
        let mut b = Trainer::new(params, TrainConfig { grad_clip: None, ..cfg }).unwrap();
        let ra = a.stage1_step(&ds, 0).unwrap();
        b.stage1_step(&ds, 0).unwrap();
        assert!(ra.grad_norm < 1e6);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_data(2, 6);
        let run = || {
            let params = ModelParams::<f64>::init(tiny_model(), 3).unwrap();
            let mut tr = Trainer::new(
                params,
                TrainConfig {
                    steps_stage1: 3,
                    steps_stage2: 2,
                    batch_stage1: 3,
                    batch_stage2: 2,
                    rollout_steps: 2,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
            tr.train_stage1(&ds, |_, _| {}).unwrap();
            tr.train_stage2(&ds, |_, _| {}).unwrap();
            (tr.log, tr.params)
        };
        let (la, pa) = run();
        let (lb, pb) = run();
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
        assert_eq!(la.len(), 5);
        assert!(la[3].rollout_err.is_some() && la[0].rollout_err.is_none());
    }

    #[test]
    fn non_finite_data_aborts_and_keeps_parameters() {
        let mut ds = tiny_data(1, 4);
        let Episode { frames, .. } = &mut ds.episodes[0];
        frames[3].data_mut()[0] = f64::INFINITY;
        let params = ModelParams::<f64>::init_dense(tiny_model(), 1, 1.0).unwrap();
        let mut tr = Trainer::new(params.clone(), TrainConfig::default()).unwrap();
        assert_eq!(tr.stage1_step(&ds, 0), Err(TrainError::NonFinite { step: 0 }));
        assert_eq!(tr.params, params);
    }

    #[test]
    fn adamw_first_step_moves_by_lr_times_sign() {
        let mut ps = ParamSet::new();
        ps.insert("b", Tensor::<f64>::from_vec(vec![0.5, -0.5])).unwrap();
        let mut g = Graph::new();
        let v = ps.register(&mut g, true);
        let b = v.get("b").unwrap();
        let l = g.sum(b).unwrap();
        let grads = g.backward(l).unwrap();
        let mut state = AdamState::new(&ps);
        let cfg = TrainConfig::default();
        adamw_update(&mut ps, &grads, &mut state, &cfg).unwrap();
        // bias-corrected m/sqrt(v) = 1 on the first step; rank-1 tensors skip decay
        let want = [0.5 - cfg.lr / (1.0 + 1e-8), -0.5 - cfg.lr / (1.0 + 1e-8)];
        for (a, w) in ps.get("b").unwrap().data().iter().zip(want) {
            assert!((a - w).abs() < 1e-15);
        }
    }
}
