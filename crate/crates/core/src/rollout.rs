//! Sliding-window autoregressive forecasting and joint decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowformer::{ConditionTokens, ModelError, ModelParams};
use crate::flowmatch::{ode_solve, FlowError, Parameterization, SolverConfig};
use crate::numerics::{NumericsError, Scalar, Tensor};
use crate::toyworld::{Geometry, GeometryState, World, WorldError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("invalid rollout plan: {0}")]
    Plan(String),
    #[error("context has {got} frames, plan needs {want}")]
    ContextLength { got: usize, want: usize },
    #[error("non-finite prediction at call {call}")]
    NonFinite { call: usize },
    #[error("frame indices not contiguous: {0:?}")]
    FrameGap(Vec<usize>),
    #[error("predictor returned shape {got:?}, expected {want:?}")]
    Shape { got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Which predictions of a call become output frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Commit {
    /// The first `stride` frames of each call; later frames are re-predicted
    /// with fresher context.
    #[default]
    First,
    /// Every prediction of a frame is averaged; frames are emitted once no
    /// later call can predict them again.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutPlan {
    /// Context frames per call.
    pub k: usize,
    /// Frames predicted per call.
    pub m: usize,
    pub stride: usize,
    /// Frames to emit.
    pub horizon: usize,
    pub solver: SolverConfig,
    pub seed: u64,
    pub commit: Commit,
    /// Reuse one noise draw for every call.
    pub deterministic_noise: bool,
}

impl Default for RolloutPlan {
    fn default() -> Self {
        Self {
            k: 2,
            m: 2,
            stride: 1,
            horizon: 8,
            solver: SolverConfig::default(),
            seed: 0,
            commit: Commit::First,
            deterministic_noise: false,
        }
    }
}

impl RolloutPlan {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.k == 0 || self.m == 0 {
            return Err(RolloutError::Plan("k and m must be ≥ 1".into()));
        }
        if self.stride == 0 || self.stride > self.m {
            return Err(RolloutError::Plan(format!("stride {} outside [1, m={}]", self.stride, self.m)));
        }
        if self.horizon == 0 {
            return Err(RolloutError::Plan("horizon must be ≥ 1".into()));
        }
        self.solver.validate()?;
        Ok(())
    }

    /// Predictor calls needed to emit `horizon` frames.
    pub fn calls(&self) -> usize {
        self.horizon.div_ceil(self.stride)
    }
}

/// Produces the `m` frames following a window from a noise draw.
pub trait ChunkSampler<T> {
    /// `noise` and the result are `(m·N)×d`.
    fn sample(&mut self, cond: &ConditionTokens<T>, target_frames: &[usize], noise: &Tensor<T>) -> Result<Tensor<T>, RolloutError>;
}

/// Full denoising with the trained network.
pub struct ModelSampler<'a, T> {
    pub params: &'a ModelParams<T>,
    pub solver: SolverConfig,
    pub parameterization: Parameterization,
}

impl<T: Scalar> ChunkSampler<T> for ModelSampler<'_, T> {
    fn sample(&mut self, cond: &ConditionTokens<T>, target_frames: &[usize], noise: &Tensor<T>) -> Result<Tensor<T>, RolloutError> {
        ode_solve(
            |z: &Tensor<T>, tau| Ok::<_, RolloutError>(self.params.predict(z, tau, cond, target_frames)?),
            noise,
            &self.solver,
            self.parameterization,
        )
    }
}

impl<T, F> ChunkSampler<T> for F
where
    F: FnMut(&ConditionTokens<T>, &[usize], &Tensor<T>) -> Result<Tensor<T>, RolloutError>,
{
    fn sample(&mut self, cond: &ConditionTokens<T>, target_frames: &[usize], noise: &Tensor<T>) -> Result<Tensor<T>, RolloutError> {
        self(cond, target_frames, noise)
    }
}

fn noise<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::matrix(rows, cols, data).expect("noise layout")
}

/// Forecasts `plan.horizon` frames after `context`.
///
/// Every call conditions on the `k` most recent frames of the assembled
/// sequence and predicts `m` frames; the window then advances by `stride`.
pub fn rollout<T: Scalar, S: ChunkSampler<T>>(sampler: &mut S, context: &[GeometryState<T>], plan: &RolloutPlan) -> Result<Vec<GeometryState<T>>, RolloutError> {
    plan.validate()?;
    if context.len() != plan.k {
        return Err(RolloutError::ContextLength {
            got: context.len(),
            want: plan.k,
        });
    }
    check_contiguous(context)?;
    let (rows, d) = (context[0].tokens.rows(), context[0].tokens.cols());
    let chunk_shape = vec![plan.m * rows, d];
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let fixed = plan.deterministic_noise.then(|| noise::<T>(plan.m * rows, d, &mut rng));

    // sliding window of the k most recent committed frames
    let mut window: Vec<GeometryState<T>> = context.to_vec();
    let mut out = Vec::with_capacity(plan.horizon);
    // running sums for frames predicted but not yet committed (Commit::All)
    let mut pending: Vec<(Tensor<T>, usize)> = Vec::new();

    for call in 0..plan.calls() {
        let first = window.last().expect("k ≥ 1").frame_index + 1;
        let target_frames: Vec<usize> = (first..first + plan.m).collect();
        let refs: Vec<&Tensor<T>> = window.iter().map(|s| &s.tokens).collect();
        let cond = ConditionTokens {
            tokens: Tensor::concat_rows(&refs)?,
            frame_indices: window.iter().map(|s| s.frame_index).collect(),
        };
        let eps = match &fixed {
            Some(e) => e.clone(),
            None => noise(plan.m * rows, d, &mut rng),
        };
        let chunk = sampler.sample(&cond, &target_frames, &eps)?;
        if chunk.shape() != chunk_shape.as_slice() {
            return Err(RolloutError::Shape {
                got: chunk.shape().to_vec(),
                want: chunk_shape.clone(),
            });
        }
        if !chunk.is_finite() {
            return Err(RolloutError::NonFinite { call });
        }
        let frames: Vec<Tensor<T>> = (0..plan.m).map(|j| chunk.slice_rows(j * rows, rows)).collect::<Result<_, _>>()?;

        let committed: Vec<Tensor<T>> = match plan.commit {
            Commit::First => frames.into_iter().take(plan.stride).collect(),
            Commit::All => {
                for (j, f) in frames.into_iter().enumerate() {
                    match pending.get_mut(j) {
                        Some((sum, n)) => {
                            *sum = sum.add(&f)?;
                            *n += 1;
                        }
                        None => pending.push((f, 1)),
                    }
                }
                pending
                    .drain(..plan.stride)
                    .map(|(sum, n)| sum.scale(T::lit(1.0 / n as f64)))
                    .collect()
            }
        };
        for (j, tokens) in committed.into_iter().enumerate() {
            if out.len() == plan.horizon {
                break;
            }
            let state = GeometryState {
                tokens,
                frame_index: first + j,
            };
            window.push(state.clone());
            out.push(state);
        }
        let excess = window.len().saturating_sub(plan.k);
        window.drain(..excess);
    }
    Ok(out)
}

fn check_contiguous<T>(states: &[GeometryState<T>]) -> Result<(), RolloutError> {
    let idx: Vec<usize> = states.iter().map(|s| s.frame_index).collect();
    if idx.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(RolloutError::FrameGap(idx));
    }
    Ok(())
}

/// `[context; predicted]`, which must form one contiguous frame range.
pub fn assemble_full<T: Scalar>(context: &[GeometryState<T>], predicted: &[GeometryState<T>]) -> Result<Vec<GeometryState<T>>, RolloutError> {
    let full: Vec<GeometryState<T>> = context.iter().chain(predicted).cloned().collect();
    check_contiguous(&full)?;
    Ok(full)
}

/// Decodes the whole sequence at once, so observed frames share the scene
/// scale with forecast ones.
pub fn joint_decode<T: Scalar>(world: &World, full: &[GeometryState<T>]) -> Result<Geometry, RolloutError> {
    Ok(world.decode_states(full)?)
}
