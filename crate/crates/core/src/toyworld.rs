//! Synthetic latent world standing in for a frozen geometry encoder/decoder.
//!
//! Each frame has a low-dimensional intrinsic state `s_t`. Tokens are a fixed
//! smooth embedding `g(s) = A₂·tanh(A₁·s + b₁) + b₂` reshaped to `N×d`, where
//! `A₁` and `A₂` have orthonormal columns (up to a scale), so `g` has a
//! closed-form left inverse and decoded geometry can be checked exactly.
//!
//! State layout: `s[0..3]` are the yaw-rate / forward / lateral speed of a
//! constant-twist camera, `s[3..]` a norm-preserving coupled oscillator.
//! `s[3]` drives the per-frame scale statistic, `s[4]` a vertical bob and
//! `s[5]` a camera roll.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Scalar, Tensor};

/// Camera token, then register tokens, then patch tokens.
pub const N_SPECIAL: usize = 5;
pub const CAMERA_TOKEN: usize = 0;
pub const REGISTER_TOKENS: std::ops::Range<usize> = 1..5;

const TWIST_DIMS: usize = 3;
const BASE_DEPTH: f64 = 1.0;
const SCALE_GAIN: f64 = 0.3;
const PRE_GAIN: f64 = 1.5;
const BIAS1_STD: f64 = 0.5;
const BIAS2_STD: f64 = 0.5;
const TOKEN_GAIN: f64 = 2.0;
const UNIT_CLAMP: f64 = 1.0 - 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("trajectory needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("empty state sequence")]
    Empty,
    #[error("state {index} has shape {shape:?}, expected [{n}, {d}]")]
    Layout {
        index: usize,
        shape: Vec<usize>,
        n: usize,
        d: usize,
    },
    #[error("intrinsic state has {got} entries, expected {want}")]
    StateDim { got: usize, want: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Channels per token.
    pub d: usize,
    /// Patch tokens per frame, laid out on a square grid.
    pub n_patch: usize,
    /// Special tokens per frame; always 5.
    pub n_special: usize,
    /// Intrinsic state dimension.
    pub manifold_dim: usize,
    /// Width of the hidden layer of the embedding.
    pub hidden_dim: usize,
    pub seed: u64,
    /// Seconds per frame.
    pub fps_dt: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d: 256,
            n_patch: 16,
            n_special: N_SPECIAL,
            manifold_dim: 8,
            hidden_dim: 32,
            seed: 0,
            fps_dt: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn tokens_per_frame(&self) -> usize {
        self.n_special + self.n_patch
    }

    pub fn patch_side(&self) -> usize {
        (self.n_patch as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let err = |m: String| Err(WorldError::Config(m));
        if self.n_special != N_SPECIAL {
            return err(format!("n_special must be {N_SPECIAL}, got {}", self.n_special));
        }
        let side = self.patch_side();
        if self.n_patch == 0 || side * side != self.n_patch {
            return err(format!("n_patch {} is not a perfect square", self.n_patch));
        }
        if self.manifold_dim < TWIST_DIMS + 3 {
            return err(format!("manifold_dim must be at least {}", TWIST_DIMS + 3));
        }
        if self.d < self.manifold_dim {
            return err(format!("d {} smaller than manifold_dim {}", self.d, self.manifold_dim));
        }
        if self.hidden_dim < self.manifold_dim || self.hidden_dim > self.tokens_per_frame() * self.d {
            return err(format!("hidden_dim {} out of range", self.hidden_dim));
        }
        if !(self.fps_dt > 0.0 && self.fps_dt.is_finite()) {
            return err(format!("fps_dt must be positive, got {}", self.fps_dt));
        }
        Ok(())
    }
}

/// One frame's token matrix (`N×d`).
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryState<T> {
    pub tokens: Tensor<T>,
    pub frame_index: usize,
}

impl<T: Scalar> GeometryState<T> {
    pub fn cast<U: Scalar>(&self) -> GeometryState<U> {
        GeometryState {
            tokens: self.tokens.cast(),
            frame_index: self.frame_index,
        }
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn from_center(rotation_cw: Matrix3<f64>, center: Vector3<f64>) -> Self {
        let rotation = rotation_cw.transpose();
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }
}

/// Decoded geometry for a sequence of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    /// Per frame, `side×side` depth map.
    pub depths: Vec<Tensor<f64>>,
    /// Per frame, `n_patch×3` world-frame points.
    pub points: Vec<Tensor<f64>>,
    pub poses: Vec<Pose>,
    pub frame_indices: Vec<usize>,
    /// Shared scene scale applied to every frame.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<GeometryState<f64>>,
    pub geometry: Geometry,
    pub intrinsic: Vec<Vec<f64>>,
}

/// The fixed seed-derived maps of a world.
#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    /// `h×q`, orthonormal columns.
    a1: DMatrix<f64>,
    b1: Vec<f64>,
    /// `(N·d)×h`, orthonormal columns; the map applies `TOKEN_GAIN·sqrt(N·d/h)` on top.
    q2: DMatrix<f64>,
    b2: Vec<f64>,
    token_gain: f64,
    /// Oscillator transition, orthogonal.
    oscillator: DMatrix<f64>,
    /// Per patch depth readout weights.
    depth_w: Vec<Vec<f64>>,
}

fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    // sign-fix against the diagonal of R so the factor is unique
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream seed for one episode, independent of generation order.
pub fn episode_stream_seed(world_seed: u64, episode_seed: u64) -> u64 {
    splitmix(splitmix(world_seed) ^ episode_seed.rotate_left(17))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self, WorldError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed));
        let q = cfg.manifold_dim;
        let h = cfg.hidden_dim;
        let nd = cfg.tokens_per_frame() * cfg.d;

        let a1 = orthonormal_columns(h, q, &mut rng);
        let b1 = (0..h)
            .map(|_| BIAS1_STD * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let q2 = orthonormal_columns(nd, h, &mut rng);
        let b2 = (0..nd)
            .map(|_| BIAS2_STD * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let token_gain = TOKEN_GAIN * (nd as f64 / h as f64).sqrt();

        let osc = q - TWIST_DIMS;
        let basis = orthonormal_columns(osc, osc, &mut rng);
        let mut rot = DMatrix::<f64>::identity(osc, osc);
        for pair in 0..osc / 2 {
            let w: f64 = rng.random_range(0.1..0.5);
            let (s, c) = w.sin_cos();
            let i = 2 * pair;
            rot[(i, i)] = c;
            rot[(i, i + 1)] = -s;
            rot[(i + 1, i)] = s;
            rot[(i + 1, i + 1)] = c;
        }
        let oscillator = &basis * rot * basis.transpose();

        let depth_w = (0..cfg.n_patch)
            .map(|_| {
                (0..q)
                    .map(|_| 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect()
            })
            .collect();

        Ok(Self {
            cfg,
            a1,
            b1,
            q2,
            b2,
            token_gain,
            oscillator,
            depth_w,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    /// Operator-norm Lipschitz bound of the embedding (tanh is 1-Lipschitz).
    pub fn lipschitz_bound(&self) -> f64 {
        PRE_GAIN * self.token_gain
    }

    fn check_state(&self, s: &[f64]) -> Result<(), WorldError> {
        if s.len() != self.cfg.manifold_dim {
            return Err(WorldError::StateDim {
                got: s.len(),
                want: self.cfg.manifold_dim,
            });
        }
        Ok(())
    }

    /// Tokens `g(s)` for intrinsic state `s` at frame `frame_index`.
    pub fn encode_frame(&self, s: &[f64], frame_index: usize) -> Result<GeometryState<f64>, WorldError> {
        self.check_state(s)?;
        let h = self.cfg.hidden_dim;
        let mut u = vec![0.0; h];
        for (i, ui) in u.iter_mut().enumerate() {
            let pre: f64 = (0..s.len()).map(|j| self.a1[(i, j)] * s[j]).sum::<f64>() * PRE_GAIN + self.b1[i];
            *ui = pre.tanh();
        }
        let nd = self.b2.len();
        let mut data = self.b2.clone();
        for (j, &uj) in u.iter().enumerate() {
            let col = self.q2.column(j);
            let w = uj * self.token_gain;
            for (x, &qv) in data.iter_mut().zip(col.iter()) {
                *x += w * qv;
            }
        }
        debug_assert_eq!(data.len(), nd);
        let tokens = Tensor::matrix(self.cfg.tokens_per_frame(), self.cfg.d, data).expect("layout");
        Ok(GeometryState { tokens, frame_index })
    }

    fn check_layout(&self, index: usize, tokens: &Tensor<f64>) -> Result<(), WorldError> {
        let (n, d) = (self.cfg.tokens_per_frame(), self.cfg.d);
        if tokens.shape() != [n, d] {
            return Err(WorldError::Layout {
                index,
                shape: tokens.shape().to_vec(),
                n,
                d,
            });
        }
        Ok(())
    }

    /// Hidden activations by least-squares projection onto the image of the
    /// output map (the exact inverse for on-manifold tokens).
    fn hidden_of(&self, tokens: &Tensor<f64>) -> Vec<f64> {
        let centered: Vec<f64> = tokens.data().iter().zip(&self.b2).map(|(x, b)| x - b).collect();
        (0..self.cfg.hidden_dim)
            .map(|j| {
                let dot: f64 = self.q2.column(j).iter().zip(&centered).map(|(q, x)| q * x).sum();
                dot / self.token_gain
            })
            .collect()
    }

    /// Left inverse of the embedding. Hidden activations are clamped inside
    /// (−1, 1) so off-manifold tokens still decode to a finite state.
    pub fn intrinsic_of(&self, tokens: &Tensor<f64>) -> Result<Vec<f64>, WorldError> {
        self.check_layout(0, tokens)?;
        let u = self.hidden_of(tokens);
        let pre: Vec<f64> = u
            .iter()
            .zip(&self.b1)
            .map(|(&x, &b)| x.clamp(-UNIT_CLAMP, UNIT_CLAMP).atanh() - b)
            .collect();
        Ok((0..self.cfg.manifold_dim)
            .map(|j| self.a1.column(j).iter().zip(&pre).map(|(a, p)| a * p).sum::<f64>() / PRE_GAIN)
            .collect())
    }

    /// Squared norm of the component of `tokens` outside the affine image of
    /// the output map.
    pub fn manifold_residual(&self, tokens: &Tensor<f64>) -> Result<f64, WorldError> {
        self.check_layout(0, tokens)?;
        let mut r: Vec<f64> = tokens.data().iter().zip(&self.b2).map(|(x, b)| x - b).collect();
        for j in 0..self.cfg.hidden_dim {
            let col = self.q2.column(j);
            let dot: f64 = col.iter().zip(&r).map(|(q, x)| q * x).sum();
            for (x, &q) in r.iter_mut().zip(col.iter()) {
                *x -= dot * q;
            }
        }
        Ok(r.iter().map(|x| x * x).sum())
    }

    /// Per-frame scale statistic; the decoded scene scale is its median.
    pub fn scale_statistic(&self, s: &[f64]) -> f64 {
        (SCALE_GAIN * s[TWIST_DIMS]).exp()
    }

    pub fn step(&self, s: &[f64]) -> Vec<f64> {
        let mut next = s.to_vec();
        let osc = &s[TWIST_DIMS..];
        for (i, v) in next[TWIST_DIMS..].iter_mut().enumerate() {
            *v = (0..osc.len()).map(|j| self.oscillator[(i, j)] * osc[j]).sum();
        }
        next
    }

    fn initial_state(&self, episode_seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_stream_seed(self.cfg.seed, episode_seed));
        let q = self.cfg.manifold_dim;
        let mut s = vec![0.0; q];
        for v in s.iter_mut().take(TWIST_DIMS) {
            *v = rng.random_range(-0.8..0.8);
        }
        let osc: Vec<f64> = (TWIST_DIMS..q)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let norm = osc.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let radius: f64 = rng.random_range(0.5..1.0);
        for (v, o) in s[TWIST_DIMS..].iter_mut().zip(&osc) {
            *v = radius * o / norm;
        }
        s
    }

    /// Deterministic episode of `frames` frames.
    pub fn generate_trajectory(&self, episode_seed: u64, frames: usize) -> Result<Trajectory, WorldError> {
        if frames < 2 {
            return Err(WorldError::TooShort(frames));
        }
        let mut s = self.initial_state(episode_seed);
        let mut intrinsic = Vec::with_capacity(frames);
        for _ in 0..frames {
            intrinsic.push(s.clone());
            s = self.step(&s);
        }
        let states = intrinsic
            .iter()
            .enumerate()
            .map(|(t, s)| self.encode_frame(s, t))
            .collect::<Result<Vec<_>, _>>()?;
        let frame_indices: Vec<usize> = (0..frames).collect();
        let geometry = self.geometry_of(&intrinsic, &frame_indices);
        Ok(Trajectory {
            states,
            geometry,
            intrinsic,
        })
    }

    /// Closed-form geometry of a sequence of intrinsic states, with the scene
    /// scale shared across all of them.
    pub fn geometry_of(&self, intrinsic: &[Vec<f64>], frame_indices: &[usize]) -> Geometry {
        let stats: Vec<f64> = intrinsic.iter().map(|s| self.scale_statistic(s)).collect();
        let scale = median(&stats);
        let side = self.cfg.patch_side();
        let focal = side as f64;
        let principal = side as f64 / 2.0;
        let mut depths = Vec::with_capacity(intrinsic.len());
        let mut points = Vec::with_capacity(intrinsic.len());
        let mut poses = Vec::with_capacity(intrinsic.len());
        for (s, &t) in intrinsic.iter().zip(frame_indices) {
            let (rot_cw, center) = self.camera_of(s, t, scale);
            let mut depth = Vec::with_capacity(self.cfg.n_patch);
            let mut pts = Vec::with_capacity(self.cfg.n_patch * 3);
            for (p, w) in self.depth_w.iter().enumerate() {
                let z = scale * (BASE_DEPTH + softplus(w.iter().zip(s).map(|(a, b)| a * b).sum()));
                let (row, col) = (p / side, p % side);
                let ray = Vector3::new(
                    (col as f64 + 0.5 - principal) / focal,
                    (row as f64 + 0.5 - principal) / focal,
                    1.0,
                );
                let world = rot_cw * (ray * z) + center;
                depth.push(z);
                pts.extend_from_slice(world.as_slice());
            }
            depths.push(Tensor::matrix(side, side, depth).expect("square grid"));
            points.push(Tensor::matrix(self.cfg.n_patch, 3, pts).expect("point layout"));
            poses.push(Pose::from_center(rot_cw, center));
        }
        Geometry {
            depths,
            points,
            poses,
            frame_indices: frame_indices.to_vec(),
            scale,
        }
    }

    /// Camera-to-world rotation and center at frame `t`.
    fn camera_of(&self, s: &[f64], t: usize, scale: f64) -> (Matrix3<f64>, Vector3<f64>) {
        let dt = self.cfg.fps_dt;
        let omega = 1.5 * s[0] * dt;
        let v_fwd = 5.0 * (1.2 + s[1]) * dt;
        let v_lat = 2.0 * s[2] * dt;
        let tf = t as f64;
        let theta = omega * tf;
        // ∫₀ᵗ cos(ωτ)dτ and ∫₀ᵗ sin(ωτ)dτ
        let (a, b) = if omega.abs() < 1e-8 {
            (tf, 0.5 * omega * tf * tf)
        } else {
            (theta.sin() / omega, (1.0 - theta.cos()) / omega)
        };
        let x = v_lat * a + v_fwd * b;
        let z = -v_lat * b + v_fwd * a;
        let y = 0.1 * s[TWIST_DIMS + 1];
        let roll = 0.1 * s[TWIST_DIMS + 2];
        let (sy, cy) = theta.sin_cos();
        let (sr, cr) = roll.sin_cos();
        let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
        (ry * rz, Vector3::new(x, y, z) * scale)
    }

    /// Decodes a sequence jointly: every frame's intrinsic state is recovered
    /// by the left inverse, and the scene scale is the median scale statistic
    /// over the whole sequence.
    pub fn decode_states<T: Scalar>(&self, states: &[GeometryState<T>]) -> Result<Geometry, WorldError> {
        if states.is_empty() {
            return Err(WorldError::Empty);
        }
        let mut intrinsic = Vec::with_capacity(states.len());
        for (i, st) in states.iter().enumerate() {
            let tokens = st.tokens.cast::<f64>();
            self.check_layout(i, &tokens)?;
            intrinsic.push(self.intrinsic_of(&tokens)?);
        }
        let frames: Vec<usize> = states.iter().map(|s| s.frame_index).collect();
        Ok(self.geometry_of(&intrinsic, &frames))
    }
}

/// Latent frames of one generated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    pub seed: u64,
    /// One `N×d` token matrix per frame.
    pub frames: Vec<Tensor<T>>,
}

/// A collection of episodes from one world.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset<T> {
    pub episodes: Vec<Episode<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn generate(world: &World, seeds: impl IntoIterator<Item = u64>, frames: usize) -> Result<Self, WorldError> {
        let episodes = seeds
            .into_iter()
            .map(|seed| {
                let traj = world.generate_trajectory(seed, frames)?;
                Ok(Episode {
                    seed,
                    frames: traj.states.iter().map(|s| s.tokens.cast()).collect(),
                })
            })
            .collect::<Result<_, WorldError>>()?;
        Ok(Self { episodes })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Length of the shortest episode (0 when empty).
    pub fn min_frames(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).min().unwrap_or(0)
    }
}
