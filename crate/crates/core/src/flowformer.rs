//! Denoiser `F = F_single ∘ F_dual` over a noisy latent chunk.
//!
//! Dual-stream blocks let the chunk cross-attend to the clean condition
//! (keys/values are `[adaLN(Z); c]`, the condition enters unmodulated and is
//! never written). Single-stream blocks self-attend within the chunk only.
//! Flow time is injected through adaLN modulation with zero-initialized gates,
//! and queries/keys carry a three-axis rotary encoding over
//! (frame, patch row, patch column).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, ParamSet, ParamVars, Scalar, Tensor, Var};
use crate::toyworld::{N_SPECIAL, REGISTER_TOKENS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("flow time {0} outside [0, 1]")]
    FlowTime(f64),
    #[error("frame ordering violated: condition {condition:?}, target {target:?}")]
    FrameOrder {
        condition: Vec<usize>,
        target: Vec<usize>,
    },
    #[error("{what}: expected shape {want:?}, got {got:?}")]
    Shape {
        what: &'static str,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("block {index}: {source}")]
    Block {
        index: usize,
        #[source]
        source: NumericsError,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Dual-stream (condition-attending) blocks.
    pub depth_dual: usize,
    /// Single-stream (chunk-only) blocks.
    pub depth_single: usize,
    pub mlp_ratio: usize,
    /// Context frames `k`.
    pub context_frames: usize,
    /// Frames per predicted chunk `m`.
    pub chunk_frames: usize,
    pub rope_base: f64,
    /// Rotary pairs per axis; `None` splits the head pairs into equal thirds
    /// and leaves any remainder unrotated.
    pub rope_axis_pairs: Option<usize>,
    /// Sinusoidal frequencies of the flow-time embedding.
    pub time_freqs: usize,
    /// Width of the flow-time MLP.
    pub time_dim: usize,
    /// Tokens per frame `N`; must match the world.
    pub tokens_per_frame: usize,
    /// Side of the square patch grid; must match the world.
    pub patch_side: usize,
    /// When false the register tokens are excluded from the loss.
    pub predict_registers: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_heads: 4,
            depth_dual: 2,
            depth_single: 2,
            mlp_ratio: 4,
            context_frames: 2,
            chunk_frames: 2,
            rope_base: 10000.0,
            rope_axis_pairs: None,
            time_freqs: 256,
            time_dim: 64,
            tokens_per_frame: N_SPECIAL + 16,
            patch_side: 4,
            predict_registers: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn axis_pairs(&self) -> usize {
        self.rope_axis_pairs.unwrap_or(self.head_dim() / 2 / 3)
    }

    pub fn chunk_rows(&self) -> usize {
        self.chunk_frames * self.tokens_per_frame
    }

    pub fn context_rows(&self) -> usize {
        self.context_frames * self.tokens_per_frame
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return err(format!("head_dim {} must be even", self.head_dim()));
        }
        if 3 * self.axis_pairs() > self.head_dim() / 2 {
            return err(format!("{} rotary pairs per axis exceed head_dim {}", self.axis_pairs(), self.head_dim()));
        }
        if self.depth_dual == 0 || self.depth_single == 0 {
            return err("both block stacks need depth ≥ 1".into());
        }
        if self.mlp_ratio == 0 || self.time_dim == 0 || self.time_freqs == 0 {
            return err("mlp_ratio, time_dim and time_freqs must be positive".into());
        }
        if self.context_frames == 0 || self.chunk_frames == 0 {
            return err("context and chunk frame counts must be positive".into());
        }
        if self.tokens_per_frame != N_SPECIAL + self.patch_side * self.patch_side {
            return err(format!(
                "tokens_per_frame {} inconsistent with patch_side {}",
                self.tokens_per_frame, self.patch_side
            ));
        }
        if !(self.rope_base > 1.0) {
            return err(format!("rope_base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }

    fn block_prefixes(&self) -> Vec<String> {
        (0..self.depth_dual)
            .map(|i| format!("dual.{i}"))
            .chain((0..self.depth_single).map(|i| format!("single.{i}")))
            .collect()
    }
}

/// Clean context frames flattened over the token axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens<T> {
    /// `(k·N)×d`.
    pub tokens: Tensor<T>,
    pub frame_indices: Vec<usize>,
}

impl<T: Scalar> ConditionTokens<T> {
    pub fn from_frames(frames: &[&Tensor<T>], frame_indices: Vec<usize>) -> Result<Self, ModelError> {
        let tokens = Tensor::concat_rows(frames)?;
        Ok(Self {
            tokens,
            frame_indices,
        })
    }

    /// The `m` frame indices immediately after the condition.
    pub fn following_frames(&self, m: usize) -> Vec<usize> {
        let last = self.frame_indices.last().copied().unwrap_or(0);
        (last + 1..=last + m).collect()
    }
}

const SUBLAYERS: [&str; 2] = ["attn", "mlp"];
const MOD_PARTS: [&str; 3] = ["shift", "scale", "gate"];

/// Learnable tensors of the denoiser plus the config they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: ParamSet<T>,
}

/// Modulation triples for one sublayer, as rows of width `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation<T> {
    pub shift: Tensor<T>,
    pub scale: Tensor<T>,
    pub gate: Tensor<T>,
}

/// Per-block modulation produced by [`ModelParams::time_embed`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockModulation<T> {
    pub attn: Modulation<T>,
    pub mlp: Modulation<T>,
}

#[derive(Clone, Copy)]
struct ModVars {
    shift: Var,
    scale: Var,
    gate: Var,
}

enum Init {
    /// Gates and the output projection start at zero.
    Standard,
    /// Every tensor random, for gradient checks.
    Dense(f64),
}

impl<T: Scalar> ModelParams<T> {
    /// Standard initialization: zero gates and zero output projection, so
    /// every block starts as the identity and the network outputs 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build(config, seed, Init::Standard)
    }

    /// All tensors (including gates, biases and the output projection) drawn
    /// at random with the given scale relative to the standard fan-in std.
    pub fn init_dense(config: ModelConfig, seed: u64, gain: f64) -> Result<Self, ModelError> {
        Self::build(config, seed, Init::Dense(gain))
    }

    fn build(config: ModelConfig, seed: u64, init: Init) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let e = config.time_dim;
        let hidden = config.mlp_ratio * d;
        let mut ps = ParamSet::new();

        let mut add = |ps: &mut ParamSet<T>, name: String, shape: &[usize], std: f64, zero: bool| {
            let t = match (&init, zero) {
                (Init::Standard, true) => Tensor::zeros(shape),
                (Init::Standard, false) => Tensor::randn(shape, std, &mut rng),
                (Init::Dense(gain), _) => {
                    let s = if std > 0.0 { std } else { 0.1 };
                    Tensor::randn(shape, s * gain, &mut rng)
                }
            };
            ps.insert(name, t)
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        add(&mut ps, "time.fc1.w".into(), &[2 * config.time_freqs, e], fan(2 * config.time_freqs), false)?;
        add(&mut ps, "time.fc1.b".into(), &[1, e], 0.0, true)?;
        add(&mut ps, "time.fc2.w".into(), &[e, e], fan(e), false)?;
        add(&mut ps, "time.fc2.b".into(), &[1, e], 0.0, true)?;

        for p in config.block_prefixes() {
            for sub in SUBLAYERS {
                for part in MOD_PARTS {
                    let gate = part == "gate";
                    let std = 0.1 * fan(e);
                    add(&mut ps, format!("{p}.mod.{sub}.{part}.w"), &[e, d], std, gate)?;
                    add(&mut ps, format!("{p}.mod.{sub}.{part}.b"), &[1, d], 0.0, true)?;
                }
            }
            for w in ["q", "k", "v", "o"] {
                add(&mut ps, format!("{p}.attn.w{w}"), &[d, d], fan(d), false)?;
                add(&mut ps, format!("{p}.attn.b{w}"), &[1, d], 0.0, true)?;
            }
            add(&mut ps, format!("{p}.mlp.w1"), &[d, hidden], fan(d), false)?;
            add(&mut ps, format!("{p}.mlp.b1"), &[1, hidden], 0.0, true)?;
            add(&mut ps, format!("{p}.mlp.w2"), &[hidden, d], fan(hidden), false)?;
            add(&mut ps, format!("{p}.mlp.b2"), &[1, d], 0.0, true)?;
        }
        add(&mut ps, "out.w".into(), &[d, d], fan(d), true)?;
        add(&mut ps, "out.b".into(), &[1, d], 0.0, true)?;
        Ok(Self { config, tensors: ps })
    }

    pub fn numel(&self) -> usize {
        self.tensors.numel()
    }

    /// Flow-time modulation for every block (untracked).
    pub fn time_embed(&self, tau: T) -> Result<Vec<BlockModulation<T>>, ModelError> {
        let mut g = Graph::new();
        let vars = self.tensors.register(&mut g, false);
        let mods = time_modulation(&mut g, &vars, &self.config, tau)?;
        let get = |v: Var| g.value(v).clone();
        Ok(mods
            .into_iter()
            .map(|[a, m]| BlockModulation {
                attn: Modulation {
                    shift: get(a.shift),
                    scale: get(a.scale),
                    gate: get(a.gate),
                },
                mlp: Modulation {
                    shift: get(m.shift),
                    scale: get(m.scale),
                    gate: get(m.gate),
                },
            })
            .collect())
    }

    /// Untracked prediction of the clean chunk (or of whatever the network was
    /// trained to output).
    pub fn predict(&self, z_tau: &Tensor<T>, tau: T, cond: &ConditionTokens<T>, target_frames: &[usize]) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let vars = self.tensors.register(&mut g, false);
        let z = g.constant(z_tau.clone());
        let out = forward(&mut g, &vars, &self.config, z, tau, cond, target_frames)?;
        Ok(g.value(out).clone())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.cast(),
        }
    }
}

fn check_tau<T: Scalar>(tau: T) -> Result<(), ModelError> {
    let t = tau.as_f64();
    if !(0.0..=1.0).contains(&t) {
        return Err(ModelError::FlowTime(t));
    }
    Ok(())
}

/// Sinusoidal features `[cos(1000·τ·f_i), sin(1000·τ·f_i)]`, `f_i = 10000^(−i/F)`.
pub fn time_features<T: Scalar>(tau: T, freqs: usize) -> Tensor<T> {
    let t = 1000.0 * tau.as_f64();
    let mut v = Vec::with_capacity(2 * freqs);
    let cos_sin: Vec<(f64, f64)> = (0..freqs)
        .map(|i| {
            let f = (-(10000f64.ln()) * i as f64 / freqs as f64).exp();
            let (s, c) = (t * f).sin_cos();
            (c, s)
        })
        .collect();
    v.extend(cos_sin.iter().map(|&(c, _)| T::lit(c)));
    v.extend(cos_sin.iter().map(|&(_, s)| T::lit(s)));
    Tensor::matrix(1, 2 * freqs, v).expect("feature row")
}

fn linear(g: &mut Graph<impl Scalar>, vars: &ParamVars, x: Var, w: &str, b: &str) -> Result<Var, NumericsError> {
    let y = g.matmul(x, vars.get(w)?)?;
    g.add_row(y, vars.get(b)?)
}

fn time_modulation<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, cfg: &ModelConfig, tau: T) -> Result<Vec<[ModVars; 2]>, ModelError> {
    check_tau(tau)?;
    let feats = g.constant(time_features(tau, cfg.time_freqs));
    let h = linear(g, vars, feats, "time.fc1.w", "time.fc1.b")?;
    let h = g.silu(h)?;
    let emb = linear(g, vars, h, "time.fc2.w", "time.fc2.b")?;
    let act = g.silu(emb)?;
    let mut out = Vec::new();
    for p in cfg.block_prefixes() {
        let mut pair = Vec::with_capacity(2);
        for sub in SUBLAYERS {
            let mut m = [act; 3];
            for (slot, part) in m.iter_mut().zip(MOD_PARTS) {
                *slot = linear(g, vars, act, &format!("{p}.mod.{sub}.{part}.w"), &format!("{p}.mod.{sub}.{part}.b"))?;
            }
            pair.push(ModVars {
                shift: m[0],
                scale: m[1],
                gate: m[2],
            });
        }
        out.push([pair[0], pair[1]]);
    }
    Ok(out)
}

/// `LN(x)·(1 + scale) + shift`, with `scale`/`shift` broadcast over rows.
pub fn adaln<T: Scalar>(g: &mut Graph<T>, x: Var, scale: Var, shift: Var) -> Result<Var, NumericsError> {
    let n = g.layer_norm(x)?;
    let s = g.offset(scale, T::one())?;
    let y = g.mul_row(n, s)?;
    g.add_row(y, shift)
}

/// Per-token rotary angles for one sequence, shared by all heads.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

/// (frame, row, col) position of every token of the given frames. Special
/// token `j` sits at row 0, column `j`; patches on a 1-based grid below it.
pub fn token_positions(frames: &[usize], origin: usize, tokens_per_frame: usize, patch_side: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(frames.len() * tokens_per_frame);
    for &f in frames {
        let fr = f as f64 - origin as f64;
        for t in 0..tokens_per_frame {
            if t < N_SPECIAL {
                out.push([fr, 0.0, t as f64]);
            } else {
                let p = t - N_SPECIAL;
                out.push([fr, (p / patch_side + 1) as f64, (p % patch_side + 1) as f64]);
            }
        }
    }
    out
}

/// Rotation tables for `positions`: pair `j` belongs to axis `j / axis_pairs`
/// with frequency `base^(−(j mod axis_pairs)/axis_pairs)`; pairs past the
/// third axis are left unrotated.
pub fn rope_table<T: Scalar>(positions: &[[f64; 3]], head_dim: usize, axis_pairs: usize, base: f64) -> RopeTable<T> {
    let pairs = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for pos in positions {
        for j in 0..pairs {
            let axis = j.checked_div(axis_pairs).unwrap_or(3);
            let angle = if axis < 3 {
                let i = j % axis_pairs;
                pos[axis] * base.powf(-(i as f64) / axis_pairs as f64)
            } else {
                0.0
            };
            let (s, c) = angle.sin_cos();
            cos.push(T::lit(c));
            sin.push(T::lit(s));
        }
    }
    RopeTable { cos, sin }
}

/// Multi-head scaled dot-product attention with rotary queries and keys.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    q_rope: &RopeTable<T>,
    k_rope: &RopeTable<T>,
) -> Result<Var, NumericsError> {
    let d = g.value(q).cols();
    let hd = d / n_heads;
    let inv = T::lit(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let qh = g.rope(qh, q_rope.cos.clone(), q_rope.sin.clone())?;
        let kh = g.rope(kh, k_rope.cos.clone(), k_rope.sin.clone())?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, inv)?;
        let p = g.softmax(s)?;
        heads.push(g.matmul(p, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        g.concat_cols(&heads)
    }
}

struct BlockCtx<'a, T> {
    cfg: &'a ModelConfig,
    chunk_rope: &'a RopeTable<T>,
    /// Keys of `[chunk; condition]` for dual blocks.
    joint_rope: &'a RopeTable<T>,
    cond: Option<Var>,
}

fn block<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, prefix: &str, x: Var, m: [ModVars; 2], ctx: &BlockCtx<'_, T>) -> Result<Var, NumericsError> {
    let [ma, mm] = m;
    let xn = adaln(g, x, ma.scale, ma.shift)?;
    let q = linear(g, vars, xn, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"))?;
    let (kv_in, k_rope) = match ctx.cond {
        Some(c) => (g.concat_rows(&[xn, c])?, ctx.joint_rope),
        None => (xn, ctx.chunk_rope),
    };
    let k = linear(g, vars, kv_in, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.bk"))?;
    let v = linear(g, vars, kv_in, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"))?;
    let a = attention(g, q, k, v, ctx.cfg.n_heads, ctx.chunk_rope, k_rope)?;
    let o = linear(g, vars, a, &format!("{prefix}.attn.wo"), &format!("{prefix}.attn.bo"))?;
    let o = g.mul_row(o, ma.gate)?;
    let x = g.add(x, o)?;

    let xn = adaln(g, x, mm.scale, mm.shift)?;
    let h = linear(g, vars, xn, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?;
    let h = g.gelu(h)?;
    let h = linear(g, vars, h, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))?;
    let h = g.mul_row(h, mm.gate)?;
    g.add(x, h)
}

fn check_frames(cfg: &ModelConfig, cond: &[usize], target: &[usize]) -> Result<(), ModelError> {
    let increasing = |f: &[usize]| f.windows(2).all(|w| w[0] < w[1]);
    let ordered = cond.len() == cfg.context_frames
        && target.len() == cfg.chunk_frames
        && increasing(cond)
        && increasing(target)
        && cond.last() < target.first();
    if !ordered {
        return Err(ModelError::FrameOrder {
            condition: cond.to_vec(),
            target: target.to_vec(),
        });
    }
    Ok(())
}

/// Records one dual-stream block on `g`.
#[allow(clippy::too_many_arguments)]
pub fn dual_block<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    index: usize,
    z: Var,
    tau: T,
    cond: &ConditionTokens<T>,
    target_frames: &[usize],
) -> Result<Var, ModelError> {
    check_frames(cfg, &cond.frame_indices, target_frames)?;
    let mods = time_modulation(g, vars, cfg, tau)?;
    let (chunk_rope, joint_rope) = ropes(cfg, &cond.frame_indices, target_frames);
    let c = g.constant(cond.tokens.clone());
    let ctx = BlockCtx {
        cfg,
        chunk_rope: &chunk_rope,
        joint_rope: &joint_rope,
        cond: Some(c),
    };
    block(g, vars, &format!("dual.{index}"), z, mods[index], &ctx).map_err(|source| ModelError::Block { index, source })
}

/// Records one single-stream block on `g`. `target_frames` only set the
/// rotary positions; no condition is read.
pub fn single_block<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    index: usize,
    z: Var,
    tau: T,
    target_frames: &[usize],
) -> Result<Var, ModelError> {
    let mods = time_modulation(g, vars, cfg, tau)?;
    let origin = target_frames.first().copied().unwrap_or(0);
    let pos = token_positions(target_frames, origin, cfg.tokens_per_frame, cfg.patch_side);
    let rope = rope_table(&pos, cfg.head_dim(), cfg.axis_pairs(), cfg.rope_base);
    let ctx = BlockCtx {
        cfg,
        chunk_rope: &rope,
        joint_rope: &rope,
        cond: None,
    };
    let at = cfg.depth_dual + index;
    block(g, vars, &format!("single.{index}"), z, mods[at], &ctx).map_err(|source| ModelError::Block { index: at, source })
}

fn ropes<T: Scalar>(cfg: &ModelConfig, cond_frames: &[usize], target_frames: &[usize]) -> (RopeTable<T>, RopeTable<T>) {
    let origin = cond_frames.first().copied().unwrap_or(0);
    let chunk_pos = token_positions(target_frames, origin, cfg.tokens_per_frame, cfg.patch_side);
    let cond_pos = token_positions(cond_frames, origin, cfg.tokens_per_frame, cfg.patch_side);
    let joint: Vec<[f64; 3]> = chunk_pos.iter().chain(&cond_pos).copied().collect();
    (
        rope_table(&chunk_pos, cfg.head_dim(), cfg.axis_pairs(), cfg.rope_base),
        rope_table(&joint, cfg.head_dim(), cfg.axis_pairs(), cfg.rope_base),
    )
}

/// Full denoiser on `g`: dual blocks, single blocks, then a final layer norm
/// and linear projection back to `d_model` channels.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    z_tau: Var,
    tau: T,
    cond: &ConditionTokens<T>,
    target_frames: &[usize],
) -> Result<Var, ModelError> {
    check_frames(cfg, &cond.frame_indices, target_frames)?;
    let want = vec![cfg.chunk_rows(), cfg.d_model];
    if g.value(z_tau).shape() != want.as_slice() {
        return Err(ModelError::Shape {
            what: "noisy chunk",
            want,
            got: g.value(z_tau).shape().to_vec(),
        });
    }
    let want = vec![cfg.context_rows(), cfg.d_model];
    if cond.tokens.shape() != want.as_slice() {
        return Err(ModelError::Shape {
            what: "condition",
            want,
            got: cond.tokens.shape().to_vec(),
        });
    }
    if !g.value(z_tau).is_finite() {
        return Err(NumericsError::NonFinite { op: "input" }.into());
    }

    let mods = time_modulation(g, vars, cfg, tau)?;
    let (chunk_rope, joint_rope) = ropes(cfg, &cond.frame_indices, target_frames);
    let c = g.constant(cond.tokens.clone());
    let mut x = z_tau;
    for (i, m) in mods.iter().enumerate() {
        let dual = i < cfg.depth_dual;
        let (prefix, cond_var) = if dual {
            (format!("dual.{i}"), Some(c))
        } else {
            (format!("single.{}", i - cfg.depth_dual), None)
        };
        let ctx = BlockCtx {
            cfg,
            chunk_rope: &chunk_rope,
            joint_rope: &joint_rope,
            cond: cond_var,
        };
        x = block(g, vars, &prefix, x, *m, &ctx).map_err(|source| ModelError::Block { index: i, source })?;
    }
    let n = g.layer_norm(x)?;
    Ok(linear(g, vars, n, "out.w", "out.b")?)
}

/// Row mask (1 = supervised) for a chunk, dropping register tokens when
/// `predict_registers` is off.
pub fn loss_mask<T: Scalar>(cfg: &ModelConfig) -> Option<Tensor<T>> {
    if cfg.predict_registers {
        return None;
    }
    let (rows, d) = (cfg.chunk_rows(), cfg.d_model);
    let mut data = vec![T::one(); rows * d];
    for r in 0..rows {
        if REGISTER_TOKENS.contains(&(r % cfg.tokens_per_frame)) {
            for v in &mut data[r * d..(r + 1) * d] {
                *v = T::zero();
            }
        }
    }
    Some(Tensor::matrix(rows, d, data).expect("mask layout"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 12,
            n_heads: 2,
            depth_dual: 1,
            depth_single: 1,
            mlp_ratio: 2,
            context_frames: 2,
            chunk_frames: 2,
            time_freqs: 8,
            time_dim: 6,
            tokens_per_frame: 6,
            patch_side: 1,
            ..ModelConfig::default()
        }
    }

    fn inputs(cfg: &ModelConfig, seed: u64) -> (Tensor<f64>, ConditionTokens<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::randn(&[cfg.chunk_rows(), cfg.d_model], 1.0, &mut rng);
        let c = Tensor::randn(&[cfg.context_rows(), cfg.d_model], 1.0, &mut rng);
        (
            z,
            ConditionTokens {
                tokens: c,
                frame_indices: vec![3, 4],
            },
        )
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.depth_single = 0;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn zero_init_outputs_zero() {
        let cfg = tiny();
        let p = ModelParams::<f64>::init(cfg.clone(), 1).unwrap();
        let (z, c) = inputs(&cfg, 2);
        let out = p.predict(&z, 0.3, &c, &[5, 6]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_embed_endpoints_differ_and_gates_start_at_zero() {
        let p = ModelParams::<f64>::init(tiny(), 4).unwrap();
        let a = p.time_embed(0.0).unwrap();
        let b = p.time_embed(1.0).unwrap();
        assert_ne!(a, b);
        assert_eq!(p.time_embed(0.5).unwrap(), p.time_embed(0.5).unwrap());
        for m in &a {
            assert!(m.attn.gate.data().iter().chain(m.mlp.gate.data()).all(|&v| v == 0.0));
        }
        assert!(matches!(p.time_embed(1.5), Err(ModelError::FlowTime(_))));
    }

    #[test]
    fn frame_order_violation_rejected() {
        let cfg = tiny();
        let p = ModelParams::<f64>::init_dense(cfg.clone(), 1, 1.0).unwrap();
        let (z, mut c) = inputs(&cfg, 2);
        assert!(matches!(p.predict(&z, 0.3, &c, &[4, 5]), Err(ModelError::FrameOrder { .. })));
        c.frame_indices = vec![4, 3];
        assert!(matches!(p.predict(&z, 0.3, &c, &[5, 6]), Err(ModelError::FrameOrder { .. })));
    }

    #[test]
    fn prediction_is_deterministic_and_condition_untouched() {
        let cfg = tiny();
        let p = ModelParams::<f64>::init_dense(cfg.clone(), 9, 1.0).unwrap();
        let (z, c) = inputs(&cfg, 2);
        let before = c.clone();
        let a = p.predict(&z, 0.7, &c, &[5, 6]).unwrap();
        let b = p.predict(&z, 0.7, &c, &[5, 6]).unwrap();
        assert_eq!(a, b);
        assert_eq!(c, before);
    }

    #[test]
    fn register_mask_zeroes_register_rows() {
        let mut cfg = tiny();
        assert!(loss_mask::<f64>(&cfg).is_none());
        cfg.predict_registers = false;
        let m = loss_mask::<f64>(&cfg).unwrap();
        for r in 0..cfg.chunk_rows() {
            let want = if (1..5).contains(&(r % 6)) { 0.0 } else { 1.0 };
            assert!(m.row(r).iter().all(|&v| v == want));
        }
    }

    fn layer_norm_row(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter().map(|v| (v - mean) / (var + 1e-6).sqrt()).collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn vecmat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
        (0..w.cols()).map(|j| x.iter().enumerate().map(|(i, v)| v * w.get2(i, j)).sum()).collect()
    }

    fn addv(x: &[f64], b: &Tensor<f64>) -> Vec<f64> {
        x.iter().zip(b.data()).map(|(a, c)| a + c).collect()
    }

    fn rotate(x: &[f64], pos: [f64; 3], cfg: &ModelConfig) -> Vec<f64> {
        let ap = cfg.axis_pairs();
        let mut out = x.to_vec();
        for j in 0..x.len() / 2 {
            let axis = j / ap;
            if axis >= 3 {
                continue;
            }
            let a = pos[axis] * cfg.rope_base.powf(-((j % ap) as f64) / ap as f64);
            out[2 * j] = x[2 * j] * a.cos() - x[2 * j + 1] * a.sin();
            out[2 * j + 1] = x[2 * j] * a.sin() + x[2 * j + 1] * a.cos();
        }
        out
    }

    /// Loop-level single-head block evaluation.
    fn oracle_block(p: &ModelParams<f64>, prefix: &str, m: &BlockModulation<f64>, x: &Tensor<f64>, cond: Option<&Tensor<f64>>, qpos: &[[f64; 3]], kpos: &[[f64; 3]]) -> Tensor<f64> {
        let cfg = &p.config;
        let w = |n: &str| p.tensors.get(&format!("{prefix}.{n}")).unwrap();
        let modulate = |row: &[f64], md: &Modulation<f64>| -> Vec<f64> {
            layer_norm_row(row)
                .iter()
                .enumerate()
                .map(|(c, v)| v * (1.0 + md.scale.data()[c]) + md.shift.data()[c])
                .collect()
        };
        let xn: Vec<Vec<f64>> = (0..x.rows()).map(|r| modulate(x.row(r), &m.attn)).collect();
        let mut kv_rows = xn.clone();
        if let Some(c) = cond {
            kv_rows.extend((0..c.rows()).map(|r| c.row(r).to_vec()));
        }
        let keys: Vec<Vec<f64>> = kv_rows.iter().zip(kpos).map(|(r, &pp)| rotate(&addv(&vecmat(r, w("attn.wk")), w("attn.bk")), pp, cfg)).collect();
        let vals: Vec<Vec<f64>> = kv_rows.iter().map(|r| addv(&vecmat(r, w("attn.wv")), w("attn.bv"))).collect();
        let d = cfg.d_model;
        let mut out = Vec::new();
        for (i, row) in xn.iter().enumerate() {
            let q = rotate(&addv(&vecmat(row, w("attn.wq")), w("attn.bq")), qpos[i], cfg);
            let logits: Vec<f64> = keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut a = vec![0.0; d];
            for (wt, v) in e.iter().zip(&vals) {
                for c in 0..d {
                    a[c] += wt / z * v[c];
                }
            }
            let o = vecmat(&a, w("attn.wo"));
            let mut h: Vec<f64> = (0..d).map(|c| x.get2(i, c) + m.attn.gate.data()[c] * (o[c] + w("attn.bo").data()[c])).collect();
            let hn = modulate(&h, &m.mlp);
            let u: Vec<f64> = vecmat(&hn, w("mlp.w1")).iter().zip(w("mlp.b1").data()).map(|(a, b)| gelu(a + b)).collect();
            let y = vecmat(&u, w("mlp.w2"));
            for c in 0..d {
                h[c] += m.mlp.gate.data()[c] * (y[c] + w("mlp.b2").data()[c]);
            }
            out.extend(h);
        }
        Tensor::matrix(x.rows(), d, out).unwrap()
    }

    fn single_head() -> ModelConfig {
        ModelConfig {
            n_heads: 1,
            ..tiny()
        }
    }

    #[test]
    fn dual_block_matches_loop_oracle() {
        let cfg = single_head();
        let p = ModelParams::<f64>::init_dense(cfg.clone(), 3, 1.0).unwrap();
        let (z, c) = inputs(&cfg, 5);
        let tau = 0.4;
        let mut g = Graph::new();
        let vars = p.tensors.register(&mut g, false);
        let zv = g.constant(z.clone());
        let out = dual_block(&mut g, &vars, &cfg, 0, zv, tau, &c, &[5, 6]).unwrap();
        let qpos = token_positions(&[5, 6], 3, 6, 1);
        let mut kpos = qpos.clone();
        kpos.extend(token_positions(&[3, 4], 3, 6, 1));
        let mods = p.time_embed(tau).unwrap();
        let want = oracle_block(&p, "dual.0", &mods[0], &z, Some(&c.tokens), &qpos, &kpos);
        let err = g.value(out).sub(&want).unwrap().max_abs();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn single_block_matches_loop_oracle() {
        let cfg = single_head();
        let p = ModelParams::<f64>::init_dense(cfg.clone(), 8, 1.0).unwrap();
        let (z, _) = inputs(&cfg, 6);
        let tau = 0.9;
        let mut g = Graph::new();
        let vars = p.tensors.register(&mut g, false);
        let zv = g.constant(z.clone());
        let out = single_block(&mut g, &vars, &cfg, 0, zv, tau, &[5, 6]).unwrap();
        let pos = token_positions(&[5, 6], 5, 6, 1);
        let mods = p.time_embed(tau).unwrap();
        let want = oracle_block(&p, "single.0", &mods[1], &z, None, &pos, &pos);
        let err = g.value(out).sub(&want).unwrap().max_abs();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn zero_init_blocks_are_identity() {
        let cfg = tiny();
        let p = ModelParams::<f64>::init(cfg.clone(), 3).unwrap();
        let (z, c) = inputs(&cfg, 5);
        let mut g = Graph::new();
        let vars = p.tensors.register(&mut g, false);
        let zv = g.constant(z.clone());
        let a = dual_block(&mut g, &vars, &cfg, 0, zv, 0.3, &c, &[5, 6]).unwrap();
        let b = single_block(&mut g, &vars, &cfg, 0, zv, 0.3, &[5, 6]).unwrap();
        assert_eq!(g.value(a), &z);
        assert_eq!(g.value(b), &z);
    }

    #[test]
    fn adaln_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[3, 5], 2.0, &mut rng);
        let sc = Tensor::<f64>::randn(&[1, 5], 0.5, &mut rng);
        let sh = Tensor::<f64>::randn(&[1, 5], 0.5, &mut rng);
        let mut g = Graph::new();
        let (xv, scv, shv) = (g.constant(x.clone()), g.constant(sc.clone()), g.constant(sh.clone()));
        let y = adaln(&mut g, xv, scv, shv).unwrap();
        for r in 0..3 {
            let n = layer_norm_row(x.row(r));
            for (c, nc) in n.iter().enumerate() {
                let want = nc * (1.0 + sc.data()[c]) + sh.data()[c];
                assert!((g.value(y).get2(r, c) - want).abs() < 1e-14);
            }
        }
        // constant rows normalize to zero, leaving only the shift
        let flat = g.constant(Tensor::full(&[2, 5], 3.0));
        let y = adaln(&mut g, flat, scv, shv).unwrap();
        for r in 0..2 {
            assert_eq!(g.value(y).row(r), sh.data());
        }
    }

    #[test]
    fn rope_zero_position_is_identity_and_preserves_pair_norms() {
        let t: RopeTable<f64> = rope_table(&[[0.0; 3]], 12, 2, 10000.0);
        assert!(t.cos.iter().all(|&c| c == 1.0) && t.sin.iter().all(|&s| s == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 12], 1.0, &mut rng);
        let t: RopeTable<f64> = rope_table(&[[3.0, 1.0, 2.0], [7.0, 4.0, 0.0]], 12, 2, 10000.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.rope(xv, t.cos, t.sin).unwrap();
        for (a, b) in x.data().chunks(2).zip(g.value(y).data().chunks(2)) {
            let na = a[0].hypot(a[1]);
            let nb = b[0].hypot(b[1]);
            assert!((na - nb).abs() < 1e-14);
        }
    }

    #[test]
    fn rope_scores_depend_only_on_relative_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor::<f64>::randn(&[1, 12], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[1, 12], 1.0, &mut rng);
        let score = |pq: [f64; 3], pk: [f64; 3]| {
            let tq: RopeTable<f64> = rope_table(&[pq], 12, 2, 100.0);
            let tk: RopeTable<f64> = rope_table(&[pk], 12, 2, 100.0);
            let mut g = Graph::new();
            let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
            let qr = g.rope(qv, tq.cos, tq.sin).unwrap();
            let kr = g.rope(kv, tk.cos, tk.sin).unwrap();
            let a = g.value(qr).data().to_vec();
            a.iter().zip(g.value(kr).data()).map(|(x, y)| x * y).sum::<f64>()
        };
        for _ in 0..20 {
            let p1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0..8) as f64);
            let p2: [f64; 3] = std::array::from_fn(|_| rng.random_range(0..8) as f64);
            let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(0..8) as f64);
            let moved = |p: [f64; 3]| std::array::from_fn(|i| p[i] + shift[i]);
            assert!((score(p1, p2) - score(moved(p1), moved(p2))).abs() < 1e-10);
        }
    }

    #[test]
    fn permuting_condition_rows_with_positions_leaves_output_unchanged() {
        let cfg = tiny();
        let p = ModelParams::<f64>::init_dense(cfg.clone(), 21, 1.0).unwrap();
        let (z, c) = inputs(&cfg, 4);
        let mods_of = |g: &mut Graph<f64>, vars: &ParamVars| time_modulation(g, vars, &cfg, 0.5).unwrap();
        let run = |cond: Tensor<f64>, cond_frames: &[usize]| {
            let mut g = Graph::new();
            let vars = p.tensors.register(&mut g, false);
            let mods = mods_of(&mut g, &vars);
            let chunk_pos = token_positions(&[5, 6], 3, 6, 1);
            let mut joint = chunk_pos.clone();
            for &f in cond_frames {
                joint.extend(token_positions(&[f], 3, 6, 1));
            }
            let cr = rope_table(&chunk_pos, cfg.head_dim(), cfg.axis_pairs(), cfg.rope_base);
            let jr = rope_table(&joint, cfg.head_dim(), cfg.axis_pairs(), cfg.rope_base);
            let cv = g.constant(cond);
            let ctx = BlockCtx {
                cfg: &cfg,
                chunk_rope: &cr,
                joint_rope: &jr,
                cond: Some(cv),
            };
            let zv = g.constant(z.clone());
            let out = block(&mut g, &vars, "dual.0", zv, mods[0], &ctx).unwrap();
            g.value(out).clone()
        };
        let a = run(c.tokens.clone(), &[3, 4]);
        let swapped = Tensor::concat_rows(&[&c.tokens.slice_rows(6, 6).unwrap(), &c.tokens.slice_rows(0, 6).unwrap()]).unwrap();
        let b = run(swapped, &[4, 3]);
        assert!(a.sub(&b).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let cfg = tiny();
        let p = ModelParams::<f64>::init_dense(cfg.clone(), 5, 1.0).unwrap();
        let (z, c) = inputs(&cfg, 7);
        let report = crate::numerics::finite_difference_check(&p.tensors, 150, 1e-3, 3, |g, vars| -> Result<Var, ModelError> {
            let zv = g.constant(z.clone());
            let out = forward(g, vars, &cfg, zv, 0.35, &c, &[5, 6])?;
            Ok(g.sum(out)?)
        })
        .unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{report:#?}");
    }
}
