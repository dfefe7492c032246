use std::path::Path;

use geoflow::curriculum::TrainConfig;
use geoflow::evalmetrics::DELTA1_THRESHOLD;
use geoflow::flowformer::ModelConfig;
use geoflow::rollout::RolloutPlan;
use geoflow::toyworld::WorldConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub delta1_threshold: f64,
    /// Points kept per cloud by farthest point sampling; `None` keeps all.
    pub fps_points: Option<usize>,
    /// Start index for farthest point sampling; `None` starts at index 0.
    pub fps_start_seed: Option<u64>,
    /// Align predicted points to ground truth with a similarity before measuring.
    pub align_points: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            delta1_threshold: DELTA1_THRESHOLD,
            fps_points: None,
            fps_start_seed: None,
            align_points: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rollout: RolloutPlan,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// A world and model sized to each other: `d` channels, `n_patch` patches.
    pub fn matched(d: usize, n_patch: usize) -> Self {
        let world = WorldConfig {
            d,
            n_patch,
            ..WorldConfig::default()
        };
        let model = ModelConfig {
            d_model: d,
            tokens_per_frame: world.tokens_per_frame(),
            patch_side: world.patch_side(),
            ..ModelConfig::default()
        };
        Self {
            world,
            model,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads `path`, or the default config when absent.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let cfg = Self::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let plan = RolloutPlan {
            horizon: self.rollout.horizon.max(1),
            ..self.rollout.clone()
        };
        plan.validate()?;
        check_model_world(&self.model, &self.world)?;
        let mismatch = |what: &str, a: usize, b: usize| {
            CliError::validation(format!("{what}: model expects {a}, rollout uses {b}"))
        };
        if self.rollout.k != self.model.context_frames {
            return Err(mismatch("context frames (model.context_frames vs rollout.k)", self.model.context_frames, self.rollout.k));
        }
        if self.rollout.m != self.model.chunk_frames {
            return Err(mismatch("chunk frames (model.chunk_frames vs rollout.m)", self.model.chunk_frames, self.rollout.m));
        }
        let e = &self.eval;
        if !(e.delta1_threshold > 1.0 && e.delta1_threshold.is_finite()) {
            return Err(CliError::validation(format!("eval.delta1_threshold must exceed 1, got {}", e.delta1_threshold)));
        }
        if e.fps_points == Some(0) {
            return Err(CliError::validation("eval.fps_points must be ≥ 1"));
        }
        Ok(())
    }
}

/// The model must consume exactly the token layout the world emits.
pub fn check_model_world(model: &ModelConfig, world: &WorldConfig) -> Result<()> {
    let mut diffs = Vec::new();
    if model.d_model != world.d {
        diffs.push(format!("model.d_model = {} vs world.d = {}", model.d_model, world.d));
    }
    if model.tokens_per_frame != world.tokens_per_frame() {
        diffs.push(format!(
            "model.tokens_per_frame = {} vs world tokens per frame = {}",
            model.tokens_per_frame,
            world.tokens_per_frame()
        ));
    }
    if model.patch_side != world.patch_side() {
        diffs.push(format!("model.patch_side = {} vs world patch side = {}", model.patch_side, world.patch_side()));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CliError::validation(format!("config mismatch: {}", diffs.join("; "))))
    }
}
