use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use geoflow::curriculum::{stage1_loss_graph, LogRow, Stage1Sample, TrainConfig, Trainer};
use geoflow::evalmetrics::{
    absrel_delta1, ate_rte_rre, chamfer_acc_comp, farthest_point_sampling, umeyama_align, CameraPose, PointCloud,
};
use geoflow::flowformer::{ConditionTokens, ModelParams};
use geoflow::flowmatch::{latent_snr, ode_solve, Parameterization};
use geoflow::numerics::{finite_difference_check, FdReport, Graph, NumericsError, Var};
use geoflow::rollout::{assemble_full, joint_decode, rollout, Commit, ModelSampler};
use geoflow::toyworld::{Dataset, Episode, GeometryState, World, WorldConfig};
use geoflow::Tensor;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::TensorFile;
use crate::config::{check_model_world, RunConfig};
use crate::error::{CliError, Result};
use crate::export::{self, comment_block, create_dir, write_file};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.vgwf";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SNR_CURVE: &str = "snr_curve.csv";
pub const METRICS: &str = "metrics.json";
pub const ROLLOUT_META: &str = "rollout.json";

/// Format conventions recorded in every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub config_hash: String,
    pub conventions: BTreeMap<String, String>,
}

impl ReportHeader {
    pub fn new(cfg: &RunConfig, conventions: &[(&str, &str)]) -> Self {
        Self {
            config_hash: cfg.hash(),
            conventions: conventions.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn to_json_bytes<S: Serialize>(v: &S) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub header: ReportHeader,
    pub world: WorldConfig,
    pub frames: usize,
    pub seeds: Vec<u64>,
    pub episodes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GenArgs {
    pub config: RunConfig,
    pub episodes: usize,
    pub frames: usize,
    pub first_seed: u64,
    pub out: PathBuf,
}

pub fn episode_dir_name(seed: u64) -> String {
    format!("episode_{seed:06}")
}

/// Writes one trajectory directory per episode plus `manifest.json`.
pub fn cmd_gen(args: &GenArgs) -> Result<Manifest> {
    if args.frames < 2 {
        return Err(CliError::validation(format!("--frames must be ≥ 2, got {}", args.frames)));
    }
    if args.episodes == 0 {
        return Err(CliError::validation("--episodes must be ≥ 1"));
    }
    let world = World::new(args.config.world.clone())?;
    let hash = args.config.hash();
    create_dir(&args.out)?;
    let seeds: Vec<u64> = (0..args.episodes as u64).map(|i| args.first_seed + i).collect();
    seeds
        .par_iter()
        .map(|&seed| {
            let traj = world.generate_trajectory(seed, args.frames)?;
            export::write_trajectory(&args.out.join(episode_dir_name(seed)), &traj.states, &traj.geometry, &hash)
        })
        .collect::<Result<Vec<()>>>()?;
    let manifest = Manifest {
        header: ReportHeader::new(&args.config, &[("layout", "one directory per episode seed")]),
        world: args.config.world.clone(),
        frames: args.frames,
        episodes: seeds.iter().map(|&s| episode_dir_name(s)).collect(),
        seeds,
    };
    write_file(&args.out.join(MANIFEST), &to_json_bytes(&manifest))?;
    Ok(manifest)
}

/// Reads a directory written by [`cmd_gen`].
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Dataset<f64>)> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let episodes = manifest
        .episodes
        .iter()
        .zip(&manifest.seeds)
        .map(|(name, &seed)| {
            let states = export::read_states(&dir.join(name).join(export::STATES))?;
            Ok(Episode {
                seed,
                frames: states.into_iter().map(|s| s.tokens).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, Dataset { episodes }))
}

// ---------------------------------------------------------------- train

/// JSON header of a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub stage: u8,
    pub steps: usize,
}

pub fn checkpoint_file(header: &CheckpointHeader, params: &ModelParams<f64>) -> TensorFile {
    TensorFile::from_params(serde_json::to_string(header).expect("header serializes"), &params.tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams<f64>)> {
    let f = TensorFile::load(path)?;
    let header: CheckpointHeader =
        serde_json::from_str(&f.header).map_err(|e| CliError::format(path, format!("checkpoint header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| CliError::format(path, format!("checkpoint config: {e}")))?;
    let template = ModelParams::<f64>::init(header.config.model.clone(), 0)?;
    let tensors = f
        .to_params(template.tensors.names())
        .map_err(|m| CliError::format(path, m))?;
    for (name, t) in template.tensors.iter() {
        let got = tensors.get(name).expect("names checked");
        if got.shape() != t.shape() {
            return Err(CliError::format(
                path,
                format!("tensor {name} has shape {:?}, model needs {:?}", got.shape(), t.shape()),
            ));
        }
    }
    let params = ModelParams {
        config: header.config.model.clone(),
        tensors,
    };
    Ok((header, params))
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: Option<RunConfig>,
    pub dataset: PathBuf,
    pub stage: u8,
    pub resume: Option<PathBuf>,
    pub out: PathBuf,
    pub steps: Option<usize>,
    pub ckpt_every: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<LogRow>,
}

pub fn train_log_csv(rows: &[LogRow], config_hash: &str) -> Vec<u8> {
    let mut s = comment_block(
        config_hash,
        &["loss is the batch mean; grad_norm is measured before clipping; rollout_err is empty in stage 1"],
    );
    s.push_str("step,stage,lambda,tau_mean,loss,grad_norm,rollout_err\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            r.stage,
            r.lambda,
            r.tau_mean,
            r.loss,
            r.grad_norm,
            r.rollout_err.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    s.into_bytes()
}

/// Stage 1 starts from a fresh initialization; stage 2 resumes a checkpoint.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let resumed = match (args.stage, &args.resume) {
        (1, None) => None,
        (1, Some(_)) => return Err(CliError::validation("stage 1 trains from scratch; drop --resume")),
        (2, Some(p)) => Some(load_checkpoint(p)?),
        (2, None) => return Err(CliError::validation("stage 2 requires --resume <stage-1 checkpoint>")),
        (s, _) => return Err(CliError::validation(format!("--stage must be 1 or 2, got {s}"))),
    };
    let mut cfg = match (&args.config, &resumed) {
        (Some(c), _) => c.clone(),
        (None, Some((h, _))) => h.config.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(n) = args.steps {
        match args.stage {
            1 => cfg.train.steps_stage1 = n,
            _ => cfg.train.steps_stage2 = n,
        }
    }
    cfg.validate()?;
    let (manifest, ds) = load_dataset(&args.dataset)?;
    check_model_world(&cfg.model, &manifest.world)?;

    let params = match resumed {
        Some((h, p)) => {
            if h.config.model != cfg.model {
                return Err(CliError::validation("model section differs from the resumed checkpoint"));
            }
            p
        }
        None => ModelParams::init(cfg.model.clone(), cfg.train.seed)?,
    };
    create_dir(&args.out)?;
    let mut trainer = Trainer::new(params, cfg.train.clone())?;
    let hash = cfg.hash();
    let every = args.ckpt_every.filter(|&n| n > 0);
    let mut io_error: Option<CliError> = None;
    let stage = args.stage;
    let save_periodic = |row: &LogRow, p: &ModelParams<f64>, io_error: &mut Option<CliError>| {
        if let Some(n) = every {
            if (row.step + 1).is_multiple_of(n) && io_error.is_none() {
                let header = CheckpointHeader {
                    config: cfg.clone(),
                    stage,
                    steps: row.step + 1,
                };
                let path = args.out.join(format!("checkpoint_s{stage}_{:06}.vgwf", row.step + 1));
                if let Err(e) = checkpoint_file(&header, p).save(&path) {
                    *io_error = Some(e);
                }
            }
        }
    };
    let run = match stage {
        1 => trainer.train_stage1(&ds, |row, p| save_periodic(row, p, &mut io_error)),
        _ => trainer.train_stage2(&ds, |row, p| save_periodic(row, p, &mut io_error)),
    };
    write_file(&args.out.join(TRAIN_LOG), &train_log_csv(&trainer.log, &hash))?;
    run?;
    if let Some(e) = io_error {
        return Err(e);
    }
    let steps = match stage {
        1 => cfg.train.steps_stage1,
        _ => cfg.train.steps_stage2,
    };
    let header = CheckpointHeader {
        config: cfg.clone(),
        stage,
        steps,
    };
    let checkpoint = args.out.join(CHECKPOINT);
    checkpoint_file(&header, &trainer.params).save(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        log: trainer.log,
    })
}

// ---------------------------------------------------------------- rollout

#[derive(Debug, Clone)]
pub struct RolloutArgs {
    pub ckpt: PathBuf,
    pub dataset: PathBuf,
    pub episode: usize,
    /// First observed frame of the episode.
    pub start: usize,
    pub context: Option<usize>,
    pub horizon: Option<usize>,
    pub commit: Option<Commit>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutMeta {
    pub header: ReportHeader,
    pub episode_seed: u64,
    pub context_frames: Vec<usize>,
    pub predicted_frames: Vec<usize>,
}

/// Forecasts after `context` observed frames and jointly decodes the
/// observed and forecast frames.
pub fn cmd_rollout(args: &RolloutArgs) -> Result<RolloutMeta> {
    let (header, params) = load_checkpoint(&args.ckpt)?;
    let mut cfg = header.config;
    let (manifest, ds) = load_dataset(&args.dataset)?;
    check_model_world(&cfg.model, &manifest.world)?;
    if let Some(seed) = args.seed {
        cfg.rollout.seed = seed;
    }
    if let Some(c) = args.commit {
        cfg.rollout.commit = c;
    }
    if let Some(h) = args.horizon {
        cfg.rollout.horizon = h;
    }
    let k = args.context.unwrap_or(cfg.model.context_frames);
    if k != cfg.model.context_frames {
        return Err(CliError::validation(format!(
            "--context {k} differs from the model's context_frames {}",
            cfg.model.context_frames
        )));
    }
    let episode = ds.episodes.get(args.episode).ok_or_else(|| {
        CliError::validation(format!("episode {} out of range (dataset has {})", args.episode, ds.len()))
    })?;
    if args.start + k > episode.frames.len() {
        return Err(CliError::validation(format!(
            "context frames {}..{} exceed the episode's {} frames",
            args.start,
            args.start + k,
            episode.frames.len()
        )));
    }
    let context: Vec<GeometryState<f64>> = (args.start..args.start + k)
        .map(|t| GeometryState {
            tokens: episode.frames[t].clone(),
            frame_index: t,
        })
        .collect();
    let predicted = if cfg.rollout.horizon == 0 {
        Vec::new()
    } else {
        let mut sampler = ModelSampler {
            params: &params,
            solver: cfg.rollout.solver,
            parameterization: cfg.train.parameterization,
        };
        rollout(&mut sampler, &context, &cfg.rollout)?
    };
    let full = assemble_full(&context, &predicted)?;
    let world = World::new(manifest.world.clone())?;
    let geometry = joint_decode(&world, &full)?;
    let hash = cfg.hash();
    export::write_trajectory(&args.out, &full, &geometry, &hash)?;
    export::states_file(&predicted, &hash).save(&args.out.join(export::PREDICTED))?;
    let meta = RolloutMeta {
        header: ReportHeader::new(
            &cfg,
            &[("frames", "states.bin holds context then forecast; predicted_latents.bin holds forecast only")],
        ),
        episode_seed: episode.seed,
        context_frames: context.iter().map(|s| s.frame_index).collect(),
        predicted_frames: predicted.iter().map(|s| s.frame_index).collect(),
    };
    write_file(&args.out.join(ROLLOUT_META), &to_json_bytes(&meta))?;
    Ok(meta)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Depth,
    Points,
    Traj,
    All,
}

impl Suite {
    fn depth(self) -> bool {
        matches!(self, Suite::Depth | Suite::All)
    }
    fn points(self) -> bool {
        matches!(self, Suite::Points | Suite::All)
    }
    fn traj(self) -> bool {
        matches!(self, Suite::Traj | Suite::All)
    }
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub config: RunConfig,
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub suite: Suite,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub horizon: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub absrel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completeness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chamfer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub ate: f64,
    pub rte: f64,
    pub rre_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub header: ReportHeader,
    pub suite: Suite,
    pub frames: Vec<FrameMetrics>,
    /// Frame metrics averaged per horizon; horizon 0 holds observed frames.
    pub by_horizon: BTreeMap<usize, FrameMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectoryMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point_alignment_rms: Option<f64>,
}

fn mean_metrics(rows: &[&FrameMetrics]) -> FrameMetrics {
    let avg = |f: fn(&FrameMetrics) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    FrameMetrics {
        frame: rows.first().map_or(0, |r| r.frame),
        horizon: rows.first().map_or(0, |r| r.horizon),
        absrel: avg(|r| r.absrel),
        delta1: avg(|r| r.delta1),
        accuracy: avg(|r| r.accuracy),
        completeness: avg(|r| r.completeness),
        chamfer: avg(|r| r.chamfer),
    }
}

fn gt_frame<'a, V>(map: &'a BTreeMap<usize, V>, frame: usize, path: &Path) -> Result<&'a V> {
    map.get(&frame)
        .ok_or_else(|| CliError::format(path, format!("ground truth has no frame {frame}")))
}

/// Compares a predicted trajectory directory with a ground-truth one.
///
/// Horizons come from `rollout.json` when present (frame minus last observed
/// frame); otherwise every frame counts from the first one.
pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let mut needed = Vec::new();
    if args.suite.depth() {
        needed.push(export::DEPTH);
    }
    if args.suite.points() {
        needed.push(export::POINTS);
    }
    if args.suite.traj() {
        needed.push(export::POSES);
    }
    let mut missing = export::missing_files(&args.pred, &needed);
    missing.extend(export::missing_files(&args.gt, &needed));
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::Format {
            path: args.pred.clone(),
            message: format!("missing files: {}", list.join(", ")),
        });
    }

    let meta_path = args.pred.join(ROLLOUT_META);
    let last_observed: Option<usize> = if meta_path.is_file() {
        let meta: RolloutMeta = read_json(&meta_path)?;
        meta.context_frames.last().copied()
    } else {
        None
    };

    let mut frames: BTreeMap<usize, FrameMetrics> = BTreeMap::new();
    let entry = |f: usize, first: usize| {
        let horizon = match last_observed {
            Some(c) => f.saturating_sub(c),
            None => f - first,
        };
        FrameMetrics {
            frame: f,
            horizon,
            ..FrameMetrics::default()
        }
    };
    let e = &args.config.eval;

    if args.suite.depth() {
        let (pp, gp) = (args.pred.join(export::DEPTH), args.gt.join(export::DEPTH));
        let pred = export::read_depth(&pp)?;
        let gt = export::read_depth(&gp)?;
        let first = pred.keys().next().copied().unwrap_or(0);
        for (&f, p) in &pred {
            let g = gt_frame(&gt, f, &gp)?;
            let (absrel, delta1) = absrel_delta1(p, g, e.delta1_threshold)?;
            let row = frames.entry(f).or_insert_with(|| entry(f, first));
            row.absrel = Some(absrel);
            row.delta1 = Some(delta1);
        }
    }

    let mut point_alignment_rms = None;
    if args.suite.points() {
        let (pp, gp) = (args.pred.join(export::POINTS), args.gt.join(export::POINTS));
        let pred = export::read_points(&pp)?;
        let gt = export::read_points(&gp)?;
        let first = pred.keys().next().copied().unwrap_or(0);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (&f, p) in &pred {
            let g = gt_frame(&gt, f, &gp)?;
            if g.len() != p.len() {
                return Err(CliError::format(&pp, format!("frame {f} has {} points, ground truth {}", p.len(), g.len())));
            }
            src.extend_from_slice(p);
            dst.extend_from_slice(g);
        }
        let transform = if e.align_points {
            let a = umeyama_align(&PointCloud::new(src)?, &PointCloud::new(dst)?, true)?;
            point_alignment_rms = Some(a.rms_residual);
            Some(a.transform)
        } else {
            None
        };
        let fps = |cloud: PointCloud<f64>, seed: u64| -> PointCloud<f64> {
            match e.fps_points {
                Some(n) if n < cloud.len() => {
                    let start = e
                        .fps_start_seed
                        .map_or(0, |s| ChaCha8Rng::seed_from_u64(s ^ seed).random_range(0..cloud.len()));
                    let idx = farthest_point_sampling(&cloud, n, start);
                    cloud.select(&idx)
                }
                _ => cloud,
            }
        };
        for (&f, p) in &pred {
            let aligned: Vec<Vector3<f64>> = match &transform {
                Some(t) => p.iter().map(|x| t.apply(x)).collect(),
                None => p.clone(),
            };
            let pc = fps(PointCloud::new(aligned)?, 2 * f as u64);
            let gc = fps(PointCloud::new(gt_frame(&gt, f, &gp)?.clone())?, 2 * f as u64 + 1);
            let d = chamfer_acc_comp(&pc, &gc);
            let row = frames.entry(f).or_insert_with(|| entry(f, first));
            row.accuracy = Some(d.accuracy);
            row.completeness = Some(d.completeness);
            row.chamfer = Some(d.chamfer);
        }
    }

    let mut trajectory = None;
    if args.suite.traj() {
        let (pp, gp) = (args.pred.join(export::POSES), args.gt.join(export::POSES));
        let pred = export::read_poses(&pp)?;
        let gt = export::read_poses(&gp)?;
        let mut pc = Vec::new();
        let mut gc = Vec::new();
        for (&f, p) in &pred {
            pc.push(CameraPose::from(p));
            gc.push(CameraPose::from(gt_frame(&gt, f, &gp)?));
        }
        let t = ate_rte_rre(&pc, &gc)?;
        trajectory = Some(TrajectoryMetrics {
            ate: t.ate,
            rte: t.rte,
            rre_deg: t.rre,
        });
    }

    let mut by_horizon: BTreeMap<usize, Vec<&FrameMetrics>> = BTreeMap::new();
    for r in frames.values() {
        by_horizon.entry(r.horizon).or_default().push(r);
    }
    let by_horizon = by_horizon.into_iter().map(|(h, rows)| (h, mean_metrics(&rows))).collect();
    let report = MetricsReport {
        header: ReportHeader::new(
            &args.config,
            &[
                ("absrel", "mean |pred − gt| / gt"),
                ("delta1", "fraction with max(pred/gt, gt/pred) below eval.delta1_threshold"),
                ("chamfer", "(accuracy + completeness) / 2, unsquared Euclidean nearest-neighbor distances"),
                ("points", "predicted points similarity-aligned to ground truth over all frames when eval.align_points"),
                ("trajectory", "camera centers similarity-aligned; rte/rre over consecutive frame pairs; rre in degrees"),
            ],
        ),
        suite: args.suite,
        frames: frames.into_values().collect(),
        by_horizon,
        trajectory,
        point_alignment_rms,
    };
    let out = args.out.clone().unwrap_or_else(|| args.pred.join(METRICS));
    write_file(&out, &to_json_bytes(&report))?;
    Ok(report)
}

// ---------------------------------------------------------------- snr

#[derive(Debug, Clone)]
pub struct SnrArgs {
    pub config: RunConfig,
    pub params: Vec<Parameterization>,
    pub dims: Vec<usize>,
    pub iters: usize,
    pub log_every: usize,
    pub train_episodes: usize,
    pub train_frames: usize,
    pub heldout_episodes: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrRow {
    pub iteration: usize,
    pub parameterization: String,
    pub dim: usize,
    pub snr_db: f64,
    /// Running digest of every batch consumed so far.
    pub batch_hash: String,
}

pub const HELDOUT_SEED_BASE: u64 = 1_000_000;

fn hash_batch(h: &mut Sha256, batch: &[Stage1Sample<f64>]) {
    for s in batch {
        h.update((s.episode as u64).to_le_bytes());
        h.update((s.start as u64).to_le_bytes());
        h.update(s.tau.to_le_bytes());
        for v in s.eps.data() {
            h.update(v.to_le_bytes());
        }
    }
}

fn short_digest(h: &Sha256) -> String {
    h.clone().finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Latent SNR of fully denoised predictions on held-out chunks, with a fixed noise draw.
pub fn heldout_snr(params: &ModelParams<f64>, param: Parameterization, cfg: &RunConfig, held: &Dataset<f64>) -> Result<f64> {
    let (k, m) = (cfg.model.context_frames, cfg.model.chunk_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5EED_5A11);
    let mut preds = Vec::with_capacity(held.len());
    let mut gts = Vec::with_capacity(held.len());
    for e in &held.episodes {
        let cond_frames: Vec<&Tensor<f64>> = e.frames[..k].iter().collect();
        let cond = ConditionTokens::from_frames(&cond_frames, (0..k).collect())?;
        let target_frames: Vec<usize> = (k..k + m).collect();
        let gt_frames: Vec<&Tensor<f64>> = e.frames[k..k + m].iter().collect();
        let gt = Tensor::concat_rows(&gt_frames)?;
        let noise = Tensor::<f64>::randn(gt.shape(), 1.0, &mut rng);
        let pred = ode_solve(
            |z: &Tensor<f64>, tau| params.predict(z, tau, &cond, &target_frames).map_err(CliError::from),
            &noise,
            &cfg.rollout.solver,
            param,
        )?;
        preds.push(pred);
        gts.push(gt);
    }
    let p = Tensor::concat_rows(&preds.iter().collect::<Vec<_>>())?;
    let g = Tensor::concat_rows(&gts.iter().collect::<Vec<_>>())?;
    Ok(latent_snr(&p, &g)?)
}

pub fn snr_csv(rows: &[SnrRow], config_hash: &str) -> Vec<u8> {
    let mut s = comment_block(
        config_hash,
        &[
            "snr_db = 10 log10(|Z|² / |Ẑ − Z|²) over held-out chunks, capped at 120 dB",
            "batch_hash digests every training batch consumed up to the row's iteration",
        ],
    );
    s.push_str("iteration,parameterization,dim,snr_db,batch_hash\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.parameterization, r.dim, r.snr_db, r.batch_hash));
    }
    s.into_bytes()
}

/// Trains one model per (dim, parameterization) on identical data and batch
/// sequences and records held-out latent SNR at each checkpoint.
pub fn cmd_snr(args: &SnrArgs, mut on_row: impl FnMut(&SnrRow)) -> Result<Vec<SnrRow>> {
    if args.log_every == 0 {
        return Err(CliError::validation("--log-every must be ≥ 1"));
    }
    if args.params.is_empty() || args.dims.is_empty() {
        return Err(CliError::validation("need at least one parameterization and one dim"));
    }
    let mut rows = Vec::new();
    for &dim in &args.dims {
        let mut cfg = args.config.clone();
        cfg.world.d = dim;
        cfg.model.d_model = dim;
        cfg.validate()?;
        let world = World::new(cfg.world.clone())?;
        let (k, m) = (cfg.model.context_frames, cfg.model.chunk_frames);
        if args.train_frames < k + m {
            return Err(CliError::validation(format!("--frames must be ≥ {}", k + m)));
        }
        let ds: Dataset<f64> = Dataset::generate(&world, 0..args.train_episodes as u64, args.train_frames)?;
        let held: Dataset<f64> = Dataset::generate(
            &world,
            HELDOUT_SEED_BASE..HELDOUT_SEED_BASE + args.heldout_episodes as u64,
            k + m,
        )?;
        let init = ModelParams::<f64>::init(cfg.model.clone(), cfg.train.seed)?;
        for &param in &args.params {
            let train = TrainConfig {
                parameterization: param,
                ..cfg.train.clone()
            };
            let mut trainer = Trainer::new(init.clone(), train)?;
            let mut digest = Sha256::new();
            let mut log = |it: usize, tr: &Trainer<f64>, digest: &Sha256| -> Result<()> {
                let row = SnrRow {
                    iteration: it,
                    parameterization: param.name().to_string(),
                    dim,
                    snr_db: heldout_snr(&tr.params, param, &cfg, &held)?,
                    batch_hash: short_digest(digest),
                };
                on_row(&row);
                rows.push(row);
                Ok(())
            };
            log(0, &trainer, &digest)?;
            for step in 0..args.iters {
                hash_batch(&mut digest, &trainer.stage1_batch(&ds, step)?);
                trainer.stage1_step(&ds, step)?;
                let it = step + 1;
                if it % args.log_every == 0 || it == args.iters {
                    log(it, &trainer, &digest)?;
                }
            }
        }
    }
    if let Some(out) = &args.out {
        write_file(out, &snr_csv(&rows, &args.config.hash()))?;
    }
    Ok(rows)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone)]
pub struct GradcheckArgs {
    pub config: RunConfig,
    pub ckpt: Option<PathBuf>,
    pub probes: usize,
    pub step: f64,
    pub batch: usize,
    pub gain: f64,
    pub seed: u64,
}

/// Finite-difference check of the full Stage-1 batch loss.
///
/// Without a checkpoint, every tensor (gates and output included) is drawn
/// at random so that no gradient path is trivially zero.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<FdReport> {
    let (cfg, params) = match &args.ckpt {
        Some(p) => {
            let (h, params) = load_checkpoint(p)?;
            (h.config, params)
        }
        None => {
            args.config.validate()?;
            let p = ModelParams::<f64>::init_dense(args.config.model.clone(), args.seed, args.gain)?;
            (args.config.clone(), p)
        }
    };
    if args.probes == 0 {
        return Ok(FdReport::default());
    }
    let world = World::new(cfg.world.clone())?;
    let frames = cfg.model.context_frames + cfg.model.chunk_frames;
    let ds: Dataset<f64> = Dataset::generate(&world, args.seed..args.seed + 2, frames + 1)?;
    let train = TrainConfig {
        batch_stage1: args.batch.max(1),
        seed: args.seed,
        ..cfg.train.clone()
    };
    let trainer = Trainer::new(params.clone(), train.clone())?;
    let batch = trainer.stage1_batch(&ds, 0)?;
    let model = cfg.model.clone();
    let report = finite_difference_check(&params.tensors, args.probes, args.step, args.seed, |g: &mut Graph<f64>, vars| {
        let mut total: Option<Var> = None;
        for s in &batch {
            let l = stage1_loss_graph(g, vars, &model, &train, s).map_err(CliError::from)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let sum = total.ok_or_else(|| CliError::Numeric(NumericsError::Empty { op: "batch" }.to_string()))?;
        Ok::<Var, CliError>(g.scale(sum, 1.0 / batch.len() as f64)?)
    })?;
    Ok(report)
}
