use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use equidiff_core::backbone::Model;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use equidiff_core::data::{
    align_and_downsample, build_scenes, load_manifest, load_trajectories, scene_from_history, split, synth_generate,
    tensor_points, write_manifest, write_trajectories, manifest_of, Scene, SceneConfig,
};
use equidiff_core::diffusion::GaussianNoise;
use equidiff_core::error::{Error, Result};
use equidiff_core::eval::{run_eval, trace_csv, EvalOptions, EvalVariant, HorizonReport, Scoring};
use equidiff_core::tensorcore::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::svg::scatter_svg;
use crate::train::{log_csv, train, LogRow, TrainOutcome};

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const TRAIN_MANIFEST: &str = "train_scenes.csv";
pub const TEST_MANIFEST: &str = "test_scenes.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    pub train: usize,
    pub test: usize,
}

/// Generates the synthetic corpus, splits it and writes the CSV files into
/// `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path, seed: u64) -> Result<CorpusSummary> {
    let corpus = synth_generate(&cfg.synth, &cfg.scenes, seed)?;
    let (train, test) = split(&corpus.scenes, cfg.data.train_frac, seed)?;
    std::fs::create_dir_all(out)?;
    write_trajectories(&out.join(TRAIN_CSV), &corpus.trajectories_of(&train))?;
    write_trajectories(&out.join(TEST_CSV), &corpus.trajectories_of(&test))?;
    write_manifest(&out.join(TRAIN_MANIFEST), &manifest_of(&train))?;
    write_manifest(&out.join(TEST_MANIFEST), &manifest_of(&test))?;
    Ok(CorpusSummary {
        train: train.len(),
        test: test.len(),
    })
}

/// Scenes of one split. Without a manifest every track is an ego.
pub fn load_split(dir: &Path, csv: &str, manifest: &str, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    let trajs = load_trajectories(&dir.join(csv))?;
    let manifest_path = dir.join(manifest);
    let egos = if manifest_path.exists() {
        Some(load_manifest(&manifest_path)?)
    } else {
        None
    };
    Ok(build_scenes(&align_and_downsample(&trajs, cfg.downsample), cfg, egos.as_deref()))
}

pub fn load_corpus(dir: &Path, cfg: &SceneConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    Ok((
        load_split(dir, TRAIN_CSV, TRAIN_MANIFEST, cfg)?,
        load_split(dir, TEST_CSV, TEST_MANIFEST, cfg)?,
    ))
}

/// Loss log path next to a checkpoint: `model.ckpt` → `model.loss.csv`.
pub fn loss_log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, on_log: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    let scenes = load_split(data, TRAIN_CSV, TRAIN_MANIFEST, &cfg.scenes)?;
    let outcome = train(cfg, &scenes, on_log)?;
    outcome.checkpoint.save(out)?;
    std::fs::write(loss_log_path(out), log_csv(&outcome.log))?;
    Ok(outcome)
}

/// Inference scene for `ego` (default: the smallest vehicle id) from a
/// trajectory CSV holding the observed history.
pub fn load_scene(path: &Path, ego: Option<u64>, cfg: &SceneConfig) -> Result<Scene> {
    let trajs = align_and_downsample(&load_trajectories(path)?, cfg.downsample);
    let ego = match ego {
        Some(e) => e,
        None => trajs
            .iter()
            .map(|t| t.vehicle_id)
            .min()
            .ok_or_else(|| Error::Input(format!("{}: no trajectories", path.display())))?,
    };
    scene_from_history(&trajs, ego, cfg)
}

fn model_of(ckpt: &Checkpoint) -> Result<Model> {
    Model::new(ckpt.config.model.clone())
}

/// Draws `n` futures (offsets, `[n, T_pre, 2]`) with the EMA weights,
/// optionally recording the states at `record`.
pub fn sample_scene(
    ckpt: &Checkpoint,
    scene: &Scene,
    n: usize,
    seed: u64,
    record: &[usize],
    trace: &mut Vec<(usize, Tensor)>,
) -> Result<Tensor> {
    let model = model_of(ckpt)?;
    let s = ckpt.config.diffusion.schedule()?;
    model.sample(&ckpt.ema, &[scene], n, &s, &mut GaussianNoise::new(seed), record, trace)
}

/// CSV rows `sample_id,t,dx,dy,x,y`: per-frame offsets and world positions.
pub fn samples_csv(offsets: &Tensor, origin: [f64; 2]) -> Result<String> {
    let (n, t_pre) = (offsets.shape()[0], offsets.shape()[1]);
    let mut out = String::from("sample_id,t,dx,dy,x,y\n");
    let per = t_pre * 2;
    for s in 0..n {
        let row = Tensor::new(vec![t_pre, 2], offsets.data()[s * per..(s + 1) * per].to_vec())?;
        let mut pos = origin;
        for (t, d) in tensor_points(&row)?.into_iter().enumerate() {
            pos = [pos[0] + d[0], pos[1] + d[1]];
            writeln!(out, "{s},{},{},{},{},{}", t + 1, d[0], d[1], pos[0], pos[1]).unwrap();
        }
    }
    Ok(out)
}

pub fn sample_cmd(ckpt: &Path, scene: &Path, ego: Option<u64>, n: usize, seed: u64, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let scene = load_scene(scene, ego, &ckpt.config.scenes)?;
    let offsets = sample_scene(&ckpt, &scene, n, seed, &[], &mut Vec::new())?;
    std::fs::write(out, samples_csv(&offsets, scene.origin)?)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub variant: EvalVariant,
    pub samples_per_scene: usize,
    pub seed: u64,
    pub best_of: bool,
}

/// Scores the test split. `cv` needs no checkpoint; scenes are then built
/// with the default scene settings.
/// An evaluation report together with the configuration it was produced
/// under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(flatten)]
    pub report: HorizonReport,
    pub config: RunConfig,
}

impl EvalRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Input(format!("report json: {e}")))
    }

    /// The report's `key=value` lines plus a digest of the configuration.
    pub fn to_kv(&self) -> String {
        let digest = Sha256::digest(self.config.to_json().as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        format!("{}config_sha256={hex}\n", self.report.to_kv())
    }
}

/// Scores `args.variant` on the test split. The CV baseline needs no
/// checkpoint and runs under the default configuration.
pub fn eval_cmd(ckpt: Option<&Path>, data: &Path, args: &EvalArgs) -> Result<EvalRecord> {
    let ckpt = match (args.variant, ckpt) {
        (EvalVariant::Cv, _) => None,
        (_, Some(path)) => Some(Checkpoint::load(path)?),
        (v, None) => return Err(Error::Input(format!("variant {} needs --ckpt", v.as_str()))),
    };
    let config = ckpt.as_ref().map(|c| c.config.clone()).unwrap_or_default();
    let test = load_split(data, TEST_CSV, TEST_MANIFEST, &config.scenes)?;
    let refs: Vec<&Scene> = test.iter().collect();
    let opts = EvalOptions {
        samples_per_scene: args.samples_per_scene,
        seed: args.seed,
        scoring: if args.best_of { Scoring::BestOf } else { Scoring::Mean },
        noise_rotation: None,
    };
    let s = config.diffusion.schedule()?;
    let report = match &ckpt {
        Some(c) => run_eval(args.variant, Some((&model_of(c)?, &c.ema)), &refs, &s, &opts)?,
        None => run_eval(args.variant, None, &refs, &s, &opts)?,
    };
    Ok(EvalRecord { report, config })
}

#[derive(Clone, Debug)]
pub struct TraceArgs {
    pub ego: Option<u64>,
    pub steps: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    pub svg_dir: Option<PathBuf>,
}

pub fn trace_cmd(ckpt: &Path, scene: &Path, args: &TraceArgs, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let k = ckpt.config.diffusion.steps;
    if let Some(bad) = args.steps.iter().find(|&&s| s > k) {
        return Err(Error::Input(format!("trace step {bad} exceeds K = {k}")));
    }
    let scene = load_scene(scene, args.ego, &ckpt.config.scenes)?;
    let mut trace = Vec::new();
    sample_scene(&ckpt, &scene, args.samples, args.seed, &args.steps, &mut trace)?;
    std::fs::write(out, trace_csv(&trace, &args.steps)?)?;
    if let Some(dir) = &args.svg_dir {
        std::fs::create_dir_all(dir)?;
        for &step in &args.steps {
            let (_, y) = trace.iter().find(|(kk, _)| *kk == step).expect("recorded");
            std::fs::write(dir.join(format!("trace_k{step}.svg")), scatter_svg(y, &format!("k = {step}")))?;
        }
    }
    Ok(())
}
