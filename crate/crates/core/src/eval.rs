//! Horizon RMSE, the constant-velocity baseline, model evaluation and
//! sampling-trace export.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, Variant};
use crate::data::{from_offsets, tensor_points, Point, Scene};
use crate::diffusion::{DiffusionSchedule, GaussianNoise, NoiseSource, RotatedNoise};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::SeededRng;
use crate::tensorcore::Tensor;
use crate::vn::RotationMatrix;

/// Future frames scored by [`rmse_horizons`]: 1 s to 5 s at 5 Hz.
pub const HORIZON_FRAMES: [usize; 5] = [5, 10, 15, 20, 25];
pub const FRAME_RATE_HZ: f64 = 5.0;
/// Number of history frames averaged by the CV baseline.
pub const CV_WINDOW: usize = 5;
/// Scenes sampled together in one reverse-diffusion batch.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub variant: String,
    /// Horizon in seconds per entry of `rmse`.
    pub horizons_s: Vec<f64>,
    /// Meters.
    pub rmse: Vec<f64>,
    pub scenes: usize,
    pub samples_per_scene: usize,
    pub seed: u64,
}

impl HorizonReport {
    /// RMSE at the horizon closest to `seconds`.
    pub fn at(&self, seconds: f64) -> Option<f64> {
        self.horizons_s
            .iter()
            .position(|h| (h - seconds).abs() < 1e-9)
            .map(|i| self.rmse[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Input(format!("report json: {e}")))
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "variant={}", self.variant).unwrap();
        for (h, r) in self.horizons_s.iter().zip(&self.rmse) {
            writeln!(out, "rmse_{h}s={r}").unwrap();
        }
        writeln!(out, "scenes={}", self.scenes).unwrap();
        writeln!(out, "samples_per_scene={}", self.samples_per_scene).unwrap();
        writeln!(out, "seed={}", self.seed).unwrap();
        out
    }
}

/// `sqrt(mean over scenes of ||p̂_t − p_t||²)` at each horizon frame that
/// fits in the prediction window. Inputs are `[scenes, T_pre, 2]` positions.
pub fn rmse_horizons(preds: &Tensor, truths: &Tensor) -> Result<HorizonReport> {
    if preds.shape() != truths.shape() || preds.rank() != 3 || preds.shape()[2] != 2 {
        return Err(Error::Shape {
            op: "rmse_horizons",
            lhs: preds.shape().to_vec(),
            rhs: truths.shape().to_vec(),
        });
    }
    let (n, t_pre) = (preds.shape()[0], preds.shape()[1]);
    if n == 0 {
        return Err(Error::Input("no scenes to score".into()));
    }
    let mut horizons_s = Vec::new();
    let mut rmse = Vec::new();
    for &f in HORIZON_FRAMES.iter().filter(|&&f| f <= t_pre) {
        let mut sum = 0.0;
        for s in 0..n {
            let i = (s * t_pre + f - 1) * 2;
            let dx = preds.data()[i] - truths.data()[i];
            let dy = preds.data()[i + 1] - truths.data()[i + 1];
            sum += dx * dx + dy * dy;
        }
        horizons_s.push(f as f64 / FRAME_RATE_HZ);
        rmse.push((sum / n as f64).sqrt());
    }
    Ok(HorizonReport {
        variant: String::new(),
        horizons_s,
        rmse,
        scenes: n,
        samples_per_scene: 1,
        seed: 0,
    })
}

/// Extrapolates the mean velocity over the last (up to) five history frames.
pub fn cv_baseline(history: &[Point], t_pre: usize) -> Result<Vec<Point>> {
    let n = history.len();
    if n < 2 {
        return Err(Error::Input(format!("constant-velocity baseline needs 2 history points, got {n}")));
    }
    let m = (CV_WINDOW - 1).min(n - 1);
    let mut v = [0.0, 0.0];
    for w in history[n - m - 1..].windows(2) {
        v[0] += w[1][0] - w[0][0];
        v[1] += w[1][1] - w[0][1];
    }
    let v = [v[0] / m as f64, v[1] / m as f64];
    let last = history[n - 1];
    Ok((1..=t_pre)
        .map(|h| [last[0] + h as f64 * v[0], last[1] + h as f64 * v[1]])
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalVariant {
    Full,
    NoEquivariance,
    NoContext,
    Cv,
}

impl EvalVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalVariant::Full => "full",
            EvalVariant::NoEquivariance => "no_equivariance",
            EvalVariant::NoContext => "no_context",
            EvalVariant::Cv => "cv",
        }
    }

    pub fn model_variant(self) -> Option<Variant> {
        match self {
            EvalVariant::Full => Some(Variant::Full),
            EvalVariant::NoEquivariance => Some(Variant::NoEquivariance),
            EvalVariant::NoContext => Some(Variant::NoContext),
            EvalVariant::Cv => None,
        }
    }
}

impl FromStr for EvalVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cv" {
            return Ok(EvalVariant::Cv);
        }
        Ok(match s.parse::<Variant>()? {
            Variant::Full => EvalVariant::Full,
            Variant::NoEquivariance => EvalVariant::NoEquivariance,
            Variant::NoContext => EvalVariant::NoContext,
        })
    }
}

/// How the `N` samples drawn for a scene are turned into one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scoring {
    /// Mean of the samples.
    #[default]
    Mean,
    /// Sample with the smallest mean displacement from the truth.
    BestOf,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub samples_per_scene: usize,
    pub seed: u64,
    pub scoring: Scoring,
    /// Rotation applied to every sampler noise draw.
    pub noise_rotation: Option<RotationMatrix>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples_per_scene: 1,
            seed: 0,
            scoring: Scoring::Mean,
            noise_rotation: None,
        }
    }
}

/// Ground-truth future positions, `[scenes, T_pre, 2]`.
pub fn truth_positions(scenes: &[&Scene]) -> Result<Tensor> {
    let mut data = Vec::new();
    let t_pre = scenes.first().map_or(0, |s| s.future.len());
    for s in scenes {
        if s.future.len() != t_pre || t_pre == 0 {
            return Err(Error::Input(format!("scene of vehicle {} has no usable future", s.ego_id)));
        }
        data.extend(s.future.iter().flatten());
    }
    Tensor::new(vec![scenes.len(), t_pre, 2], data)
}

/// CV predictions for every scene, `[scenes, T_pre, 2]`.
pub fn cv_predictions(scenes: &[&Scene], t_pre: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(scenes.len() * t_pre * 2);
    for s in scenes {
        data.extend(cv_baseline(&s.history, t_pre)?.iter().flatten());
    }
    Tensor::new(vec![scenes.len(), t_pre, 2], data)
}

/// Samples `N` futures per scene and reduces them to one position sequence
/// each. Chunk `i` draws its noise from stream `i` of the seed, so results
/// do not depend on anything but the inputs.
pub fn model_predictions(
    model: &Model,
    params: &Params,
    scenes: &[&Scene],
    s: &DiffusionSchedule,
    opts: &EvalOptions,
) -> Result<Tensor> {
    let n = opts.samples_per_scene;
    if n == 0 {
        return Err(Error::Input("samples per scene must be at least 1".into()));
    }
    let t_pre = model.config.t_pre;
    let mut data = Vec::with_capacity(scenes.len() * t_pre * 2);
    for (ci, chunk) in scenes.chunks(EVAL_CHUNK).enumerate() {
        let base = GaussianNoise(SeededRng::stream(opts.seed, ci as u64));
        let mut noise: Box<dyn NoiseSource> = match opts.noise_rotation {
            Some(rotation) => Box::new(RotatedNoise { inner: base, rotation }),
            None => Box::new(base),
        };
        let offsets = model.sample(params, chunk, n, s, noise.as_mut(), &[], &mut Vec::new())?;
        let per = t_pre * 2;
        for (si, scene) in chunk.iter().enumerate() {
            let samples: Vec<Vec<Point>> = (0..n)
                .map(|j| {
                    let row = si * n + j;
                    let t = Tensor::new(vec![t_pre, 2], offsets.data()[row * per..(row + 1) * per].to_vec())?;
                    Ok(from_offsets(&tensor_points(&t)?, [0.0, 0.0]))
                })
                .collect::<Result<_>>()?;
            let pick = match opts.scoring {
                Scoring::Mean => mean_sequence(&samples),
                Scoring::BestOf => best_sequence(samples, &scene.future),
            };
            data.extend(pick.iter().flatten());
        }
    }
    Tensor::new(vec![scenes.len(), t_pre, 2], data)
}

fn mean_sequence(samples: &[Vec<Point>]) -> Vec<Point> {
    let n = samples.len() as f64;
    (0..samples[0].len())
        .map(|t| {
            let (mut x, mut y) = (0.0, 0.0);
            for s in samples {
                x += s[t][0];
                y += s[t][1];
            }
            [x / n, y / n]
        })
        .collect()
}

fn best_sequence(samples: Vec<Vec<Point>>, truth: &[Point]) -> Vec<Point> {
    let ade = |s: &[Point]| -> f64 {
        s.iter()
            .zip(truth)
            .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
            .sum()
    };
    samples
        .into_iter()
        .min_by(|a, b| ade(a).total_cmp(&ade(b)))
        .expect("at least one sample")
}

/// Scores `variant` on `scenes`. Model variants need a model whose
/// configuration matches the variant; `cv` ignores the model.
pub fn run_eval(
    variant: EvalVariant,
    model: Option<(&Model, &Params)>,
    scenes: &[&Scene],
    s: &DiffusionSchedule,
    opts: &EvalOptions,
) -> Result<HorizonReport> {
    let truths = truth_positions(scenes)?;
    let t_pre = truths.shape()[1];
    let preds = match variant.model_variant() {
        None => cv_predictions(scenes, t_pre)?,
        Some(want) => {
            let (model, params) =
                model.ok_or_else(|| Error::Input(format!("variant {} needs a checkpoint", variant.as_str())))?;
            if model.config.variant != want {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained as `{}` but `{}` was requested",
                    model.config.variant.as_str(),
                    variant.as_str()
                )));
            }
            model_predictions(model, params, scenes, s, opts)?
        }
    };
    let mut report = rmse_horizons(&preds, &truths)?;
    report.variant = variant.as_str().to_string();
    if variant != EvalVariant::Cv {
        report.samples_per_scene = opts.samples_per_scene;
        report.seed = opts.seed;
    }
    Ok(report)
}

/// CSV rows `sample_id,k,t,x,y` for the recorded states whose step is in
/// `steps`, in the order of `steps`. `t` is the 1-based future frame and
/// `(x, y)` the per-frame offset.
pub fn trace_csv(trace: &[(usize, Tensor)], steps: &[usize]) -> Result<String> {
    let mut out = String::from("sample_id,k,t,x,y\n");
    for &k in steps {
        let (_, y) = trace
            .iter()
            .find(|(kk, _)| *kk == k)
            .ok_or_else(|| Error::Input(format!("step {k} was not recorded")))?;
        let (n, t_pre) = (y.shape()[0], y.shape()[1]);
        for s in 0..n {
            for t in 0..t_pre {
                let i = (s * t_pre + t) * 2;
                writeln!(out, "{s},{k},{},{},{}", t + 1, y.data()[i], y.data()[i + 1]).unwrap();
            }
        }
    }
    Ok(out)
}

pub fn export_trace(trace: &[(usize, Tensor)], steps: &[usize], path: &Path) -> Result<()> {
    std::fs::write(path, trace_csv(trace, steps)?)?;
    Ok(())
}
