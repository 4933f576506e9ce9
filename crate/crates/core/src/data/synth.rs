use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use super::{align_and_downsample, build_scenes, Maneuver, Point, Scene, SceneConfig, TrackPoint, Trajectory};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Vehicle ids of scene `s` are `s * SYNTH_ID_STRIDE + j`, ego first. Scene
/// `s` also occupies raw frames from `s * SYNTH_ID_STRIDE` on.
pub const SYNTH_ID_STRIDE: u64 = 100;

/// Raw sampling interval, seconds.
pub const RAW_DT: f64 = 0.1;

const LANE_WIDTH: f64 = 3.7;
const LANE_CHANGE_SECS: f64 = 4.0;
const MAX_NEIGHBORS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scenes_per_class: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Magnitude of the yaw rate of turning egos, rad/s. The sign is random.
    pub turn_rate: f64,
    pub noise_sigma: f64,
    pub neighbors_mean: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes_per_class: 200,
            speed_min: 10.0,
            speed_max: 20.0,
            turn_rate: 0.1,
            noise_sigma: 0.05,
            neighbors_mean: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.speed_min, self.speed_max, self.turn_rate, self.noise_sigma, self.neighbors_mean]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("synthetic settings must be finite".into()));
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return Err(Error::Config(format!(
                "speed range [{}, {}] is invalid",
                self.speed_min, self.speed_max
            )));
        }
        if self.turn_rate < 0.0 || self.noise_sigma < 0.0 || self.neighbors_mean < 0.0 {
            return Err(Error::Config("turn_rate, noise_sigma and neighbors_mean must be >= 0".into()));
        }
        if self.scenes_per_class == 0 {
            return Err(Error::Config("empty corpus: scenes_per_class is 0".into()));
        }
        Ok(())
    }
}

/// Raw 10 Hz tracks, the ego manifest and the scenes built from them.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub trajectories: Vec<Trajectory>,
    pub manifest: Vec<(u64, Maneuver)>,
    pub scenes: Vec<Scene>,
}

impl SynthCorpus {
    /// Raw tracks of every vehicle that belongs to one of `scenes`.
    pub fn trajectories_of(&self, scenes: &[Scene]) -> Vec<Trajectory> {
        let groups: std::collections::BTreeSet<u64> =
            scenes.iter().map(|s| s.ego_id / SYNTH_ID_STRIDE).collect();
        self.trajectories
            .iter()
            .filter(|t| groups.contains(&(t.vehicle_id / SYNTH_ID_STRIDE)))
            .cloned()
            .collect()
    }
}

pub fn manifest_of(scenes: &[Scene]) -> Vec<(u64, Maneuver)> {
    scenes.iter().map(|s| (s.ego_id, s.maneuver)).collect()
}

struct Frame2 {
    e: Point,
    n: Point,
}

impl Frame2 {
    fn at(&self, anchor: Point, lon: f64, lat: f64) -> Point {
        [
            anchor[0] + lon * self.e[0] + lat * self.n[0],
            anchor[1] + lon * self.e[1] + lat * self.n[1],
        ]
    }
}

/// Generates `scenes_per_class` scenes of each class in
/// [`Maneuver::SYNTHETIC`]. Each scene is drawn from its own random stream,
/// so the corpus is a pure function of `(cfg, scenes, seed)`.
pub fn synth_generate(cfg: &SynthConfig, scene_cfg: &SceneConfig, seed: u64) -> Result<SynthCorpus> {
    cfg.validate()?;
    scene_cfg.validate()?;
    let raw_len = scene_cfg.window() * scene_cfg.downsample;
    if raw_len as u64 > SYNTH_ID_STRIDE {
        return Err(Error::Config(format!("window of {raw_len} raw frames does not fit a synthetic scene")));
    }
    let t_h = ((scene_cfg.t_his - 1) * scene_cfg.downsample) as f64 * RAW_DT;

    let mut trajectories = Vec::new();
    let mut manifest = Vec::new();
    let mut s = 0u64;
    for class in Maneuver::SYNTHETIC {
        for _ in 0..cfg.scenes_per_class {
            let mut rng = SeededRng::stream(seed, s);
            let tracks = scene_tracks(cfg, class, raw_len, t_h, &mut rng);
            let base = s * SYNTH_ID_STRIDE;
            for (j, mut pts) in tracks.into_iter().enumerate() {
                for p in &mut pts {
                    p[0] += cfg.noise_sigma * rng.normal();
                    p[1] += cfg.noise_sigma * rng.normal();
                }
                trajectories.push(Trajectory {
                    vehicle_id: base + j as u64,
                    segment: 0,
                    points: pts
                        .into_iter()
                        .enumerate()
                        .map(|(i, pos)| TrackPoint {
                            frame: base + i as u64,
                            pos,
                        })
                        .collect(),
                });
            }
            manifest.push((base, class));
            s += 1;
        }
    }

    let scenes = build_scenes(
        &align_and_downsample(&trajectories, scene_cfg.downsample),
        scene_cfg,
        Some(&manifest),
    );
    if scenes.len() != manifest.len() {
        return Err(Error::Input(format!(
            "built {} scenes from {} synthetic egos",
            scenes.len(),
            manifest.len()
        )));
    }
    Ok(SynthCorpus {
        trajectories,
        manifest,
        scenes,
    })
}

/// Noise-free positions of the ego (first) and its neighbors.
fn scene_tracks(cfg: &SynthConfig, class: Maneuver, len: usize, t_h: f64, rng: &mut SeededRng) -> Vec<Vec<Point>> {
    let p0 = [rng.uniform(-200.0, 200.0), rng.uniform(-200.0, 200.0)];
    let psi0 = rng.uniform(0.0, TAU);
    let v = rng.uniform(cfg.speed_min, cfg.speed_max);
    let (sn, cs) = psi0.sin_cos();
    let fr = Frame2 { e: [cs, sn], n: [-sn, cs] };
    let times: Vec<f64> = (0..len).map(|i| i as f64 * RAW_DT).collect();

    let mut leader = None;
    let ego: Vec<Point> = match class {
        Maneuver::ConstantTurn => {
            let omega = if rng.coin() { cfg.turn_rate } else { -cfg.turn_rate };
            times.iter().map(|&t| turn_position(p0, psi0, v, omega, t)).collect()
        }
        Maneuver::LaneChange => {
            let dir = if rng.coin() { 1.0 } else { -1.0 };
            let t0 = rng.uniform(1.0, t_h - 0.4);
            times
                .iter()
                .map(|&t| {
                    let u = ((t - t0) / LANE_CHANGE_SECS).clamp(0.0, 1.0);
                    let lat = dir * LANE_WIDTH * 0.5 * (1.0 - (PI * u).cos());
                    fr.at(p0, v * t, lat)
                })
                .collect()
        }
        Maneuver::Yield => {
            let v_lead = v * rng.uniform(0.4, 0.6);
            let gap = rng.uniform(25.0, 40.0);
            let final_gap = rng.uniform(8.0, 12.0);
            let decel = (v - v_lead).powi(2) / (2.0 * (gap - final_gap));
            let t_stop = (v - v_lead) / decel;
            leader = Some((gap, v_lead));
            times
                .iter()
                .map(|&t| {
                    let tau = (t - t_h).max(0.0);
                    let s = if tau <= t_stop {
                        v * (t.min(t_h) + tau) - 0.5 * decel * tau * tau
                    } else {
                        v * (t_h + t_stop) - 0.5 * decel * t_stop * t_stop + v_lead * (tau - t_stop)
                    };
                    fr.at(p0, s, 0.0)
                })
                .collect()
        }
        _ => times.iter().map(|&t| fr.at(p0, v * t, 0.0)).collect(),
    };

    let anchor = ego[((t_h / RAW_DT).round() as usize).min(len - 1)];
    let mut tracks = vec![ego];
    if let Some((gap, v_lead)) = leader {
        tracks.push(times.iter().map(|&t| fr.at(anchor, gap + v_lead * (t - t_h), 0.0)).collect());
    }
    let count = rng.poisson(cfg.neighbors_mean).min(MAX_NEIGHBORS + 1 - tracks.len());
    for _ in 0..count {
        let lane = [-2.0, -1.0, 1.0, 2.0][rng.below(4)];
        let d = rng.uniform(-40.0, 40.0);
        let vn = v + rng.uniform(-1.0, 1.0);
        tracks.push(
            times
                .iter()
                .map(|&t| fr.at(anchor, d + vn * (t - t_h), lane * LANE_WIDTH))
                .collect(),
        );
    }
    tracks
}

/// Position on a circle of radius `v/omega` entered at heading `psi0`.
pub(crate) fn turn_position(p0: Point, psi0: f64, v: f64, omega: f64, t: f64) -> Point {
    if omega == 0.0 {
        let (s, c) = psi0.sin_cos();
        return [p0[0] + v * t * c, p0[1] + v * t * s];
    }
    let r = v / omega;
    let psi = psi0 + omega * t;
    [p0[0] + r * (psi.sin() - psi0.sin()), p0[1] + r * (psi0.cos() - psi.cos())]
}
