use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{sub, Maneuver, Neighbor, Point, Scene, Trajectory};
use crate::context::NeighborGraph;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Windowing parameters. `downsample` is also the frame spacing of the
/// trajectories handed to [`build_scenes`], since downsampling keeps the
/// original frame indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub radius: f64,
    pub t_his: usize,
    pub t_pre: usize,
    pub stride: usize,
    pub downsample: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            radius: 50.0,
            t_his: 15,
            t_pre: 25,
            stride: 5,
            downsample: 2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.t_his < 2 || self.t_pre < 1 || self.stride < 1 || self.downsample < 1 {
            return Err(Error::Config(format!("invalid scene settings: {self:?}")));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.t_his + self.t_pre
    }
}

/// Keeps every `factor`-th point starting at the first.
pub fn downsample(traj: &Trajectory, factor: usize) -> Trajectory {
    let factor = factor.max(1);
    Trajectory {
        points: traj.points.iter().step_by(factor).copied().collect(),
        ..traj.clone()
    }
}

/// Downsamples a whole corpus on a shared frame grid: each track first drops
/// leading points until its frame index is a multiple of `factor`, so that
/// every vehicle keeps the same set of frames.
pub fn align_and_downsample(trajs: &[Trajectory], factor: usize) -> Vec<Trajectory> {
    let factor = factor.max(1) as u64;
    trajs
        .iter()
        .map(|t| {
            let skip = t
                .points
                .iter()
                .position(|p| p.frame % factor == 0)
                .unwrap_or(t.points.len());
            let trimmed = Trajectory {
                points: t.points[skip..].to_vec(),
                ..t.clone()
            };
            downsample(&trimmed, factor as usize)
        })
        .filter(|t| !t.is_empty())
        .collect()
}

struct FrameIndex<'a> {
    trajs: &'a [Trajectory],
    at: HashMap<u64, Vec<(usize, usize)>>,
}

impl<'a> FrameIndex<'a> {
    fn new(trajs: &'a [Trajectory]) -> Self {
        let mut at: HashMap<u64, Vec<(usize, usize)>> = HashMap::new();
        for (ti, t) in trajs.iter().enumerate() {
            for (pi, p) in t.points.iter().enumerate() {
                at.entry(p.frame).or_default().push((ti, pi));
            }
        }
        Self { trajs, at }
    }

    /// Full-history window ending at point `pi` of track `ti`, if available.
    fn history(&self, ti: usize, pi: usize, cfg: &SceneConfig) -> Option<&'a [super::TrackPoint]> {
        let t = &self.trajs[ti];
        let first = pi.checked_sub(cfg.t_his - 1)?;
        let span = (cfg.t_his as u64 - 1) * cfg.downsample as u64;
        (t.points[pi].frame - t.points[first].frame == span).then(|| &t.points[first..=pi])
    }

    /// Builds the scene whose last history point is point `pi` of ego track `ti`.
    fn scene(&self, ti: usize, pi: usize, future_len: usize, maneuver: Maneuver, cfg: &SceneConfig) -> Option<Scene> {
        let ego = &self.trajs[ti];
        let hist = self.history(ti, pi, cfg)?;
        if pi + 1 + future_len > ego.len() {
            return None;
        }
        let future = &ego.points[pi + 1..pi + 1 + future_len];
        if future_len > 0 {
            let span = future_len as u64 * cfg.downsample as u64;
            if future[future_len - 1].frame - hist[cfg.t_his - 1].frame != span {
                return None;
            }
        }
        let last = hist[cfg.t_his - 1];
        let origin = last.pos;
        let shift = |ps: &[super::TrackPoint]| ps.iter().map(|p| sub(p.pos, origin)).collect::<Vec<Point>>();

        let mut found: Vec<(u64, u32, Vec<Point>)> = Vec::new();
        for &(nj, npi) in self.at.get(&last.frame).map(Vec::as_slice).unwrap_or(&[]) {
            let n = &self.trajs[nj];
            if nj == ti || n.vehicle_id == ego.vehicle_id {
                continue;
            }
            if super::norm(sub(n.points[npi].pos, origin)) > cfg.radius {
                continue;
            }
            if let Some(h) = self.history(nj, npi, cfg) {
                found.push((n.vehicle_id, n.segment, shift(h)));
            }
        }
        found.sort_by_key(|(id, seg, _)| (*id, *seg));
        let neighbors: Vec<Neighbor> = found
            .into_iter()
            .map(|(id, _, history)| Neighbor { id, history })
            .collect();

        let mut ids = vec![ego.vehicle_id];
        let mut last_pos = vec![[0.0, 0.0]];
        for n in &neighbors {
            ids.push(n.id);
            last_pos.push(n.history[cfg.t_his - 1]);
        }
        let graph = NeighborGraph::from_positions(&ids, &last_pos, cfg.radius).ok()?;
        Some(Scene {
            ego_id: ego.vehicle_id,
            start_frame: hist[0].frame,
            history: shift(hist),
            future: shift(future),
            neighbors,
            graph,
            origin,
            maneuver,
        })
    }
}

/// Sliding windows of `t_his + t_pre` frames for every ego track, or only for
/// the listed egos when `egos` is given. Neighbors are the vehicles within
/// `radius` of the ego at the last history frame that have a full history.
/// Output is ordered by (vehicle id, window start).
pub fn build_scenes(trajs: &[Trajectory], cfg: &SceneConfig, egos: Option<&[(u64, Maneuver)]>) -> Vec<Scene> {
    let wanted: Option<BTreeMap<u64, Maneuver>> = egos.map(|e| e.iter().copied().collect());
    let index = FrameIndex::new(trajs);
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    order.sort_by_key(|&i| (trajs[i].vehicle_id, trajs[i].segment));

    let mut scenes = Vec::new();
    for ti in order {
        let t = &trajs[ti];
        let maneuver = match &wanted {
            Some(w) => match w.get(&t.vehicle_id) {
                Some(&m) => m,
                None => continue,
            },
            None => Maneuver::Unknown,
        };
        let mut start = 0;
        while start + cfg.window() <= t.len() {
            let pi = start + cfg.t_his - 1;
            if let Some(s) = index.scene(ti, pi, cfg.t_pre, maneuver, cfg) {
                scenes.push(s);
            }
            start += cfg.stride;
        }
    }
    scenes
}

/// Inference scene from the last `t_his` points of `ego`'s final track;
/// the future is left empty.
pub fn scene_from_history(trajs: &[Trajectory], ego: u64, cfg: &SceneConfig) -> Result<Scene> {
    let ti = trajs
        .iter()
        .enumerate()
        .filter(|(_, t)| t.vehicle_id == ego)
        .max_by_key(|(_, t)| t.segment)
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Input(format!("vehicle {ego} not found")))?;
    let len = trajs[ti].len();
    if len < cfg.t_his {
        return Err(Error::Input(format!(
            "vehicle {ego} has {len} frames, need {} of history",
            cfg.t_his
        )));
    }
    FrameIndex::new(trajs)
        .scene(ti, len - 1, 0, Maneuver::Unknown, cfg)
        .ok_or_else(|| Error::Input(format!("vehicle {ego}: history frames are not evenly spaced")))
}

/// Stratified shuffled split. The train count is `round(n · frac)`, shared
/// out across maneuver classes by largest remainder.
pub fn split(scenes: &[Scene], train_frac: f64, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Input(format!("train fraction {train_frac} not in (0, 1)")));
    }
    let mut groups: BTreeMap<Maneuver, Vec<usize>> = BTreeMap::new();
    for (i, s) in scenes.iter().enumerate() {
        groups.entry(s.maneuver).or_default().push(i);
    }
    let total = (scenes.len() as f64 * train_frac).round() as usize;
    let mut quota: Vec<(Maneuver, usize, f64)> = groups
        .iter()
        .map(|(&m, idx)| {
            let exact = idx.len() as f64 * train_frac;
            (m, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut remaining = total - quota.iter().map(|q| q.1).sum::<usize>();
    let mut by_rem: Vec<usize> = (0..quota.len()).collect();
    by_rem.sort_by(|&a, &b| quota[b].2.total_cmp(&quota[a].2).then(a.cmp(&b)));
    for i in by_rem {
        if remaining == 0 {
            break;
        }
        quota[i].1 += 1;
        remaining -= 1;
    }

    let mut rng = SeededRng::new(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (m, take, _) in quota {
        let mut idx = groups[&m].clone();
        rng.shuffle(&mut idx);
        train_idx.extend_from_slice(&idx[..take]);
        test_idx.extend_from_slice(&idx[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| scenes[i].clone()).collect();
    Ok((pick(&train_idx), pick(&test_idx)))
}
