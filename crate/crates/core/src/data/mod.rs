//! Trajectory ingestion, scene windowing and the synthetic corpus.
//!
//! Positions are meters in a fixed world frame. A [`Scene`] is expressed
//! relative to its ego's last observed position, so the history ends at the
//! origin and the future is described by per-frame offsets.

mod io;
mod scenes;
mod synth;

#[cfg(test)]
mod tests;

pub use io::{
    load_manifest, load_trajectories, parse_trajectories, write_manifest, write_trajectories,
    FEET_TO_METERS,
};
pub use scenes::{
    align_and_downsample, build_scenes, downsample, scene_from_history, split, SceneConfig,
};
pub use synth::{manifest_of, synth_generate, SynthConfig, SynthCorpus, RAW_DT, SYNTH_ID_STRIDE};

use std::fmt;
use std::str::FromStr;

use crate::context::NeighborGraph;
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;
use crate::vn::RotationMatrix;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub frame: u64,
    pub pos: Point,
}

/// One contiguous track of a vehicle. A vehicle whose frames have gaps is
/// split into several segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub vehicle_id: u64,
    pub segment: u32,
    pub points: Vec<TrackPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Point> {
        self.points.iter().map(|p| p.pos).collect()
    }

    pub fn rotate(&self, r: &RotationMatrix) -> Self {
        let mut out = self.clone();
        for p in &mut out.points {
            p.pos = r.apply(p.pos);
        }
        out
    }
}

/// Behavior label attached to synthetic scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Maneuver {
    ConstantVelocity,
    ConstantTurn,
    LaneChange,
    /// Ego slows behind a slower leader in its lane.
    Yield,
    Unknown,
}

impl Maneuver {
    pub const SYNTHETIC: [Maneuver; 4] = [
        Maneuver::ConstantVelocity,
        Maneuver::ConstantTurn,
        Maneuver::LaneChange,
        Maneuver::Yield,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Maneuver::ConstantVelocity => "cv",
            Maneuver::ConstantTurn => "turn",
            Maneuver::LaneChange => "lane_change",
            Maneuver::Yield => "yield",
            Maneuver::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Maneuver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Maneuver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cv" => Ok(Maneuver::ConstantVelocity),
            "turn" => Ok(Maneuver::ConstantTurn),
            "lane_change" => Ok(Maneuver::LaneChange),
            "yield" => Ok(Maneuver::Yield),
            "unknown" => Ok(Maneuver::Unknown),
            other => Err(Error::Input(format!("unknown maneuver `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub history: Vec<Point>,
}

/// One prediction window: ego history and future plus neighbor histories,
/// translated so the ego's last observed position is the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub ego_id: u64,
    /// Frame index of the first history point.
    pub start_frame: u64,
    pub history: Vec<Point>,
    /// Empty for inference-only scenes.
    pub future: Vec<Point>,
    pub neighbors: Vec<Neighbor>,
    pub graph: NeighborGraph,
    /// Ego's last observed position in world coordinates.
    pub origin: Point,
    pub maneuver: Maneuver,
}

impl Scene {
    /// Per-frame offsets of the future, anchored at the origin.
    pub fn future_offsets(&self) -> Vec<Point> {
        to_offsets(&self.future, [0.0, 0.0])
    }

    /// The `T_his − 1` per-frame offsets of the ego history.
    pub fn history_offsets(&self) -> Vec<Point> {
        self.history.windows(2).map(|w| sub(w[1], w[0])).collect()
    }

    pub fn future_tensor(&self) -> Tensor {
        points_tensor(&self.future_offsets())
    }

    pub fn history_tensor(&self) -> Tensor {
        points_tensor(&self.history_offsets())
    }

    /// Ego history first, then neighbors in graph order.
    pub fn vehicle_histories(&self) -> Vec<&[Point]> {
        std::iter::once(self.history.as_slice())
            .chain(self.neighbors.iter().map(|n| n.history.as_slice()))
            .collect()
    }

    /// Rotates every position about the world origin. The graph is unchanged
    /// because distances are preserved.
    pub fn rotate(&self, r: &RotationMatrix) -> Self {
        let rot = |ps: &[Point]| ps.iter().map(|&p| r.apply(p)).collect::<Vec<_>>();
        Scene {
            history: rot(&self.history),
            future: rot(&self.future),
            neighbors: self
                .neighbors
                .iter()
                .map(|n| Neighbor {
                    id: n.id,
                    history: rot(&n.history),
                })
                .collect(),
            origin: r.apply(self.origin),
            ..self.clone()
        }
    }

    /// Checks window lengths, the anchor and the radius rule.
    pub fn validate(&self, cfg: &SceneConfig) -> Result<()> {
        if self.history.len() != cfg.t_his {
            return Err(Error::Input(format!(
                "scene {}: history has {} frames, expected {}",
                self.ego_id,
                self.history.len(),
                cfg.t_his
            )));
        }
        if !self.future.is_empty() && self.future.len() != cfg.t_pre {
            return Err(Error::Input(format!(
                "scene {}: future has {} frames, expected {}",
                self.ego_id,
                self.future.len(),
                cfg.t_pre
            )));
        }
        if self.history.last() != Some(&[0.0, 0.0]) {
            return Err(Error::Input(format!("scene {}: history does not end at the origin", self.ego_id)));
        }
        for n in &self.neighbors {
            if n.history.len() != cfg.t_his {
                return Err(Error::Input(format!("scene {}: neighbor {} history length", self.ego_id, n.id)));
            }
            let last = n.history[cfg.t_his - 1];
            if norm(last) > cfg.radius {
                return Err(Error::Input(format!(
                    "scene {}: neighbor {} is outside the radius",
                    self.ego_id, n.id
                )));
            }
        }
        if self.graph.node_count() != self.neighbors.len() + 1 {
            return Err(Error::Input(format!("scene {}: graph size mismatch", self.ego_id)));
        }
        Ok(())
    }
}

pub fn to_offsets(positions: &[Point], anchor: Point) -> Vec<Point> {
    let mut prev = anchor;
    positions
        .iter()
        .map(|&p| {
            let d = sub(p, prev);
            prev = p;
            d
        })
        .collect()
}

pub fn from_offsets(offsets: &[Point], anchor: Point) -> Vec<Point> {
    let mut cur = anchor;
    offsets
        .iter()
        .map(|&d| {
            cur = [cur[0] + d[0], cur[1] + d[1]];
            cur
        })
        .collect()
}

/// `[n, 2]` tensor of points.
pub fn points_tensor(points: &[Point]) -> Tensor {
    let data = points.iter().flat_map(|p| [p[0], p[1]]).collect();
    Tensor::new(vec![points.len(), 2], data).expect("two coordinates per point")
}

/// Inverse of [`points_tensor`].
pub fn tensor_points(t: &Tensor) -> Result<Vec<Point>> {
    if t.rank() != 2 || t.shape()[1] != 2 {
        return Err(Error::Input(format!("expected an [n, 2] tensor, got {:?}", t.shape())));
    }
    Ok(t.data().chunks(2).map(|c| [c[0], c[1]]).collect())
}

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

/// Random smooth scene with `neighbors` vehicles inside the radius, for
/// property checks that need generic inputs.
pub fn random_scene(rng: &mut crate::rng::SeededRng, neighbors: usize, cfg: &SceneConfig) -> Scene {
    let n = cfg.window();
    let ego = random_walk(rng, n);
    let origin = ego[cfg.t_his - 1];
    let mut ids = vec![1u64];
    let mut last = vec![[0.0, 0.0]];
    let mut nbrs = Vec::new();
    for j in 0..neighbors {
        let r = cfg.radius * 0.95 * rng.uniform(0.0, 1.0).sqrt();
        let a = rng.uniform(0.0, std::f64::consts::TAU);
        let target = [origin[0] + r * a.cos(), origin[1] + r * a.sin()];
        let w = random_walk(rng, n);
        let shift = sub(target, w[cfg.t_his - 1]);
        let history: Vec<Point> = w[..cfg.t_his]
            .iter()
            .map(|p| sub([p[0] + shift[0], p[1] + shift[1]], origin))
            .collect();
        ids.push(2 + j as u64);
        last.push(history[cfg.t_his - 1]);
        nbrs.push(Neighbor { id: 2 + j as u64, history });
    }
    let rel = |ps: &[Point]| ps.iter().map(|&p| sub(p, origin)).collect::<Vec<_>>();
    Scene {
        ego_id: 1,
        start_frame: 0,
        history: rel(&ego[..cfg.t_his]),
        future: rel(&ego[cfg.t_his..]),
        neighbors: nbrs,
        graph: NeighborGraph::from_positions(&ids, &last, cfg.radius).expect("unique ids"),
        origin,
        maneuver: Maneuver::Unknown,
    }
}

fn random_walk(rng: &mut crate::rng::SeededRng, n: usize) -> Vec<Point> {
    let mut psi = rng.uniform(0.0, std::f64::consts::TAU);
    let speed = rng.uniform(1.0, 4.0);
    let mut p = [0.0, 0.0];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(p);
        psi += rng.uniform(-0.2, 0.2);
        let v = speed * rng.uniform(0.8, 1.2);
        p = [p[0] + v * psi.cos(), p[1] + v * psi.sin()];
    }
    out
}
