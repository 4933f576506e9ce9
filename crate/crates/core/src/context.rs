//! Rotation-invariant social context: speed/turn-angle features, a GRU per
//! vehicle and one graph-attention layer over the neighbor graph.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use crate::data::{Point, Scene};
use crate::error::{Error, Result};
use crate::params::{Bound, Params};
use crate::rng::SeededRng;
use crate::tensorcore::{Graph, Tensor, Var, ZERO_NORM};

pub const GAT_SLOPE: f64 = 0.2;

/// Directed edges `j → i` between vehicles within the radius of each other,
/// plus a self-loop on every node. Node 0 is the ego.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    ids: Vec<u64>,
    edges: BTreeSet<(usize, usize)>,
}

impl NeighborGraph {
    pub fn from_positions(ids: &[u64], positions: &[Point], radius: f64) -> Result<Self> {
        if ids.len() != positions.len() || ids.is_empty() {
            return Err(Error::Input(format!(
                "graph needs one position per id, got {} ids and {} positions",
                ids.len(),
                positions.len()
            )));
        }
        let mut edges = BTreeSet::new();
        for (j, pj) in positions.iter().enumerate() {
            for (i, pi) in positions.iter().enumerate() {
                if (pj[0] - pi[0]).hypot(pj[1] - pi[1]) <= radius || i == j {
                    edges.insert((j, i));
                }
            }
        }
        Self::new(ids, edges)
    }

    /// Graph from explicit `(src, dst)` index pairs; self-loops are added.
    pub fn from_edges(ids: &[u64], edges: &[(usize, usize)]) -> Result<Self> {
        Self::new(ids, edges.iter().copied().collect())
    }

    fn new(ids: &[u64], mut edges: BTreeSet<(usize, usize)>) -> Result<Self> {
        let unique: BTreeSet<_> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::Input("graph node ids must be unique".into()));
        }
        if let Some(&(j, i)) = edges.iter().find(|&&(j, i)| j >= ids.len() || i >= ids.len()) {
            return Err(Error::Input(format!("edge {j}→{i} references a missing node")));
        }
        edges.extend((0..ids.len()).map(|i| (i, i)));
        Ok(Self {
            ids: ids.to_vec(),
            edges,
        })
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn ego(&self) -> u64 {
        self.ids[0]
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.edges.contains(&(src, dst))
    }

    /// Sources of the edges into `dst`, ascending.
    pub fn in_edges(&self, dst: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.1 == dst).map(|e| e.0).collect()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }
}

/// Per-step speed and unsigned turn angle of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantSeq {
    pub speed: Vec<f64>,
    pub turn: Vec<f64>,
}

impl InvariantSeq {
    pub fn len(&self) -> usize {
        self.speed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speed.is_empty()
    }

    /// `[steps, 2]` rows of `(speed, turn)`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.speed.iter().zip(&self.turn).flat_map(|(&v, &t)| [v, t]).collect();
        Tensor::new(vec![self.len(), 2], data).expect("two features per step")
    }
}

/// Speeds `|p_t − p_{t−1}|` and the angle between consecutive velocities.
/// The first angle, and any angle next to a zero velocity, is 0.
pub fn invariant_features(points: &[Point]) -> Result<InvariantSeq> {
    if points.len() < 2 {
        return Err(Error::Input(format!(
            "invariant features need at least 2 points, got {}",
            points.len()
        )));
    }
    let vel: Vec<Point> = points.windows(2).map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]]).collect();
    let speed: Vec<f64> = vel.iter().map(|v| v[0].hypot(v[1])).collect();
    let mut turn = vec![0.0; vel.len()];
    for t in 1..vel.len() {
        if speed[t] < ZERO_NORM || speed[t - 1] < ZERO_NORM {
            continue;
        }
        let (a, b) = (vel[t - 1], vel[t]);
        let dot = a[0] * b[0] + a[1] * b[1];
        let cross = a[0] * b[1] - a[1] * b[0];
        // Same angle as arccos of the normalized dot product, without its
        // loss of precision near 0 and π.
        turn[t] = cross.abs().atan2(dot);
    }
    Ok(InvariantSeq { speed, turn })
}

const GRU_GATES: [&str; 3] = ["r", "z", "h"];

pub fn init_gru(params: &mut Params, prefix: &str, d: usize, rng: &mut SeededRng) {
    for gate in GRU_GATES {
        params.init_uniform(&format!("{prefix}.w_{gate}"), &[d, 2], d, rng);
        params.init_uniform(&format!("{prefix}.u_{gate}"), &[d, d], d, rng);
        params.init_uniform(&format!("{prefix}.b_{gate}"), &[d], d, rng);
    }
}

/// `x W^T + h U^T + b` for a batch of rows.
fn gate_pre(g: &mut Graph, x: Var, h: Var, w: Var, u: Var, b: Option<Var>) -> Result<Var> {
    let xw = g.matmul_t(x, w, false, true)?;
    let hu = g.matmul_t(h, u, false, true)?;
    let s = g.add(xw, hu)?;
    match b {
        Some(b) => {
            let shape = g.shape(s).to_vec();
            let bb = g.broadcast_to(b, &shape)?;
            g.add(s, bb)
        }
        None => Ok(s),
    }
}

/// One GRU step for a batch: `x` is `[V, 2]`, `h` is `[V, D]`.
///
/// `h̃ = tanh(W_h x + U_h (r ⊙ h)) + b_h` and `h' = z ⊙ h + (1 − z) ⊙ h̃`.
pub fn gru_step_graph(g: &mut Graph, x: Var, h: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let get = |name: &str| p.get(&format!("{prefix}.{name}"));
    let r_pre = gate_pre(g, x, h, get("w_r")?, get("u_r")?, Some(get("b_r")?))?;
    let r = g.sigmoid(r_pre)?;
    let z_pre = gate_pre(g, x, h, get("w_z")?, get("u_z")?, Some(get("b_z")?))?;
    let z = g.sigmoid(z_pre)?;
    let rh = g.mul(r, h)?;
    let cand_pre = gate_pre(g, x, rh, get("w_h")?, get("u_h")?, None)?;
    let cand_t = g.tanh(cand_pre)?;
    let shape = g.shape(cand_t).to_vec();
    let bh = g.broadcast_to(get("b_h")?, &shape)?;
    let cand = g.add(cand_t, bh)?;
    let carry = g.sub(h, cand)?;
    let zc = g.mul(z, carry)?;
    g.add(cand, zc)
}

/// Folds [`gru_step_graph`] over `steps` (each `[V, 2]`) from `h_0 = 0`.
pub fn gru_encode_graph(g: &mut Graph, steps: &[Var], p: &Bound, prefix: &str, d: usize) -> Result<Var> {
    let first = steps
        .first()
        .ok_or_else(|| Error::Input("GRU needs a nonempty sequence".into()))?;
    let v = g.shape(*first)[0];
    let mut h = g.constant(Tensor::zeros(&[v, d]));
    for &x in steps {
        h = gru_step_graph(g, x, h, p, prefix)?;
    }
    Ok(h)
}

/// Single-vehicle GRU step on plain tensors.
pub fn gru_step(x: &Tensor, h_prev: &Tensor, params: &Params, prefix: &str) -> Result<Tensor> {
    let d = h_prev.len();
    if x.len() != 2 {
        return Err(Error::Shape {
            op: "gru_step",
            lhs: x.shape().to_vec(),
            rhs: vec![2],
        });
    }
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let xv = g.constant(x.clone().reshape(&[1, 2])?);
    let hv = g.constant(h_prev.clone().reshape(&[1, d])?);
    let out = gru_step_graph(&mut g, xv, hv, &p, prefix)?;
    g.value(out).clone().reshape(&[d])
}

pub fn gru_encode(seq: &InvariantSeq, params: &Params, prefix: &str) -> Result<Tensor> {
    if seq.is_empty() {
        return Err(Error::Input("GRU needs a nonempty sequence".into()));
    }
    let d = params.get(&format!("{prefix}.b_h"))?.len();
    let mut h = Tensor::zeros(&[d]);
    let rows = seq.to_tensor();
    for step in rows.data().chunks(2) {
        h = gru_step(&Tensor::from_vec(step.to_vec()), &h, params, prefix)?;
    }
    Ok(h)
}

/// Per-head projections `W^p` (`[P, C, D]`) and attention vectors `a^p`
/// (`[P, 2C]`).
pub fn init_gat(params: &mut Params, prefix: &str, d: usize, c: usize, heads: usize, rng: &mut SeededRng) {
    params.init_uniform(&format!("{prefix}.w"), &[heads, c, d], d, rng);
    params.init_uniform(&format!("{prefix}.a"), &[heads, 2 * c], 2 * c, rng);
}

/// Adjacency mask `[V, V]` with `mask[i * V + j]` true for an edge `j → i`.
pub type EdgeMask = Vec<bool>;

/// Graph attention over `h` (`[V, D]`) with in-edges given by `mask`.
/// Returns the fused features `[V, C]` and the attention weights `[P, V, V]`.
pub fn gat_graph(g: &mut Graph, h: Var, mask: &[bool], p: &Bound, prefix: &str) -> Result<(Var, Var)> {
    let w = p.get(&format!("{prefix}.w"))?;
    let a = p.get(&format!("{prefix}.a"))?;
    let (heads, c, d) = match *g.shape(w) {
        [heads, c, d] => (heads, c, d),
        ref other => {
            return Err(Error::Shape {
                op: "gat",
                lhs: other.to_vec(),
                rhs: vec![0, 0, 0],
            })
        }
    };
    let v = g.shape(h)[0];
    if mask.len() != v * v {
        return Err(Error::Length {
            len: mask.len(),
            shape: vec![v, v],
        });
    }
    let w_flat = g.reshape(w, &[heads * c, d])?;
    let z = g.matmul_t(h, w_flat, false, true)?;
    let z = g.reshape(z, &[v, heads, c])?;
    let z = g.permute(z, &[1, 0, 2])?;

    let a3 = g.reshape(a, &[heads, 2 * c, 1])?;
    let a_dst = g.slice(a3, 1, 0, c)?;
    let a_src = g.slice(a3, 1, c, c)?;
    let s_dst = g.matmul(z, a_dst)?;
    let s_src = g.matmul(z, a_src)?;
    let s_src = g.reshape(s_src, &[heads, 1, v])?;
    let s_dst = g.broadcast_to(s_dst, &[heads, v, v])?;
    let s_src = g.broadcast_to(s_src, &[heads, v, v])?;
    let e = g.add(s_dst, s_src)?;
    let e = g.leaky_relu(e, GAT_SLOPE)?;
    let full_mask: Rc<[bool]> = mask.iter().copied().cycle().take(heads * v * v).collect();
    let alpha = g.softmax_masked(e, 2, Some(full_mask))?;

    let msg = g.matmul(alpha, z)?;
    let avg = g.mean(msg, 0)?;
    let out = g.sigmoid(avg)?;
    Ok((out, alpha))
}

/// Map-based GAT on plain tensors, keyed by vehicle id.
pub fn gat_layer(
    feats: &BTreeMap<u64, Tensor>,
    graph: &NeighborGraph,
    params: &Params,
    prefix: &str,
) -> Result<BTreeMap<u64, Tensor>> {
    let mut rows = Vec::new();
    for id in graph.ids() {
        let f = feats
            .get(id)
            .ok_or_else(|| Error::Input(format!("graph node {id} has no features")))?;
        rows.push(f.data().to_vec());
    }
    let v = rows.len();
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let h = g.constant(Tensor::from_rows(&rows)?);
    let (out, _) = gat_graph(&mut g, h, &graph_mask(graph), &p, prefix)?;
    let out = g.value(out);
    let c = out.len() / v;
    Ok(graph
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, Tensor::from_vec(out.data()[i * c..(i + 1) * c].to_vec())))
        .collect())
}

pub fn graph_mask(graph: &NeighborGraph) -> EdgeMask {
    let v = graph.node_count();
    let mut mask = vec![false; v * v];
    for (j, i) in graph.edges() {
        mask[i * v + j] = true;
    }
    mask
}

/// Context encoder settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextSpec {
    pub d: usize,
    pub heads: usize,
    /// Skip the GAT and return the ego's GRU state.
    pub use_gat: bool,
}

pub const GRU_PREFIX: &str = "ctx.gru";
pub const GAT_PREFIX: &str = "ctx.gat";

pub fn init_context(params: &mut Params, spec: &ContextSpec, rng: &mut SeededRng) {
    init_gru(params, GRU_PREFIX, spec.d, rng);
    init_gat(params, GAT_PREFIX, spec.d, spec.d, spec.heads, rng);
}

/// Encodes a batch of scenes at once. All vehicles of all scenes share one
/// GRU pass and one block-diagonal GAT; returns the ego rows, `[B, D]`.
pub fn encode_scenes_graph(g: &mut Graph, scenes: &[&Scene], p: &Bound, spec: &ContextSpec) -> Result<Var> {
    let mut feats: Vec<Tensor> = Vec::new();
    let mut ego_rows = Vec::with_capacity(scenes.len());
    let mut blocks = Vec::with_capacity(scenes.len());
    let mut steps = None;
    for s in scenes {
        ego_rows.push(feats.len());
        blocks.push((feats.len(), &s.graph));
        for hist in s.vehicle_histories() {
            let f = invariant_features(hist)?.to_tensor();
            if *steps.get_or_insert(f.shape()[0]) != f.shape()[0] {
                return Err(Error::Input("all vehicle histories in a batch must have equal length".into()));
            }
            feats.push(f);
        }
    }
    let steps = steps.ok_or_else(|| Error::Input("empty scene batch".into()))?;
    let v = feats.len();

    let mut xs = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut data = Vec::with_capacity(2 * v);
        for f in &feats {
            data.extend_from_slice(&f.data()[2 * t..2 * t + 2]);
        }
        xs.push(g.constant(Tensor::new(vec![v, 2], data)?));
    }
    let h = gru_encode_graph(g, &xs, p, GRU_PREFIX, spec.d)?;
    let fused = if spec.use_gat {
        let mut mask = vec![false; v * v];
        for (offset, graph) in blocks {
            if graph.node_count() + offset > v {
                return Err(Error::Input("scene graph larger than its vehicle list".into()));
            }
            for (j, i) in graph.edges() {
                mask[(offset + i) * v + offset + j] = true;
            }
        }
        gat_graph(g, h, &mask, p, GAT_PREFIX)?.0
    } else {
        h
    };
    g.gather_rows(fused, &ego_rows)
}

/// Context vector `c` of one scene, `[D]`.
pub fn encode_scene(scene: &Scene, params: &Params, spec: &ContextSpec) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_frozen_prefixed(&mut g, &[GRU_PREFIX, GAT_PREFIX]);
    let c = encode_scenes_graph(&mut g, &[scene], &p, spec)?;
    g.value(c).clone().reshape(&[spec.d])
}
