//! The conditional denoiser ε_θ(y_k, k, c) and the model that couples it to
//! the context encoder.
//!
//! Future offsets are tokens with one 2D channel each. The ego's history
//! offsets ride along as extra vector channels of every token, which gives
//! the equivariant stack a heading to align its output with. The context
//! vector and the step embedding act only through per-timestep scalar gates,
//! so rotating the scene and `y_k` rotates ε̂.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::{encode_scenes_graph, init_context, ContextSpec};
use crate::data::{points_tensor, Scene};
use crate::diffusion::{noise_batch, sample, training_loss, DiffusionSchedule, NoiseSource, NoisedBatch};
use crate::error::{Error, Result};
use crate::params::{Bound, Params};
use crate::rng::SeededRng;
use crate::tensorcore::{Graph, Tensor, Unary, Var};
use crate::vn::{init_block, vn_linear, vn_transformer_block};

pub const COND_SLOPE: f64 = 0.2;
const SCALAR_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Scalar transformer over flattened coordinates instead of VN blocks.
    NoEquivariance,
    /// Context is the raw ego GRU state; no GAT.
    NoContext,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEquivariance => "no_equivariance",
            Variant::NoContext => "no_context",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_equivariance" => Ok(Variant::NoEquivariance),
            "no_context" => Ok(Variant::NoContext),
            other => Err(Error::Input(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden size D of the context encoder and step embedding.
    pub d_model: usize,
    /// VN channel count C.
    pub channels: usize,
    pub layers: usize,
    pub vn_heads: usize,
    pub gat_heads: usize,
    pub t_his: usize,
    pub t_pre: usize,
    /// Feed the ego history offsets to every token as vector channels.
    pub history_channels: bool,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            channels: 64,
            layers: 4,
            vn_heads: 1,
            gat_heads: 4,
            t_his: 15,
            t_pre: 25,
            history_channels: true,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.d_model >= 2
            && self.d_model % 2 == 0
            && self.channels >= 1
            && self.vn_heads >= 1
            && self.channels % self.vn_heads == 0
            && self.gat_heads >= 1
            && self.t_his >= 2
            && self.t_pre >= 1;
        if !ok {
            return Err(Error::Config(format!("invalid model settings: {self:?}")));
        }
        Ok(())
    }

    pub fn context_spec(&self) -> ContextSpec {
        ContextSpec {
            d: self.d_model,
            heads: self.gat_heads,
            use_gat: self.variant != Variant::NoContext,
        }
    }

    fn history_len(&self) -> usize {
        if self.history_channels {
            self.t_his - 1
        } else {
            0
        }
    }

    fn cond_dim(&self) -> usize {
        2 * self.d_model
    }

    fn scalar_width(&self) -> usize {
        2 * self.channels
    }
}

/// Interleaved `sin(k f_i), cos(k f_i)` at `d/2` geometric frequencies
/// `f_i = 10000^{-2i/d}`.
pub fn timestep_embedding(k: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let f = 10000f64.powf(-(i as f64) / half as f64);
        let (s, c) = (k as f64 * f).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
    Tensor::from_vec(out)
}

/// `x W^T + b` over the last axis of `x`.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let fin = *shape.last().ok_or(Error::Axis {
        op: "dense",
        axis: 0,
        rank: 0,
    })?;
    let rows = g.value(x).len() / fin.max(1);
    let flat = g.reshape(x, &[rows, fin])?;
    let mut y = g.matmul_t(flat, w, false, true)?;
    let fout = g.shape(y)[1];
    if let Some(b) = b {
        let bb = g.broadcast_to(b, &[rows, fout])?;
        y = g.add(y, bb)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("nonempty") = fout;
    g.reshape(y, &out_shape)
}

/// Scales each timestep of `x` (`[B, T, ...]`) by its gate from
/// `gates` (`[B, T]`).
pub fn apply_gates(g: &mut Graph, gates: Var, x: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let gs = g.shape(gates).to_vec();
    if xs.len() < 2 || gs != xs[..2] {
        return Err(Error::Shape {
            op: "context_fuse",
            lhs: gs,
            rhs: xs,
        });
    }
    let mut gshape = gs.clone();
    gshape.extend(std::iter::repeat(1).take(xs.len() - 2));
    let gr = g.reshape(gates, &gshape)?;
    let gb = g.broadcast_to(gr, &xs)?;
    g.mul(gb, x)
}

/// Gated context fusion on plain tensors: `x` is `[T, ...]`, `w` is
/// `[T, D']`, `c_tilde` is `[D']`.
pub fn context_fuse(c_tilde: &Tensor, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let cv = g.constant(c_tilde.clone().reshape(&[1, c_tilde.len()])?);
    let wv = g.constant(w.clone());
    let gates = g.matmul_t(cv, wv, false, true)?;
    let mut xs = vec![1];
    xs.extend_from_slice(x.shape());
    let xv = g.constant(x.clone().reshape(&xs)?);
    let out = apply_gates(&mut g, gates, xv)?;
    g.value(out).clone().reshape(x.shape())
}

fn block_prefix(i: usize) -> String {
    format!("bb.block{i}")
}

fn sblock_name(i: usize, name: &str) -> String {
    format!("bb.sblock{i}.{name}")
}

/// Backbone parameters, excluding the context encoder.
pub fn init_backbone(params: &mut Params, cfg: &ModelConfig, rng: &mut SeededRng) {
    let d = cfg.d_model;
    let dc = cfg.cond_dim();
    let t = cfg.t_pre;
    params.init_uniform("bb.temb.w", &[d, d], d, rng);
    params.init_uniform("bb.temb.b", &[d], d, rng);
    params.init_uniform("bb.cond.w", &[dc, 2 * d], 2 * d, rng);
    params.init_uniform("bb.cond.b", &[dc], 2 * d, rng);
    params.init_uniform("bb.fuse_pre", &[t, dc], dc, rng);
    params.init_uniform("bb.fuse_post", &[t, dc], dc, rng);
    let c = cfg.channels;
    let h = cfg.history_len();
    match cfg.variant {
        Variant::Full | Variant::NoContext => {
            params.init_uniform("bb.lift", &[c, 1 + h], 1 + h, rng);
            for i in 0..cfg.layers {
                init_block(params, &block_prefix(i), c, c, rng);
            }
            params.init_uniform("bb.project", &[1, c], c, rng);
        }
        Variant::NoEquivariance => {
            let w = cfg.scalar_width();
            params.init_uniform("bb.in.w", &[w, 2 + 2 * h], 2 + 2 * h, rng);
            params.init_uniform("bb.in.b", &[w], 2 + 2 * h, rng);
            for i in 0..cfg.layers {
                for name in ["wq", "wk", "wv"] {
                    params.init_uniform(&sblock_name(i, name), &[w, w], w, rng);
                }
                params.init_const(&sblock_name(i, "wo"), &[w, w], 0.0);
                params.init_const(&sblock_name(i, "bo"), &[w], 0.0);
                params.init_const(&sblock_name(i, "ln1.gamma"), &[w], 1.0);
                params.init_const(&sblock_name(i, "ln1.beta"), &[w], 0.0);
                params.init_uniform(&sblock_name(i, "mlp.w1"), &[w, w], w, rng);
                params.init_uniform(&sblock_name(i, "mlp.b1"), &[w], w, rng);
                params.init_const(&sblock_name(i, "mlp.w2"), &[w, w], 0.0);
                params.init_const(&sblock_name(i, "mlp.b2"), &[w], 0.0);
                params.init_const(&sblock_name(i, "ln2.gamma"), &[w], 1.0);
                params.init_const(&sblock_name(i, "ln2.beta"), &[w], 0.0);
            }
            params.init_uniform("bb.out.w", &[2, w], w, rng);
            params.init_uniform("bb.out.b", &[2], w, rng);
        }
    }
}

/// Full model parameters: context encoder then backbone, from one seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut params = Params::new();
    init_context(&mut params, &cfg.context_spec(), &mut rng);
    init_backbone(&mut params, cfg, &mut rng);
    Ok(params)
}

/// `c̃ = LeakyReLU(W [c ⊕ dense(emb(k))] + b)`, `[B, D']`.
pub fn conditioning(g: &mut Graph, c: Var, ks: &[usize], p: &Bound, d: usize) -> Result<Var> {
    let mut data = Vec::with_capacity(ks.len() * d);
    for &k in ks {
        data.extend_from_slice(timestep_embedding(k, d).data());
    }
    let emb = g.constant(Tensor::new(vec![ks.len(), d], data)?);
    let temb = dense(g, emb, p.get("bb.temb.w")?, Some(p.get("bb.temb.b")?))?;
    let cat = g.concat(&[c, temb], 1)?;
    let pre = dense(g, cat, p.get("bb.cond.w")?, Some(p.get("bb.cond.b")?))?;
    g.leaky_relu(pre, COND_SLOPE)
}

/// ε̂ for `y_k` (`[B, T, 2]`) at steps `ks`, given context `c` (`[B, D]`) and
/// ego history offsets `hist` (`[B, T_his − 1, 2]`).
pub fn denoise_graph(
    g: &mut Graph,
    y_k: Var,
    ks: &[usize],
    c: Var,
    hist: Var,
    p: &Bound,
    cfg: &ModelConfig,
) -> Result<Var> {
    let ys = g.shape(y_k).to_vec();
    let b = ks.len();
    if ys != [b, cfg.t_pre, 2] {
        return Err(Error::Shape {
            op: "denoise",
            lhs: ys,
            rhs: vec![b, cfg.t_pre, 2],
        });
    }
    let t = cfg.t_pre;
    let c_tilde = conditioning(g, c, ks, p, cfg.d_model)?;
    let g_pre = g.matmul_t(c_tilde, p.get("bb.fuse_pre")?, false, true)?;
    let g_post = g.matmul_t(c_tilde, p.get("bb.fuse_post")?, false, true)?;
    let x = apply_gates(g, g_pre, y_k)?;
    let h = cfg.history_len();

    let out = match cfg.variant {
        Variant::Full | Variant::NoContext => {
            let mut x = g.reshape(x, &[b, t, 1, 2])?;
            if h > 0 {
                let hr = g.reshape(hist, &[b, 1, h, 2])?;
                let hb = g.broadcast_to(hr, &[b, t, h, 2])?;
                x = g.concat(&[x, hb], 2)?;
            }
            let mut x = vn_linear(g, p.get("bb.lift")?, x)?;
            for i in 0..cfg.layers {
                x = vn_transformer_block(g, x, p, &block_prefix(i), cfg.vn_heads)?;
            }
            let y = vn_linear(g, p.get("bb.project")?, x)?;
            g.reshape(y, &[b, t, 2])?
        }
        Variant::NoEquivariance => {
            let mut x = x;
            if h > 0 {
                let hr = g.reshape(hist, &[b, 1, 2 * h])?;
                let hb = g.broadcast_to(hr, &[b, t, 2 * h])?;
                x = g.concat(&[x, hb], 2)?;
            }
            let mut x = dense(g, x, p.get("bb.in.w")?, Some(p.get("bb.in.b")?))?;
            for i in 0..cfg.layers {
                x = scalar_block(g, x, p, i)?;
            }
            dense(g, x, p.get("bb.out.w")?, Some(p.get("bb.out.b")?))?
        }
    };
    apply_gates(g, g_post, out)
}

fn scalar_layernorm(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let last = shape.len() - 1;
    let mut kept = shape.clone();
    kept[last] = 1;
    let mean = g.mean(x, last)?;
    let mean = g.reshape(mean, &kept)?;
    let mean = g.broadcast_to(mean, &shape)?;
    let centered = g.sub(x, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean(sq, last)?;
    let var = g.add_scalar(var, SCALAR_LN_EPS);
    let sd = g.unary(Unary::Sqrt, var)?;
    let sd = g.reshape(sd, &kept)?;
    let sd = g.broadcast_to(sd, &shape)?;
    let norm = g.div(centered, sd)?;
    let gb = g.broadcast_to(gamma, &shape)?;
    let bb = g.broadcast_to(beta, &shape)?;
    let scaled = g.mul(norm, gb)?;
    g.add(scaled, bb)
}

/// Post-norm transformer block over `[B, T, W]` with single-head attention.
fn scalar_block(g: &mut Graph, x: Var, p: &Bound, i: usize) -> Result<Var> {
    let get = |n: &str| p.get(&sblock_name(i, n));
    let w = *g.shape(x).last().expect("rank 3");
    let q = dense(g, x, get("wq")?, None)?;
    let k = dense(g, x, get("wk")?, None)?;
    let v = dense(g, x, get("wv")?, None)?;
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (w as f64).sqrt());
    let att = g.softmax(scores, 2)?;
    let mixed = g.matmul(att, v)?;
    let o = dense(g, mixed, get("wo")?, Some(get("bo")?))?;
    let x1 = g.add(x, o)?;
    let x1 = scalar_layernorm(g, x1, get("ln1.gamma")?, get("ln1.beta")?)?;
    let h = dense(g, x1, get("mlp.w1")?, Some(get("mlp.b1")?))?;
    let h = g.leaky_relu(h, 0.0)?;
    let h = dense(g, h, get("mlp.w2")?, Some(get("mlp.b2")?))?;
    let x2 = g.add(x1, h)?;
    scalar_layernorm(g, x2, get("ln2.gamma")?, get("ln2.beta")?)
}

/// Stacks the ego history offsets of `scenes`, `[B, T_his − 1, 2]`.
pub fn history_batch(scenes: &[&Scene]) -> Result<Tensor> {
    stack(scenes.iter().map(|s| s.history_tensor()).collect())
}

/// Stacks the future offsets of `scenes`, `[B, T_pre, 2]`.
pub fn future_batch(scenes: &[&Scene]) -> Result<Tensor> {
    for s in scenes {
        if s.future.is_empty() {
            return Err(Error::Input(format!("scene of vehicle {} has no future", s.ego_id)));
        }
    }
    stack(scenes.iter().map(|s| points_tensor(&s.future_offsets())).collect())
}

fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let inner = first.shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * first.len());
    for p in &parts {
        if p.shape() != inner.as_slice() {
            return Err(Error::Shape {
                op: "stack",
                lhs: inner,
                rhs: p.shape().to_vec(),
            });
        }
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend(inner);
    Tensor::new(shape, data)
}

/// Context encoder plus denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init(&self, seed: u64) -> Result<Params> {
        init_params(&self.config, seed)
    }

    /// Context vectors `[B, D]` and history offsets `[B, T_his − 1, 2]`.
    pub fn condition(&self, g: &mut Graph, p: &Bound, scenes: &[&Scene]) -> Result<(Var, Var)> {
        let c = encode_scenes_graph(g, scenes, p, &self.config.context_spec())?;
        let hist = g.constant(history_batch(scenes)?);
        Ok((c, hist))
    }

    pub fn denoise(&self, g: &mut Graph, p: &Bound, y_k: Var, ks: &[usize], c: Var, hist: Var) -> Result<Var> {
        denoise_graph(g, y_k, ks, c, hist, p, &self.config)
    }

    /// Training loss on a batch of scenes; parameters are bound as trainable.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        scenes: &[&Scene],
        s: &DiffusionSchedule,
        rng: &mut SeededRng,
    ) -> Result<(Var, NoisedBatch)> {
        let y0 = future_batch(scenes)?;
        let (c, hist) = self.condition(g, p, scenes)?;
        training_loss(g, &y0, s, rng, |g, nb: &NoisedBatch| {
            let yk = g.constant(nb.y_k.clone());
            self.denoise(g, p, yk, &nb.ks, c, hist)
        })
    }

    /// Loss value without gradients, for a fixed noise draw.
    pub fn eval_loss(&self, params: &Params, scenes: &[&Scene], s: &DiffusionSchedule, seed: u64) -> Result<f64> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let y0 = future_batch(scenes)?;
        let nb = noise_batch(&y0, s, &mut SeededRng::new(seed))?;
        let (c, hist) = self.condition(&mut g, &p, scenes)?;
        let yk = g.constant(nb.y_k.clone());
        let eps_hat = self.denoise(&mut g, &p, yk, &nb.ks, c, hist)?;
        let diff = g.value(eps_hat).sub(&nb.eps)?;
        Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / scenes.len() as f64)
    }

    /// Draws `n` offset sequences per scene, `[B·n, T_pre, 2]`, scene-major.
    pub fn sample(
        &self,
        params: &Params,
        scenes: &[&Scene],
        n: usize,
        s: &DiffusionSchedule,
        noise: &mut dyn NoiseSource,
        record: &[usize],
        trace: &mut Vec<(usize, Tensor)>,
    ) -> Result<Tensor> {
        if scenes.is_empty() || n == 0 {
            return Err(Error::Input("sampling needs at least one scene and one sample".into()));
        }
        let (c, hist) = {
            let mut g = Graph::new();
            let p = params.bind_frozen(&mut g);
            let (c, hist) = self.condition(&mut g, &p, scenes)?;
            (repeat_rows(g.value(c), n)?, repeat_rows(g.value(hist), n)?)
        };
        let rows = scenes.len() * n;
        let shape = [rows, self.config.t_pre, 2];
        sample(
            |y: &Tensor, k: usize| {
                let mut g = Graph::new();
                let p = params.bind_frozen(&mut g);
                let cv = g.constant(c.clone());
                let hv = g.constant(hist.clone());
                let yv = g.constant(y.clone());
                let out = self.denoise(&mut g, &p, yv, &vec![k; rows], cv, hv)?;
                Ok(g.value(out).clone())
            },
            &shape,
            s,
            noise,
            record,
            trace,
        )
    }
}

/// Repeats each row along axis 0 `n` times.
fn repeat_rows(t: &Tensor, n: usize) -> Result<Tensor> {
    let rows = t.shape()[0];
    let per = t.len() / rows.max(1);
    let mut data = Vec::with_capacity(t.len() * n);
    for r in 0..rows {
        for _ in 0..n {
            data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows * n;
    Tensor::new(shape, data)
}
