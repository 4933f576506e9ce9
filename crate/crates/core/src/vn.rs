//! SO(2)-equivariant vector-neuron layers.
//!
//! Every feature channel is a 2D vector, so a feature map has shape
//! `[..., C, 2]`. Channel mixing, the projection ReLU, Frobenius-product
//! attention and norm-based layer normalization all commute with rotating
//! every vector by the same angle.

use crate::error::{Error, Result};
use crate::params::{Bound, Params};
use crate::rng::SeededRng;
use crate::tensorcore::{Graph, Tensor, Var};

/// Epsilon inside the LayerNorm variance.
pub const LN_EPS: f64 = 1e-5;

/// A rotation in SO(2), applied to row vectors as `x R`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix {
    cos: f64,
    sin: f64,
}

impl RotationMatrix {
    pub fn from_angle(theta: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        Self { cos, sin }
    }

    pub fn identity() -> Self {
        Self { cos: 1.0, sin: 0.0 }
    }

    /// `[[c, s], [-s, c]]`, so that `[1, 0] R = [c, s]`.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.cos, self.sin], [-self.sin, self.cos]]
    }

    pub fn angle(&self) -> f64 {
        self.sin.atan2(self.cos)
    }

    pub fn inverse(&self) -> Self {
        Self {
            cos: self.cos,
            sin: -self.sin,
        }
    }

    /// Applies the rotation to one vector.
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            v[0] * self.cos - v[1] * self.sin,
            v[0] * self.sin + v[1] * self.cos,
        ]
    }

    pub fn det(&self) -> f64 {
        self.cos * self.cos + self.sin * self.sin
    }
}

/// Rotates every 2-vector of `x` (last extent must be 2).
pub fn rotate(x: &Tensor, r: &RotationMatrix) -> Result<Tensor> {
    if x.shape().last() != Some(&2) {
        return Err(Error::Input(format!(
            "rotate needs a trailing extent of 2, got {:?}",
            x.shape()
        )));
    }
    let mut out = x.clone();
    for v in out.data_mut().chunks_mut(2) {
        let [a, b] = r.apply([v[0], v[1]]);
        v[0] = a;
        v[1] = b;
    }
    Ok(out)
}

/// Token × channel × 2 vector features.
#[derive(Clone, Debug, PartialEq)]
pub struct VecFeature(Tensor);

impl VecFeature {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 || values.shape()[2] != 2 {
            return Err(Error::Input(format!(
                "vector feature must be [tokens, channels, 2], got {:?}",
                values.shape()
            )));
        }
        Ok(Self(values))
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn rotate(&self, r: &RotationMatrix) -> Self {
        Self(rotate(&self.0, r).expect("trailing extent is 2"))
    }
}

fn channels_of(g: &Graph, x: Var, op: &'static str) -> Result<(Vec<usize>, usize)> {
    let shape = g.shape(x);
    if shape.len() < 2 || shape[shape.len() - 1] != 2 {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![2],
        });
    }
    Ok((shape[..shape.len() - 2].to_vec(), shape[shape.len() - 2]))
}

/// Mixes channels: output channel `c` is `Σ_j W[c, j] · x[.., j, :]`.
/// No bias, since an additive vector would break equivariance.
pub fn vn_linear(g: &mut Graph, w: Var, x: Var) -> Result<Var> {
    let (lead, c_in) = channels_of(g, x, "vn_linear")?;
    let wshape = g.shape(w).to_vec();
    if wshape.len() != 2 || wshape[1] != c_in {
        return Err(Error::Shape {
            op: "vn_linear",
            lhs: wshape,
            rhs: g.shape(x).to_vec(),
        });
    }
    let c_out = wshape[0];
    let n: usize = lead.iter().product();
    // [N, Ci, 2] -> [N, 2, Ci] -> [2N, Ci] · Wᵀ -> [N, 2, Co] -> [N, Co, 2]
    let flat = g.reshape(x, &[n, c_in, 2])?;
    let t = g.permute(flat, &[0, 2, 1])?;
    let rows = g.reshape(t, &[2 * n, c_in])?;
    let mixed = g.matmul_t(rows, w, false, true)?;
    let back = g.reshape(mixed, &[n, 2, c_out])?;
    let back = g.permute(back, &[0, 2, 1])?;
    let mut shape = lead;
    shape.extend([c_out, 2]);
    g.reshape(back, &shape)
}

/// Vector-neuron ReLU with learned feature (`w`) and direction (`u`) maps.
pub fn vn_relu(g: &mut Graph, x: Var, w: Var, u: Var) -> Result<Var> {
    let q = vn_linear(g, w, x)?;
    let k = vn_linear(g, u, x)?;
    g.vn_relu_project(q, k)
}

/// Scalar form of the projection ReLU on a single `(q, k)` pair.
pub fn vn_relu_pair(q: [f64; 2], k: [f64; 2]) -> [f64; 2] {
    let dot = q[0] * k[0] + q[1] * k[1];
    let kk = k[0] * k[0] + k[1] * k[1];
    if dot >= 0.0 || kk.sqrt() < crate::tensorcore::ZERO_NORM {
        q
    } else {
        let s = dot / kk;
        [q[0] - s * k[0], q[1] - s * k[1]]
    }
}

/// Attention weights from Frobenius inner products of per-token channel
/// matrices, scaled by `1/√(2C)` and softmaxed over keys.
///
/// `q` is `[M, C, 2]` or `[B, M, C, 2]`, `k` likewise with `N` tokens.
/// Returns `[M, N]` or `[B, M, N]`.
pub fn vn_attention_weights(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    let ok = qs.len() == ks.len()
        && (qs.len() == 3 || qs.len() == 4)
        && qs[qs.len() - 2..] == ks[ks.len() - 2..]
        && qs[..qs.len() - 3] == ks[..ks.len() - 3]
        && qs[qs.len() - 1] == 2;
    if !ok {
        return Err(Error::Shape {
            op: "vn_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let c = qs[qs.len() - 2];
    let batched = qs.len() == 4;
    let flat = |g: &mut Graph, v: Var, s: &[usize]| {
        if batched {
            g.reshape(v, &[s[0], s[1], 2 * c])
        } else {
            g.reshape(v, &[s[0], 2 * c])
        }
    };
    let qf = flat(g, q, &qs)?;
    let kf = flat(g, k, &ks)?;
    let scores = g.matmul_t(qf, kf, false, true)?;
    let scores = g.scale(scores, 1.0 / ((2 * c) as f64).sqrt());
    let axis = g.shape(scores).len() - 1;
    g.softmax(scores, axis)
}

/// `Σ_n A(m, n) Z⁽ⁿ⁾` with Frobenius-product attention `A`.
pub fn vn_attention(g: &mut Graph, q: Var, k: Var, z: Var) -> Result<Var> {
    let zs = g.shape(z).to_vec();
    if zs != g.shape(k) {
        return Err(Error::Shape {
            op: "vn_attention",
            lhs: g.shape(k).to_vec(),
            rhs: zs,
        });
    }
    let a = vn_attention_weights(g, q, k)?;
    let c = zs[zs.len() - 2];
    let out_shape = g.shape(q).to_vec();
    let zf = if zs.len() == 4 {
        g.reshape(z, &[zs[0], zs[1], 2 * c])?
    } else {
        g.reshape(z, &[zs[0], 2 * c])?
    };
    let mixed = g.matmul(a, zf)?;
    g.reshape(mixed, &out_shape)
}

/// Multi-head variant: channels are split into `heads` equal groups that
/// attend independently. One head reduces to [`vn_attention`].
pub fn vn_attention_heads(g: &mut Graph, q: Var, k: Var, z: Var, heads: usize) -> Result<Var> {
    if heads == 1 {
        return vn_attention(g, q, k, z);
    }
    let qs = g.shape(q).to_vec();
    if qs.len() != 4 || qs[2] % heads != 0 {
        return Err(Error::Input(format!(
            "multi-head attention needs [B, M, C, 2] with C divisible by {heads}, got {qs:?}"
        )));
    }
    let (b, m, c) = (qs[0], qs[1], qs[2]);
    let n = g.shape(k)[1];
    let ch = c / heads;
    let split = |g: &mut Graph, v: Var, t: usize| -> Result<Var> {
        let v = g.reshape(v, &[b, t, heads, ch * 2])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        g.reshape(v, &[b * heads, t, ch, 2])
    };
    let (qh, kh, zh) = (split(g, q, m)?, split(g, k, n)?, split(g, z, n)?);
    let out = vn_attention(g, qh, kh, zh)?;
    let out = g.reshape(out, &[b, heads, m, ch * 2])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[b, m, c, 2])
}

/// Unit directions of each channel rescaled by a LayerNorm over the channel
/// norms of each token. `gamma` and `beta` are `[C]`.
pub fn vn_layernorm(g: &mut Graph, z: Var, gamma: Var, beta: Var) -> Result<Var> {
    let (lead, c) = channels_of(g, z, "vn_layernorm")?;
    let shape = g.shape(z).to_vec();
    let axis = lead.len();
    let norms = g.l2norm(z, axis + 1)?;
    let dirs = g.unit_vectors(z)?;
    let mut ln_shape = lead.clone();
    ln_shape.push(c);
    let mut keep = lead.clone();
    keep.push(1);

    let mean = g.mean(norms, axis)?;
    let mean = g.reshape(mean, &keep)?;
    let mean = g.broadcast_to(mean, &ln_shape)?;
    let centered = g.sub(norms, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean(sq, axis)?;
    let var = g.add_scalar(var, LN_EPS);
    let std = g.unary(crate::tensorcore::Unary::Sqrt, var)?;
    let std = g.reshape(std, &keep)?;
    let std = g.broadcast_to(std, &ln_shape)?;
    let normed = g.div(centered, std)?;
    let gam = g.broadcast_to(gamma, &ln_shape)?;
    let bet = g.broadcast_to(beta, &ln_shape)?;
    let scaled = g.mul(normed, gam)?;
    let scaled = g.add(scaled, bet)?;
    let mut col = ln_shape;
    col.push(1);
    let scaled = g.reshape(scaled, &col)?;
    let scaled = g.broadcast_to(scaled, &shape)?;
    g.mul(dirs, scaled)
}

/// Parameter names of one VN-Transformer block under `prefix`.
pub struct BlockNames {
    pub wq: String,
    pub wk: String,
    pub wz: String,
    pub wo: String,
    pub ln1_gamma: String,
    pub ln1_beta: String,
    pub mlp_in: String,
    pub relu_w: String,
    pub relu_u: String,
    pub mlp_out: String,
    pub ln2_gamma: String,
    pub ln2_beta: String,
}

impl BlockNames {
    pub fn new(prefix: &str) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        Self {
            wq: n("attn.wq"),
            wk: n("attn.wk"),
            wz: n("attn.wz"),
            wo: n("attn.wo"),
            ln1_gamma: n("ln1.gamma"),
            ln1_beta: n("ln1.beta"),
            mlp_in: n("mlp.w_in"),
            relu_w: n("mlp.relu_w"),
            relu_u: n("mlp.relu_u"),
            mlp_out: n("mlp.w_out"),
            ln2_gamma: n("ln2.gamma"),
            ln2_beta: n("ln2.beta"),
        }
    }
}

/// Adds a block's parameters. The attention output map and the last MLP
/// map start at zero, so a fresh block is normalization around identity.
pub fn init_block(params: &mut Params, prefix: &str, channels: usize, hidden: usize, rng: &mut SeededRng) {
    let n = BlockNames::new(prefix);
    let c = channels;
    params.init_uniform(&n.wq, &[c, c], c, rng);
    params.init_uniform(&n.wk, &[c, c], c, rng);
    params.init_uniform(&n.wz, &[c, c], c, rng);
    params.init_const(&n.wo, &[c, c], 0.0);
    params.init_const(&n.ln1_gamma, &[c], 1.0);
    params.init_const(&n.ln1_beta, &[c], 0.0);
    params.init_uniform(&n.mlp_in, &[hidden, c], c, rng);
    params.init_uniform(&n.relu_w, &[hidden, hidden], hidden, rng);
    params.init_uniform(&n.relu_u, &[hidden, hidden], hidden, rng);
    params.init_const(&n.mlp_out, &[c, hidden], 0.0);
    params.init_const(&n.ln2_gamma, &[c], 1.0);
    params.init_const(&n.ln2_beta, &[c], 0.0);
}

/// `X → LN(X + Attn(X)) → LN(· + MLP(·))` over `[B, T, C, 2]` features.
pub fn vn_transformer_block(g: &mut Graph, x: Var, p: &Bound, prefix: &str, heads: usize) -> Result<Var> {
    let n = BlockNames::new(prefix);
    let q = vn_linear(g, p.get(&n.wq)?, x)?;
    let k = vn_linear(g, p.get(&n.wk)?, x)?;
    let z = vn_linear(g, p.get(&n.wz)?, x)?;
    let att = if g.shape(x).len() == 4 {
        vn_attention_heads(g, q, k, z, heads)?
    } else {
        vn_attention(g, q, k, z)?
    };
    let att = vn_linear(g, p.get(&n.wo)?, att)?;
    let x1 = g.add(x, att)?;
    let x1 = vn_layernorm(g, x1, p.get(&n.ln1_gamma)?, p.get(&n.ln1_beta)?)?;

    let h = vn_linear(g, p.get(&n.mlp_in)?, x1)?;
    let h = vn_relu(g, h, p.get(&n.relu_w)?, p.get(&n.relu_u)?)?;
    let h = vn_linear(g, p.get(&n.mlp_out)?, h)?;
    let x2 = g.add(x1, h)?;
    vn_layernorm(g, x2, p.get(&n.ln2_gamma)?, p.get(&n.ln2_beta)?)
}

#[cfg(test)]
mod tests;
