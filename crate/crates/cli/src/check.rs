//! Property suite behind `equidiff check`: rotation equivariance of every
//! vector-neuron layer and of the denoiser, invariance of the context
//! encoder, gradient checks, and diffusion identities.

use std::f64::consts::PI;
use std::fmt;
use std::time::{Duration, Instant};

use equidiff_core::backbone::{conditioning, init_params, Model, ModelConfig, Variant};
use equidiff_core::context::{encode_scene, gat_graph, gru_step_graph, init_gat, init_gru};
use equidiff_core::data::{random_scene, Scene, SceneConfig};
use equidiff_core::diffusion::{
    make_schedule, training_loss, DiffusionSchedule, GaussianNoise, RotatedNoise,
};
use equidiff_core::error::Result;
use equidiff_core::params::Params;
use equidiff_core::rng::SeededRng;
use equidiff_core::tensorcore::{grad_report, Graph, Tensor, Var};
use equidiff_core::vn::{
    init_block, rotate, vn_attention, vn_layernorm, vn_linear, vn_relu, vn_transformer_block, RotationMatrix,
};

pub const LAYER_EQUIVARIANCE_TOL: f64 = 1e-9;
pub const MODEL_EQUIVARIANCE_TOL: f64 = 1e-8;
pub const INVARIANCE_TOL: f64 = 1e-8;
pub const GRAD_TOL: f64 = 1e-4;
pub const SCHEDULE_TOL: f64 = 1e-12;
pub const MARGINAL_SE: f64 = 4.0;
pub const ORACLE_LOSS_TOL: f64 = 1e-20;

/// Outcome of one property: `value` is compared against `bound`.
#[derive(Clone, Debug, PartialEq)]
pub struct Property {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    /// `true` when the property requires `value > bound`.
    pub above: bool,
}

impl Property {
    fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
            above: false,
        }
    }

    pub fn pass(&self) -> bool {
        if self.above {
            self.value > self.bound
        } else {
            self.value < self.bound
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rel = if self.above { ">" } else { "<" };
        let verdict = if self.pass() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<34} {:.3e} {rel} {:.0e}", self.name, self.value, self.bound)
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    /// Random inputs per equivariance property.
    pub inputs: usize,
    /// Rotations per input.
    pub rotations: usize,
    /// Scenes per neighbor count in the invariance suite.
    pub invariance_scenes: usize,
    /// Random points per gradient check.
    pub grad_points: usize,
    /// Draws for the marginal-consistency check.
    pub marginal_draws: usize,
    pub model: ModelConfig,
    pub schedule: (usize, f64, f64),
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            inputs: 10,
            rotations: 10,
            invariance_scenes: 10,
            grad_points: 5,
            marginal_draws: 10_000,
            model: ModelConfig::default(),
            schedule: (200, 1e-4, 5e-2),
        }
    }
}

pub fn rel_dev(got: &Tensor, want: &Tensor) -> f64 {
    got.distance(want).expect("same shapes") / want.norm().max(1e-300)
}

fn rotations(rng: &mut SeededRng, n: usize) -> Vec<RotationMatrix> {
    (0..n).map(|_| RotationMatrix::from_angle(rng.uniform(0.0, 2.0 * PI))).collect()
}

/// Fresh parameters with every zero-initialized tensor redrawn, so that
/// all paths through the network are active.
pub fn randomized_params(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    let mut p = init_params(cfg, seed)?;
    let mut rng = SeededRng::stream(seed, 7);
    for (name, t) in p.iter_mut() {
        let fan_in = *t.shape().last().unwrap_or(&1) as f64;
        let a = 1.0 / fan_in.sqrt();
        if name.ends_with("gamma") {
            *t = rng.uniform_tensor(t.shape(), 0.5, 1.5);
        } else if t.data().iter().all(|&v| v == 0.0) {
            *t = rng.uniform_tensor(t.shape(), -a, a);
        }
    }
    Ok(p)
}

/// Max relative deviation of `f(xR)` from `f(x)R` over random inputs and
/// rotations, with `f` drawn afresh (weights and input) per input.
fn layer_dev(
    opts: &CheckOptions,
    stream: u64,
    mut make: impl FnMut(&mut SeededRng) -> (Tensor, Box<dyn Fn(&Tensor) -> Tensor>),
) -> f64 {
    let mut rng = SeededRng::stream(opts.seed, stream);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.inputs {
        let (x, f) = make(&mut rng);
        let base = f(&x);
        for r in rotations(&mut rng, opts.rotations) {
            let got = f(&rotate(&x, &r).unwrap());
            worst = worst.max(rel_dev(&got, &rotate(&base, &r).unwrap()));
        }
    }
    worst
}

fn graph_fn(f: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> Box<dyn Fn(&Tensor) -> Tensor> {
    Box::new(move |x: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = f(&mut g, v).expect("layer evaluates");
        g.value(out).clone()
    })
}

const TOKENS: usize = 5;
const CHANNELS: usize = 4;

fn block_params(rng: &mut SeededRng, c: usize) -> Params {
    let mut p = Params::new();
    init_block(&mut p, "blk", c, 2 * c, rng);
    for (name, t) in p.iter_mut() {
        if name.ends_with("gamma") {
            *t = rng.uniform_tensor(t.shape(), 0.5, 1.5);
        } else {
            *t = rng.uniform_tensor(t.shape(), -0.6, 0.6);
        }
    }
    p
}

/// Equivariance of each layer and of the denoiser for `variant`.
pub fn equivariance_suite(opts: &CheckOptions, variant: Variant) -> Result<Vec<Property>> {
    let (t, c) = (TOKENS, CHANNELS);
    let lin = layer_dev(opts, 1, |rng| {
        let w = rng.normal_tensor(&[c + 1, c]);
        (rng.normal_tensor(&[t, c, 2]), graph_fn(move |g, x| {
            let w = g.constant(w.clone());
            vn_linear(g, w, x)
        }))
    });
    let relu = layer_dev(opts, 2, |rng| {
        let (w, u) = (rng.normal_tensor(&[c, c]), rng.normal_tensor(&[c, c]));
        (rng.normal_tensor(&[t, c, 2]), graph_fn(move |g, x| {
            let (w, u) = (g.constant(w.clone()), g.constant(u.clone()));
            vn_relu(g, x, w, u)
        }))
    });
    let attn = layer_dev(opts, 3, |rng| {
        let ws: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[c, c])).collect();
        (rng.normal_tensor(&[t, c, 2]), graph_fn(move |g, x| {
            let mut qkz = Vec::new();
            for w in &ws {
                let w = g.constant(w.clone());
                qkz.push(vn_linear(g, w, x)?);
            }
            vn_attention(g, qkz[0], qkz[1], qkz[2])
        }))
    });
    let ln = layer_dev(opts, 4, |rng| {
        let gamma = rng.uniform_tensor(&[c], 0.5, 1.5);
        let beta = rng.uniform_tensor(&[c], -0.5, 0.5);
        (rng.normal_tensor(&[t, c, 2]), graph_fn(move |g, x| {
            let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            vn_layernorm(g, x, gm, bt)
        }))
    });
    let block = layer_dev(opts, 5, |rng| {
        let p = block_params(rng, c);
        (rng.normal_tensor(&[2, t, c, 2]), graph_fn(move |g, x| {
            let b = p.bind_frozen(g);
            vn_transformer_block(g, x, &b, "blk", 1)
        }))
    });
    let model_cfg = ModelConfig {
        variant,
        ..opts.model.clone()
    };
    Ok(vec![
        Property::below("equivariance.vn_linear", lin, LAYER_EQUIVARIANCE_TOL),
        Property::below("equivariance.vn_relu", relu, LAYER_EQUIVARIANCE_TOL),
        Property::below("equivariance.vn_attention", attn, LAYER_EQUIVARIANCE_TOL),
        Property::below("equivariance.vn_layernorm", ln, LAYER_EQUIVARIANCE_TOL),
        Property::below("equivariance.vn_block", block, LAYER_EQUIVARIANCE_TOL),
        Property::below("equivariance.denoise", denoise_dev(opts, &model_cfg)?, MODEL_EQUIVARIANCE_TOL),
    ])
}

fn scene_config(cfg: &ModelConfig) -> SceneConfig {
    SceneConfig {
        t_his: cfg.t_his,
        t_pre: cfg.t_pre,
        ..SceneConfig::default()
    }
}

/// Evaluates ε̂ for every (scene, y_k, k) triple in one batch.
fn eps_batch(model: &Model, params: &Params, scenes: &[&Scene], y: &Tensor, ks: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let (c, hist) = model.condition(&mut g, &p, scenes)?;
    let yv = g.constant(y.clone());
    let out = model.denoise(&mut g, &p, yv, ks, c, hist)?;
    Ok(g.value(out).clone())
}

/// Denoiser equivariance: for each random input (parameters, scene, y_k, k)
/// all rotated copies are evaluated as one batch.
pub fn denoise_dev(opts: &CheckOptions, cfg: &ModelConfig) -> Result<f64> {
    let model = Model::new(cfg.clone())?;
    let sc = scene_config(cfg);
    let mut rng = SeededRng::stream(opts.seed, 6);
    let per = cfg.t_pre * 2;
    let mut worst: f64 = 0.0;
    for i in 0..opts.inputs {
        let params = randomized_params(cfg, opts.seed.wrapping_add(i as u64))?;
        let neighbors = rng.below(9);
        let scene = random_scene(&mut rng, neighbors, &sc);
        let y = rng.normal_tensor(&[1, cfg.t_pre, 2]);
        let k = 1 + rng.below(opts.schedule.0);
        let base = eps_batch(&model, &params, &[&scene], &y, &[k])?;
        let rots = rotations(&mut rng, opts.rotations);
        let scenes: Vec<Scene> = rots.iter().map(|r| scene.rotate(r)).collect();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let mut ys = Vec::with_capacity(per * rots.len());
        for r in &rots {
            ys.extend_from_slice(rotate(&y, r)?.data());
        }
        let ys = Tensor::new(vec![rots.len(), cfg.t_pre, 2], ys)?;
        let out = eps_batch(&model, &params, &refs, &ys, &vec![k; rots.len()])?;
        for (j, r) in rots.iter().enumerate() {
            let got = Tensor::new(vec![1, cfg.t_pre, 2], out.data()[j * per..(j + 1) * per].to_vec())?;
            worst = worst.max(rel_dev(&got, &rotate(&base, r)?));
        }
    }
    Ok(worst)
}

/// Context encoder invariance on scenes with 0, 1 and 8 neighbors.
pub fn invariance_suite(opts: &CheckOptions, cfg: &ModelConfig) -> Result<Vec<Property>> {
    let spec = cfg.context_spec();
    let sc = scene_config(cfg);
    let mut rng = SeededRng::stream(opts.seed, 8);
    let mut out = Vec::new();
    for n in [0, 1, 8] {
        let params = randomized_params(cfg, opts.seed.wrapping_add(100 + n as u64))?;
        let mut worst: f64 = 0.0;
        for _ in 0..opts.invariance_scenes.max(1) {
            let scene = random_scene(&mut rng, n, &sc);
            let base = encode_scene(&scene, &params, &spec)?;
            for r in rotations(&mut rng, opts.rotations) {
                worst = worst.max(rel_dev(&encode_scene(&scene.rotate(&r), &params, &spec)?, &base));
            }
        }
        out.push(Property::below(format!("invariance.encoder_{n}_neighbors"), worst, INVARIANCE_TOL));
    }
    Ok(out)
}

/// Sampling with a rotated scene and rotated noises against the rotated
/// baseline sample.
pub fn sampling_dev(opts: &CheckOptions, cfg: &ModelConfig, s: &DiffusionSchedule) -> Result<f64> {
    let model = Model::new(cfg.clone())?;
    let params = randomized_params(cfg, opts.seed)?;
    let mut rng = SeededRng::stream(opts.seed, 9);
    let scene = random_scene(&mut rng, 3, &scene_config(cfg));
    let noise_seed = rng.next_u64();
    let base = model.sample(&params, &[&scene], 1, s, &mut GaussianNoise::new(noise_seed), &[], &mut Vec::new())?;
    let mut worst: f64 = 0.0;
    for r in rotations(&mut rng, 2) {
        let mut noise = RotatedNoise {
            inner: GaussianNoise::new(noise_seed),
            rotation: r,
        };
        let got = model.sample(&params, &[&scene.rotate(&r)], 1, s, &mut noise, &[], &mut Vec::new())?;
        worst = worst.max(rel_dev(&got, &rotate(&base, &r)?));
    }
    Ok(worst)
}

/// Gradient check of `Σ r ⊙ f(inputs)` with respect to each input in turn.
/// The readout `r` comes from its own stream. Coordinates whose difference
/// stencil crosses a kink, or whose gradient is below the difference
/// resolution, do not count.
fn check_all(
    inputs: &[Tensor],
    readout_seed: u64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let shape = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs)?;
        g.shape(out).to_vec()
    };
    let r = SeededRng::stream(readout_seed, 0xdead).normal_tensor(&shape);
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let report = grad_report(
            |g, v| {
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { v } else { g.constant(t.clone()) })
                    .collect();
                let out = f(g, &vs)?;
                let rv = g.constant(r.clone());
                let prod = g.mul(out, rv)?;
                g.sum_all(prod)
            },
            &inputs[i],
            None,
        )?;
        worst = worst.max(report.resolved_max_rel_err().0);
    }
    Ok(worst)
}

/// Gradient checks of every layer and of the training loss, each at
/// `grad_points` random points.
pub fn gradient_suite(opts: &CheckOptions) -> Result<Vec<Property>> {
    let (t, c) = (TOKENS, CHANNELS);
    let mut rng = SeededRng::stream(opts.seed, 10);
    let mut worst = [0.0f64; 9];
    for point in 0..opts.grad_points {
        let rs = opts.seed.wrapping_mul(1000).wrapping_add(point as u64);
        let x = rng.normal_tensor(&[t, c, 2]);
        let w = rng.normal_tensor(&[c, c]);
        let u = rng.normal_tensor(&[c, c]);
        worst[0] = worst[0].max(check_all(&[x.clone(), w.clone()], rs, |g, v| vn_linear(g, v[1], v[0]))?);
        worst[1] = worst[1].max(check_all(&[x.clone(), w.clone(), u.clone()], rs, |g, v| {
            vn_relu(g, v[0], v[1], v[2])
        })?);
        let (q, k, z) = (rng.normal_tensor(&[t, c, 2]), rng.normal_tensor(&[t + 1, c, 2]), rng.normal_tensor(&[t + 1, c, 2]));
        worst[2] = worst[2].max(check_all(&[q, k, z], rs, |g, v| vn_attention(g, v[0], v[1], v[2]))?);
        let gamma = rng.uniform_tensor(&[c], 0.5, 1.5);
        let beta = rng.uniform_tensor(&[c], -0.5, 0.5);
        worst[3] = worst[3].max(check_all(&[x.clone(), gamma, beta], rs, |g, v| {
            vn_layernorm(g, v[0], v[1], v[2])
        })?);

        let bp = block_params(&mut rng, c);
        let names: Vec<String> = bp.names().cloned().collect();
        let mut tensors = vec![rng.normal_tensor(&[1, t, c, 2])];
        tensors.extend(bp.iter().map(|(_, t)| t.clone()));
        worst[4] = worst[4].max(check_all(&tensors, rs, |g, v| {
            let mut p = Params::new().bind_frozen(g);
            for (n, &var) in names.iter().zip(&v[1..]) {
                p = p.with(n, var);
            }
            vn_transformer_block(g, v[0], &p, "blk", 1)
        })?);

        let d = 6;
        let mut gp = Params::new();
        init_gru(&mut gp, "gru", d, &mut rng);
        let gnames: Vec<String> = gp.names().cloned().collect();
        let mut tensors = vec![rng.normal_tensor(&[3, 2]), rng.normal_tensor(&[3, d])];
        tensors.extend(gp.iter().map(|(_, t)| t.clone()));
        worst[5] = worst[5].max(check_all(&tensors, rs, |g, v| {
            let mut p = Params::new().bind_frozen(g);
            for (n, &var) in gnames.iter().zip(&v[2..]) {
                p = p.with(n, var);
            }
            gru_step_graph(g, v[0], v[1], &p, "gru")
        })?);

        let mut ap = Params::new();
        init_gat(&mut ap, "gat", d, 5, 3, &mut rng);
        let anames: Vec<String> = ap.names().cloned().collect();
        let nodes = 4;
        let mut mask = vec![false; nodes * nodes];
        for i in 0..nodes {
            mask[i * nodes + i] = true;
            mask[i * nodes] = true;
            mask[i] = true;
        }
        let mut tensors = vec![rng.normal_tensor(&[nodes, d])];
        tensors.extend(ap.iter().map(|(_, t)| t.clone()));
        worst[6] = worst[6].max(check_all(&tensors, rs, |g, v| {
            let mut p = Params::new().bind_frozen(g);
            for (n, &var) in anames.iter().zip(&v[1..]) {
                p = p.with(n, var);
            }
            Ok(gat_graph(g, v[0], &mask, &p, "gat")?.0)
        })?);

        let cd = 4;
        let cond_names = ["bb.temb.w", "bb.temb.b", "bb.cond.w", "bb.cond.b"];
        let mut tensors = vec![
            rng.normal_tensor(&[2, cd]),
            rng.normal_tensor(&[cd, cd]),
            rng.normal_tensor(&[cd]),
            rng.normal_tensor(&[2 * cd, 2 * cd]),
            rng.normal_tensor(&[2 * cd]),
        ];
        // Keep pre-activations away from the LeakyReLU kink.
        tensors[4] = tensors[4].map(|b| b + 3.0f64.copysign(b));
        let ks = [1 + rng.below(200), 1 + rng.below(200)];
        worst[7] = worst[7].max(check_all(&tensors, rs, |g, v| {
            let mut p = Params::new().bind_frozen(g);
            for (n, &var) in cond_names.iter().zip(&v[1..]) {
                p = p.with(n, var);
            }
            conditioning(g, v[0], &ks, &p, cd)
        })?);

        worst[8] = worst[8].max(training_loss_grad(opts.seed.wrapping_add(point as u64))?);
    }
    let names = [
        "vn_linear",
        "vn_relu",
        "vn_attention",
        "vn_layernorm",
        "vn_block",
        "gru_step",
        "gat",
        "conditioning",
        "training_loss",
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| Property::below(format!("gradient.{n}"), w, GRAD_TOL))
        .collect())
}

/// Gradient check of the end-to-end training loss of a small model. Each
/// tensor is probed at its three largest-gradient coordinates; smaller
/// entries can sit below what central differences resolve.
pub fn training_loss_grad(seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        d_model: 8,
        channels: 4,
        layers: 1,
        gat_heads: 2,
        t_his: 5,
        t_pre: 4,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg.clone())?;
    let params = randomized_params(&cfg, seed)?;
    let mut rng = SeededRng::stream(seed, 11);
    let scenes: Vec<Scene> = (0..2)
        .map(|i| random_scene(&mut rng, i + 1, &scene_config(&cfg)))
        .collect();
    let refs: Vec<&Scene> = scenes.iter().collect();
    let s = make_schedule(200, 1e-4, 5e-2)?;
    let noise_seed = rng.next_u64();

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = model.loss(&mut g, &bound, &refs, &s, &mut SeededRng::new(noise_seed))?.0;
    let grads = g.backward_scalar(loss)?.named(&g);
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        let ga = &grads[name];
        let mut coords: Vec<usize> = (0..t.len()).collect();
        coords.sort_by(|&a, &b| ga.data()[b].abs().total_cmp(&ga.data()[a].abs()));
        coords.truncate(3);
        let report = grad_report(
            |g, v| {
                let b = params.bind_frozen(g).with(name, v);
                Ok(model.loss(g, &b, &refs, &s, &mut SeededRng::new(noise_seed))?.0)
            },
            t,
            Some(&coords),
        )?;
        worst = worst.max(report.resolved_max_rel_err().0);
    }
    Ok(worst)
}

/// Schedule identities, forward-process marginals and the oracle loss.
pub fn diffusion_suite(opts: &CheckOptions) -> Result<Vec<Property>> {
    let (k, b1, bk) = opts.schedule;
    let s = make_schedule(k, b1, bk)?;
    let mut ident: f64 = 0.0;
    for i in 2..=k {
        ident = ident.max((s.alpha_bar(i)? / s.alpha_bar(i - 1)? - s.alpha(i)?).abs());
    }
    ident = ident.max((s.alpha_bar(1)? - s.alpha(1)?).abs());

    // Iterate the one-step kernel from a fixed y0 and compare the sample
    // mean and variance at a few steps with the closed-form marginal.
    let mut rng = SeededRng::stream(opts.seed, 12);
    let y0 = [1.5, -0.7];
    let probe = [1, k / 4, k / 2, k];
    let n = opts.marginal_draws;
    let mut sums = vec![[0.0f64; 2]; probe.len()];
    let mut sq = vec![[0.0f64; 2]; probe.len()];
    for _ in 0..n {
        let mut y = y0;
        let mut pi = 0;
        for step in 1..=k {
            let (a, b) = (s.alpha(step)?.sqrt(), s.beta(step)?.sqrt());
            for v in y.iter_mut() {
                *v = a * *v + b * rng.normal();
            }
            if pi < probe.len() && probe[pi] == step {
                for c in 0..2 {
                    sums[pi][c] += y[c];
                    sq[pi][c] += y[c] * y[c];
                }
                pi += 1;
            }
        }
    }
    let nf = n as f64;
    let mut z: f64 = 0.0;
    for (pi, &step) in probe.iter().enumerate() {
        let ab = s.alpha_bar(step)?;
        let var = 1.0 - ab;
        for c in 0..2 {
            let mean = sums[pi][c] / nf;
            let svar = sq[pi][c] / nf - mean * mean;
            z = z.max((mean - ab.sqrt() * y0[c]).abs() / (var / nf).sqrt());
            z = z.max((svar - var).abs() / (var * (2.0 / (nf - 1.0)).sqrt()));
        }
    }

    let y0t = rng.normal_tensor(&[4, 25, 2]);
    let mut g = Graph::new();
    let (loss, _) = training_loss(&mut g, &y0t, &s, &mut rng, |g, nb| Ok(g.constant(nb.eps.clone())))?;
    let oracle = g.value(loss).item();

    Ok(vec![
        Property::below("diffusion.schedule_identity", ident, SCHEDULE_TOL),
        Property::below("diffusion.marginal_z", z, MARGINAL_SE),
        Property::below("diffusion.oracle_loss", oracle, ORACLE_LOSS_TOL),
    ])
}

/// Everything `equidiff check` runs.
pub fn full_suite(opts: &CheckOptions, variant: Variant) -> Result<Vec<Property>> {
    Ok(timed_suites(opts, variant)?.into_iter().flat_map(|s| s.properties).collect())
}

/// One suite's properties and wall time.
#[derive(Clone, Debug)]
pub struct SuiteRun {
    pub name: &'static str,
    pub elapsed: Duration,
    pub properties: Vec<Property>,
}

fn timed(name: &'static str, run: impl FnOnce() -> Result<Vec<Property>>) -> Result<SuiteRun> {
    let start = Instant::now();
    let properties = run()?;
    Ok(SuiteRun {
        name,
        elapsed: start.elapsed(),
        properties,
    })
}

/// Every suite in order, each with its wall time.
pub fn timed_suites(opts: &CheckOptions, variant: Variant) -> Result<Vec<SuiteRun>> {
    let cfg = ModelConfig {
        variant,
        ..opts.model.clone()
    };
    let (k, b1, bk) = opts.schedule;
    let s = make_schedule(k, b1, bk)?;
    Ok(vec![
        timed("equivariance", || equivariance_suite(opts, variant))?,
        timed("invariance", || invariance_suite(opts, &cfg))?,
        timed("sampling", || {
            Ok(vec![Property::below(
                "equivariance.sampling",
                sampling_dev(opts, &cfg, &s)?,
                MODEL_EQUIVARIANCE_TOL,
            )])
        })?,
        timed("gradient", || gradient_suite(opts))?,
        timed("diffusion", || diffusion_suite(opts))?,
    ])
}
