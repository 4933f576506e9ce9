//! DDPM machinery over offset sequences: linear β schedule, closed-form
//! forward noising, the simplified ε-prediction loss, the ancestral sampler,
//! an EMA weight shadow and the Adam optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::SeededRng;
use crate::tensorcore::{Graph, Tensor, Var};
use crate::vn::{rotate, RotationMatrix};

/// β_k linear in k, with α_k = 1 − β_k and ᾱ_k = Π_{j≤k} α_j. Steps are
/// 1-based throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(k: usize, beta1: f64, beta_k: f64) -> Result<DiffusionSchedule> {
    if k < 2 || !(beta1 > 0.0 && beta1 <= beta_k && beta_k < 1.0) {
        return Err(Error::Config(format!(
            "invalid schedule: K={k}, beta range [{beta1}, {beta_k}]"
        )));
    }
    let betas: Vec<f64> = (0..k)
        .map(|i| beta1 + (beta_k - beta1) * i as f64 / (k - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut acc = 1.0;
    let alpha_bars = alphas
        .iter()
        .map(|a| {
            acc *= a;
            acc
        })
        .collect();
    Ok(DiffusionSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            return Err(Error::Input(format!("diffusion step {k} not in 1..={}", self.steps())));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        Ok(self.betas[self.check(k)?])
    }

    pub fn alpha(&self, k: usize) -> Result<f64> {
        Ok(self.alphas[self.check(k)?])
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(k)?])
    }
}

/// `√ᾱ_k · y0 + √(1 − ᾱ_k) · ε`.
pub fn q_sample(y0: &Tensor, k: usize, eps: &Tensor, s: &DiffusionSchedule) -> Result<Tensor> {
    let ab = s.alpha_bar(k)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    y0.zip_map(eps, |y, e| a * y + b * e)
}

/// Forward-noised batch handed to the denoiser during training.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedBatch {
    /// Step per example, 1-based.
    pub ks: Vec<usize>,
    pub eps: Tensor,
    pub y_k: Tensor,
}

/// Draws a step and a noise tensor per example of `y0` (`[B, ...]`) and
/// returns the noised batch.
pub fn noise_batch(y0: &Tensor, s: &DiffusionSchedule, rng: &mut SeededRng) -> Result<NoisedBatch> {
    let b = *y0
        .shape()
        .first()
        .ok_or_else(|| Error::Input("training batch needs a leading batch axis".into()))?;
    let ks: Vec<usize> = (0..b).map(|_| 1 + rng.below(s.steps())).collect();
    let eps = rng.normal_tensor(y0.shape());
    let per = y0.len() / b.max(1);
    let mut y_k = Vec::with_capacity(y0.len());
    for (i, &k) in ks.iter().enumerate() {
        let ab = s.alpha_bar(k)?;
        let (a, c) = (ab.sqrt(), (1.0 - ab).sqrt());
        let ys = &y0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        y_k.extend(ys.iter().zip(es).map(|(y, e)| a * y + c * e));
    }
    Ok(NoisedBatch {
        ks,
        eps,
        y_k: Tensor::new(y0.shape().to_vec(), y_k)?,
    })
}

/// Mean over the batch of `||ε − ε̂||²`. `denoiser` builds ε̂ on the graph
/// from the noised batch.
pub fn training_loss<F>(
    g: &mut Graph,
    y0: &Tensor,
    s: &DiffusionSchedule,
    rng: &mut SeededRng,
    denoiser: F,
) -> Result<(Var, NoisedBatch)>
where
    F: FnOnce(&mut Graph, &NoisedBatch) -> Result<Var>,
{
    let batch = noise_batch(y0, s, rng)?;
    let eps_hat = denoiser(g, &batch)?;
    if g.shape(eps_hat) != batch.eps.shape() {
        return Err(Error::Shape {
            op: "training_loss",
            lhs: g.shape(eps_hat).to_vec(),
            rhs: batch.eps.shape().to_vec(),
        });
    }
    let eps = g.constant(batch.eps.clone());
    let diff = g.sub(eps, eps_hat)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq)?;
    let loss = g.scale(total, 1.0 / y0.shape()[0] as f64);
    Ok((loss, batch))
}

/// `(y_k − β_k/√(1−ᾱ_k) · ε̂)/√α_k + √β_k · z`, with `z` ignored at `k = 1`.
pub fn reverse_step(y_k: &Tensor, k: usize, eps_hat: &Tensor, z: &Tensor, s: &DiffusionSchedule) -> Result<Tensor> {
    let (beta, alpha, ab) = (s.beta(k)?, s.alpha(k)?, s.alpha_bar(k)?);
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mean = y_k.zip_map(eps_hat, |y, e| inv * (y - coef * e))?;
    if k == 1 {
        return Ok(mean);
    }
    let sigma = beta.sqrt();
    mean.zip_map(z, |m, zz| m + sigma * zz)
}

/// Source of the standard-normal draws used by the sampler.
pub trait NoiseSource {
    fn draw(&mut self, shape: &[usize]) -> Tensor;
}

pub struct GaussianNoise(pub SeededRng);

impl GaussianNoise {
    pub fn new(seed: u64) -> Self {
        Self(SeededRng::new(seed))
    }
}

impl NoiseSource for GaussianNoise {
    fn draw(&mut self, shape: &[usize]) -> Tensor {
        self.0.normal_tensor(shape)
    }
}

/// Wraps another source and rotates every drawn 2-vector.
pub struct RotatedNoise<N> {
    pub inner: N,
    pub rotation: RotationMatrix,
}

impl<N: NoiseSource> NoiseSource for RotatedNoise<N> {
    fn draw(&mut self, shape: &[usize]) -> Tensor {
        let t = self.inner.draw(shape);
        rotate(&t, &self.rotation).expect("sampler noise has a trailing extent of 2")
    }
}

/// Ancestral sampling from `y_K ~ N(0, I)` down to `y_0`. `denoiser(y_k, k)`
/// returns ε̂. States `y_k` for `k` in `record` are appended to `trace` as
/// they occur (`k = K` is the initial noise, `k = 0` the result).
pub fn sample<D>(
    mut denoiser: D,
    shape: &[usize],
    s: &DiffusionSchedule,
    noise: &mut dyn NoiseSource,
    record: &[usize],
    trace: &mut Vec<(usize, Tensor)>,
) -> Result<Tensor>
where
    D: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let big_k = s.steps();
    let mut y = noise.draw(shape);
    if record.contains(&big_k) {
        trace.push((big_k, y.clone()));
    }
    for k in (1..=big_k).rev() {
        let eps_hat = denoiser(&y, k)?;
        let z = if k > 1 { noise.draw(shape) } else { Tensor::zeros(shape) };
        y = reverse_step(&y, k, &eps_hat, &z, s)?;
        if record.contains(&(k - 1)) {
            trace.push((k - 1, y.clone()));
        }
    }
    Ok(y)
}

/// `shadow ← decay · shadow + (1 − decay) · params`.
pub fn ema_update(shadow: &mut Params, params: &Params, decay: f64) -> Result<()> {
    shadow.check_same_layout(params)?;
    for ((_, s), (_, p)) in shadow.iter_mut().zip(params.iter()) {
        for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers share the parameter layout.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let zeros: Params = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient entry are treated
    /// as having zero gradient.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape {
                        op: "adam",
                        lhs: g.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                p.data_mut()[i] -= update;
            }
        }
        Ok(())
    }
}
