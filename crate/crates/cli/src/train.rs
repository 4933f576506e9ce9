use equidiff_core::backbone::Model;
use equidiff_core::data::Scene;
use equidiff_core::diffusion::{ema_update, Adam};
use equidiff_core::error::{Error, Result};
use equidiff_core::rng::SeededRng;
use equidiff_core::tensorcore::Graph;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

// Independent random streams derived from the run seed.
const STREAM_BATCHES: u64 = 1;
const STREAM_NOISE: u64 = 2;
/// Seed of the fixed noise draw used by [`probe_loss`].
pub const PROBE_SEED: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Minibatch loss at step 0, every `log_every` steps and the last step.
    pub log: Vec<LogRow>,
}

pub fn log_csv(log: &[LogRow]) -> String {
    let mut out = String::from("step,loss\n");
    for r in log {
        out.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    out
}

/// EMA decay after `updates` previous updates.
pub fn ema_decay(cfg: &RunConfig, updates: u64) -> f64 {
    let d = cfg.train.ema_decay;
    if cfg.train.ema_warmup {
        d.min((1.0 + updates as f64) / (10.0 + updates as f64))
    } else {
        d
    }
}

/// The scenes on which [`probe_loss`] is measured: the first
/// `probe_scenes` training scenes.
pub fn probe_set<'a>(cfg: &RunConfig, scenes: &'a [Scene]) -> Vec<&'a Scene> {
    scenes.iter().take(cfg.train.probe_scenes.max(1)).collect()
}

/// Loss on a fixed probe batch with a fixed noise draw, so values from
/// different parameter sets are directly comparable.
pub fn probe_loss(cfg: &RunConfig, params: &equidiff_core::params::Params, scenes: &[Scene]) -> Result<f64> {
    let model = Model::new(cfg.model.clone())?;
    let s = cfg.diffusion.schedule()?;
    model.eval_loss(params, &probe_set(cfg, scenes), &s, PROBE_SEED)
}

/// Runs `cfg.train.steps` Adam steps on minibatches drawn from `scenes`
/// (epoch-wise shuffles) and keeps an EMA shadow of the weights.
pub fn train(cfg: &RunConfig, scenes: &[Scene], mut on_log: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Input("no training scenes".into()));
    }
    let model = Model::new(cfg.model.clone())?;
    let schedule = cfg.diffusion.schedule()?;
    let mut params = model.init(cfg.seed)?;
    let mut ema = params.clone();
    let mut adam = Adam::new(cfg.train.adam(), &params);
    let mut batch_rng = SeededRng::stream(cfg.seed, STREAM_BATCHES);
    let mut noise_rng = SeededRng::stream(cfg.seed, STREAM_NOISE);

    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let steps = cfg.train.steps;
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.train.batch);
        while batch.len() < cfg.train.batch {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                batch_rng.shuffle(&mut order);
            }
            batch.push(&scenes[order.pop().unwrap()]);
        }

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        // Diverged weights can turn non-finite inside the forward pass,
        // before a loss value exists.
        let (loss, _) = model
            .loss(&mut g, &bound, &batch, &schedule, &mut noise_rng)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step, loss: f64::NAN },
                e => e,
            })?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        if step % cfg.train.log_every == 0 || step + 1 == steps {
            let row = LogRow { step, loss: value };
            on_log(&row);
            log.push(row);
        }
        let grads = g.backward_scalar(loss)?;
        adam.step(&mut params, &grads.named(&g))?;
        ema_update(&mut ema, &params, ema_decay(cfg, adam.steps_taken() - 1))?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            step: adam.steps_taken(),
            params,
            ema,
        },
        log,
    })
}
