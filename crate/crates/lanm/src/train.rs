//! Deterministic Adam-based maximization of the ELBO, with per-epoch
//! logging and periodic checkpointing.
//!
//! The loop is plain stochastic gradient ascent: each epoch visits every
//! dataset row exactly once in a seeded shuffled order, builds the objective
//! on a fresh tape per mini-batch, differentiates the *negated* objective,
//! and applies a standard Adam update. Reparameterization noise and the
//! shuffle order are both derived from `(seed, epoch)`, so a run is a pure
//! function of its inputs: identical configs produce bit-identical weights.
//!
//! The loop itself is single-threaded: one tape, one writer to the model.
//! Concurrency lives a level up (independent seeds train independent model
//! instances).

use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{one_hot, LanmModel};
use crate::rng;
use crate::scm::Dataset;

const STREAM_SHUFFLE: u64 = 22;
const STREAM_TRAIN_NOISE: u64 = 23;

fn default_lr() -> f64 {
    0.001
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    256
}
fn default_epochs() -> usize {
    600
}

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// When set, overrides the model's sparsity weight for this run.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = final only).
    #[serde(default)]
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            gamma: None,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        if let Some(g) = self.gamma {
            if !g.is_finite() || g < 0.0 {
                return Err(Error::Config(format!(
                    "gamma {g} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Batch-weighted means of the objective terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub l1: f64,
    pub total: f64,
}

/// One entry per completed epoch, plus the run's wall-clock time (kept in
/// memory only — it never reaches serialized artifacts, which must be
/// reproducible bit for bit).
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub wall_clock: Duration,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,recon,kl,l1,total";

impl TrainLog {
    /// Render as CSV with the exact header `epoch,recon,kl,l1,total`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.recon, e.kl, e.l1, e.total
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<TrainLog> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == TRAIN_LOG_HEADER => {}
            other => {
                return Err(Error::Data(format!(
                    "training log header {:?} is not {TRAIN_LOG_HEADER:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut epochs = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Data(format!(
                    "training log row {i} has {} fields, expected 5",
                    fields.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Data(format!("training log row {i}: bad number {s:?}")))
            };
            epochs.push(EpochStats {
                epoch: fields[0]
                    .parse()
                    .map_err(|_| Error::Data(format!("training log row {i}: bad epoch")))?,
                recon: num(fields[1])?,
                kl: num(fields[2])?,
                l1: num(fields[3])?,
                total: num(fields[4])?,
            });
        }
        Ok(TrainLog {
            epochs,
            wall_clock: Duration::ZERO,
        })
    }

    /// Statistical improvement check: the median objective over the last
    /// tenth of epochs exceeds the median over the first tenth.
    pub fn monotone_trend(&self) -> bool {
        let n = self.epochs.len();
        if n < 2 {
            return false;
        }
        let k = (n / 10).max(1);
        let median = |stats: &[EpochStats]| -> f64 {
            let mut vals: Vec<f64> = stats.iter().map(|e| e.total).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).expect("finite logs"));
            if vals.len() % 2 == 1 {
                vals[vals.len() / 2]
            } else {
                0.5 * (vals[vals.len() / 2 - 1] + vals[vals.len() / 2])
            }
        };
        median(&self.epochs[n - k..]) > median(&self.epochs[..k])
    }
}

// ── Adam ─────────────────────────────────────────────────────────────────

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh zero-moment state matching a parameter list.
    pub fn new(params: &[(String, Tensor)]) -> AdamState {
        AdamState {
            step: 0,
            m: params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
            v: params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First-moment estimate of parameter `k` (read-only).
    pub fn first_moment(&self, k: usize) -> &Tensor {
        &self.m[k]
    }

    /// Second-moment estimate of parameter `k` (read-only).
    pub fn second_moment(&self, k: usize) -> &Tensor {
        &self.v[k]
    }
}

/// One bias-corrected Adam update over `grads` (gradients of a *loss*, i.e.
/// the direction of steepest increase of the quantity being minimized).
pub fn adam_step(
    params: &mut [(String, Tensor)],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension(format!(
            "adam step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient for parameter {name} is {}x{}, expected {}x{}",
                g.rows(),
                g.cols(),
                p.rows(),
                p.cols()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient for parameter {name} is not finite"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let pd = p.data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            pd[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

// ── Training loop ────────────────────────────────────────────────────────

/// Shuffled row order for one epoch, a pure function of `(seed, epoch)`.
pub(crate) fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[STREAM_SHUFFLE, epoch as u64]);
    order.shuffle(&mut r);
    order
}

fn gather_batch(
    ds: &Dataset,
    rows: &[usize],
    ell: usize,
    noise_rng: &mut rng::Rng,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = ds.x.cols();
    let mut x = Tensor::zeros(rows.len(), d);
    let mut labels = Vec::with_capacity(rows.len());
    for (r, &src) in rows.iter().enumerate() {
        for c in 0..d {
            x.set(r, c, ds.x.get(src, c));
        }
        labels.push(ds.u[src]);
    }
    let u = one_hot(&labels, ds.m)?;
    let mut noise = Tensor::zeros(rows.len(), ell);
    for r in 0..rows.len() {
        for c in 0..ell {
            let e: f64 = rand::Rng::sample(noise_rng, rand_distr::StandardNormal);
            noise.set(r, c, e);
        }
    }
    Ok((x, u, noise))
}

/// Run the training loop, mutating `model` in place.
///
/// When `checkpoint_dir` is given, a checkpoint is written every
/// `checkpoint_interval` epochs (when nonzero) and once more at the end. If
/// the objective or a gradient turns non-finite, training aborts with an
/// error and the most recently written checkpoint is left untouched on
/// disk; nothing is overwritten by the failed state.
///
/// `start_step` offsets the step count recorded in checkpoints, so a run
/// resumed from a step-`k` checkpoint reports cumulative steps. Optimizer
/// moments always start fresh — checkpoints carry weights, not optimizer
/// state.
pub fn train(
    model: &mut LanmModel,
    dataset: &Dataset,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    start_step: u64,
) -> Result<TrainLog> {
    config.validate()?;
    let cfg = model.config().clone();
    if dataset.x.cols() != cfg.x_dim {
        return Err(Error::Dimension(format!(
            "dataset has {} observed columns, model expects {}",
            dataset.x.cols(),
            cfg.x_dim
        )));
    }
    if dataset.m != cfg.u_dim {
        return Err(Error::Dimension(format!(
            "dataset has {} segments, model expects {}",
            dataset.m, cfg.u_dim
        )));
    }
    let n = dataset.rows();
    if n == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    if let Some(g) = config.gamma {
        model.set_gamma(g)?;
    }

    let started = Instant::now();
    let mut state = AdamState::new(model.params());
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let order = epoch_permutation(n, config.seed, epoch);
        let mut noise_rng = rng::stream(config.seed, &[STREAM_TRAIN_NOISE, epoch as u64]);
        let (mut recon, mut kl, mut l1, mut total) = (0.0, 0.0, 0.0, 0.0);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, u, noise) = gather_batch(dataset, chunk, cfg.ell, &mut noise_rng)?;
            let mut tape = Tape::new();
            let graph = model.build_elbo(&mut tape, &x, &u, &noise)?;
            let stats = crate::model::breakdown(&tape, &graph).map_err(|e| {
                Error::NonFinite(format!(
                    "training aborted at epoch {epoch} step {step}: {e}; \
                     the last checkpoint is retained"
                ))
            })?;
            let neg = tape.scalar_mul(graph.total, -1.0)?;
            let grads = tape.backward(neg)?;
            let grad_tensors: Vec<Tensor> = graph
                .param_ids
                .iter()
                .map(|&id| grads.wrt(id).clone())
                .collect();
            adam_step(model.params_mut(), &grad_tensors, &mut state, config).map_err(|e| {
                Error::NonFinite(format!(
                    "training aborted at epoch {epoch} step {step}: {e}; \
                     the last checkpoint is retained"
                ))
            })?;
            let w = chunk.len() as f64;
            recon += w * stats.recon;
            kl += w * stats.kl;
            l1 += w * stats.l1;
            total += w * stats.total;
        }
        let nf = n as f64;
        log.epochs.push(EpochStats {
            epoch,
            recon: recon / nf,
            kl: kl / nf,
            l1: l1 / nf,
            total: total / nf,
        });
        if let Some(dir) = checkpoint_dir {
            let interval = config.checkpoint_interval;
            if interval > 0 && (epoch + 1) % interval == 0 && epoch + 1 < config.epochs {
                model.save_checkpoint(dir, start_step + state.step_count(), config.seed)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        model.save_checkpoint(dir, start_step + state.step_count(), config.seed)?;
    }
    log.wall_clock = started.elapsed();
    Ok(log)
}
