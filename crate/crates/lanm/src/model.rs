//! The learnable model: a conditional VAE whose prior is a masked
//! autoregressive conditional Gaussian.
//!
//! For a batch of observations `x` with one-hot segment labels `u`:
//!
//! - an encoder backbone maps `[x, u]` to a shared feature vector (one
//!   backbone for all node heads);
//! - node `i`'s posterior head maps `[feature, z_{<i} ⊙ m_i(u), u]` to
//!   `(mu, log sigma^2)` and samples `z_i = mu + sigma * eps_i`
//!   (reparameterized, autoregressive in causal order);
//! - node `i`'s prior head maps `[z_{<i} ⊙ m_i(u), u]` to its own
//!   `(mu, log sigma^2)`, consuming the *posterior* samples of the parents;
//! - the masks `m_i(u)` are unconstrained affine functions of `u`, L1
//!   penalized so their support reveals the latent graph;
//! - a decoder maps `z` back to observation space under a fixed-variance
//!   Gaussian observation model.
//!
//! The objective is the evidence lower bound
//! `total = reconstruction - KL - gamma * L1`, maximized. The whole
//! objective is built on the reverse-mode tape, so its gradients come from
//! [`crate::autodiff`] and are finite-difference checkable end to end.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{mm_nn, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::io;
use crate::rng;

/// `log sigma^2` head outputs are clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub const LOGVAR_CLAMP: f64 = 10.0;
/// Mask parameters are initialized uniformly in `±MASK_INIT_BOUND`, keeping
/// the L1 term's kink at zero away from the initial point so finite
/// differences of the objective stay clean.
pub const MASK_INIT_BOUND: f64 = 0.1;

const STREAM_INIT: u64 = 21;

fn default_hidden() -> usize {
    64
}
fn default_gamma() -> f64 {
    0.01
}
fn default_slope() -> f64 {
    0.01
}
fn default_sigma_x_sq() -> f64 {
    0.01
}

/// Architecture and objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent dimension.
    pub ell: usize,
    /// Observation dimension D.
    pub x_dim: usize,
    /// One-hot label width M.
    pub u_dim: usize,
    /// Hidden width of every MLP.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Sparsity weight on the mask L1 penalty.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// LeakyReLU slope used throughout.
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Fixed observation variance of the Gaussian reconstruction model.
    #[serde(default = "default_sigma_x_sq")]
    pub sigma_x_sq: f64,
    /// Ablation mode: force every mask to zero, so the prior factorizes
    /// conditionally independently given `u`.
    #[serde(default)]
    pub masks_zero: bool,
}

impl ModelConfig {
    pub fn new(ell: usize, x_dim: usize, u_dim: usize) -> ModelConfig {
        ModelConfig {
            ell,
            x_dim,
            u_dim,
            hidden: default_hidden(),
            gamma: default_gamma(),
            leaky_slope: default_slope(),
            sigma_x_sq: default_sigma_x_sq(),
            masks_zero: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ell == 0 || self.x_dim == 0 || self.u_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "model dimensions (ell, x_dim, u_dim, hidden) must all be >= 1".into(),
            ));
        }
        if !(self.sigma_x_sq > 0.0) {
            return Err(Error::Config(format!(
                "observation variance {} must be positive",
                self.sigma_x_sq
            )));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "gamma {} must be finite and non-negative",
                self.gamma
            )));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky slope must be finite".into()));
        }
        Ok(())
    }
}

/// One evaluation of the objective, per-batch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    /// Gaussian reconstruction log-likelihood (higher is better).
    pub recon: f64,
    /// KL divergence from posterior to prior (non-negative).
    pub kl: f64,
    /// Mask L1 penalty before weighting by gamma.
    pub l1: f64,
    /// `recon - kl - gamma * l1`.
    pub total: f64,
}

/// Closed-form KL between two univariate Gaussians given means and
/// *variances*: `KL(N(mu_q, var_q) || N(mu_p, var_p))`.
pub fn kl_conditional_gaussian(mu_q: f64, var_q: f64, mu_p: f64, var_p: f64) -> Result<f64> {
    if !(var_q > 0.0) || !(var_p > 0.0) {
        return Err(Error::Numerical(format!(
            "KL needs positive variances, got {var_q} and {var_p}"
        )));
    }
    Ok(0.5 * (var_p / var_q).ln() + (var_q + (mu_q - mu_p).powi(2)) / (2.0 * var_p) - 0.5)
}

/// One-hot encode segment labels into an `N x m` matrix.
pub fn one_hot(labels: &[usize], m: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), m);
    for (r, &s) in labels.iter().enumerate() {
        if s >= m {
            return Err(Error::Data(format!(
                "label {s} at row {r} out of range 0..{m}"
            )));
        }
        t.set(r, s, 1.0);
    }
    Ok(t)
}

// ── The model ────────────────────────────────────────────────────────────

/// The full model: configuration plus named parameters in a stable order.
#[derive(Debug, Clone)]
pub struct LanmModel {
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
}

/// Node ids of everything interesting in one ELBO tape build.
#[derive(Debug, Clone)]
pub struct ElboGraph {
    /// Tape parameter ids, aligned with [`LanmModel::params`] order.
    pub param_ids: Vec<NodeId>,
    pub total: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
    pub l1: NodeId,
    /// Sampled posterior latents, one `B x 1` column per node.
    pub z_cols: Vec<NodeId>,
    pub mu_q: Vec<NodeId>,
    /// Clamped posterior `log sigma^2` columns.
    pub logvar_q: Vec<NodeId>,
    pub mu_p: Vec<NodeId>,
    pub logvar_p: Vec<NodeId>,
    /// Per-node mask value matrices (`None` for node 1, which has no
    /// predecessors).
    pub masks: Vec<Option<NodeId>>,
}

/// Plain (tape-free) forward pass through encoder, heads, and sampling.
#[derive(Debug, Clone)]
pub struct PosteriorForward {
    /// Shared encoder features, `B x hidden`.
    pub features: Tensor,
    /// Posterior means, `B x ell`.
    pub mu_q: Tensor,
    /// Clamped posterior `log sigma^2`, `B x ell`.
    pub logvar_q: Tensor,
    /// Prior means, `B x ell`.
    pub mu_p: Tensor,
    /// Clamped prior `log sigma^2`, `B x ell`.
    pub logvar_p: Tensor,
    /// Sampled latents `mu + sigma * eps`, `B x ell`.
    pub z: Tensor,
}

/// Expected parameter layout for a configuration: `(name, rows, cols)` in
/// canonical order.
fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let h = cfg.hidden;
    let mut out = Vec::new();
    let linear = |name: String, inp: usize, outw: usize, v: &mut Vec<(String, usize, usize)>| {
        v.push((format!("{name}.w"), inp, outw));
        v.push((format!("{name}.b"), 1, outw));
    };
    linear("enc.l0".into(), cfg.x_dim + cfg.u_dim, h, &mut out);
    linear("enc.l1".into(), h, h, &mut out);
    linear("enc.l2".into(), h, h, &mut out);
    for i in 0..cfg.ell {
        let node = i + 1;
        if i >= 1 {
            linear(format!("node{node}.mask"), cfg.u_dim, i, &mut out);
        }
        linear(format!("node{node}.post.l0"), h + i + cfg.u_dim, h, &mut out);
        linear(format!("node{node}.post.l1"), h, h, &mut out);
        linear(format!("node{node}.post.l2"), h, 2, &mut out);
        linear(format!("node{node}.prior.l0"), i + cfg.u_dim, h, &mut out);
        linear(format!("node{node}.prior.l1"), h, h, &mut out);
        linear(format!("node{node}.prior.l2"), h, 2, &mut out);
    }
    linear("dec.l0".into(), cfg.ell, h, &mut out);
    linear("dec.l1".into(), h, h, &mut out);
    linear("dec.l2".into(), h, cfg.x_dim, &mut out);
    out
}

fn tape_linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId, rows: usize) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    let bb = tape.broadcast_row(b, rows)?;
    tape.add(xw, bb)
}

/// `-c + relu(x + c) - relu(x - c)`: the identity on `[-c, c]`, saturating
/// outside — a clamp built from differentiable pieces.
fn tape_clamp(tape: &mut Tape, x: NodeId, rows: usize, c: f64) -> Result<NodeId> {
    let hi = tape.leaf(Tensor::filled(rows, 1, c));
    let lo = tape.leaf(Tensor::filled(rows, 1, -c));
    let above = tape.add(x, hi)?;
    let r1 = tape.leaky_relu(above, 0.0)?;
    let below = tape.sub(x, hi)?;
    let r2 = tape.leaky_relu(below, 0.0)?;
    let base = tape.add(lo, r1)?;
    tape.sub(base, r2)
}

fn plain_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut out = mm_nn(x, w);
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            out.set(r, c, out.get(r, c) + b.get(0, c));
        }
    }
    out
}

fn plain_leaky(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

fn plain_clamp(v: f64, c: f64) -> f64 {
    let relu = |t: f64| if t > 0.0 { t } else { 0.0 * t };
    (-c + relu(v + c)) - relu(v - c)
}

impl LanmModel {
    /// Initialize a model: weights uniform in `±sqrt(6/(fan_in+fan_out))`,
    /// biases zero, mask parameters uniform in `±0.1`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<LanmModel> {
        config.validate()?;
        let mut r = rng::stream(seed, &[STREAM_INIT]);
        let params = layout(&config)
            .into_iter()
            .map(|(name, rows, cols)| {
                let t = if name.contains(".mask.") {
                    let data = (0..rows * cols)
                        .map(|_| {
                            rand::Rng::random_range(&mut r, -MASK_INIT_BOUND..MASK_INIT_BOUND)
                        })
                        .collect();
                    Tensor::new(rows, cols, data).expect("finite init")
                } else if name.ends_with(".b") {
                    Tensor::zeros(rows, cols)
                } else {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    let data = (0..rows * cols)
                        .map(|_| rand::Rng::random_range(&mut r, -bound..bound))
                        .collect();
                    Tensor::new(rows, cols, data).expect("finite init")
                };
                (name, t)
            })
            .collect();
        Ok(LanmModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Override the sparsity weight (training configs may carry their own).
    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::Config(format!(
                "gamma {gamma} must be finite and non-negative"
            )));
        }
        self.config.gamma = gamma;
        Ok(())
    }

    /// In-place access for the optimizer (shapes must be preserved).
    pub(crate) fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    /// Named parameters in canonical order.
    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find_map(|(n, t)| (n == name).then_some(t))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find_map(|(n, t)| (n == name).then_some(t))
    }

    /// Parameter values in canonical order (cloned).
    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Replace all parameter values, shape-checked against the layout.
    pub fn set_param_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for ((name, old), new) in self.params.iter_mut().zip(values) {
            if old.shape() != new.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name}: shape {:?} cannot be replaced by {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
            *old = new;
        }
        Ok(())
    }

    fn check_batch(&self, x: &Tensor, u: &Tensor, noise: Option<&Tensor>) -> Result<()> {
        let cfg = &self.config;
        if x.rows() == 0 {
            return Err(Error::Data("batch is empty".into()));
        }
        if x.cols() != cfg.x_dim {
            return Err(Error::Dimension(format!(
                "x has {} columns, model expects {}",
                x.cols(),
                cfg.x_dim
            )));
        }
        if u.shape() != (x.rows(), cfg.u_dim) {
            return Err(Error::Dimension(format!(
                "u is {}x{}, expected {}x{}",
                u.rows(),
                u.cols(),
                x.rows(),
                cfg.u_dim
            )));
        }
        for r in 0..u.rows() {
            let row = u.row(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("u row {r} is not one-hot")));
            }
        }
        if let Some(n) = noise {
            if n.shape() != (x.rows(), cfg.ell) {
                return Err(Error::Dimension(format!(
                    "noise is {}x{}, expected {}x{}",
                    n.rows(),
                    n.cols(),
                    x.rows(),
                    cfg.ell
                )));
            }
        }
        Ok(())
    }

    // ── Tape path ────────────────────────────────────────────────────────

    /// Build the full ELBO graph on `tape` using externally registered
    /// parameter ids (aligned with [`Self::params`] order). This indirection
    /// lets gradient checkers substitute perturbed parameter values.
    pub fn build_elbo_graph(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        x: &Tensor,
        u: &Tensor,
        noise: &Tensor,
    ) -> Result<ElboGraph> {
        self.check_batch(x, u, Some(noise))?;
        if ids.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter ids, got {}",
                self.params.len(),
                ids.len()
            )));
        }
        let index: BTreeMap<&str, usize> = self
            .params
            .iter()
            .enumerate()
            .map(|(k, (n, _))| (n.as_str(), k))
            .collect();
        let pid = |name: &str| -> NodeId { ids[index[name]] };
        let cfg = &self.config;
        let (b, ell, slope) = (x.rows(), cfg.ell, cfg.leaky_slope);

        let x_id = tape.leaf(x.clone());
        let u_id = tape.leaf(u.clone());
        let noise_id = tape.leaf(noise.clone());

        // Encoder backbone.
        let mut feat = tape.concat_cols(&[x_id, u_id])?;
        for l in 0..3 {
            feat = tape_linear(
                tape,
                feat,
                pid(&format!("enc.l{l}.w")),
                pid(&format!("enc.l{l}.b")),
                b,
            )?;
            feat = tape.leaky_relu(feat, slope)?;
        }

        let head = |tape: &mut Tape, input: NodeId, prefix: &str| -> Result<(NodeId, NodeId)> {
            let mut h = input;
            for l in 0..3 {
                h = tape_linear(
                    tape,
                    h,
                    pid(&format!("{prefix}.l{l}.w")),
                    pid(&format!("{prefix}.l{l}.b")),
                    b,
                )?;
                if l < 2 {
                    h = tape.leaky_relu(h, slope)?;
                }
            }
            let mu = tape.slice_cols(h, 0, 1)?;
            let raw = tape.slice_cols(h, 1, 2)?;
            let lv = tape_clamp(tape, raw, b, LOGVAR_CLAMP)?;
            Ok((mu, lv))
        };

        let mut z_cols = Vec::with_capacity(ell);
        let mut mu_q = Vec::with_capacity(ell);
        let mut logvar_q = Vec::with_capacity(ell);
        let mut mu_p = Vec::with_capacity(ell);
        let mut logvar_p = Vec::with_capacity(ell);
        let mut masks = Vec::with_capacity(ell);
        let mut mask_abs: Vec<NodeId> = Vec::new();
        let mut kl_rows: Option<NodeId> = None;

        for i in 0..ell {
            let node = i + 1;
            // Masked predecessors (absent for node 1).
            let masked = if i >= 1 {
                let z_prev = if i == 1 {
                    z_cols[0]
                } else {
                    tape.concat_cols(&z_cols[..i])?
                };
                let mvals = if cfg.masks_zero {
                    tape.leaf(Tensor::zeros(b, i))
                } else {
                    let mv = tape_linear(
                        tape,
                        u_id,
                        pid(&format!("node{node}.mask.w")),
                        pid(&format!("node{node}.mask.b")),
                        b,
                    )?;
                    // |m| = leaky_relu(m, -1): the L1 penalty base.
                    mask_abs.push(tape.leaky_relu(mv, -1.0)?);
                    mv
                };
                masks.push(Some(mvals));
                Some(tape.mul(z_prev, mvals)?)
            } else {
                masks.push(None);
                None
            };

            // Posterior head and reparameterized sample.
            let post_in = match masked {
                Some(m) => tape.concat_cols(&[feat, m, u_id])?,
                None => tape.concat_cols(&[feat, u_id])?,
            };
            let (mq, lq) = head(tape, post_in, &format!("node{node}.post"))?;
            let eps = tape.slice_cols(noise_id, i, i + 1)?;
            let half_lv = tape.scalar_mul(lq, 0.5)?;
            let sigma = tape.exp(half_lv)?;
            let scaled = tape.mul(sigma, eps)?;
            let z_i = tape.add(mq, scaled)?;

            // Prior head on the same masked posterior samples.
            let prior_in = match masked {
                Some(m) => tape.concat_cols(&[m, u_id])?,
                None => u_id,
            };
            let (mp, lp) = head(tape, prior_in, &format!("node{node}.prior"))?;

            // Per-row conditional Gaussian KL:
            // 0.5 (lp - lq) + (exp(lq) + (mq - mp)^2) * 0.5 exp(-lp) - 0.5.
            let lv_gap = tape.sub(lp, lq)?;
            let t_log = tape.scalar_mul(lv_gap, 0.5)?;
            let var_q = tape.exp(lq)?;
            let mu_gap = tape.sub(mq, mp)?;
            let gap_sq = tape.square(mu_gap)?;
            let numer = tape.add(var_q, gap_sq)?;
            let neg_lp = tape.scalar_mul(lp, -1.0)?;
            let inv_var_p = tape.exp(neg_lp)?;
            let half_inv = tape.scalar_mul(inv_var_p, 0.5)?;
            let t_ratio = tape.mul(numer, half_inv)?;
            let half = tape.leaf(Tensor::filled(b, 1, 0.5));
            let partial = tape.add(t_log, t_ratio)?;
            let kl_i = tape.sub(partial, half)?;
            kl_rows = Some(match kl_rows {
                Some(acc) => tape.add(acc, kl_i)?,
                None => kl_i,
            });

            z_cols.push(z_i);
            mu_q.push(mq);
            logvar_q.push(lq);
            mu_p.push(mp);
            logvar_p.push(lp);
        }
        let kl = tape.mean(kl_rows.expect("ell >= 1"))?;

        // Decoder and Gaussian reconstruction log-likelihood.
        let z_full = if ell == 1 {
            z_cols[0]
        } else {
            tape.concat_cols(&z_cols)?
        };
        let mut xhat = z_full;
        for l in 0..3 {
            xhat = tape_linear(
                tape,
                xhat,
                pid(&format!("dec.l{l}.w")),
                pid(&format!("dec.l{l}.b")),
                b,
            )?;
            if l < 2 {
                xhat = tape.leaky_relu(xhat, slope)?;
            }
        }
        let resid = tape.sub(x_id, xhat)?;
        let sq = tape.square(resid)?;
        let mean_sq = tape.mean(sq)?;
        let d = cfg.x_dim as f64;
        let const_term = -0.5 * d * (2.0 * std::f64::consts::PI * cfg.sigma_x_sq).ln();
        let const_id = tape.leaf(Tensor::scalar(const_term));
        let scaled_err = tape.scalar_mul(mean_sq, -d / (2.0 * cfg.sigma_x_sq))?;
        let recon = tape.add(const_id, scaled_err)?;

        // Mask L1 penalty, mean over the batch.
        let l1 = if mask_abs.is_empty() {
            tape.leaf(Tensor::scalar(0.0))
        } else {
            let cat = if mask_abs.len() == 1 {
                mask_abs[0]
            } else {
                tape.concat_cols(&mask_abs)?
            };
            let s = tape.sum(cat)?;
            tape.scalar_mul(s, 1.0 / b as f64)?
        };

        let fit = tape.sub(recon, kl)?;
        let weighted_l1 = tape.scalar_mul(l1, cfg.gamma)?;
        let total = tape.sub(fit, weighted_l1)?;
        Ok(ElboGraph {
            param_ids: ids.to_vec(),
            total,
            recon,
            kl,
            l1,
            z_cols,
            mu_q,
            logvar_q,
            mu_p,
            logvar_p,
            masks,
        })
    }

    /// Register this model's parameters on `tape` and build the ELBO graph.
    pub fn build_elbo(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        u: &Tensor,
        noise: &Tensor,
    ) -> Result<ElboGraph> {
        let ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        self.build_elbo_graph(tape, &ids, x, u, noise)
    }

    /// Evaluate the objective on one batch.
    pub fn elbo(&self, x: &Tensor, u: &Tensor, noise: &Tensor) -> Result<ElboBreakdown> {
        let mut tape = Tape::new();
        let graph = self.build_elbo(&mut tape, x, u, noise)?;
        breakdown(&tape, &graph)
    }

    // ── Plain (tape-free) paths ──────────────────────────────────────────

    /// Mask values `m_i(u)` for each node on a batch of one-hot labels.
    /// Entry `i` has width `i` (node 1's is empty); in masks-zero mode all
    /// values are zero.
    pub fn mask_values(&self, u: &Tensor) -> Result<Vec<Tensor>> {
        if u.cols() != self.config.u_dim {
            return Err(Error::Dimension(format!(
                "u has {} columns, model expects {}",
                u.cols(),
                self.config.u_dim
            )));
        }
        let b = u.rows();
        let mut out = Vec::with_capacity(self.config.ell);
        for i in 0..self.config.ell {
            if i == 0 {
                out.push(Tensor::zeros(b, 0));
            } else if self.config.masks_zero {
                out.push(Tensor::zeros(b, i));
            } else {
                let node = i + 1;
                let w = self.param(&format!("node{node}.mask.w")).expect("layout");
                let bias = self.param(&format!("node{node}.mask.b")).expect("layout");
                out.push(plain_linear(u, w, bias));
            }
        }
        Ok(out)
    }

    fn plain_head(&self, prefix: &str, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let slope = self.config.leaky_slope;
        let mut h = input.clone();
        for l in 0..3 {
            let w = self.param(&format!("{prefix}.l{l}.w")).expect("layout");
            let b = self.param(&format!("{prefix}.l{l}.b")).expect("layout");
            h = plain_linear(&h, w, b);
            if l < 2 {
                h = plain_leaky(&h, slope);
            }
        }
        let b = h.rows();
        let mut mu = Tensor::zeros(b, 1);
        let mut lv = Tensor::zeros(b, 1);
        for r in 0..b {
            mu.set(r, 0, h.get(r, 0));
            lv.set(r, 0, plain_clamp(h.get(r, 1), LOGVAR_CLAMP));
        }
        for r in 0..b {
            if !mu.get(r, 0).is_finite() || !lv.get(r, 0).is_finite() {
                return Err(Error::NonFinite(format!(
                    "head {prefix} produced a non-finite output at batch row {r}"
                )));
            }
        }
        Ok((mu, lv))
    }

    /// Encoder features for a batch.
    pub fn encode_features(&self, x: &Tensor, u: &Tensor) -> Result<Tensor> {
        self.check_batch(x, u, None)?;
        let slope = self.config.leaky_slope;
        let mut h = hstack(&[x, u]);
        for l in 0..3 {
            let w = self.param(&format!("enc.l{l}.w")).expect("layout");
            let b = self.param(&format!("enc.l{l}.b")).expect("layout");
            h = plain_leaky(&plain_linear(&h, w, b), slope);
        }
        Ok(h)
    }

    /// Autoregressive posterior pass: heads, reparameterized samples, and
    /// the matching prior parameters. Matches the tape build bit for bit.
    pub fn posterior_sample(
        &self,
        x: &Tensor,
        u: &Tensor,
        noise: &Tensor,
    ) -> Result<PosteriorForward> {
        self.check_batch(x, u, Some(noise))?;
        let ell = self.config.ell;
        let b = x.rows();
        let features = self.encode_features(x, u)?;
        let mut mu_q = Tensor::zeros(b, ell);
        let mut logvar_q = Tensor::zeros(b, ell);
        let mut mu_p = Tensor::zeros(b, ell);
        let mut logvar_p = Tensor::zeros(b, ell);
        let mut z = Tensor::zeros(b, ell);
        let masks = self.mask_values(u)?;
        for i in 0..ell {
            let node = i + 1;
            let masked = if i >= 1 {
                let mut m = Tensor::zeros(b, i);
                for r in 0..b {
                    for j in 0..i {
                        m.set(r, j, z.get(r, j) * masks[i].get(r, j));
                    }
                }
                Some(m)
            } else {
                None
            };
            let post_in = match &masked {
                Some(m) => hstack(&[&features, m, u]),
                None => hstack(&[&features, u]),
            };
            let (mq, lq) = self.plain_head(&format!("node{node}.post"), &post_in)?;
            let prior_in = match &masked {
                Some(m) => hstack(&[m, u]),
                None => u.clone(),
            };
            let (mp, lp) = self.plain_head(&format!("node{node}.prior"), &prior_in)?;
            for r in 0..b {
                let sigma = (0.5 * lq.get(r, 0)).exp();
                z.set(r, i, mq.get(r, 0) + sigma * noise.get(r, i));
                mu_q.set(r, i, mq.get(r, 0));
                logvar_q.set(r, i, lq.get(r, 0));
                mu_p.set(r, i, mp.get(r, 0));
                logvar_p.set(r, i, lp.get(r, 0));
            }
        }
        Ok(PosteriorForward {
            features,
            mu_q,
            logvar_q,
            mu_p,
            logvar_p,
            z,
        })
    }

    /// Posterior means (the zero-noise sample), `B x ell`.
    pub fn posterior_mean(&self, x: &Tensor, u: &Tensor) -> Result<Tensor> {
        let noise = Tensor::zeros(x.rows(), self.config.ell);
        Ok(self.posterior_sample(x, u, &noise)?.mu_q)
    }

    /// Prior head parameters `(mu, sigma^2)` for one node given realized
    /// predecessor values (`z_prev` is `B x i` for 0-based node `i`); the
    /// node's mask is applied internally.
    pub fn prior_node_params(
        &self,
        node0: usize,
        z_prev: &Tensor,
        u: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        if node0 >= self.config.ell {
            return Err(Error::Dimension(format!(
                "node index {node0} out of range 0..{}",
                self.config.ell
            )));
        }
        if z_prev.shape() != (u.rows(), node0) {
            return Err(Error::Dimension(format!(
                "z_prev is {}x{}, expected {}x{node0}",
                z_prev.rows(),
                z_prev.cols(),
                u.rows()
            )));
        }
        let node = node0 + 1;
        let prior_in = if node0 == 0 {
            u.clone()
        } else {
            let masks = self.mask_values(u)?;
            let mut m = Tensor::zeros(u.rows(), node0);
            for r in 0..u.rows() {
                for j in 0..node0 {
                    m.set(r, j, z_prev.get(r, j) * masks[node0].get(r, j));
                }
            }
            hstack(&[&m, u])
        };
        let (mu, lv) = self.plain_head(&format!("node{node}.prior"), &prior_in)?;
        let var = lv.map(f64::exp);
        Ok((mu, var))
    }

    /// Deterministic decoder pass, `B x ell` to `B x D`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.config.ell {
            return Err(Error::Dimension(format!(
                "z has {} columns, model expects {}",
                z.cols(),
                self.config.ell
            )));
        }
        let slope = self.config.leaky_slope;
        let mut h = z.clone();
        for l in 0..3 {
            let w = self.param(&format!("dec.l{l}.w")).expect("layout");
            let b = self.param(&format!("dec.l{l}.b")).expect("layout");
            h = plain_linear(&h, w, b);
            if l < 2 {
                h = plain_leaky(&h, slope);
            }
        }
        Ok(h)
    }

    // ── Checkpointing ────────────────────────────────────────────────────

    /// Write a checkpoint directory: a manifest plus one binary file per
    /// parameter.
    pub fn save_checkpoint(&self, dir: &Path, step: u64, seed: u64) -> Result<()> {
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            step,
            seed,
            params: self.params.iter().map(|(n, _)| n.clone()).collect(),
        };
        io::write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)?;
        for (name, t) in &self.params {
            io::write_tensor(&dir.join(format!("{name}.lanm")), t)?;
        }
        Ok(())
    }

    /// Read a checkpoint directory back, validating the parameter layout.
    pub fn load_checkpoint(dir: &Path) -> Result<(LanmModel, CheckpointManifest)> {
        let manifest: CheckpointManifest = io::read_json(&dir.join(CHECKPOINT_MANIFEST))?;
        manifest.config.validate()?;
        let expected = layout(&manifest.config);
        let names: Vec<&String> = expected.iter().map(|(n, _, _)| n).collect();
        if manifest.params != names.iter().map(|s| s.to_string()).collect::<Vec<_>>() {
            return Err(Error::Format {
                path: dir.join(CHECKPOINT_MANIFEST),
                msg: "parameter list does not match the architecture".into(),
            });
        }
        let mut params = Vec::with_capacity(expected.len());
        for (name, rows, cols) in expected {
            let t = io::read_tensor(&dir.join(format!("{name}.lanm")))?;
            if t.shape() != (rows, cols) {
                return Err(Error::Dimension(format!(
                    "parameter {name}: file is {}x{}, architecture needs {rows}x{cols}",
                    t.rows(),
                    t.cols()
                )));
            }
            params.push((name, t));
        }
        Ok((
            LanmModel {
                config: manifest.config.clone(),
                params,
            },
            manifest,
        ))
    }
}

/// Checkpoint metadata stored next to the parameter files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<String>,
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

/// Read the scalar terms of a built graph into an [`ElboBreakdown`].
pub fn breakdown(tape: &Tape, graph: &ElboGraph) -> Result<ElboBreakdown> {
    let out = ElboBreakdown {
        recon: tape.value(graph.recon).item(),
        kl: tape.value(graph.kl).item(),
        l1: tape.value(graph.l1).item(),
        total: tape.value(graph.total).item(),
    };
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "objective is not finite (recon {}, kl {}, l1 {})",
            out.recon, out.kl, out.l1
        )));
    }
    Ok(out)
}

/// Column-concatenate tensors with equal row counts (plain helper).
fn hstack(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|t| t.cols()).sum();
    let mut out = Tensor::zeros(rows, cols);
    let mut at = 0;
    for t in parts {
        debug_assert_eq!(t.rows(), rows);
        for r in 0..rows {
            for c in 0..t.cols() {
                out.set(r, at + c, t.get(r, c));
            }
        }
        at += t.cols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn small_model(ell: usize, masks_zero: bool) -> LanmModel {
        let mut cfg = ModelConfig::new(ell, 3, 5);
        cfg.hidden = 6;
        cfg.masks_zero = masks_zero;
        LanmModel::new(cfg, 42).unwrap()
    }

    fn batch(b: usize, model: &LanmModel, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut r = rng::stream(seed, &[99]);
        let cfg = model.config();
        let x = Tensor::new(
            b,
            cfg.x_dim,
            (0..b * cfg.x_dim)
                .map(|_| rand::Rng::random_range(&mut r, -2.0..2.0))
                .collect(),
        )
        .unwrap();
        let labels: Vec<usize> =
            (0..b).map(|_| rand::Rng::random_range(&mut r, 0..cfg.u_dim)).collect();
        let u = one_hot(&labels, cfg.u_dim).unwrap();
        let noise = Tensor::new(
            b,
            cfg.ell,
            (0..b * cfg.ell)
                .map(|_| {
                    let v: f64 = rand::Rng::sample(&mut r, rand_distr::StandardNormal);
                    v
                })
                .collect(),
        )
        .unwrap();
        (x, u, noise)
    }

    #[test]
    fn layout_matches_architecture() {
        let m = small_model(3, false);
        assert_eq!(m.param("enc.l0.w").unwrap().shape(), (3 + 5, 6));
        assert_eq!(m.param("node1.post.l0.w").unwrap().shape(), (6 + 0 + 5, 6));
        assert_eq!(m.param("node3.post.l0.w").unwrap().shape(), (6 + 2 + 5, 6));
        assert_eq!(m.param("node3.prior.l0.w").unwrap().shape(), (2 + 5, 6));
        assert_eq!(m.param("node2.mask.w").unwrap().shape(), (5, 1));
        assert_eq!(m.param("node3.mask.w").unwrap().shape(), (5, 2));
        assert!(m.param("node1.mask.w").is_none());
        assert_eq!(m.param("dec.l2.w").unwrap().shape(), (6, 3));
        assert_eq!(m.param("node2.post.l2.w").unwrap().shape(), (6, 2));
    }

    #[test]
    fn mask_values_have_autoregressive_widths() {
        let m = small_model(3, false);
        let u = one_hot(&[0, 2], 5).unwrap();
        let masks = m.mask_values(&u).unwrap();
        assert_eq!(masks.len(), 3);
        assert_eq!(masks[0].shape(), (2, 0));
        assert_eq!(masks[1].shape(), (2, 1));
        assert_eq!(masks[2].shape(), (2, 2));
        // Mask init avoids exact zero at the one-hot evaluation points.
        assert!(masks[1].get(0, 0) != 0.0);

        let zeroed = small_model(3, true);
        let masks = zeroed.mask_values(&u).unwrap();
        assert!(masks[2].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_noise_returns_posterior_means() {
        let m = small_model(2, false);
        let (x, u, _) = batch(4, &m, 1);
        let noise = Tensor::zeros(4, 2);
        let fwd = m.posterior_sample(&x, &u, &noise).unwrap();
        assert_eq!(fwd.z.data(), fwd.mu_q.data());
    }

    #[test]
    fn logvar_heads_are_clamped() {
        let mut m = small_model(1, false);
        // Push the raw log-variance output far out of range via the bias.
        m.param_mut("node1.post.l2.b").unwrap().set(0, 1, 500.0);
        let (x, u, noise) = batch(3, &m, 2);
        let fwd = m.posterior_sample(&x, &u, &noise).unwrap();
        for r in 0..3 {
            assert_eq!(fwd.logvar_q.get(r, 0), LOGVAR_CLAMP);
        }
        m.param_mut("node1.post.l2.b").unwrap().set(0, 1, -500.0);
        let fwd = m.posterior_sample(&x, &u, &noise).unwrap();
        for r in 0..3 {
            assert_eq!(fwd.logvar_q.get(r, 0), -LOGVAR_CLAMP);
        }
    }

    #[test]
    fn autoregressive_sampling_is_causal() {
        let m = small_model(4, false);
        let (x, u, noise) = batch(3, &m, 3);
        let base = m.posterior_sample(&x, &u, &noise).unwrap();
        // Perturb the noise of node 3 (index 2): earlier nodes must be
        // untouched, node 3 must move.
        let mut bumped = noise.clone();
        bumped.set(1, 2, bumped.get(1, 2) + 1.0);
        let moved = m.posterior_sample(&x, &u, &bumped).unwrap();
        for i in 0..2 {
            for r in 0..3 {
                assert_eq!(base.z.get(r, i), moved.z.get(r, i));
            }
        }
        assert_ne!(base.z.get(1, 2), moved.z.get(1, 2));
    }

    #[test]
    fn identical_rows_and_noise_sample_identically() {
        let m = small_model(2, false);
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.5, -1.0, 2.0]]).unwrap();
        let u = one_hot(&[3, 3], 5).unwrap();
        let noise = Tensor::from_rows(&[vec![0.7, -0.3], vec![0.7, -0.3]]).unwrap();
        let fwd = m.posterior_sample(&x, &u, &noise).unwrap();
        assert_eq!(fwd.z.row(0), fwd.z.row(1));
    }

    #[test]
    fn kl_closed_form_matches_known_values() {
        assert_eq!(kl_conditional_gaussian(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((kl_conditional_gaussian(1.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_conditional_gaussian(0.0, 4.0, 0.0, 1.0).unwrap();
        assert!((v - (1.5 - std::f64::consts::LN_2)).abs() < 1e-15);
        assert!(kl_conditional_gaussian(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let m = small_model(3, false);
        let (x, u, noise) = batch(5, &m, 4);
        let plain = m.posterior_sample(&x, &u, &noise).unwrap();
        let mut tape = Tape::new();
        let g = m.build_elbo(&mut tape, &x, &u, &noise).unwrap();
        for i in 0..3 {
            let z_col = tape.value(g.z_cols[i]);
            let mu_col = tape.value(g.mu_q[i]);
            let lv_col = tape.value(g.logvar_p[i]);
            for r in 0..5 {
                assert_eq!(z_col.get(r, 0), plain.z.get(r, i), "z node {i} row {r}");
                assert_eq!(mu_col.get(r, 0), plain.mu_q.get(r, i));
                assert_eq!(lv_col.get(r, 0), plain.logvar_p.get(r, i));
            }
        }
    }

    #[test]
    fn breakdown_identity_holds() {
        let m = small_model(3, false);
        let (x, u, noise) = batch(6, &m, 5);
        let e = m.elbo(&x, &u, &noise).unwrap();
        let recomposed = (e.recon - e.kl) - m.config().gamma * e.l1;
        assert!((e.total - recomposed).abs() < 1e-12);
        assert!(e.kl >= 0.0);
        assert!(e.l1 > 0.0);
    }

    #[test]
    fn gamma_zero_drops_the_penalty() {
        let m0 = small_model(3, false);
        let mut cfg = m0.config().clone();
        cfg.gamma = 0.0;
        // Same weights, different gamma.
        let m1 = LanmModel {
            config: cfg,
            params: m0.params.clone(),
        };
        let (x, u, noise) = batch(4, &m0, 6);
        let e0 = m0.elbo(&x, &u, &noise).unwrap();
        let e1 = m1.elbo(&x, &u, &noise).unwrap();
        assert_eq!(e0.l1, e1.l1);
        assert_eq!(e1.total, e1.recon - e1.kl);
        assert!((e0.total - (e1.total - 0.01 * e0.l1)).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_decoder_reconstruction_constant() {
        let mut cfg = ModelConfig::new(1, 2, 3);
        cfg.hidden = 4;
        cfg.sigma_x_sq = 1.0;
        let mut m = LanmModel::new(cfg, 7).unwrap();
        for l in 0..3 {
            let w = m.param_mut(&format!("dec.l{l}.w")).unwrap();
            *w = Tensor::zeros(w.rows(), w.cols());
            let b = m.param_mut(&format!("dec.l{l}.b")).unwrap();
            *b = Tensor::zeros(b.rows(), b.cols());
        }
        m.param_mut("dec.l2.b").unwrap().set(0, 0, 1.25);
        m.param_mut("dec.l2.b").unwrap().set(0, 1, -0.5);
        // Decoder now ignores z entirely.
        let z = Tensor::from_rows(&[vec![3.0], vec![-8.0]]).unwrap();
        let xhat = m.decode(&z).unwrap();
        assert_eq!(xhat.row(0), &[1.25, -0.5]);
        assert_eq!(xhat.row(1), &[1.25, -0.5]);
        // Feeding x equal to the constant decoder output zeroes the
        // residual: reconstruction is exactly -D/2 log(2 pi).
        let x = Tensor::from_rows(&[vec![1.25, -0.5], vec![1.25, -0.5]]).unwrap();
        let u = one_hot(&[0, 1], 3).unwrap();
        let noise = Tensor::zeros(2, 1);
        let e = m.elbo(&x, &u, &noise).unwrap();
        let expected = -1.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((e.recon - expected).abs() < 1e-12, "{} vs {expected}", e.recon);
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        let m = small_model(2, false);
        let (x, u, noise) = batch(3, &m, 8);
        let report = grad_check(
            &m.param_values(),
            |tape, ids| m.build_elbo_graph(tape, ids, &x, &u, &noise).map(|g| g.total),
            1e-3,
        )
        .unwrap();
        assert!(
            report.pass,
            "max rel err {} at {:?}",
            report.max_rel_error, report.worst
        );
    }

    #[test]
    fn reparameterized_mean_matches_posterior_mean() {
        let m = small_model(1, false);
        let x = Tensor::from_rows(&[vec![0.3, -0.7, 1.1]]).unwrap();
        let u = one_hot(&[2], 5).unwrap();
        let fwd0 = m.posterior_sample(&x, &u, &Tensor::zeros(1, 1)).unwrap();
        let (mu, sigma_sq) = (fwd0.mu_q.get(0, 0), fwd0.logvar_q.get(0, 0).exp());
        let draws = 10_000;
        let mut r = rng::stream(77, &[1]);
        let mut sum = 0.0;
        for _ in 0..draws {
            let eps: f64 = rand::Rng::sample(&mut r, rand_distr::StandardNormal);
            let noise = Tensor::new(1, 1, vec![eps]).unwrap();
            sum += m.posterior_sample(&x, &u, &noise).unwrap().z.get(0, 0);
        }
        let sample_mean = sum / draws as f64;
        let bound = 3.0 * sigma_sq.sqrt() / (draws as f64).sqrt();
        assert!(
            (sample_mean - mu).abs() < bound,
            "mean {sample_mean} vs mu {mu} (bound {bound})"
        );
    }

    #[test]
    fn ivae_mode_matches_independent_reimplementation() {
        let mut cfg = ModelConfig::new(3, 4, 6);
        cfg.hidden = 8;
        cfg.gamma = 0.0;
        cfg.masks_zero = true;
        let m = LanmModel::new(cfg, 11).unwrap();
        let (x, u, noise) = batch(5, &m, 12);
        let ours = m.elbo(&x, &u, &noise).unwrap();
        let naive = naive_cvae_elbo(&m, &x, &u, &noise);
        assert!(
            (ours.total - naive).abs() < 1e-10,
            "{} vs {naive}",
            ours.total
        );
        assert_eq!(ours.l1, 0.0);
    }

    /// Straightforward conditional-VAE ELBO written independently of the
    /// model's forward code: plain loops, division-based KL, per-row
    /// reconstruction. Valid only for masks-zero mode with gamma = 0.
    fn naive_cvae_elbo(m: &LanmModel, x: &Tensor, u: &Tensor, noise: &Tensor) -> f64 {
        let cfg = m.config();
        assert!(cfg.masks_zero && cfg.gamma == 0.0);
        let p = |name: &str| m.param(name).unwrap();
        let b = x.rows();
        let lin = |inp: &Vec<Vec<f64>>, w: &Tensor, bias: &Tensor| -> Vec<Vec<f64>> {
            inp.iter()
                .map(|row| {
                    (0..w.cols())
                        .map(|c| {
                            let mut acc = 0.0;
                            for (k, v) in row.iter().enumerate() {
                                acc += v * w.get(k, c);
                            }
                            acc + bias.get(0, c)
                        })
                        .collect()
                })
                .collect()
        };
        let act = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.into_iter()
                .map(|row| {
                    row.into_iter()
                        .map(|v| if v > 0.0 { v } else { cfg.leaky_slope * v })
                        .collect()
                })
                .collect()
        };
        let clamp = |v: f64| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);

        // Encoder.
        let mut feat: Vec<Vec<f64>> = (0..b)
            .map(|r| x.row(r).iter().chain(u.row(r)).copied().collect())
            .collect();
        for l in 0..3 {
            feat = act(lin(
                &feat,
                p(&format!("enc.l{l}.w")),
                p(&format!("enc.l{l}.b")),
            ));
        }

        let head = |prefix: &str, input: &Vec<Vec<f64>>| -> Vec<(f64, f64)> {
            let mut h = input.clone();
            for l in 0..3 {
                h = lin(&h, p(&format!("{prefix}.l{l}.w")), p(&format!("{prefix}.l{l}.b")));
                if l < 2 {
                    h = act(h);
                }
            }
            h.iter().map(|row| (row[0], clamp(row[1]))).collect()
        };

        let mut z = vec![vec![0.0; cfg.ell]; b];
        let mut kl_total = 0.0;
        for i in 0..cfg.ell {
            let node = i + 1;
            // Masks are zero, so masked predecessors are zero vectors.
            let post_in: Vec<Vec<f64>> = (0..b)
                .map(|r| {
                    feat[r]
                        .iter()
                        .copied()
                        .chain(std::iter::repeat(0.0).take(i))
                        .chain(u.row(r).iter().copied())
                        .collect()
                })
                .collect();
            let q = head(&format!("node{node}.post"), &post_in);
            let prior_in: Vec<Vec<f64>> = (0..b)
                .map(|r| {
                    std::iter::repeat(0.0)
                        .take(i)
                        .chain(u.row(r).iter().copied())
                        .collect()
                })
                .collect();
            let pr = head(&format!("node{node}.prior"), &prior_in);
            for r in 0..b {
                let (mq, lq) = q[r];
                let (mp, lp) = pr[r];
                let (vq, vp) = (lq.exp(), lp.exp());
                z[r][i] = mq + vq.sqrt() * noise.get(r, i);
                kl_total += 0.5 * (vp / vq).ln() + (vq + (mq - mp).powi(2)) / (2.0 * vp) - 0.5;
            }
        }
        let kl = kl_total / b as f64;

        let mut xh = z.clone();
        for l in 0..3 {
            xh = lin(&xh, p(&format!("dec.l{l}.w")), p(&format!("dec.l{l}.b")));
            if l < 2 {
                xh = act(xh);
            }
        }
        let d = cfg.x_dim as f64;
        let mut recon = 0.0;
        for r in 0..b {
            let mut sq = 0.0;
            for c in 0..cfg.x_dim {
                sq += (x.get(r, c) - xh[r][c]).powi(2);
            }
            recon += -0.5 * d * (2.0 * std::f64::consts::PI * cfg.sigma_x_sq).ln()
                - sq / (2.0 * cfg.sigma_x_sq);
        }
        recon / b as f64 - kl
    }

    #[test]
    fn checkpoint_roundtrips() {
        let m = small_model(3, false);
        let dir = tempfile::tempdir().unwrap();
        m.save_checkpoint(dir.path(), 1234, 42).unwrap();
        let (back, manifest) = LanmModel::load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.step, 1234);
        assert_eq!(manifest.seed, 42);
        assert_eq!(back.config(), m.config());
        for ((n1, t1), (n2, t2)) in m.params().iter().zip(back.params()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1} differs");
        }
    }

    #[test]
    fn batch_validation_rejects_malformed_inputs() {
        let m = small_model(2, false);
        let (x, u, noise) = batch(3, &m, 13);
        // Bad one-hot.
        let mut bad_u = u.clone();
        bad_u.set(0, 0, 0.5);
        assert!(m.elbo(&x, &bad_u, &noise).is_err());
        // Wrong noise width.
        let bad_noise = Tensor::zeros(3, 1);
        assert!(m.elbo(&x, &u, &bad_noise).is_err());
        // Empty batch.
        let empty = Tensor::zeros(0, 3);
        assert!(m
            .elbo(&empty, &Tensor::zeros(0, 5), &Tensor::zeros(0, 2))
            .is_err());
    }
}
