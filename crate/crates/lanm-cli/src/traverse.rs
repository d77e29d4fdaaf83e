//! Latent traversals: sweep one latent coordinate of a trained model and
//! tabulate how the prior rollout and the decoded observations respond.
//!
//! The probe batch holds one row per segment, so every environment
//! contributes one trajectory. A baseline rollout draws each latent from
//! its prior head with fixed Gaussian draws; each grid step then pins the
//! chosen node to a value and replays the *same* draws downstream (common
//! random numbers), so differences from the baseline isolate the
//! intervention instead of resampling noise.

use serde::{Deserialize, Serialize};

use lanm::model::{one_hot, LanmModel, ModelConfig};
use lanm::rng;
use lanm::{Error, Result, Tensor};

/// Stream label for traversal noise draws.
const STREAM_TRAVERSE: u64 = 41;

/// Parameters of one traversal run; serialized next to the table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraverseOptions {
    /// 1-based latent node to intervene on.
    pub node: usize,
    /// Lower end of the intervention grid.
    pub lo: f64,
    /// Upper end of the intervention grid.
    pub hi: f64,
    /// Number of grid points; a single step probes the interval midpoint.
    pub steps: usize,
    pub seed: u64,
}

impl TraverseOptions {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.node == 0 || self.node > config.ell {
            return Err(Error::Config(format!(
                "node {} is out of range for a {}-node model (nodes are 1-based)",
                self.node, config.ell
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config("grid endpoints must be finite".into()));
        }
        if self.steps > 1 && self.lo >= self.hi {
            return Err(Error::Config(format!(
                "grid [{}, {}] is degenerate; {} steps need lo < hi",
                self.lo, self.hi, self.steps
            )));
        }
        Ok(())
    }

    fn grid(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![0.5 * (self.lo + self.hi)];
        }
        (0..self.steps)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / (self.steps - 1) as f64)
            .collect()
    }
}

/// One grid point of a traversal.
#[derive(Debug, Clone)]
pub struct TraverseStep {
    /// 0-based grid index.
    pub step: usize,
    /// Value the node was pinned to.
    pub value: f64,
    /// Column means of the intervened rollout, length `ell`.
    pub z_mean: Vec<f64>,
    /// Mean absolute deviation of the decoded observations from the
    /// baseline decode, length `D`.
    pub x_delta: Vec<f64>,
}

/// A full traversal table.
#[derive(Debug, Clone)]
pub struct TraverseTable {
    pub node: usize,
    pub ell: usize,
    pub x_dim: usize,
    pub steps: Vec<TraverseStep>,
}

impl TraverseTable {
    /// Render as CSV: `step,value,z_mean_1..ell,x_delta_1..D`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,value");
        for i in 1..=self.ell {
            s.push_str(&format!(",z_mean_{i}"));
        }
        for d in 1..=self.x_dim {
            s.push_str(&format!(",x_delta_{d}"));
        }
        s.push('\n');
        for row in &self.steps {
            s.push_str(&format!("{},{}", row.step, row.value));
            for v in &row.z_mean {
                s.push_str(&format!(",{v}"));
            }
            for v in &row.x_delta {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Roll the prior forward with fixed draws, optionally pinning one 0-based
/// node to a value. Later nodes consume the pinned value exactly as they
/// would a sampled one; earlier nodes are untouched by construction.
pub(crate) fn rollout(
    model: &LanmModel,
    u: &Tensor,
    eps: &Tensor,
    pin: Option<(usize, f64)>,
) -> Result<Tensor> {
    let ell = model.config().ell;
    let b = u.rows();
    if eps.rows() != b || eps.cols() != ell {
        return Err(Error::Dimension(format!(
            "noise is {}x{}, expected {}x{}",
            eps.rows(),
            eps.cols(),
            b,
            ell
        )));
    }
    let mut data = vec![0.0; b * ell];
    for i in 0..ell {
        if let Some((node, value)) = pin {
            if node == i {
                for row in 0..b {
                    data[row * ell + i] = value;
                }
                continue;
            }
        }
        let mut prev = Vec::with_capacity(b * i);
        for row in 0..b {
            prev.extend_from_slice(&data[row * ell..row * ell + i]);
        }
        let z_prev = Tensor::new(b, i, prev)?;
        let (mu, var) = model.prior_node_params(i, &z_prev, u)?;
        for row in 0..b {
            data[row * ell + i] = mu.get(row, 0) + var.get(row, 0).sqrt() * eps.get(row, i);
        }
    }
    Tensor::new(b, ell, data)
}

/// Run a traversal: baseline rollout, then one pinned rollout per grid
/// point, decoding each and averaging over the segment batch.
pub fn traverse(model: &LanmModel, opts: &TraverseOptions) -> Result<TraverseTable> {
    opts.validate(model.config())?;
    let ell = model.config().ell;
    let m = model.config().u_dim;
    let labels: Vec<usize> = (0..m).collect();
    let u = one_hot(&labels, m)?;

    let mut r = rng::stream(opts.seed, &[STREAM_TRAVERSE]);
    let mut eps_data = Vec::with_capacity(m * ell);
    for _ in 0..m * ell {
        let e: f64 = rand::Rng::sample(&mut r, rand_distr::StandardNormal);
        eps_data.push(e);
    }
    let eps = Tensor::new(m, ell, eps_data)?;

    let base = rollout(model, &u, &eps, None)?;
    let x_base = model.decode(&base)?;
    let d = x_base.cols();

    let mut steps = Vec::with_capacity(opts.steps);
    for (k, g) in opts.grid().into_iter().enumerate() {
        let zk = rollout(model, &u, &eps, Some((opts.node - 1, g)))?;
        let xk = model.decode(&zk)?;
        let mut z_mean = vec![0.0; ell];
        for (i, mean) in z_mean.iter_mut().enumerate() {
            *mean = (0..m).map(|row| zk.get(row, i)).sum::<f64>() / m as f64;
        }
        let mut x_delta = vec![0.0; d];
        for (c, delta) in x_delta.iter_mut().enumerate() {
            *delta = (0..m)
                .map(|row| (xk.get(row, c) - x_base.get(row, c)).abs())
                .sum::<f64>()
                / m as f64;
        }
        steps.push(TraverseStep {
            step: k,
            value: g,
            z_mean,
            x_delta,
        });
    }
    Ok(TraverseTable {
        node: opts.node,
        ell,
        x_dim: d,
        steps,
    })
}
