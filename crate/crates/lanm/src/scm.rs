//! Synthetic data from segment-indexed latent structural causal models.
//!
//! The generative process, end to end:
//!
//! 1. Per-segment Gaussian noise parameters `(alpha, beta)` are drawn
//!    uniformly (`alpha` is the mean, `beta` the *variance*).
//! 2. Noise `n` is sampled per row from its segment's parameters.
//! 3. Latents follow additive-noise structural equations in causal order:
//!    `z_i = sum_j lambda_{j,i}(u) * phi_i(z_j) + n_i` over parents `j`,
//!    with per-segment edge coefficients `lambda` and a per-node
//!    nonlinearity `phi` chosen by an equation tag.
//! 4. Optionally, a *violation* rewrites chosen nodes as
//!    `z_i := z_i + z_{i-1}` (computed from the pre-violation latents),
//!    installing a segment-invariant parent influence.
//! 5. Optionally, a *post-nonlinear* distortion applies a strictly monotone
//!    `g_i` to each latent.
//! 6. An invertible mixing MLP maps latents to observations `x`.
//!
//! Everything is seeded; generation is bit-reproducible.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mm_nt, mm_tn, Tensor};
use crate::error::{Error, Result};
use crate::io;
use crate::linalg;
use crate::rng;

/// Sampling range for segment noise means.
pub const ALPHA_RANGE: (f64, f64) = (-2.0, 2.0);
/// Sampling range for segment noise variances.
pub const BETA_RANGE: (f64, f64) = (0.1, 3.0);
/// Magnitude range for edge coefficients; the sign is symmetric, so the
/// support is `[-2, -0.1] U [0.1, 2]` — never inside `(-0.1, 0.1)`.
pub const LAMBDA_MAG_RANGE: (f64, f64) = (0.1, 2.0);
/// Guard added inside `log(t^2 + GUARD)` to keep the log-square equation
/// defined at `t = 0`.
pub const LOG_SQUARE_GUARD: f64 = 1e-8;
/// Condition-number bound under which a square mixing layer counts as
/// numerically invertible.
pub const MIXING_COND_LIMIT: f64 = 1e4;

const STREAM_PARAMS: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_COEFFS: u64 = 3;
const STREAM_MIXING: u64 = 4;

// ── Structural equation tags ─────────────────────────────────────────────

/// Per-node structural nonlinearity applied to each parent value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquationTag {
    Linear,
    Sin,
    Cos,
    /// `log(t^2 + 1e-8)`; the guard keeps it defined at zero.
    LogSquare,
    /// `exp(sin(t^2))`.
    ExpSinSquare,
}

impl EquationTag {
    /// Evaluate the nonlinearity at one parent value.
    pub fn phi(self, t: f64) -> f64 {
        match self {
            EquationTag::Linear => t,
            EquationTag::Sin => t.sin(),
            EquationTag::Cos => t.cos(),
            EquationTag::LogSquare => (t * t + LOG_SQUARE_GUARD).ln(),
            EquationTag::ExpSinSquare => (t * t).sin().exp(),
        }
    }
}

/// Strictly monotone per-node distortion for post-nonlinear datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PnlTag {
    Identity,
    /// `t^(1/3)`; inverted in closed form by cubing.
    CubeRoot,
    /// `tanh(t) + 0.5 t`; strictly increasing, inverted by bisection.
    ScaledTanhWithLinear,
    Exp,
}

impl PnlTag {
    pub fn apply(self, t: f64) -> f64 {
        match self {
            PnlTag::Identity => t,
            PnlTag::CubeRoot => t.cbrt(),
            PnlTag::ScaledTanhWithLinear => t.tanh() + 0.5 * t,
            PnlTag::Exp => t.exp(),
        }
    }

    /// Inverse map. `Exp` requires a positive argument.
    pub fn invert(self, y: f64) -> Result<f64> {
        match self {
            PnlTag::Identity => Ok(y),
            PnlTag::CubeRoot => Ok(y * y * y),
            PnlTag::Exp => {
                if y <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "exp distortion cannot invert non-positive value {y}"
                    )));
                }
                Ok(y.ln())
            }
            PnlTag::ScaledTanhWithLinear => {
                // f(t) = tanh(t) + t/2 is strictly increasing with
                // f(t) ~ t/2 at infinity; bracket then bisect.
                let f = |t: f64| t.tanh() + 0.5 * t;
                let mut b = 1.0;
                while f(b) < y || f(-b) > y {
                    b *= 2.0;
                    if b > 1e12 {
                        return Err(Error::Numerical(format!(
                            "failed to bracket inverse of scaled-tanh at {y}"
                        )));
                    }
                }
                let (mut lo, mut hi) = (-b, b);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) < y {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-15 * hi.abs().max(1.0) {
                        break;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }
}

// ── Model specification ──────────────────────────────────────────────────

/// Structure of the latent SCM: graph, per-node equations, optional
/// violation and post-nonlinear settings.
///
/// `adjacency[i][j] = 1` encodes the edge `z_{j+1} -> z_{i+1}` (row = child,
/// column = parent). Nodes are numbered in causal order, so the matrix is
/// strictly lower triangular. Public node indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSpec {
    pub ell: usize,
    pub adjacency: Vec<Vec<u8>>,
    /// One tag per node; the tag of a root node is never evaluated.
    pub equations: Vec<EquationTag>,
    /// 1-based indices of nodes rewritten by the violation rule.
    #[serde(default)]
    pub violation_nodes: Vec<usize>,
    /// One distortion per node, or `None` for a pure additive-noise model.
    #[serde(default)]
    pub pnl: Option<Vec<PnlTag>>,
}

impl ScmSpec {
    /// A causal chain `1 -> 2 -> ... -> ell` with the canonical tag cycle
    /// sin, cos, log-square, exp-sin-square for the non-root nodes.
    pub fn chain(ell: usize) -> ScmSpec {
        let cycle = [
            EquationTag::Sin,
            EquationTag::Cos,
            EquationTag::LogSquare,
            EquationTag::ExpSinSquare,
        ];
        let mut adjacency = vec![vec![0u8; ell]; ell];
        let mut equations = vec![EquationTag::Linear; ell];
        for i in 1..ell {
            adjacency[i][i - 1] = 1;
            equations[i] = cycle[(i - 1) % cycle.len()];
        }
        ScmSpec {
            ell,
            adjacency,
            equations,
            violation_nodes: Vec::new(),
            pnl: None,
        }
    }

    /// The five-node demonstration graph: a chain `1 -> 2 -> 3` whose third
    /// node feeds two leaves, `3 -> 4` (log-square) and `3 -> 5`
    /// (exp-sin-square).
    pub fn branched_five() -> ScmSpec {
        let mut spec = ScmSpec::chain(3);
        spec.ell = 5;
        for row in &mut spec.adjacency {
            row.resize(5, 0);
        }
        spec.adjacency.push(vec![0, 0, 1, 0, 0]);
        spec.adjacency.push(vec![0, 0, 1, 0, 0]);
        spec.equations.push(EquationTag::LogSquare);
        spec.equations.push(EquationTag::ExpSinSquare);
        spec
    }

    /// 0-based parents of the 0-based node `i`, ascending.
    pub fn parents(&self, i: usize) -> Vec<usize> {
        (0..i).filter(|&j| self.adjacency[i][j] == 1).collect()
    }

    pub fn is_violated(&self, node_1based: usize) -> bool {
        self.violation_nodes.contains(&node_1based)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ell == 0 {
            return Err(Error::Config("ell must be at least 1".into()));
        }
        if self.adjacency.len() != self.ell
            || self.adjacency.iter().any(|row| row.len() != self.ell)
        {
            return Err(Error::Config(format!(
                "adjacency must be {0}x{0}",
                self.ell
            )));
        }
        for (i, row) in self.adjacency.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(Error::Config(format!(
                        "adjacency[{i}][{j}] = {v} is not binary"
                    )));
                }
                if v == 1 && j >= i {
                    return Err(Error::Config(format!(
                        "adjacency[{i}][{j}] = 1 breaks strict lower-triangularity \
                         (parents must precede children)"
                    )));
                }
            }
        }
        if self.equations.len() != self.ell {
            return Err(Error::Config(format!(
                "expected {} equation tags, got {}",
                self.ell,
                self.equations.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for &v in &self.violation_nodes {
            if v < 2 || v > self.ell {
                return Err(Error::Config(format!(
                    "violation node {v} outside 2..={} (node 1 has no predecessor)",
                    self.ell
                )));
            }
            if self.parents(v - 1).is_empty() {
                return Err(Error::Config(format!(
                    "violation node {v} has no parents"
                )));
            }
            if !seen.insert(v) {
                return Err(Error::Config(format!("violation node {v} repeated")));
            }
        }
        for &v in &self.violation_nodes {
            if seen.contains(&(v - 1)) {
                return Err(Error::Config(format!(
                    "violation nodes {} and {v} are adjacent; the rewrite rule \
                     is defined on pre-violation latents only",
                    v - 1
                )));
            }
        }
        if let Some(pnl) = &self.pnl {
            if pnl.len() != self.ell {
                return Err(Error::Config(format!(
                    "expected {} post-nonlinear tags, got {}",
                    self.ell,
                    pnl.len()
                )));
            }
        }
        Ok(())
    }
}

// ── Segment noise ────────────────────────────────────────────────────────

/// Per-segment Gaussian noise parameters: `alpha[s][i]` is the mean and
/// `beta[s][i]` the variance of node `i+1`'s noise in segment `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentNoiseParams {
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
}

impl SegmentNoiseParams {
    pub fn new(alpha: Vec<Vec<f64>>, beta: Vec<Vec<f64>>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != beta.len() {
            return Err(Error::Config(
                "noise parameters need matching, nonempty alpha/beta tables".into(),
            ));
        }
        let ell = alpha[0].len();
        if ell == 0 {
            return Err(Error::Config("noise parameters need ell >= 1".into()));
        }
        for (s, (a, b)) in alpha.iter().zip(&beta).enumerate() {
            if a.len() != ell || b.len() != ell {
                return Err(Error::Config(format!(
                    "segment {s}: ragged noise parameter rows"
                )));
            }
            if let Some(bad) = b.iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Config(format!(
                    "segment {s}: variance {bad} is not positive"
                )));
            }
        }
        Ok(SegmentNoiseParams { alpha, beta })
    }

    /// Number of segments M.
    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    pub fn ell(&self) -> usize {
        self.alpha[0].len()
    }

    pub fn alpha(&self, segment: usize, node: usize) -> f64 {
        self.alpha[segment][node]
    }

    pub fn beta(&self, segment: usize, node: usize) -> f64 {
        self.beta[segment][node]
    }

    /// Natural parameters of the Gaussian in exponential-family form:
    /// `eta_1 = alpha / beta`, `eta_2 = -1 / (2 beta)`.
    pub fn eta(&self, segment: usize, node: usize) -> (f64, f64) {
        let a = self.alpha[segment][node];
        let b = self.beta[segment][node];
        (a / b, -1.0 / (2.0 * b))
    }

    pub fn alpha_table(&self) -> &[Vec<f64>] {
        &self.alpha
    }

    pub fn beta_table(&self) -> &[Vec<f64>] {
        &self.beta
    }
}

/// Draw per-segment `(alpha, beta)` uniformly from the canonical ranges.
pub fn sample_segment_params(ell: usize, m: usize, seed: u64) -> Result<SegmentNoiseParams> {
    sample_segment_params_in(ell, m, ALPHA_RANGE, BETA_RANGE, seed)
}

/// Draw per-segment `(alpha, beta)` uniformly from caller-chosen ranges.
pub fn sample_segment_params_in(
    ell: usize,
    m: usize,
    alpha_range: (f64, f64),
    beta_range: (f64, f64),
    seed: u64,
) -> Result<SegmentNoiseParams> {
    if ell == 0 || m == 0 {
        return Err(Error::Config("need ell >= 1 and M >= 1".into()));
    }
    for (name, (lo, hi)) in [("alpha", alpha_range), ("beta", beta_range)] {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!(
                "{name} range ({lo}, {hi}) must be finite with lo < hi"
            )));
        }
    }
    if beta_range.0 <= 0.0 {
        return Err(Error::Config(format!(
            "beta range ({}, {}) must be strictly positive (variances)",
            beta_range.0, beta_range.1
        )));
    }
    let mut r = rng::stream(seed, &[STREAM_PARAMS]);
    let mut alpha = vec![vec![0.0; ell]; m];
    let mut beta = vec![vec![0.0; ell]; m];
    for s in 0..m {
        for i in 0..ell {
            alpha[s][i] = r.random_range(alpha_range.0..alpha_range.1);
            beta[s][i] = r.random_range(beta_range.0..beta_range.1);
        }
    }
    SegmentNoiseParams::new(alpha, beta)
}

/// Sample noise rows, `samples_per_segment` per segment in segment order.
/// Returns the `N x ell` noise matrix and the per-row segment label.
pub fn sample_noise(
    params: &SegmentNoiseParams,
    samples_per_segment: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if samples_per_segment == 0 {
        return Err(Error::Config("samples_per_segment must be >= 1".into()));
    }
    let (m, ell) = (params.m(), params.ell());
    let n_rows = m * samples_per_segment;
    let mut n = Tensor::zeros(n_rows, ell);
    let mut u = Vec::with_capacity(n_rows);
    for s in 0..m {
        // Per-segment streams keep segments independent of each other and of
        // the segment count, and make segment-parallel generation exact.
        let mut r = rng::stream(seed, &[STREAM_NOISE, s as u64]);
        for row in 0..samples_per_segment {
            let at = s * samples_per_segment + row;
            for i in 0..ell {
                let std = params.beta(s, i).sqrt();
                let draw: f64 = r.sample(rand_distr::StandardNormal);
                n.set(at, i, params.alpha(s, i) + std * draw);
            }
            u.push(s);
        }
    }
    Ok((n, u))
}

// ── Edge coefficients ────────────────────────────────────────────────────

/// Per-segment edge coefficients: `lambda[s][i][j]` multiplies parent
/// `z_{j+1}`'s contribution to child `z_{i+1}` in segment `s`. Entries off
/// the adjacency support are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCoeffs {
    lambda: Vec<Vec<Vec<f64>>>,
}

impl EdgeCoeffs {
    pub fn new(lambda: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::Config("edge coefficients need M >= 1".into()));
        }
        let ell = lambda[0].len();
        for (s, table) in lambda.iter().enumerate() {
            if table.len() != ell || table.iter().any(|row| row.len() != ell) {
                return Err(Error::Config(format!(
                    "segment {s}: coefficient table is not {ell}x{ell}"
                )));
            }
        }
        Ok(EdgeCoeffs { lambda })
    }

    pub fn m(&self) -> usize {
        self.lambda.len()
    }

    pub fn ell(&self) -> usize {
        self.lambda[0].len()
    }

    /// Coefficient for edge `parent -> child` (0-based) in `segment`.
    pub fn get(&self, segment: usize, child: usize, parent: usize) -> f64 {
        self.lambda[segment][child][parent]
    }

    /// Flatten to an `(M * ell) x ell` tensor for serialization: the block
    /// of rows `[s*ell, (s+1)*ell)` is segment `s`'s child-by-parent table.
    pub fn to_tensor(&self) -> Tensor {
        let (m, ell) = (self.m(), self.ell());
        let mut t = Tensor::zeros(m * ell, ell);
        for s in 0..m {
            for c in 0..ell {
                for p in 0..ell {
                    t.set(s * ell + c, p, self.lambda[s][c][p]);
                }
            }
        }
        t
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let ell = t.cols();
        if ell == 0 || t.rows() % ell != 0 {
            return Err(Error::Dimension(format!(
                "coefficient tensor {}x{} is not a stack of {ell}x{ell} tables",
                t.rows(),
                t.cols()
            )));
        }
        let m = t.rows() / ell;
        let mut lambda = vec![vec![vec![0.0; ell]; ell]; m];
        for s in 0..m {
            for c in 0..ell {
                for p in 0..ell {
                    lambda[s][c][p] = t.get(s * ell + c, p);
                }
            }
        }
        EdgeCoeffs::new(lambda)
    }
}

/// Draw per-segment, per-edge coefficients uniformly from
/// `[-2, -0.1] U [0.1, 2]`.
///
/// With `certification_segment`, the *last* segment's coefficients are all
/// zero instead: it realizes, for every node simultaneously, the environment
/// in which parent influences vanish, making the sufficient-change condition
/// hold exactly for non-violated nodes.
pub fn sample_edge_coeffs(
    spec: &ScmSpec,
    m: usize,
    seed: u64,
    certification_segment: bool,
) -> Result<EdgeCoeffs> {
    spec.validate()?;
    if m == 0 {
        return Err(Error::Config("need M >= 1".into()));
    }
    let ell = spec.ell;
    let mut r = rng::stream(seed, &[STREAM_COEFFS]);
    let mut lambda = vec![vec![vec![0.0; ell]; ell]; m];
    let span = LAMBDA_MAG_RANGE.1 - LAMBDA_MAG_RANGE.0;
    for (s, table) in lambda.iter_mut().enumerate() {
        let zero_out = certification_segment && s == m - 1;
        for child in 0..ell {
            for parent in 0..child {
                if spec.adjacency[child][parent] == 0 {
                    continue;
                }
                // Uniform over the two-sided range: draw from one span of
                // twice the magnitude window, then push away from zero.
                let t = r.random_range(-span..span);
                let draw = t + LAMBDA_MAG_RANGE.0 * t.signum();
                table[child][parent] = if zero_out { 0.0 } else { draw };
            }
        }
    }
    EdgeCoeffs::new(lambda)
}

// ── Structural equations ─────────────────────────────────────────────────

/// Node `i`'s structural mechanism (noise excluded) as a function of the
/// realized values of its predecessors, under the given segment.
///
/// `pred[j]` must hold the value of node `j+1` for `j < i` (0-based `i`).
/// For a violated node the composed mechanism gains the segment-invariant
/// term `+ pred[i-1]`; spec validation guarantees violations are never
/// adjacent, so predecessor values coincide with the realized latents.
pub fn mechanism(
    spec: &ScmSpec,
    coeffs: &EdgeCoeffs,
    segment: usize,
    node: usize,
    pred: &[f64],
) -> f64 {
    let tag = spec.equations[node];
    let mut acc = 0.0;
    for j in 0..node {
        if spec.adjacency[node][j] == 1 {
            acc += coeffs.get(segment, node, j) * tag.phi(pred[j]);
        }
    }
    if spec.is_violated(node + 1) {
        acc += pred[node - 1];
    }
    acc
}

/// Compute latents in causal order: `z_i = mechanism_i(z_{<i}) + n_i`,
/// *without* the violation rewrite (see [`apply_violation`]).
pub fn gen_latents(
    spec: &ScmSpec,
    n: &Tensor,
    u: &[usize],
    coeffs: &EdgeCoeffs,
) -> Result<Tensor> {
    spec.validate()?;
    let ell = spec.ell;
    if n.cols() != ell || n.rows() != u.len() {
        return Err(Error::Dimension(format!(
            "noise is {}x{} with {} labels; expected N x {ell} with N labels",
            n.rows(),
            n.cols(),
            u.len()
        )));
    }
    if coeffs.ell() != ell {
        return Err(Error::Dimension(format!(
            "coefficients are for ell={}, spec has ell={ell}",
            coeffs.ell()
        )));
    }
    // The violation term is applied by apply_violation on complete rows, so
    // exclude it here by evaluating against a violation-free copy.
    let base = ScmSpec {
        violation_nodes: Vec::new(),
        ..spec.clone()
    };
    let mut z = Tensor::zeros(n.rows(), ell);
    let mut row = vec![0.0; ell];
    for r in 0..n.rows() {
        let s = u[r];
        if s >= coeffs.m() {
            return Err(Error::Data(format!(
                "row {r}: segment label {s} out of range 0..{}",
                coeffs.m()
            )));
        }
        for i in 0..ell {
            row[i] = mechanism(&base, coeffs, s, i, &row[..i]) + n.get(r, i);
            z.set(r, i, row[i]);
        }
    }
    Ok(z)
}

/// Rewrite each violated node `i` as `z_i + z_{i-1}`, evaluated on the
/// *original* latents (no cascading between violated nodes).
pub fn apply_violation(spec: &ScmSpec, z: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    if z.cols() != spec.ell {
        return Err(Error::Dimension(format!(
            "latents have {} columns, spec has ell={}",
            z.cols(),
            spec.ell
        )));
    }
    let mut out = z.clone();
    for &v in &spec.violation_nodes {
        let i = v - 1;
        for r in 0..z.rows() {
            out.set(r, i, z.get(r, i) + z.get(r, i - 1));
        }
    }
    Ok(out)
}

/// Apply the per-node post-nonlinear distortions. Identity when the spec
/// carries none.
pub fn apply_pnl(spec: &ScmSpec, z: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    let Some(tags) = &spec.pnl else {
        return Ok(z.clone());
    };
    if z.cols() != spec.ell {
        return Err(Error::Dimension(format!(
            "latents have {} columns, spec has ell={}",
            z.cols(),
            spec.ell
        )));
    }
    let mut out = z.clone();
    for (i, tag) in tags.iter().enumerate() {
        for r in 0..z.rows() {
            out.set(r, i, tag.apply(z.get(r, i)));
        }
    }
    Ok(out)
}

// ── Mixing ───────────────────────────────────────────────────────────────

/// The invertible latent-to-observation map: an optional orthonormal
/// embedding (when `D > ell`) followed by a three-layer LeakyReLU MLP with
/// square weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixing {
    /// `D x ell` column-orthonormal embedding; `None` when `D = ell`.
    pub pad: Option<Tensor>,
    /// Three `D x D` weight matrices (output-major rows).
    pub weights: Vec<Tensor>,
    /// LeakyReLU slope between layers; must be positive for invertibility.
    pub slope: f64,
    /// Condition numbers achieved by the square layers, recorded for the
    /// manifest.
    pub condition_numbers: Vec<f64>,
}

impl Mixing {
    pub fn ell(&self) -> usize {
        self.pad
            .as_ref()
            .map_or_else(|| self.weights[0].cols(), Tensor::cols)
    }

    pub fn d(&self) -> usize {
        self.weights[0].rows()
    }

    /// The exact-identity mixing (slope 1 so activations are transparent);
    /// a fixture for tests where `x` must equal `z`.
    pub fn identity(ell: usize) -> Mixing {
        Mixing {
            pad: None,
            weights: (0..3).map(|_| Tensor::eye(ell)).collect(),
            slope: 1.0,
            condition_numbers: vec![1.0; 3],
        }
    }

    /// Map a batch of latents (`N x ell`) to observations (`N x D`).
    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.ell() {
            return Err(Error::Dimension(format!(
                "mixing expects {} latent columns, got {}",
                self.ell(),
                z.cols()
            )));
        }
        let mut h = match &self.pad {
            Some(p) => mm_nt(z, p),
            None => z.clone(),
        };
        for (k, w) in self.weights.iter().enumerate() {
            h = mm_nt(&h, w);
            if k + 1 < self.weights.len() {
                let s = self.slope;
                h = h.map(|v| if v > 0.0 { v } else { s * v });
            }
        }
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != 3 {
            return Err(Error::Config(format!(
                "mixing needs exactly 3 layers, got {}",
                self.weights.len()
            )));
        }
        let d = self.d();
        for (k, w) in self.weights.iter().enumerate() {
            if w.shape() != (d, d) {
                return Err(Error::Config(format!(
                    "mixing layer {k} is {}x{}, expected {d}x{d}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        if let Some(p) = &self.pad {
            if p.rows() != d || p.cols() > d {
                return Err(Error::Config(format!(
                    "mixing pad is {}x{}, expected {d} x ell<= {d}",
                    p.rows(),
                    p.cols()
                )));
            }
        }
        if !(self.slope > 0.0) {
            return Err(Error::Config(format!(
                "mixing slope {} must be positive for invertibility",
                self.slope
            )));
        }
        Ok(())
    }
}

/// Build a random mixing for `ell` latents observed in `d >= ell`
/// dimensions. Square layers are re-drawn until their condition number is
/// below [`MIXING_COND_LIMIT`].
pub fn make_mixing(ell: usize, d: usize, slope: f64, seed: u64) -> Result<Mixing> {
    if ell == 0 || d < ell {
        return Err(Error::Config(format!(
            "mixing needs 1 <= ell <= D, got ell={ell}, D={d}"
        )));
    }
    if !(slope > 0.0) {
        return Err(Error::Config(format!(
            "mixing slope {slope} must be positive for invertibility"
        )));
    }
    let mut r = rng::stream(seed, &[STREAM_MIXING]);
    let pad = if d > ell {
        Some(linalg::orthonormal_columns(d, ell, &mut r)?)
    } else {
        None
    };
    let scale = (3.0 / d as f64).sqrt();
    // Expected post-activation shrinkage of a LeakyReLU on a centered input
    // is sqrt((1 + slope^2) / 2); hidden layers are scaled to compensate so
    // the composed map neither crushes nor explodes the latent scale. The
    // observation noise floor is fixed, so a mixing that shrank the signal
    // below it would make every downstream experiment vacuous.
    let act_gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let mut weights = Vec::with_capacity(3);
    let mut condition_numbers = Vec::with_capacity(3);
    for layer in 0..3 {
        let mut found = None;
        for _attempt in 0..100 {
            let w = Tensor::from_raw_uniform(d, d, scale, &mut r);
            let cond = linalg::condition_number(&w)?;
            if cond < MIXING_COND_LIMIT {
                found = Some((w, cond));
                break;
            }
        }
        let Some((mut w, cond)) = found else {
            return Err(Error::Numerical(
                "mixing layer resampling failed to reach the condition bound".into(),
            ));
        };
        // Center the singular spectrum on 1 (a scalar factor leaves the
        // condition number untouched): gains then spread symmetrically in
        // log-space instead of compounding toward zero across layers.
        let eigs = linalg::symmetric_eigenvalues(&mm_tn(&w, &w))?;
        let s_min = eigs.first().copied().unwrap_or(0.0).max(0.0).sqrt();
        let s_max = eigs.last().copied().unwrap_or(0.0).max(0.0).sqrt();
        let mut factor = 1.0 / (s_min * s_max).sqrt();
        if layer + 1 < 3 {
            factor *= act_gain;
        }
        if !factor.is_finite() {
            return Err(Error::Numerical(
                "mixing layer normalization produced a non-finite factor".into(),
            ));
        }
        for v in w.data_mut() {
            *v *= factor;
        }
        weights.push(w);
        condition_numbers.push(cond);
    }
    Ok(Mixing {
        pad,
        weights,
        slope,
        condition_numbers,
    })
}

/// Rescale the mixing's final layer so every observed column of `x` has unit
/// empirical standard deviation, and return the correspondingly rescaled
/// observations. A diagonal factor folded into the last (activation-free)
/// layer leaves the mixing in its declared three-layer family, while pinning
/// the observed scale: the observation model's noise variance is a fixed
/// constant, so an arbitrary per-draw gain would otherwise set the
/// signal-to-noise ratio of every experiment at random.
fn standardize_observations(mixing: &mut Mixing, x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.shape();
    if rows < 2 {
        return Err(Error::Config(
            "standardizing observations needs at least 2 rows".into(),
        ));
    }
    let mut out = x.clone();
    let last = mixing.weights.len() - 1;
    for c in 0..cols {
        let mean = (0..rows).map(|r| x.get(r, c)).sum::<f64>() / rows as f64;
        let var =
            (0..rows).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / rows as f64;
        if !(var > 1e-24) {
            return Err(Error::Numerical(format!(
                "observed column {c} is essentially constant (variance {var:.3e}); \
                 the mixing cannot be standardized"
            )));
        }
        let inv = 1.0 / var.sqrt();
        for j in 0..mixing.weights[last].cols() {
            let w = mixing.weights[last].get(c, j) * inv;
            mixing.weights[last].set(c, j, w);
        }
        for r in 0..rows {
            out.set(r, c, x.get(r, c) * inv);
        }
    }
    // The diagonal rescaling can move the last layer's conditioning; the
    // manifest should report what was actually stored.
    mixing.condition_numbers[last] = linalg::condition_number(&mixing.weights[last])?;
    Ok(out)
}

impl Tensor {
    /// Uniform draws in `[-scale, scale)`; generation-side helper.
    fn from_raw_uniform(rows: usize, cols: usize, scale: f64, r: &mut rng::Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| r.random_range(-scale..scale))
            .collect();
        Tensor::new(rows, cols, data).expect("uniform draws are finite")
    }
}

// ── Dataset ──────────────────────────────────────────────────────────────

/// Whether a dataset carries a synthetic ground-truth generator or was
/// ingested from external recordings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    /// External signals treated as latents; noise parameters are per-segment
    /// moments *fitted* from the signals, and the graph is unknown.
    Fmri,
}

/// Everything the generation pipeline produced, in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    /// Observations, `N x D`.
    pub x: Tensor,
    /// Ground-truth latents (post-violation, pre-distortion), `N x ell`.
    pub z: Tensor,
    /// Post-nonlinear latents, present only for PNL specs. When present,
    /// these are what the mixing consumed, hence the reference for
    /// affine-recovery metrics.
    pub zbar: Option<Tensor>,
    /// Noise draws, `N x ell`.
    pub n: Tensor,
    /// Per-row segment label in `[0, M)`.
    pub u: Vec<usize>,
    pub m: usize,
    pub spec: ScmSpec,
    pub noise_params: SegmentNoiseParams,
    pub coeffs: EdgeCoeffs,
    pub mixing: Mixing,
    pub seed: u64,
    /// Whether the last segment is the all-zero-coefficient certification
    /// segment.
    pub certification_segment: bool,
}

impl Dataset {
    /// The latents a trained model is expected to recover affinely: the
    /// post-nonlinear latents when present, the plain latents otherwise.
    pub fn reference_latents(&self) -> &Tensor {
        self.zbar.as_ref().unwrap_or(&self.z)
    }

    /// Rows per segment (validated to be constant at generation).
    pub fn rows(&self) -> usize {
        self.x.rows()
    }
}

fn default_alpha_range() -> (f64, f64) {
    ALPHA_RANGE
}
fn default_beta_range() -> (f64, f64) {
    BETA_RANGE
}

/// Options for [`gen_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenOptions {
    pub spec: ScmSpec,
    /// Segment count M.
    pub segments: usize,
    pub samples_per_segment: usize,
    /// Observed dimension `D >= ell`.
    pub d: usize,
    pub mixing_slope: f64,
    /// Zero out the last segment's coefficients (see
    /// [`sample_edge_coeffs`]).
    pub certification_segment: bool,
    pub seed: u64,
    /// Sampling range for segment noise means.
    #[serde(default = "default_alpha_range")]
    pub alpha_range: (f64, f64),
    /// Sampling range for segment noise variances.
    #[serde(default = "default_beta_range")]
    pub beta_range: (f64, f64),
    /// Separate seed for the mixing weights (defaults to `seed`).
    #[serde(default)]
    pub mixing_seed: Option<u64>,
}

impl Default for GenOptions {
    fn default() -> GenOptions {
        GenOptions {
            spec: ScmSpec::chain(3),
            segments: 50,
            samples_per_segment: 1000,
            d: 3,
            mixing_slope: 0.2,
            certification_segment: true,
            seed: 0,
            alpha_range: ALPHA_RANGE,
            beta_range: BETA_RANGE,
            mixing_seed: None,
        }
    }
}

/// Run the full generation pipeline.
pub fn gen_dataset(opts: &GenOptions) -> Result<Dataset> {
    opts.spec.validate()?;
    let params = sample_segment_params_in(
        opts.spec.ell,
        opts.segments,
        opts.alpha_range,
        opts.beta_range,
        opts.seed,
    )?;
    let (n, u) = sample_noise(&params, opts.samples_per_segment, opts.seed)?;
    let coeffs = sample_edge_coeffs(
        &opts.spec,
        opts.segments,
        opts.seed,
        opts.certification_segment,
    )?;
    let z0 = gen_latents(&opts.spec, &n, &u, &coeffs)?;
    let z = apply_violation(&opts.spec, &z0)?;
    let zbar = match &opts.spec.pnl {
        Some(_) => Some(apply_pnl(&opts.spec, &z)?),
        None => None,
    };
    let mut mixing = make_mixing(
        opts.spec.ell,
        opts.d,
        opts.mixing_slope,
        opts.mixing_seed.unwrap_or(opts.seed),
    )?;
    let raw = mixing.apply(zbar.as_ref().unwrap_or(&z))?;
    let x = standardize_observations(&mut mixing, &raw)?;
    Ok(Dataset {
        kind: DatasetKind::Synthetic,
        x,
        z,
        zbar,
        n,
        u,
        m: opts.segments,
        spec: opts.spec.clone(),
        noise_params: params,
        coeffs,
        mixing,
        seed: opts.seed,
        certification_segment: opts.certification_segment,
    })
}

// ── Persistence ──────────────────────────────────────────────────────────

/// The JSON manifest stored alongside a dataset's binary arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub ell: usize,
    pub d: usize,
    pub m: usize,
    pub n_rows: usize,
    pub seed: u64,
    pub spec: ScmSpec,
    pub mixing_slope: f64,
    pub mixing_condition_numbers: Vec<f64>,
    pub certification_segment: bool,
    pub files: Vec<String>,
}

const F_X: &str = "x.lanm";
const F_Z: &str = "z.lanm";
const F_ZBAR: &str = "zbar.lanm";
const F_N: &str = "n.lanm";
const F_U: &str = "u.lanm";
const F_ALPHAS: &str = "alphas.lanm";
const F_BETAS: &str = "betas.lanm";
const F_COEFFS: &str = "coeffs.lanm";
const F_MIX_PAD: &str = "mixing_pad.lanm";
const F_MIX_W: [&str; 3] = ["mixing_w0.lanm", "mixing_w1.lanm", "mixing_w2.lanm"];
pub const MANIFEST_FILE: &str = "manifest.json";

fn table_to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).expect("tables are rectangular by construction")
}

fn tensor_to_table(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

impl Dataset {
    /// Write the dataset into `dir` (which must already exist): a manifest
    /// plus one binary file per array. Labels are stored one-hot (`N x M`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut files = vec![
            F_X.to_string(),
            F_Z.to_string(),
            F_N.to_string(),
            F_U.to_string(),
            F_ALPHAS.to_string(),
            F_BETAS.to_string(),
            F_COEFFS.to_string(),
        ];
        if self.zbar.is_some() {
            files.push(F_ZBAR.to_string());
        }
        if self.mixing.pad.is_some() {
            files.push(F_MIX_PAD.to_string());
        }
        for w in F_MIX_W {
            files.push(w.to_string());
        }
        let manifest = DatasetManifest {
            kind: self.kind,
            ell: self.spec.ell,
            d: self.x.cols(),
            m: self.m,
            n_rows: self.x.rows(),
            seed: self.seed,
            spec: self.spec.clone(),
            mixing_slope: self.mixing.slope,
            mixing_condition_numbers: self.mixing.condition_numbers.clone(),
            certification_segment: self.certification_segment,
            files,
        };
        io::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        io::write_tensor(&dir.join(F_X), &self.x)?;
        io::write_tensor(&dir.join(F_Z), &self.z)?;
        if let Some(zbar) = &self.zbar {
            io::write_tensor(&dir.join(F_ZBAR), zbar)?;
        }
        io::write_tensor(&dir.join(F_N), &self.n)?;
        let mut onehot = Tensor::zeros(self.u.len(), self.m);
        for (r, &s) in self.u.iter().enumerate() {
            onehot.set(r, s, 1.0);
        }
        io::write_tensor(&dir.join(F_U), &onehot)?;
        io::write_tensor(&dir.join(F_ALPHAS), &table_to_tensor(self.noise_params.alpha_table()))?;
        io::write_tensor(&dir.join(F_BETAS), &table_to_tensor(self.noise_params.beta_table()))?;
        io::write_tensor(&dir.join(F_COEFFS), &self.coeffs.to_tensor())?;
        if let Some(pad) = &self.mixing.pad {
            io::write_tensor(&dir.join(F_MIX_PAD), pad)?;
        }
        for (name, w) in F_MIX_W.iter().zip(&self.mixing.weights) {
            io::write_tensor(&dir.join(name), w)?;
        }
        Ok(())
    }

    /// Read a dataset directory back, validating shapes and labels.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
        manifest.spec.validate()?;
        let x = io::read_tensor(&dir.join(F_X))?;
        let z = io::read_tensor(&dir.join(F_Z))?;
        let zbar = if manifest.spec.pnl.is_some() {
            Some(io::read_tensor(&dir.join(F_ZBAR))?)
        } else {
            None
        };
        let n = io::read_tensor(&dir.join(F_N))?;
        let onehot = io::read_tensor(&dir.join(F_U))?;
        if onehot.shape() != (manifest.n_rows, manifest.m) {
            return Err(Error::Dimension(format!(
                "label matrix is {}x{}, manifest says {}x{}",
                onehot.rows(),
                onehot.cols(),
                manifest.n_rows,
                manifest.m
            )));
        }
        let mut u = Vec::with_capacity(onehot.rows());
        for r in 0..onehot.rows() {
            let row = onehot.row(r);
            let hot: Vec<usize> = (0..row.len()).filter(|&j| row[j] != 0.0).collect();
            if hot.len() != 1 || row[hot[0]] != 1.0 {
                return Err(Error::Data(format!(
                    "label row {r} is not one-hot"
                )));
            }
            u.push(hot[0]);
        }
        let alphas = io::read_tensor(&dir.join(F_ALPHAS))?;
        let betas = io::read_tensor(&dir.join(F_BETAS))?;
        let noise_params =
            SegmentNoiseParams::new(tensor_to_table(&alphas), tensor_to_table(&betas))?;
        let coeffs = EdgeCoeffs::from_tensor(&io::read_tensor(&dir.join(F_COEFFS))?)?;
        let pad = if manifest.files.iter().any(|f| f == F_MIX_PAD) {
            Some(io::read_tensor(&dir.join(F_MIX_PAD))?)
        } else {
            None
        };
        let weights = F_MIX_W
            .iter()
            .map(|name| io::read_tensor(&dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        let mixing = Mixing {
            pad,
            weights,
            slope: manifest.mixing_slope,
            condition_numbers: manifest.mixing_condition_numbers.clone(),
        };
        mixing.validate()?;
        let ds = Dataset {
            kind: manifest.kind,
            x,
            z,
            zbar,
            n,
            u,
            m: manifest.m,
            spec: manifest.spec,
            noise_params,
            coeffs,
            mixing,
            seed: manifest.seed,
            certification_segment: manifest.certification_segment,
        };
        if ds.x.rows() != ds.z.rows()
            || ds.z.rows() != ds.n.rows()
            || ds.n.rows() != ds.u.len()
        {
            return Err(Error::Dimension(
                "x, z, n, and labels disagree on row count".into(),
            ));
        }
        if ds.z.cols() != ds.spec.ell || ds.n.cols() != ds.spec.ell {
            return Err(Error::Dimension(
                "latent column count disagrees with the spec".into(),
            ));
        }
        Ok(ds)
    }
}

// ── External signal ingestion ────────────────────────────────────────────

/// Column names required of an ingested signal table, in order.
pub const FMRI_COLUMNS: [&str; 6] = ["PRC", "PHC", "ERC", "Sub", "CA1", "DG"];
/// Valid day labels are `0..FMRI_DAYS`.
pub const FMRI_DAYS: usize = 84;

/// An ingested external signal table: standardized signals grouped by day.
#[derive(Debug, Clone)]
pub struct FmriTable {
    /// Standardized signals, `N x 6`, rows ordered by ascending day.
    pub z: Tensor,
    /// Per-row segment index into `days`.
    pub u: Vec<usize>,
    /// Ascending distinct day labels; segment `s` is day `days[s]`.
    pub days: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Parse and standardize a day-keyed CSV of region signals.
///
/// The header must be exactly `day,PRC,PHC,ERC,Sub,CA1,DG`; days must lie in
/// `[0, 84)`. Signals are standardized per column over the whole table
/// (population variance), preserving cross-day distribution shifts. Rows are
/// regrouped by ascending day; order within a day follows the file.
pub fn ingest_fmri(path: &Path) -> Result<FmriTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    };
    let expected_header = format!("day,{}", FMRI_COLUMNS.join(","));
    if header.trim_end_matches('\r') != expected_header {
        return Err(Error::Data(format!(
            "{}: header must be exactly '{expected_header}', got '{header}'",
            path.display()
        )));
    }
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Err(Error::Data(format!(
                "{}: row {}: expected 7 columns, got {}",
                path.display(),
                lineno + 1,
                cells.len()
            )));
        }
        let day: usize = cells[0].trim().parse().map_err(|_| {
            Error::Data(format!(
                "{}: row {}: day '{}' is not a non-negative integer",
                path.display(),
                lineno + 1,
                cells[0]
            ))
        })?;
        if day >= FMRI_DAYS {
            return Err(Error::Data(format!(
                "{}: row {}: day {day} outside [0, {FMRI_DAYS})",
                path.display(),
                lineno + 1
            )));
        }
        let mut vals = Vec::with_capacity(6);
        for (c, cell) in cells[1..].iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {}: column {} value '{}' is not numeric",
                    path.display(),
                    lineno + 1,
                    FMRI_COLUMNS[c],
                    cell
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: row {}: non-finite value in column {}",
                    path.display(),
                    lineno + 1,
                    FMRI_COLUMNS[c]
                )));
            }
            vals.push(v);
        }
        rows.push((day, vals));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: no data rows",
            path.display()
        )));
    }

    // Group by ascending day; stable within a day.
    rows.sort_by_key(|(day, _)| *day);
    let days: Vec<usize> = {
        let mut d: Vec<usize> = rows.iter().map(|(day, _)| *day).collect();
        d.dedup();
        d
    };
    let mut warnings = Vec::new();
    if days.len() < 2 * 6 + 1 {
        warnings.push(format!(
            "only {} distinct day(s); the sufficient-variability check needs \
             at least {} environments and will fail",
            days.len(),
            2 * 6 + 1
        ));
    }
    let u: Vec<usize> = rows
        .iter()
        .map(|(day, _)| days.binary_search(day).expect("day present"))
        .collect();

    // Whole-table standardization, population variance.
    let n_rows = rows.len();
    let mut z = Tensor::zeros(n_rows, 6);
    for c in 0..6 {
        let mean = rows.iter().map(|(_, v)| v[c]).sum::<f64>() / n_rows as f64;
        let var = rows
            .iter()
            .map(|(_, v)| (v[c] - mean).powi(2))
            .sum::<f64>()
            / n_rows as f64;
        if var <= 0.0 {
            return Err(Error::Data(format!(
                "{}: column {} is constant; cannot standardize",
                path.display(),
                FMRI_COLUMNS[c]
            )));
        }
        let std = var.sqrt();
        for (r, (_, v)) in rows.iter().enumerate() {
            z.set(r, c, (v[c] - mean) / std);
        }
    }
    Ok(FmriTable {
        z,
        u,
        days,
        warnings,
    })
}

/// Wrap ingested signals as a [`Dataset`]: signals become the latents, a
/// random mixing produces observations, and per-segment Gaussian moments are
/// fitted so the sufficient-variability check has something to examine.
pub fn gen_fmri_dataset(
    table: &FmriTable,
    d: usize,
    mixing_slope: f64,
    seed: u64,
) -> Result<Dataset> {
    let ell = table.z.cols();
    let m = table.days.len();
    let mut mixing = make_mixing(ell, d, mixing_slope, seed)?;
    let raw = mixing.apply(&table.z)?;
    let x = standardize_observations(&mut mixing, &raw)?;

    // Fitted per-segment moments; a floor keeps single-row segments from
    // producing a zero variance (their check verdict is meaningless anyway).
    let mut alpha = vec![vec![0.0; ell]; m];
    let mut beta = vec![vec![0.0; ell]; m];
    for s in 0..m {
        let members: Vec<usize> = (0..table.z.rows())
            .filter(|&r| table.u[r] == s)
            .collect();
        for c in 0..ell {
            let mean = members.iter().map(|&r| table.z.get(r, c)).sum::<f64>()
                / members.len() as f64;
            let var = members
                .iter()
                .map(|&r| (table.z.get(r, c) - mean).powi(2))
                .sum::<f64>()
                / members.len() as f64;
            alpha[s][c] = mean;
            beta[s][c] = var.max(1e-12);
        }
    }
    let spec = ScmSpec {
        ell,
        adjacency: vec![vec![0; ell]; ell],
        equations: vec![EquationTag::Linear; ell],
        violation_nodes: Vec::new(),
        pnl: None,
    };
    Ok(Dataset {
        kind: DatasetKind::Fmri,
        x,
        z: table.z.clone(),
        zbar: None,
        n: table.z.clone(),
        u: table.u.clone(),
        m,
        spec,
        noise_params: SegmentNoiseParams::new(alpha, beta)?,
        coeffs: EdgeCoeffs::new(vec![vec![vec![0.0; ell]; ell]; m])?,
        mixing,
        seed,
        certification_segment: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_spec_shape() {
        let spec = ScmSpec::chain(4);
        spec.validate().unwrap();
        assert_eq!(spec.parents(0), Vec::<usize>::new());
        assert_eq!(spec.parents(3), vec![2]);
        assert_eq!(spec.equations[1], EquationTag::Sin);
        assert_eq!(spec.equations[3], EquationTag::LogSquare);
        let five = ScmSpec::branched_five();
        five.validate().unwrap();
        assert_eq!(five.parents(3), vec![2]);
        assert_eq!(five.parents(4), vec![2]);
    }

    #[test]
    fn spec_validation_rejects_bad_structures() {
        let mut upper = ScmSpec::chain(3);
        upper.adjacency[0][2] = 1;
        assert!(upper.validate().is_err());

        let mut nonbinary = ScmSpec::chain(3);
        nonbinary.adjacency[1][0] = 2;
        assert!(nonbinary.validate().is_err());

        let mut v1 = ScmSpec::chain(3);
        v1.violation_nodes = vec![1];
        assert!(v1.validate().is_err());

        let mut orphan = ScmSpec::chain(3);
        orphan.adjacency[1][0] = 0; // node 2 now has no parents
        orphan.violation_nodes = vec![2];
        assert!(orphan.validate().is_err());

        let mut adjacent = ScmSpec::chain(4);
        adjacent.violation_nodes = vec![2, 3];
        assert!(adjacent.validate().is_err());

        let mut pnl = ScmSpec::chain(3);
        pnl.pnl = Some(vec![PnlTag::Identity]);
        assert!(pnl.validate().is_err());
    }

    #[test]
    fn segment_params_respect_ranges_and_seed() {
        let p = sample_segment_params(3, 50, 7).unwrap();
        assert_eq!((p.m(), p.ell()), (50, 3));
        for s in 0..50 {
            for i in 0..3 {
                let (a, b) = (p.alpha(s, i), p.beta(s, i));
                assert!((ALPHA_RANGE.0..ALPHA_RANGE.1).contains(&a));
                assert!((BETA_RANGE.0..BETA_RANGE.1).contains(&b));
            }
        }
        let q = sample_segment_params(3, 50, 7).unwrap();
        assert_eq!(p, q);
        assert_ne!(p, sample_segment_params(3, 50, 8).unwrap());
    }

    #[test]
    fn eta_matches_the_gaussian_natural_parameters() {
        let p = SegmentNoiseParams::new(vec![vec![1.0]], vec![vec![2.0]]).unwrap();
        let (e1, e2) = p.eta(0, 0);
        assert_eq!(e1, 0.5);
        assert_eq!(e2, -0.25);
        assert!(SegmentNoiseParams::new(vec![vec![0.0]], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn noise_moments_match_parameters() {
        let p = SegmentNoiseParams::new(
            vec![vec![0.0], vec![1.5]],
            vec![vec![1.0], vec![0.1]],
        )
        .unwrap();
        let (n, u) = sample_noise(&p, 10_000, 3).unwrap();
        assert_eq!(n.rows(), 20_000);
        assert_eq!(u[..10_000], vec![0; 10_000][..]);
        let col0: Vec<f64> = (0..10_000).map(|r| n.get(r, 0)).collect();
        let mean0 = col0.iter().sum::<f64>() / 10_000.0;
        let var0 = col0.iter().map(|v| (v - mean0).powi(2)).sum::<f64>() / 10_000.0;
        assert!(mean0.abs() < 0.05, "mean {mean0}");
        assert!((var0 - 1.0).abs() < 0.1, "var {var0}");
        let col1: Vec<f64> = (10_000..20_000).map(|r| n.get(r, 0)).collect();
        let mean1 = col1.iter().sum::<f64>() / 10_000.0;
        let var1 = col1.iter().map(|v| (v - mean1).powi(2)).sum::<f64>() / 10_000.0;
        assert!((mean1 - 1.5).abs() < 0.05, "mean {mean1}");
        assert!((var1 - 0.1).abs() < 0.02, "var {var1}");
        // Determinism.
        let (n2, _) = sample_noise(&p, 10_000, 3).unwrap();
        assert_eq!(n.data(), n2.data());
    }

    #[test]
    fn edge_coeffs_avoid_the_dead_zone() {
        let spec = ScmSpec::chain(4);
        let c = sample_edge_coeffs(&spec, 30, 5, false).unwrap();
        for s in 0..30 {
            for child in 1..4 {
                let v = c.get(s, child, child - 1);
                assert!(
                    (LAMBDA_MAG_RANGE.0..=LAMBDA_MAG_RANGE.1).contains(&v.abs()),
                    "lambda {v}"
                );
            }
        }
        // Off-edge entries stay zero.
        assert_eq!(c.get(0, 3, 0), 0.0);
        // Certification: last segment all-zero, others untouched.
        let cert = sample_edge_coeffs(&spec, 30, 5, true).unwrap();
        for child in 1..4 {
            assert_eq!(cert.get(29, child, child - 1), 0.0);
            assert_eq!(cert.get(0, child, child - 1), c.get(0, child, child - 1));
        }
        // Determinism.
        assert_eq!(c, sample_edge_coeffs(&spec, 30, 5, false).unwrap());
    }

    #[test]
    fn latents_follow_the_stated_equations() {
        let spec = ScmSpec::chain(2);
        let coeffs = EdgeCoeffs::new(vec![
            vec![vec![0.0, 0.0], vec![1.3, 0.0]],
            vec![vec![0.0, 0.0], vec![-0.4, 0.0]],
        ])
        .unwrap();
        let n = Tensor::from_rows(&[vec![0.7, -0.2], vec![-1.1, 0.5]]).unwrap();
        let z = gen_latents(&spec, &n, &[0, 1], &coeffs).unwrap();
        assert_eq!(z.get(0, 0), 0.7);
        assert!((z.get(0, 1) - (1.3 * 0.7_f64.sin() - 0.2)).abs() < 1e-15);
        assert!((z.get(1, 1) - (-0.4 * (-1.1_f64).sin() + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn zero_coefficients_reduce_latents_to_noise() {
        let spec = ScmSpec::chain(3);
        let coeffs = EdgeCoeffs::new(vec![vec![vec![0.0; 3]; 3]]).unwrap();
        let params = sample_segment_params(3, 1, 1).unwrap();
        let (n, u) = sample_noise(&params, 100, 1).unwrap();
        let z = gen_latents(&spec, &n, &u, &coeffs).unwrap();
        assert_eq!(z.data(), n.data());
    }

    #[test]
    fn violation_rewrites_from_original_latents() {
        let mut spec = ScmSpec::chain(4);
        spec.violation_nodes = vec![2];
        let z = Tensor::from_rows(&[vec![1.0, 10.0, 100.0, 1000.0]]).unwrap();
        let zdot = apply_violation(&spec, &z).unwrap();
        assert_eq!(zdot.data(), &[1.0, 11.0, 100.0, 1000.0]);

        // Node 4 violated too (not adjacent to 2): both use original values.
        spec.violation_nodes = vec![2, 4];
        let zdot = apply_violation(&spec, &z).unwrap();
        assert_eq!(zdot.data(), &[1.0, 11.0, 100.0, 1100.0]);

        // Empty set is the identity.
        spec.violation_nodes.clear();
        assert_eq!(apply_violation(&spec, &z).unwrap().data(), z.data());
    }

    #[test]
    fn pnl_tags_are_monotone_and_invertible() {
        let vals = [-3.0, -0.7, 0.0, 0.4, 2.5];
        for tag in [
            PnlTag::Identity,
            PnlTag::CubeRoot,
            PnlTag::ScaledTanhWithLinear,
            PnlTag::Exp,
        ] {
            let mut prev = f64::NEG_INFINITY;
            for v in vals {
                let y = tag.apply(v);
                assert!(y > prev, "{tag:?} not strictly increasing");
                prev = y;
                let back = tag.invert(y).unwrap();
                assert!((back - v).abs() < 1e-10, "{tag:?}: {v} -> {y} -> {back}");
            }
        }
        assert!(PnlTag::Exp.invert(-1.0).is_err());
    }

    #[test]
    fn apply_pnl_distorts_componentwise() {
        let mut spec = ScmSpec::chain(2);
        let z = Tensor::from_rows(&[vec![1.0, -8.0], vec![0.0, 27.0]]).unwrap();
        assert_eq!(apply_pnl(&spec, &z).unwrap().data(), z.data());
        spec.pnl = Some(vec![PnlTag::Exp, PnlTag::CubeRoot]);
        let zbar = apply_pnl(&spec, &z).unwrap();
        assert!((zbar.get(0, 0) - 1.0_f64.exp()).abs() < 1e-15);
        assert!((zbar.get(0, 1) + 2.0).abs() < 1e-12);
        assert!((zbar.get(1, 1) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_layers_are_well_conditioned_and_seeded() {
        let m = make_mixing(3, 3, 0.2, 11).unwrap();
        assert!(m.pad.is_none());
        assert_eq!(m.condition_numbers.len(), 3);
        for &c in &m.condition_numbers {
            assert!(c < MIXING_COND_LIMIT);
        }
        assert_eq!(m, make_mixing(3, 3, 0.2, 11).unwrap());
        assert_ne!(
            m.weights[0].data(),
            make_mixing(3, 3, 0.2, 12).unwrap().weights[0].data()
        );
    }

    #[test]
    fn wide_mixing_embeds_with_orthonormal_pad() {
        let m = make_mixing(2, 5, 0.2, 13).unwrap();
        let pad = m.pad.as_ref().unwrap();
        assert_eq!(pad.shape(), (5, 2));
        let z = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let x = m.apply(&z).unwrap();
        assert_eq!(x.shape(), (1, 5));
    }

    #[test]
    fn identity_mixing_is_exact() {
        let m = Mixing::identity(3);
        m.validate().unwrap();
        let z = Tensor::from_rows(&[vec![-1.5, 0.0, 2.25]]).unwrap();
        assert_eq!(m.apply(&z).unwrap().data(), z.data());
    }

    #[test]
    fn observations_are_standardized_and_consistent_with_the_stored_mixing() {
        let ds = gen_dataset(&GenOptions {
            spec: ScmSpec::chain(3),
            segments: 8,
            samples_per_segment: 100,
            d: 5,
            seed: 31,
            ..GenOptions::default()
        })
        .unwrap();
        let rows = ds.x.rows();
        for c in 0..ds.x.cols() {
            let mean = (0..rows).map(|r| ds.x.get(r, c)).sum::<f64>() / rows as f64;
            let var = (0..rows)
                .map(|r| (ds.x.get(r, c) - mean).powi(2))
                .sum::<f64>()
                / rows as f64;
            assert!(
                (var.sqrt() - 1.0).abs() < 1e-9,
                "column {c} std {} after standardization",
                var.sqrt()
            );
        }
        // The stored mixing reproduces the stored observations.
        let replay = ds.mixing.apply(&ds.z).unwrap();
        for (a, b) in replay.data().iter().zip(ds.x.data()) {
            assert!((a - b).abs() < 1e-10, "replayed {a} vs stored {b}");
        }
    }

    #[test]
    fn gen_dataset_composes_and_balances_segments() {
        let opts = GenOptions {
            spec: ScmSpec::chain(4),
            segments: 5,
            samples_per_segment: 40,
            d: 4,
            mixing_slope: 0.2,
            certification_segment: true,
            seed: 21,
            ..GenOptions::default()
        };
        let ds = gen_dataset(&opts).unwrap();
        assert_eq!(ds.rows(), 200);
        assert_eq!(ds.x.cols(), 4);
        assert_eq!(ds.z.cols(), 4);
        assert!(ds.zbar.is_none());
        for s in 0..5 {
            assert_eq!(ds.u.iter().filter(|&&v| v == s).count(), 40);
        }
        // Bit-identical regeneration.
        let ds2 = gen_dataset(&opts).unwrap();
        assert_eq!(ds.x.data(), ds2.x.data());
        assert_eq!(ds.z.data(), ds2.z.data());
    }

    #[test]
    fn dataset_roundtrips_through_disk() {
        let mut spec = ScmSpec::chain(3);
        spec.pnl = Some(vec![
            PnlTag::Identity,
            PnlTag::ScaledTanhWithLinear,
            PnlTag::CubeRoot,
        ]);
        let opts = GenOptions {
            spec,
            segments: 4,
            samples_per_segment: 25,
            d: 5,
            mixing_slope: 0.2,
            certification_segment: false,
            seed: 33,
            ..GenOptions::default()
        };
        let ds = gen_dataset(&opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.x.data(), ds.x.data());
        assert_eq!(back.z.data(), ds.z.data());
        assert_eq!(
            back.zbar.as_ref().unwrap().data(),
            ds.zbar.as_ref().unwrap().data()
        );
        assert_eq!(back.n.data(), ds.n.data());
        assert_eq!(back.u, ds.u);
        assert_eq!(back.spec, ds.spec);
        assert_eq!(back.noise_params, ds.noise_params);
        assert_eq!(back.coeffs, ds.coeffs);
        assert_eq!(back.mixing, ds.mixing);
        // Saving the loaded dataset reproduces the files bit for bit.
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(dir.path().join(&name)).unwrap();
            let b = std::fs::read(dir2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs");
        }
    }

    fn write_fmri_fixture(path: &Path, days: usize, rows_per_day: usize) {
        let mut text = String::from("day,PRC,PHC,ERC,Sub,CA1,DG\n");
        let mut v = 0.0f64;
        for d in 0..days {
            for _ in 0..rows_per_day {
                v += 1.0;
                let cells: Vec<String> = (0..6)
                    .map(|c| format!("{}", (v + c as f64).sin() * 3.0 + c as f64))
                    .collect();
                text.push_str(&format!("{d},{}\n", cells.join(",")));
            }
        }
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn fmri_ingestion_standardizes_and_groups() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("signals.csv");
        write_fmri_fixture(&path, 84, 2);
        let table = ingest_fmri(&path).unwrap();
        assert_eq!(table.days.len(), 84);
        assert_eq!(table.z.rows(), 168);
        assert!(table.warnings.is_empty());
        for c in 0..6 {
            let col = table.z.column(c);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / col.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
        let ds = gen_fmri_dataset(&table, 6, 0.2, 4).unwrap();
        assert_eq!(ds.kind, DatasetKind::Fmri);
        assert_eq!(ds.m, 84);
        assert_eq!(ds.x.cols(), 6);
    }

    #[test]
    fn fmri_ingestion_rejects_malformed_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("signals.csv");

        std::fs::write(&path, "day,PRC,PHC,ERC,Sub,CA1\n0,1,2,3,4,5\n").unwrap();
        assert!(ingest_fmri(&path).is_err());

        std::fs::write(
            &path,
            "day,PRC,PHC,ERC,Sub,CA1,DG\n0,1,2,3,4,5\n",
        )
        .unwrap();
        let err = ingest_fmri(&path).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");

        std::fs::write(
            &path,
            "day,PRC,PHC,ERC,Sub,CA1,DG\n0,1,2,x,4,5,6\n",
        )
        .unwrap();
        let err = ingest_fmri(&path).unwrap_err().to_string();
        assert!(err.contains("ERC"), "{err}");

        std::fs::write(
            &path,
            "day,PRC,PHC,ERC,Sub,CA1,DG\n84,1,2,3,4,5,6\n",
        )
        .unwrap();
        let err = ingest_fmri(&path).unwrap_err().to_string();
        assert!(err.contains("day 84"), "{err}");
    }

    #[test]
    fn fmri_single_day_warns_about_variability() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("signals.csv");
        write_fmri_fixture(&path, 1, 3);
        let table = ingest_fmri(&path).unwrap();
        assert_eq!(table.days, vec![0]);
        assert_eq!(table.warnings.len(), 1);
        assert!(table.warnings[0].contains("13 environments"));
    }
}
