//! Identifiability condition checkers and the non-identifiability
//! counterexample.
//!
//! These are numerical *oracles*: they interrogate a generator through
//! finite differences, subset search, and Monte-Carlo probes, never through
//! the closed-form knowledge used to build it. Three checks matter for
//! affine recovery of the latents:
//!
//! - **Sufficient variability** — the noise's natural parameters must vary
//!   enough across segments that some `2*ell` difference vectors are
//!   linearly independent (checked via condition numbers of difference
//!   matrices over random segment subsets).
//! - **Vanishing parent influence** — for every node there must exist a
//!   segment in which the parents' influence on the node (the mechanism
//!   gradient) vanishes. The all-zero-coefficient certification segment
//!   realizes this; a violated node's segment-invariant extra term breaks
//!   it.
//! - **Unit-triangular Jacobian** — the map from noise to latents must have
//!   a lower-triangular Jacobian with unit diagonal (hence determinant 1),
//!   the structural property the recovery theory leans on. Post-nonlinear
//!   generators do not satisfy it and are rejected up front.
//!
//! The counterexample shows the other side: two latent models that induce
//! *identical* observations in every segment while their second latents are
//! far from affinely related — without a vanishing-influence segment,
//! recovery is not just hard but impossible.

use serde::{Deserialize, Serialize};

use crate::autodiff::{mm_nt, Tensor};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::scm::{
    apply_violation, gen_latents, make_mixing, sample_segment_params, sample_noise,
    Dataset, DatasetKind, EdgeCoeffs, ScmSpec, SegmentNoiseParams,
};

/// Condition-number bound under which a difference matrix counts as
/// well-conditioned for the sufficient-variability check.
pub const VARIABILITY_COND_LIMIT: f64 = 1e8;
/// Default number of random segment subsets the variability check tries.
pub const VARIABILITY_ATTEMPTS: usize = 200;
/// Default gradient tolerance for the vanishing-parent-influence check.
pub const GRAD_TOL_DEFAULT: f64 = 1e-6;

const STREAM_SUBSETS: u64 = 11;
const STREAM_PROBES: u64 = 12;
const STREAM_JACOBIAN: u64 = 13;
const STREAM_COUNTEREXAMPLE: u64 = 14;

// ── Sufficient variability ───────────────────────────────────────────────

/// Outcome of the sufficient-variability check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariabilityReport {
    pub pass: bool,
    /// Environments a well-conditioned subset needs: `2*ell + 1`.
    pub required: usize,
    /// Available environments M.
    pub available: usize,
    pub subsets_tried: usize,
    /// Best (smallest) condition number seen; infinite if none computed.
    pub best_condition: f64,
    /// Original segment indices of the best subset, pivot first.
    pub best_subset: Vec<usize>,
    pub message: String,
}

/// Check that noise natural parameters vary sufficiently across segments.
///
/// For a subset `u_0, ..., u_{2*ell}` the check stacks the differences
/// `eta(u_k) - eta(u_0)` as columns of a `2*ell x 2*ell` matrix (node-major
/// pairs: mean-linked then variance-linked coordinate per node) and passes
/// if any sampled subset's matrix has condition number below
/// [`VARIABILITY_COND_LIMIT`].
///
/// Subsets are drawn after sorting segments canonically by their parameter
/// vectors, so the verdict does not depend on how segments happen to be
/// numbered.
pub fn check_variability(
    params: &SegmentNoiseParams,
    attempts: usize,
    seed: u64,
) -> Result<VariabilityReport> {
    let ell = params.ell();
    let m = params.m();
    let required = 2 * ell + 1;
    if m < required {
        return Ok(VariabilityReport {
            pass: false,
            required,
            available: m,
            subsets_tried: 0,
            best_condition: f64::INFINITY,
            best_subset: Vec::new(),
            message: format!(
                "insufficient environments: {m} available, {required} required"
            ),
        });
    }
    if attempts == 0 {
        return Err(Error::Config("variability check needs attempts >= 1".into()));
    }

    // Canonical order: sort segment indices by their parameter vectors so a
    // relabeling of segments draws the same parameter subsets.
    let key = |s: usize| -> Vec<f64> {
        let mut k = Vec::with_capacity(2 * ell);
        for i in 0..ell {
            k.push(params.alpha(s, i));
            k.push(params.beta(s, i));
        }
        k
    };
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        key(a)
            .partial_cmp(&key(b))
            .expect("noise parameters are finite")
    });

    let eta_vec = |s: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * ell);
        for i in 0..ell {
            let (e1, e2) = params.eta(s, i);
            v.push(e1);
            v.push(e2);
        }
        v
    };

    let mut r = rng::stream(seed, &[STREAM_SUBSETS]);
    let mut best_condition = f64::INFINITY;
    let mut best_subset: Vec<usize> = Vec::new();
    let mut tried = 0;
    let mut pass = false;
    for _ in 0..attempts {
        // Partial Fisher-Yates: the first `required` entries become the
        // subset, pivot first.
        let mut pool = order.clone();
        for k in 0..required {
            let j = k + rand::Rng::random_range(&mut r, 0..pool.len() - k);
            pool.swap(k, j);
        }
        let subset = &pool[..required];
        let pivot = eta_vec(subset[0]);
        let mut diff = Tensor::zeros(2 * ell, 2 * ell);
        for (col, &s) in subset[1..].iter().enumerate() {
            let e = eta_vec(s);
            for row in 0..2 * ell {
                diff.set(row, col, e[row] - pivot[row]);
            }
        }
        let cond = linalg::condition_number(&diff)?;
        tried += 1;
        if cond < best_condition {
            best_condition = cond;
            best_subset = subset.to_vec();
        }
        if cond < VARIABILITY_COND_LIMIT {
            pass = true;
            break;
        }
    }
    let message = if pass {
        format!(
            "well-conditioned difference matrix found (condition {best_condition:.3e} \
             after {tried} subset(s))"
        )
    } else {
        format!(
            "no subset of {required} environments reached condition < \
             {VARIABILITY_COND_LIMIT:.0e} in {tried} attempts \
             (best {best_condition:.3e})"
        )
    };
    Ok(VariabilityReport {
        pass,
        required,
        available: m,
        subsets_tried: tried,
        best_condition,
        best_subset,
        message,
    })
}

// ── Vanishing parent influence ───────────────────────────────────────────

/// Per-node outcome of the vanishing-parent-influence check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeInfluenceVerdict {
    /// 1-based node index.
    pub node: usize,
    pub pass: bool,
    /// True for root nodes, which pass vacuously.
    pub vacuous: bool,
    /// Segment minimizing the max parent gradient, when the node has
    /// parents.
    pub best_segment: Option<usize>,
    /// `min` over segments of `max` over probes and parents of the absolute
    /// mechanism gradient; 0 for roots.
    pub best_max_gradient: f64,
    pub message: String,
}

/// Outcome of the vanishing-parent-influence check across all nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub grad_tol: f64,
    pub pass: bool,
    pub nodes: Vec<NodeInfluenceVerdict>,
}

/// Check that every node has some segment in which its parents' influence
/// vanishes (max absolute mechanism gradient at most `grad_tol`).
///
/// Gradients are central finite differences of the generator's structural
/// mechanism, probed over each parent's central value range (1st to 99th
/// percentile of its realized latents): 25 evenly spaced values per parent,
/// taken as a full grid for up to two parents and as 2000 random joint
/// probes otherwise.
pub fn check_parent_influence(
    ds: &Dataset,
    grad_tol: f64,
    seed: u64,
) -> Result<InfluenceReport> {
    if ds.kind == DatasetKind::Fmri {
        return Err(Error::Config(
            "parent-influence check needs a synthetic generator; ingested \
             signals carry none"
                .into(),
        ));
    }
    if !(grad_tol >= 0.0) {
        return Err(Error::Config(format!(
            "gradient tolerance {grad_tol} must be non-negative"
        )));
    }
    let spec = &ds.spec;
    spec.validate()?;
    let mut nodes = Vec::with_capacity(spec.ell);
    for i in 0..spec.ell {
        // Effective parents: graph parents, plus the positional predecessor
        // installed by a violation.
        let mut parents = spec.parents(i);
        if spec.is_violated(i + 1) && !parents.contains(&(i - 1)) {
            parents.push(i - 1);
            parents.sort_unstable();
        }
        if parents.is_empty() {
            nodes.push(NodeInfluenceVerdict {
                node: i + 1,
                pass: true,
                vacuous: true,
                best_segment: None,
                best_max_gradient: 0.0,
                message: format!("node {}: vacuous pass (root)", i + 1),
            });
            continue;
        }
        let probes = probe_points(ds, i, &parents, seed)?;
        let mut best: Option<(usize, f64)> = None;
        for s in 0..ds.m {
            let mut seg_max = 0.0f64;
            let mut pred = vec![0.0; i];
            for probe in &probes {
                for (slot, &p) in parents.iter().enumerate() {
                    pred[p] = probe[slot];
                }
                for &p in &parents {
                    let v = pred[p];
                    let eps = 1e-5 * v.abs().max(1.0);
                    pred[p] = v + eps;
                    let hi = crate::scm::mechanism(spec, &ds.coeffs, s, i, &pred);
                    pred[p] = v - eps;
                    let lo = crate::scm::mechanism(spec, &ds.coeffs, s, i, &pred);
                    pred[p] = v;
                    seg_max = seg_max.max(((hi - lo) / (2.0 * eps)).abs());
                }
            }
            if best.is_none_or(|(_, g)| seg_max < g) {
                best = Some((s, seg_max));
            }
        }
        let (seg, grad) = best.expect("at least one segment");
        let pass = grad <= grad_tol;
        nodes.push(NodeInfluenceVerdict {
            node: i + 1,
            pass,
            vacuous: false,
            best_segment: Some(seg),
            best_max_gradient: grad,
            message: format!(
                "node {}: smallest max parent gradient {grad:.3e} (segment {seg}); \
                 {} tolerance {grad_tol:.1e}",
                i + 1,
                if pass { "within" } else { "exceeds" }
            ),
        });
    }
    Ok(InfluenceReport {
        grad_tol,
        pass: nodes.iter().all(|n| n.pass),
        nodes,
    })
}

/// Probe assignments (aligned with `parents`) spanning each parent's
/// 1st-to-99th percentile range of realized latent values.
fn probe_points(
    ds: &Dataset,
    node: usize,
    parents: &[usize],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    const POINTS_PER_PARENT: usize = 25;
    const RANDOM_PROBES: usize = 2000;
    let mut ranges = Vec::with_capacity(parents.len());
    for &p in parents {
        let col = ds.z.column(p);
        let lo = linalg::percentile(&col, 1.0)?;
        let hi = linalg::percentile(&col, 99.0)?;
        ranges.push((lo, hi));
    }
    let axis = |&(lo, hi): &(f64, f64)| -> Vec<f64> {
        if hi <= lo {
            return vec![lo];
        }
        (0..POINTS_PER_PARENT)
            .map(|k| lo + (hi - lo) * k as f64 / (POINTS_PER_PARENT - 1) as f64)
            .collect()
    };
    match parents.len() {
        1 => Ok(axis(&ranges[0]).into_iter().map(|v| vec![v]).collect()),
        2 => {
            let (a, b) = (axis(&ranges[0]), axis(&ranges[1]));
            let mut probes = Vec::with_capacity(a.len() * b.len());
            for &x in &a {
                for &y in &b {
                    probes.push(vec![x, y]);
                }
            }
            Ok(probes)
        }
        _ => {
            let mut r = rng::stream(seed, &[STREAM_PROBES, node as u64]);
            Ok((0..RANDOM_PROBES)
                .map(|_| {
                    ranges
                        .iter()
                        .map(|&(lo, hi)| {
                            if hi <= lo {
                                lo
                            } else {
                                rand::Rng::random_range(&mut r, lo..hi)
                            }
                        })
                        .collect()
                })
                .collect())
        }
    }
}

// ── Unit-triangular Jacobian ─────────────────────────────────────────────

/// Outcome of the noise-to-latent Jacobian structure check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JacobianReport {
    pub pass: bool,
    pub points: usize,
    /// Largest absolute entry found above the diagonal.
    pub max_upper: f64,
    /// Largest deviation of a diagonal entry from 1.
    pub max_diag_gap: f64,
    /// Largest deviation of the determinant from 1.
    pub max_det_gap: f64,
    pub tolerance: f64,
}

/// Verify by finite differences that the noise-to-latent map is
/// lower-triangular with unit diagonal (and hence unit determinant) at
/// `points` random noise vectors, drawn uniformly in `[-3, 3]^ell` with a
/// uniformly random segment each.
///
/// Post-nonlinear generators fail the structural precondition (the
/// distortion scales the diagonal) and are rejected with an error.
pub fn check_unit_triangular_jacobian(
    spec: &ScmSpec,
    coeffs: &EdgeCoeffs,
    points: usize,
    seed: u64,
) -> Result<JacobianReport> {
    spec.validate()?;
    if spec.pnl.is_some() {
        return Err(Error::Config(
            "post-nonlinear generator is not unit-triangular; the Jacobian \
             check applies to additive-noise generators only"
                .into(),
        ));
    }
    if points == 0 {
        return Err(Error::Config("Jacobian check needs points >= 1".into()));
    }
    let ell = spec.ell;
    let m = coeffs.m();
    let mut r = rng::stream(seed, &[STREAM_JACOBIAN]);
    const TOL: f64 = 1e-6;

    let latents_at = |noise: &[f64], segment: usize| -> Result<Vec<f64>> {
        let n = Tensor::new(1, ell, noise.to_vec())?;
        let z = gen_latents(spec, &n, &[segment], coeffs)?;
        let z = apply_violation(spec, &z)?;
        Ok(z.row(0).to_vec())
    };

    let mut max_upper = 0.0f64;
    let mut max_diag_gap = 0.0f64;
    let mut max_det_gap = 0.0f64;
    for _ in 0..points {
        let segment = rand::Rng::random_range(&mut r, 0..m);
        let mut noise: Vec<f64> =
            (0..ell).map(|_| rand::Rng::random_range(&mut r, -3.0..3.0)).collect();
        let mut jac = Tensor::zeros(ell, ell);
        for j in 0..ell {
            let v = noise[j];
            let eps = 1e-5 * v.abs().max(1.0);
            noise[j] = v + eps;
            let hi = latents_at(&noise, segment)?;
            noise[j] = v - eps;
            let lo = latents_at(&noise, segment)?;
            noise[j] = v;
            for i in 0..ell {
                jac.set(i, j, (hi[i] - lo[i]) / (2.0 * eps));
            }
        }
        for i in 0..ell {
            for j in 0..ell {
                if j > i {
                    max_upper = max_upper.max(jac.get(i, j).abs());
                } else if j == i {
                    max_diag_gap = max_diag_gap.max((jac.get(i, j) - 1.0).abs());
                }
            }
        }
        max_det_gap = max_det_gap.max((linalg::determinant(&jac)? - 1.0).abs());
    }
    Ok(JacobianReport {
        pass: max_upper < TOL && max_diag_gap < TOL && max_det_gap < TOL,
        points,
        max_upper,
        max_diag_gap,
        max_det_gap,
        tolerance: TOL,
    })
}

// ── Combined dataset check ───────────────────────────────────────────────

/// Options for [`check_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckOptions {
    pub grad_tol: f64,
    pub variability_attempts: usize,
    pub jacobian_points: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            grad_tol: GRAD_TOL_DEFAULT,
            variability_attempts: VARIABILITY_ATTEMPTS,
            jacobian_points: 100,
            seed: 0,
        }
    }
}

/// All identifiability checks applicable to a dataset, with notices for the
/// ones that had to be skipped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub variability: VariabilityReport,
    pub influence: Option<InfluenceReport>,
    pub jacobian: Option<JacobianReport>,
    pub notices: Vec<String>,
    /// Conjunction of the verdicts of the checks that ran.
    pub pass: bool,
}

/// Run every applicable check on a dataset.
///
/// Ingested-signal datasets have no generator, so only the variability check
/// (on fitted per-segment moments) runs; post-nonlinear generators skip the
/// Jacobian structure check. Skips are recorded as notices, never silently.
pub fn check_dataset(ds: &Dataset, opts: &CheckOptions) -> Result<AssumptionReport> {
    let mut notices = Vec::new();
    let variability = check_variability(&ds.noise_params, opts.variability_attempts, opts.seed)?;
    if ds.kind == DatasetKind::Fmri {
        notices.push(
            "ingested signals carry no generator: parent-influence and Jacobian \
             checks skipped; variability uses per-segment moments fitted from \
             the signals"
                .to_string(),
        );
        let pass = variability.pass;
        return Ok(AssumptionReport {
            variability,
            influence: None,
            jacobian: None,
            notices,
            pass,
        });
    }
    let influence = check_parent_influence(ds, opts.grad_tol, opts.seed)?;
    let jacobian = if ds.spec.pnl.is_some() {
        notices.push(
            "post-nonlinear generator is not unit-triangular; Jacobian check \
             skipped"
                .to_string(),
        );
        None
    } else {
        Some(check_unit_triangular_jacobian(
            &ds.spec,
            &ds.coeffs,
            opts.jacobian_points,
            opts.seed,
        )?)
    };
    let pass =
        variability.pass && influence.pass && jacobian.as_ref().is_none_or(|j| j.pass);
    Ok(AssumptionReport {
        variability,
        influence: Some(influence),
        jacobian,
        notices,
        pass,
    })
}

// ── Counterexample ───────────────────────────────────────────────────────

/// Summary statistics of the constructed counterexample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub segments: usize,
    pub samples_per_segment: usize,
    pub mlp2_constant: bool,
    pub seed: u64,
    /// `max |x - x'|` over all rows and observation coordinates.
    pub max_observation_gap: f64,
    /// Pearson correlation between the two second latents.
    pub latent_correlation: f64,
}

/// Two latent models over two nodes that generate identical observations.
#[derive(Debug, Clone)]
pub struct CounterexamplePair {
    /// Latents `[z1, z2]` of the first model.
    pub z: Tensor,
    /// Latents `[z1, z2']` of the second model.
    pub z_alt: Tensor,
    /// Observations of the first model.
    pub x: Tensor,
    /// Observations of the second model (through the composed mixing).
    pub x_alt: Tensor,
    /// Per-row segment labels.
    pub u: Vec<usize>,
    pub report: CounterexampleReport,
}

/// A small scalar-to-scalar tanh MLP used for counterexample mechanisms.
#[derive(Debug, Clone)]
struct ScalarMlp {
    layers: Vec<(Tensor, f64)>,
}

impl ScalarMlp {
    const WIDTH: usize = 16;

    fn random(r: &mut rng::Rng) -> ScalarMlp {
        let dims = [(Self::WIDTH, 1), (Self::WIDTH, Self::WIDTH), (1, Self::WIDTH)];
        let layers = dims
            .iter()
            .map(|&(out, inp)| {
                let bound = (6.0 / (out + inp) as f64).sqrt();
                let data = (0..out * inp)
                    .map(|_| rand::Rng::random_range(r, -bound..bound))
                    .collect();
                let w = Tensor::new(out, inp, data).expect("finite init");
                let b = rand::Rng::random_range(r, -bound..bound);
                (w, b)
            })
            .collect();
        ScalarMlp { layers }
    }

    /// An MLP that outputs `c` for every input.
    fn constant(c: f64) -> ScalarMlp {
        let dims = [(Self::WIDTH, 1), (Self::WIDTH, Self::WIDTH), (1, Self::WIDTH)];
        let layers = dims
            .iter()
            .enumerate()
            .map(|(k, &(out, inp))| {
                let w = Tensor::zeros(out, inp);
                (w, if k == 2 { c } else { 0.0 })
            })
            .collect();
        ScalarMlp { layers }
    }

    /// Evaluate on a column (`N x 1`).
    fn eval(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            h = mm_nt(&h, w).map(|v| v + b);
            if k < last {
                h = h.map(f64::tanh);
            }
        }
        h
    }

    /// Scale the output layer so the response over `probes` has the target
    /// standard deviation (no-op for near-constant responses).
    fn rescale(&mut self, probes: &Tensor, target_std: f64) {
        let y = self.eval(probes);
        let n = y.rows() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-9 {
            let k = target_std / std;
            let (w, b) = &mut self.layers[2];
            *w = w.map(|v| v * k);
            *b *= k;
        }
    }
}

fn pearson_corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (
        a.iter().sum::<f64>() / n,
        b.iter().sum::<f64>() / n,
    );
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Construct the two-node counterexample.
///
/// Model one: `z2 = MLP1_u(z1) + MLP2(z1) + n2`, mixed by a random
/// invertible `f`. Model two: `z2' = MLP1_u(z1) + n2`, mixed by
/// `f' = f . h` where `h(z1, t) = (z1, t + MLP2(z1))`. By construction the
/// observations coincide in every segment, yet the second latents differ by
/// the segment-*invariant* term `MLP2(z1)`: with no environment in which the
/// parent influence vanishes, the latents are not identifiable — `z2` and
/// `z2'` decorrelate even though no observation can tell the models apart.
/// With `mlp2_constant` the invariant term is a constant, the models'
/// latents are affinely related, and the correlation returns to 1.
pub fn build_counterexample(
    segments: usize,
    samples_per_segment: usize,
    mlp2_constant: bool,
    seed: u64,
) -> Result<CounterexamplePair> {
    if segments == 0 || samples_per_segment == 0 {
        return Err(Error::Config(
            "counterexample needs segments >= 1 and samples_per_segment >= 1".into(),
        ));
    }
    // Noise: column 0 is the root latent z1, column 1 the additive n2.
    let params = sample_segment_params(2, segments, seed)?;
    let (noise, u) = sample_noise(&params, samples_per_segment, seed)?;
    let n_rows = noise.rows();
    let z1 = Tensor::new(1 * n_rows, 1, noise.column(0))?;

    let mut r = rng::stream(seed, &[STREAM_COUNTEREXAMPLE]);
    // Rescale mechanisms against a fixed probe grid over z1's support so the
    // invariant term carries enough variance to decorrelate the latents.
    let probes = Tensor::new(
        61,
        1,
        (0..61).map(|k| -3.0 + 0.1 * k as f64).collect(),
    )?;
    let mut seg_mlps = Vec::with_capacity(segments);
    for _ in 0..segments {
        let mut m = ScalarMlp::random(&mut r);
        m.rescale(&probes, 1.0);
        seg_mlps.push(m);
    }
    let mlp2 = if mlp2_constant {
        ScalarMlp::constant(0.7)
    } else {
        let mut m = ScalarMlp::random(&mut r);
        m.rescale(&probes, 1.5);
        m
    };

    let seg_out: Vec<Tensor> = seg_mlps.iter().map(|m| m.eval(&z1)).collect();
    let inv_out = mlp2.eval(&z1);

    let mut z = Tensor::zeros(n_rows, 2);
    let mut z_alt = Tensor::zeros(n_rows, 2);
    for row in 0..n_rows {
        let z1v = z1.get(row, 0);
        let base = seg_out[u[row]].get(row, 0) + noise.get(row, 1);
        z.set(row, 0, z1v);
        z.set(row, 1, base + inv_out.get(row, 0));
        z_alt.set(row, 0, z1v);
        z_alt.set(row, 1, base);
    }

    let mixing = make_mixing(2, 2, 0.2, seed)?;
    let x = mixing.apply(&z)?;
    // The composed mixing first restores the invariant term, then applies f.
    let mut bridged = z_alt.clone();
    for row in 0..n_rows {
        bridged.set(row, 1, z_alt.get(row, 1) + inv_out.get(row, 0));
    }
    let x_alt = mixing.apply(&bridged)?;

    let mut max_gap = 0.0f64;
    for (a, b) in x.data().iter().zip(x_alt.data()) {
        max_gap = max_gap.max((a - b).abs());
    }
    let corr = pearson_corr(&z.column(1), &z_alt.column(1));
    Ok(CounterexamplePair {
        z,
        z_alt,
        x,
        x_alt,
        u,
        report: CounterexampleReport {
            segments,
            samples_per_segment,
            mlp2_constant,
            seed,
            max_observation_gap: max_gap,
            latent_correlation: corr,
        },
    })
}
