//! Small dense linear-algebra routines.
//!
//! Everything here operates on matrices of at most a few dozen rows, where
//! textbook algorithms (cyclic Jacobi, partially pivoted LU, modified
//! Gram-Schmidt) are plenty fast and numerically sound.

use crate::autodiff::{mm_tn, Tensor};
use crate::error::{Error, Result};

fn require_square(what: &str, a: &Tensor) -> Result<usize> {
    if a.rows() != a.cols() {
        return Err(Error::Dimension(format!(
            "{what} needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(a.rows())
}

/// Eigenvalues of a symmetric matrix, ascending, via cyclic Jacobi sweeps.
///
/// Only the lower/upper symmetry actually present in the input is used; the
/// caller is responsible for passing a symmetric matrix.
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    let n = require_square("symmetric_eigenvalues", a)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut m: Vec<f64> = a.data().to_vec();
    let idx = |i: usize, j: usize| i * n + j;
    let scale = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);

    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| m[idx(i, j)] * m[idx(i, j)])
            .sum();
        if off.sqrt() <= 1e-13 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[idx(q, q)] - m[idx(p, p)]) / (2.0 * apq);
                // Stable tangent of the rotation angle (|t| <= 1).
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[idx(k, p)];
                    let akq = m[idx(k, q)];
                    m[idx(k, p)] = c * akp - s * akq;
                    m[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[idx(p, k)];
                    let aqk = m[idx(q, k)];
                    m[idx(p, k)] = c * apk - s * aqk;
                    m[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| m[idx(i, i)]).collect();
    eigs.sort_by(f64::total_cmp);
    Ok(eigs)
}

/// 2-norm condition number of a (possibly rectangular) matrix: the ratio of
/// its extreme singular values, computed from the eigenvalues of `A^T A`.
/// Rank-deficient inputs report `f64::INFINITY`.
pub fn condition_number(a: &Tensor) -> Result<f64> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Dimension(
            "condition_number of an empty matrix".into(),
        ));
    }
    if a.rows() < a.cols() {
        // Fewer rows than columns: A^T A is singular by construction, but
        // A A^T is not necessarily; condition numbers agree on the transpose.
        return condition_number(&a.transpose());
    }
    let gram = mm_tn(a, a);
    let eigs = symmetric_eigenvalues(&gram)?;
    let max = eigs.last().copied().unwrap_or(0.0).max(0.0);
    let min = eigs.first().copied().unwrap_or(0.0).max(0.0);
    if min <= 0.0 || max <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((max / min).sqrt())
}

/// Determinant via LU decomposition with partial pivoting.
pub fn determinant(a: &Tensor) -> Result<f64> {
    let n = require_square("determinant", a)?;
    if n == 0 {
        return Ok(1.0);
    }
    let mut m: Vec<f64> = a.data().to_vec();
    let idx = |i: usize, j: usize| i * n + j;
    let mut det = 1.0;
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if m[idx(r, col)].abs() > m[idx(piv, col)].abs() {
                piv = r;
            }
        }
        if m[idx(piv, col)] == 0.0 {
            return Ok(0.0);
        }
        if piv != col {
            for c in 0..n {
                m.swap(idx(piv, c), idx(col, c));
            }
            det = -det;
        }
        let pivot = m[idx(col, col)];
        det *= pivot;
        for r in (col + 1)..n {
            let f = m[idx(r, col)] / pivot;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[idx(r, c)] -= f * m[idx(col, c)];
            }
        }
    }
    Ok(det)
}

/// A `rows x cols` matrix with orthonormal columns (`rows >= cols`), built by
/// modified Gram-Schmidt on standard-normal draws. Used as the fixed
/// embedding when the observed dimension exceeds the latent one.
pub fn orthonormal_columns(
    rows: usize,
    cols: usize,
    rng: &mut impl rand::Rng,
) -> Result<Tensor> {
    if cols > rows {
        return Err(Error::Dimension(format!(
            "cannot fit {cols} orthonormal columns in {rows} dimensions"
        )));
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= d * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            // A near-dependent draw; with Gaussian columns this is a
            // measure-zero event, but retrying is free.
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        q.push(v);
    }
    let mut out = Tensor::zeros(rows, cols);
    for (j, col) in q.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// The `p`-th percentile (0..=100) of a sample, with linear interpolation
/// between order statistics. The input need not be sorted.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("percentile of an empty sample".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Data(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(v[lo] + (v[hi] - v[lo]) * frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn eigenvalues_of_diagonal_and_known_matrices() {
        let d = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let e = symmetric_eigenvalues(&d).unwrap();
        assert!((e[0] + 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);

        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = symmetric_eigenvalues(&a).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalue_sum_and_product_match_trace_and_det() {
        let mut r = rng::stream(5, &[1]);
        let a = {
            let mut t = Tensor::zeros(6, 6);
            for i in 0..6 {
                for j in 0..=i {
                    let v = r.random_range(-1.0..1.0);
                    t.set(i, j, v);
                    t.set(j, i, v);
                }
            }
            t
        };
        let eigs = symmetric_eigenvalues(&a).unwrap();
        let trace: f64 = (0..6).map(|i| a.get(i, i)).sum();
        assert!((eigs.iter().sum::<f64>() - trace).abs() < 1e-9);
        let det = determinant(&a).unwrap();
        assert!((eigs.iter().product::<f64>() - det).abs() < 1e-9);
    }

    #[test]
    fn condition_numbers() {
        assert!((condition_number(&Tensor::eye(4)).unwrap() - 1.0).abs() < 1e-9);
        let d = Tensor::from_rows(&[vec![10.0, 0.0], vec![0.0, 0.1]]).unwrap();
        assert!((condition_number(&d).unwrap() - 100.0).abs() < 1e-6);
        let singular = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(condition_number(&singular).unwrap() > 1e12);
    }

    #[test]
    fn determinants() {
        let a = Tensor::from_rows(&[
            vec![2.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 3.0, 1.0],
        ])
        .unwrap();
        // Cofactor expansion: 2*(1) - 0 + 1*(3) = 5.
        assert!((determinant(&a).unwrap() - 5.0).abs() < 1e-12);
        let tri = Tensor::from_rows(&[
            vec![2.0, 5.0, -1.0],
            vec![0.0, -3.0, 4.0],
            vec![0.0, 0.0, 0.5],
        ])
        .unwrap();
        assert!((determinant(&tri).unwrap() + 3.0).abs() < 1e-12);
        let singular = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(determinant(&singular).unwrap().abs() < 1e-12);
    }

    #[test]
    fn orthonormal_pad_has_orthonormal_columns() {
        let mut r = rng::stream(9, &[2]);
        let q = orthonormal_columns(7, 3, &mut r).unwrap();
        let gram = mm_tn(&q, &q);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - want).abs() < 1e-12);
            }
        }
        assert!((condition_number(&q).unwrap() - 1.0).abs() < 1e-9);
        // Deterministic under the same stream.
        let mut r2 = rng::stream(9, &[2]);
        let q2 = orthonormal_columns(7, 3, &mut r2).unwrap();
        assert_eq!(q.data(), q2.data());
        assert!(orthonormal_columns(2, 3, &mut r).is_err());
    }

    #[test]
    fn percentiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 4.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 2.5);
        assert!((percentile(&v, 25.0).unwrap() - 1.75).abs() < 1e-12);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&v, 101.0).is_err());
    }
}
