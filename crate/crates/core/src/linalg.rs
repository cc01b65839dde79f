//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Sizes here are at most a few dozen rows (3N for N ≤ 20 ions), where
//! Jacobi is accurate to working precision on every eigenpair and
//! reproducible bit for bit.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Maximum number of full sweeps before giving up.
const MAX_SWEEPS: usize = 100;

/// Relative asymmetry tolerated on input.
const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalues sorted ascending and the matching orthonormal eigenvectors
/// stored as columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// Frobenius norm of the strictly off-diagonal part.
pub fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Check that `a` is square and symmetric to relative `1e-12`.
pub fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::DegenerateInput(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Diagonalize a real symmetric matrix.
///
/// Sweeps rotate every (p, q) pair in row order until the off-diagonal norm
/// drops below `1e-12 · max(1, ‖A‖_F)`. Eigenpairs are returned in
/// ascending order; each eigenvector is signed so that its largest-magnitude
/// component is positive, and ties in eigenvalue are ordered by
/// lexicographic comparison of the signed eigenvectors.
pub fn jacobi_eigen(input: &DMatrix<f64>) -> Result<SymmetricEigen> {
    check_symmetric(input)?;
    let n = input.nrows();
    let mut a = input.clone();
    // Symmetrize exactly so rotations see identical (p,q) and (q,p).
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    let mut v = DMatrix::<f64>::identity(n, n);
    let stop = 1e-12 * a.norm().max(1.0);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) < stop {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Entries that are negligible against both diagonals are
                // dropped outright.
                if apq.abs() < f64::EPSILON * 1e-2 * app.abs().min(aqq.abs()) {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) >= stop {
        return Err(Error::NonConvergence(format!(
            "Jacobi eigensolver: off-diagonal norm {:e} after {MAX_SWEEPS} sweeps",
            off_diagonal_norm(&a)
        )));
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|k| {
            let mut col: Vec<f64> = v.column(k).iter().copied().collect();
            let pivot = col
                .iter()
                .copied()
                .enumerate()
                .fold((0, 0.0_f64), |(bi, bv), (i, x)| {
                    if x.abs() > bv.abs() + 1e-12 {
                        (i, x)
                    } else {
                        (bi, bv)
                    }
                })
                .1;
            if pivot < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            (a[(k, k)], col)
        })
        .collect();

    let tie = 1e-12 * a.norm().max(1.0);
    pairs.sort_by(|(la, va), (lb, vb)| {
        if (la - lb).abs() > tie {
            la.partial_cmp(lb).unwrap()
        } else {
            va.iter()
                .zip(vb)
                .map(|(x, y)| x.partial_cmp(y).unwrap())
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        }
    });

    let values = pairs.iter().map(|(l, _)| *l).collect();
    let vectors = DMatrix::from_fn(n, n, |i, k| pairs[k].1[i]);
    Ok(SymmetricEigen { values, vectors })
}

fn rotate(a: &mut DMatrix<f64>, v: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = a.nrows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}
