//! Sparse storage, banded Cholesky, power iteration and symmetric eigensolvers.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("{method} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("requested {requested} eigenpairs from a {size}x{size} matrix")]
    TooManyPairs { requested: usize, size: usize },
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// Entrywise `self + s·other` on the union pattern.
    pub fn add_scaled(&self, s: f64, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.nrows {
            trip.extend(self.row(r).map(|(c, v)| (r, c, v)));
            trip.extend(other.row(r).map(|(c, v)| (r, c, s * v)));
        }
        CsrMatrix::from_triplets(self.nrows, self.ncols, trip)
    }

    /// `max |a_ij - a_ji|`; zero for a bitwise-symmetric matrix.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    /// Largest `|r - c|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.nrows)
            .flat_map(|r| self.row(r).map(move |(c, _)| r.abs_diff(c)))
            .max()
            .unwrap_or(0)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }
}

/// Cholesky factor of a symmetric positive definite banded matrix, stored by
/// rows of the lower triangle within the band.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    // l[i * (bw + 1) + (j + bw - i)] = L[i][j] for i - bw <= j <= i
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self, LinalgError> {
        let n = a.nrows();
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    l[i * w + (j + bw - i)] = v;
                }
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = l[i * w + (j + bw - i)];
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    s -= l[i * w + (k + bw - i)] * l[j * w + (k + bw - j)];
                }
                if j == i {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite { pivot: i, value: s });
                    }
                    l[i * w + bw] = s.sqrt();
                } else {
                    l[i * w + (j + bw - i)] = s / l[j * w + bw];
                }
            }
        }
        Ok(Self { n, bw, l })
    }

    #[allow(clippy::needless_range_loop)]
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= self.l[i * w + (k + bw - i)] * y[k];
            }
            y[i] = s / self.l[i * w + bw];
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.l[k * w + (i + bw - k)] * y[k];
            }
            y[i] = s / self.l[i * w + bw];
        }
        y
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Deterministic pseudo-random unit vector.
pub fn random_unit(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

/// Outcome of [`power_iteration`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerResult {
    pub eigenvalue: f64,
    pub iterations: usize,
}

/// Largest eigenvalue of a symmetric positive semi-definite operator, given
/// as a closure on Euclidean vectors. Stops when successive Rayleigh
/// quotients agree to `rel_tol` relative plus `abs_tol` absolute. An operator
/// that annihilates the start vector returns zero.
pub fn power_iteration<F>(
    apply: F,
    len: usize,
    rel_tol: f64,
    abs_tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<PowerResult, LinalgError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut v = random_unit(len, seed);
    let mut prev = f64::NAN;
    for it in 1..=max_iter {
        let w = apply(&v);
        let lambda = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 || nw < 1e-300 {
            return Ok(PowerResult {
                eigenvalue: 0.0,
                iterations: it,
            });
        }
        if (lambda - prev).abs() <= rel_tol * lambda.abs() + abs_tol {
            return Ok(PowerResult {
                eigenvalue: lambda,
                iterations: it,
            });
        }
        prev = lambda;
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Err(LinalgError::NoConvergence {
        method: "power iteration",
        iterations: max_iter,
        residual: prev,
    })
}

/// Eigenpairs in ascending eigenvalue order, vectors Euclidean-orthonormal.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Smallest `count` eigenpairs by dense symmetric decomposition.
pub fn dense_smallest(a: &CsrMatrix, count: usize) -> Result<EigenPairs, LinalgError> {
    let n = a.nrows();
    if count > n {
        return Err(LinalgError::TooManyPairs {
            requested: count,
            size: n,
        });
    }
    let eig = SymmetricEigen::new(a.to_dense());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order[..count].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order[..count]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    Ok(EigenPairs { values, vectors })
}

/// Smallest `count` eigenpairs of a sparse SPD matrix by block Lanczos on the
/// inverse (applied through a banded Cholesky factor) with full
/// reorthogonalisation, followed by Rayleigh-Ritz with the matrix itself.
/// Converged when every residual satisfies `‖Av − λv‖ <= rel_tol · ‖A‖_∞`.
pub fn lanczos_smallest(
    a: &CsrMatrix,
    count: usize,
    rel_tol: f64,
    seed: u64,
) -> Result<EigenPairs, LinalgError> {
    let n = a.nrows();
    if count > n {
        return Err(LinalgError::TooManyPairs {
            requested: count,
            size: n,
        });
    }
    let chol = BandCholesky::factor(a)?;
    let scale = (0..n)
        .map(|i| a.row(i).map(|(_, v)| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let block = (count + 2).min(n);
    let max_dim = (4 * count + 40).min(n);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut fresh: Vec<Vec<f64>> = (0..block)
        .map(|j| random_unit(n, seed.wrapping_add(j as u64)))
        .collect();
    let mut last_resid = f64::INFINITY;
    let mut restarts = 0;
    loop {
        let mut added: Vec<Vec<f64>> = Vec::new();
        for mut v in fresh.drain(..) {
            // classical Gram-Schmidt, repeated while a pass cancels heavily
            let n0 = norm(&v);
            let mut nv = n0;
            for _ in 0..4 {
                let before = nv;
                for q in basis.iter().chain(added.iter()) {
                    let c = dot(q, &v);
                    v.iter_mut().zip(q.iter()).for_each(|(x, qi)| *x -= c * qi);
                }
                nv = norm(&v);
                if nv >= 0.5 * before {
                    break;
                }
            }
            if nv > 1e-12 * n0 {
                v.iter_mut().for_each(|x| *x /= nv);
                added.push(v);
            }
        }
        let grew = !added.is_empty();
        fresh = added.iter().map(|q| chol.solve(q)).collect();
        basis.extend(added);
        if basis.len() < count {
            if !grew {
                break;
            }
            continue;
        }

        let pairs = rayleigh_ritz(a, &basis, count);
        last_resid = pairs
            .values
            .iter()
            .zip(&pairs.vectors)
            .map(|(&lam, v)| {
                let av = a.mul_vec(v);
                let r: Vec<f64> = av.iter().zip(v).map(|(x, y)| x - lam * y).collect();
                norm(&r) / scale
            })
            .fold(0.0, f64::max);
        if last_resid <= rel_tol {
            return Ok(pairs);
        }
        if basis.len() >= max_dim || !grew {
            restarts += 1;
            if restarts > 20 {
                break;
            }
            // thick restart from the current Ritz vectors
            basis.clear();
            fresh = pairs.vectors.clone();
            fresh.extend(pairs.vectors.iter().map(|v| chol.solve(v)));
        }
    }
    Err(LinalgError::NoConvergence {
        method: "block Lanczos",
        iterations: restarts,
        residual: last_resid,
    })
}

fn rayleigh_ritz(a: &CsrMatrix, basis: &[Vec<f64>], count: usize) -> EigenPairs {
    let m = basis.len();
    let aq: Vec<Vec<f64>> = basis.iter().map(|q| a.mul_vec(q)).collect();
    let mut h = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = 0.5 * (dot(&basis[i], &aq[j]) + dot(&basis[j], &aq[i]));
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let n = basis[0].len();
    let mut values = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count);
    for &col in &order[..count] {
        values.push(eig.eigenvalues[col]);
        let mut v = vec![0.0; n];
        for (i, q) in basis.iter().enumerate() {
            let c = eig.eigenvectors[(i, col)];
            v.iter_mut().zip(q).for_each(|(x, qi)| *x += c * qi);
        }
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        vectors.push(v);
    }
    EigenPairs { values, vectors }
}

/// Uniform random vector with entries in `[-1, 1)`.
pub fn random_vector<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
