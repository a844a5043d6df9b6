//! Leading eigenpairs of a discrete operator, spectral projectors and
//! subspace distances.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::grid::{Grid, GridError, GridFunction};
use crate::linalg::{self, LinalgError};
use crate::operator::{DiscreteOperator, OperatorError};
use crate::report::fmt17;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("eigensolver failed: {0}")]
    Solver(#[from] LinalgError),
    #[error("requested {requested} eigenpairs but the grid has {nodes} nodes")]
    TooMany { requested: usize, nodes: usize },
    #[error("smallest eigenvalue {0} is not positive")]
    NotPositive(f64),
    #[error("projector rank {rank} exceeds the {available} computed eigenpairs")]
    Rank { rank: usize, available: usize },
    #[error("projectors have different ranks ({0} vs {1})")]
    RankMismatch(usize, usize),
    #[error("Rayleigh quotient of the zero vector")]
    ZeroVector,
}

/// Matrices up to this many rows use the dense symmetric solver.
pub const DENSE_LIMIT: usize = 2000;

/// Tolerance on successive power-iteration estimates in [`projector_distance`].
pub const POWER_REL_TOL: f64 = 1e-10;

/// Absolute tolerance on `‖P − P̃‖²`. Distances below `1e3·ε_mach` are
/// rounding noise and the Rayleigh quotients there do not settle.
pub const PROJECTOR_NOISE_FLOOR: f64 = (1e3 * f64::EPSILON) * (1e3 * f64::EPSILON);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenMethod {
    Dense,
    Lanczos,
}

/// Smallest eigenpairs `λ_1 <= … <= λ_count` with eigenfunctions orthonormal
/// in the discrete L² inner product.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    grid: Grid,
    values: Vec<f64>,
    vectors: Vec<GridFunction>,
    residuals: Vec<f64>,
    method: EigenMethod,
}

impl EigenDecomposition {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `λ_i`, one-based.
    pub fn value(&self, i: usize) -> f64 {
        self.values[i - 1]
    }

    /// `φ_i`, one-based.
    pub fn vector(&self, i: usize) -> &GridFunction {
        &self.vectors[i - 1]
    }

    pub fn vectors(&self) -> &[GridFunction] {
        &self.vectors
    }

    /// `‖Lφ_i − λ_i φ_i‖_{L²}` per pair.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn method(&self) -> EigenMethod {
        self.method
    }

    pub fn projector(&self, rank: usize) -> Result<SpectralProjector<'_>, SpectralError> {
        if rank > self.count() {
            return Err(SpectralError::Rank {
                rank,
                available: self.count(),
            });
        }
        Ok(SpectralProjector { eig: self, rank })
    }

    /// Largest `|⟨φ_i, φ_j⟩ − δ_ij|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0_f64;
        for (i, a) in self.vectors.iter().enumerate() {
            for (j, b) in self.vectors.iter().enumerate().take(i + 1) {
                let ip = a.inner(b).unwrap_or(f64::NAN);
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((ip - target).abs());
            }
        }
        worst
    }

    /// CSV with columns `index,eigenvalue,residual`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,eigenvalue,residual\n");
        for (i, (v, r)) in self.values.iter().zip(&self.residuals).enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, fmt17(*v), fmt17(*r)));
        }
        out
    }
}

pub fn eigensolve(op: &DiscreteOperator, count: usize) -> Result<EigenDecomposition, SpectralError> {
    let method = if op.grid().len() <= DENSE_LIMIT {
        EigenMethod::Dense
    } else {
        EigenMethod::Lanczos
    };
    eigensolve_with(op, count, method)
}

pub fn eigensolve_with(
    op: &DiscreteOperator,
    count: usize,
    method: EigenMethod,
) -> Result<EigenDecomposition, SpectralError> {
    let grid = *op.grid();
    if count > grid.len() {
        return Err(SpectralError::TooMany {
            requested: count,
            nodes: grid.len(),
        });
    }
    let pairs = match method {
        EigenMethod::Dense => linalg::dense_smallest(op.matrix(), count)?,
        EigenMethod::Lanczos => linalg::lanczos_smallest(op.matrix(), count, 1e-12, 0x5eed)?,
    };
    if let Some(&first) = pairs.values.first() {
        if first <= 0.0 {
            return Err(SpectralError::NotPositive(first));
        }
    }
    let scale = 1.0 / grid.cell_volume().sqrt();
    let mut vectors = Vec::with_capacity(count);
    let mut residuals = Vec::with_capacity(count);
    for (lam, v) in pairs.values.iter().zip(pairs.vectors) {
        let mut v = v;
        fix_sign(&mut v);
        let phi = GridFunction::new(grid, v.into_iter().map(|x| x * scale).collect())?;
        let r = op.apply(&phi)?.axpy(-lam, &phi)?.norm_l2();
        residuals.push(r);
        vectors.push(phi);
    }
    Ok(EigenDecomposition {
        grid,
        values: pairs.values,
        vectors,
        residuals,
        method,
    })
}

/// Largest-magnitude entry positive; ties go to the lowest index.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Orthogonal projector onto `span{φ_1, …, φ_k}`.
#[derive(Debug, Clone, Copy)]
pub struct SpectralProjector<'a> {
    eig: &'a EigenDecomposition,
    rank: usize,
}

impl<'a> SpectralProjector<'a> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn decomposition(&self) -> &'a EigenDecomposition {
        self.eig
    }

    /// `⟨g, φ_i⟩` for `i = 1..=k`.
    pub fn coefficients(&self, g: &GridFunction) -> Result<Vec<f64>, SpectralError> {
        self.eig.vectors[..self.rank]
            .iter()
            .map(|phi| Ok(g.inner(phi)?))
            .collect()
    }

    pub fn project(&self, g: &GridFunction) -> Result<GridFunction, SpectralError> {
        let coefs = self.coefficients(g)?;
        self.combine(&coefs)
    }

    /// `Σ coef_i φ_i`.
    pub fn combine(&self, coefs: &[f64]) -> Result<GridFunction, SpectralError> {
        let mut out = GridFunction::zeros(self.eig.grid);
        for (c, phi) in coefs.iter().zip(&self.eig.vectors[..self.rank]) {
            out = out.axpy(*c, phi)?;
        }
        Ok(out)
    }

    /// `‖g − P g‖`.
    pub fn out_of_span(&self, g: &GridFunction) -> Result<f64, SpectralError> {
        Ok(g.sub(&self.project(g)?)?.norm_l2())
    }

    fn apply_euclidean(&self, v: &[f64]) -> Vec<f64> {
        let g = GridFunction::new(self.eig.grid, v.to_vec()).expect("length checked by caller");
        self.project(&g).expect("same grid").into_values()
    }
}

pub fn project(p: &SpectralProjector<'_>, g: &GridFunction) -> Result<GridFunction, SpectralError> {
    p.project(g)
}

/// `‖P − P̃‖` in the operator norm induced by the discrete L² inner product,
/// by power iteration on `(P − P̃)²`.
pub fn projector_distance(p: &SpectralProjector<'_>, q: &SpectralProjector<'_>) -> Result<f64, SpectralError> {
    p.eig.grid.ensure_same(&q.eig.grid)?;
    if p.rank != q.rank {
        return Err(SpectralError::RankMismatch(p.rank, q.rank));
    }
    let n = p.eig.grid.len();
    let diff = |v: &[f64]| -> Vec<f64> {
        let a = p.apply_euclidean(v);
        let b = q.apply_euclidean(v);
        a.iter().zip(&b).map(|(x, y)| x - y).collect()
    };
    let result = linalg::power_iteration(|v| diff(&diff(v)), n, POWER_REL_TOL, PROJECTOR_NOISE_FLOOR, 200_000, 0xd15)?;
    Ok(result.eigenvalue.max(0.0).sqrt())
}

/// Sine of the largest principal angle between the two ranges, from the
/// singular values of the `k×k` cross-Gram matrix. For equal ranks this equals
/// [`projector_distance`]; it is kept as an independent route.
pub fn largest_principal_sine(p: &SpectralProjector<'_>, q: &SpectralProjector<'_>) -> Result<f64, SpectralError> {
    if p.rank != q.rank {
        return Err(SpectralError::RankMismatch(p.rank, q.rank));
    }
    let k = p.rank;
    if k == 0 {
        return Ok(0.0);
    }
    let mut m = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            m[(i, j)] = p.eig.vectors[i].inner(&q.eig.vectors[j])?;
        }
    }
    let smin = m.singular_values().iter().copied().fold(f64::INFINITY, f64::min).min(1.0);
    Ok((1.0 - smin * smin).max(0.0).sqrt())
}

/// `⟨Lv, v⟩ / ‖v‖²`.
pub fn rayleigh(op: &DiscreteOperator, v: &GridFunction) -> Result<f64, SpectralError> {
    let n2 = v.inner(v)?;
    if n2 == 0.0 {
        return Err(SpectralError::ZeroVector);
    }
    Ok(op.form(v, v)? / n2)
}
