//! Divergence-form elliptic operators `L u = -div(A ∇u) + c u` on the grid.
//!
//! The assembled matrix uses a flux discretisation: diagonal diffusion terms
//! take `a_ii` at cell-face midpoints and mixed terms use a central stencil
//! whose coefficient sits on the shared node, so every entry and its mirror
//! are computed from the same coefficient sample. The matrix is symmetrised
//! bitwise after assembly.
//!
//! The operator identities (derived operators `L_k`, `L_kl`, the chain rule
//! for `∇_k Lⁿ` and the order-n norm bounds) are checked in the expanded
//! non-divergence form on an extended lattice with ghost layers, so that
//! boundary truncation does not pollute the comparison.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::field::ScalarField;
use crate::grid::{Grid, GridError, GridFunction, MultiIndex};
use crate::linalg::{BandCholesky, CsrMatrix, LinalgError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("coefficient dimension {got} does not match grid dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("ellipticity constants must satisfy 0 < m <= M and zeta >= 0 (m={m}, M={big_m}, zeta={zeta})")]
    BadConstants { m: f64, big_m: f64, zeta: f64 },
    #[error("a_{i}{j} != a_{j}{i} at sample point {point:?}")]
    NotSymmetric { i: usize, j: usize, point: Vec<f64> },
    #[error("ellipticity violated at node {node} {point:?}: quadratic form ratio {ratio} outside [{m}, {big_m}]")]
    Ellipticity {
        node: usize,
        point: Vec<f64>,
        ratio: f64,
        m: f64,
        big_m: f64,
    },
    #[error("c({point:?}) = {value} is below zeta = {zeta} at node {node}")]
    ZerothOrder {
        node: usize,
        point: Vec<f64>,
        value: f64,
        zeta: f64,
    },
    #[error("axis {axis} out of range for dimension {dim}")]
    AxisOutOfRange { axis: usize, dim: usize },
    #[error("derivative sup table has {got} coefficient entries, expected {expected}")]
    MissingSupEntries { expected: usize, got: usize },
}

/// Coefficients `A(x)` (symmetric, row-major `d×d`) and `c(x)` together with
/// the declared ellipticity constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    dim: usize,
    a: Vec<ScalarField>,
    c: ScalarField,
    m: f64,
    big_m: f64,
    zeta: f64,
}

impl CoefficientField {
    /// `a` is given row-major; the lower triangle is taken from the upper
    /// one so symmetry holds structurally.
    pub fn new(
        a: Vec<ScalarField>,
        c: ScalarField,
        m: f64,
        big_m: f64,
        zeta: f64,
    ) -> Result<Self, OperatorError> {
        let dim = c.dim();
        if a.len() != dim * dim || a.iter().any(|f| f.dim() != dim) {
            return Err(OperatorError::Dimension {
                expected: dim,
                got: (a.len() as f64).sqrt() as usize,
            });
        }
        if !(m > 0.0 && big_m >= m && zeta >= 0.0) {
            return Err(OperatorError::BadConstants { m, big_m, zeta });
        }
        let mut a = a;
        for i in 0..dim {
            for j in 0..i {
                a[i * dim + j] = a[j * dim + i].clone();
            }
        }
        Ok(Self {
            dim,
            a,
            c,
            m,
            big_m,
            zeta,
        })
    }

    /// `A = diag·I` (plus `off` in every off-diagonal slot).
    pub fn isotropic(
        dim: usize,
        diag: ScalarField,
        off: Option<ScalarField>,
        c: ScalarField,
        m: f64,
        big_m: f64,
        zeta: f64,
    ) -> Result<Self, OperatorError> {
        let off = off.unwrap_or_else(|| ScalarField::zero(dim));
        let a = (0..dim * dim)
            .map(|k| if k / dim == k % dim { diag.clone() } else { off.clone() })
            .collect();
        Self::new(a, c, m, big_m, zeta)
    }

    /// `-Δ + c0` with exact constants.
    pub fn laplacian(dim: usize, c0: f64) -> Self {
        Self::isotropic(
            dim,
            ScalarField::constant(dim, 1.0),
            None,
            ScalarField::constant(dim, c0),
            1.0,
            1.0,
            c0,
        )
        .expect("valid laplacian constants")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a(&self, i: usize, j: usize) -> &ScalarField {
        &self.a[i * self.dim + j]
    }

    pub fn a_entries(&self) -> &[ScalarField] {
        &self.a
    }

    pub fn c(&self) -> &ScalarField {
        &self.c
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn big_m(&self) -> f64 {
        self.big_m
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Same fields, new declared constants.
    pub fn with_constants(&self, m: f64, big_m: f64, zeta: f64) -> Result<Self, OperatorError> {
        Self::new(self.a.clone(), self.c.clone(), m, big_m, zeta)
    }

    /// Replaces the fields while keeping the declared constants.
    pub fn with_fields(&self, a: Vec<ScalarField>, c: ScalarField) -> Result<Self, OperatorError> {
        Self::new(a, c, self.m, self.big_m, self.zeta)
    }

    /// Table of `max_{|α|<=3} sup|∂^α a_ij|` per entry and `max_{|α|<=2} sup|∂^α c|`.
    pub fn sup_table(&self) -> SupTable {
        SupTable {
            a: self.a.iter().map(|f| f.max_derivative_sup(3)).collect(),
            c: self.c.max_derivative_sup(2),
        }
    }

    /// Checks symmetry, ellipticity (100 random directions plus the axes)
    /// and the zeroth-order floor at every node and face midpoint.
    pub fn validate(&self, grid: &Grid, seed: u64) -> Result<(), OperatorError> {
        if grid.dim() != self.dim {
            return Err(OperatorError::Dimension {
                expected: grid.dim(),
                got: self.dim,
            });
        }
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut directions: Vec<Vec<f64>> = (0..d)
            .map(|k| (0..d).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
            .collect();
        for _ in 0..100 {
            directions.push((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        let tol = 1e-12;
        for (node, x) in sample_points(grid) {
            for i in 0..d {
                for j in 0..i {
                    if self.a(i, j).eval(&x) != self.a(j, i).eval(&x) {
                        return Err(OperatorError::NotSymmetric { i, j, point: x });
                    }
                }
            }
            let mat: Vec<f64> = self.a.iter().map(|f| f.eval(&x)).collect();
            for xi in &directions {
                let n2: f64 = xi.iter().map(|v| v * v).sum();
                if n2 == 0.0 {
                    continue;
                }
                let mut q = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        q += mat[i * d + j] * xi[i] * xi[j];
                    }
                }
                let ratio = q / n2;
                if ratio < self.m * (1.0 - tol) || ratio > self.big_m * (1.0 + tol) {
                    return Err(OperatorError::Ellipticity {
                        node,
                        point: x,
                        ratio,
                        m: self.m,
                        big_m: self.big_m,
                    });
                }
            }
            let cv = self.c.eval(&x);
            if cv < self.zeta * (1.0 - tol) {
                return Err(OperatorError::ZerothOrder {
                    node,
                    point: x,
                    value: cv,
                    zeta: self.zeta,
                });
            }
        }
        Ok(())
    }
}

/// Every point at which assembly samples a coefficient: interior nodes,
/// axis-aligned face midpoints and boundary-adjacent nodes. The node index
/// reported is the interior node the point belongs to.
pub fn sample_points(grid: &Grid) -> Vec<(usize, Vec<f64>)> {
    let d = grid.dim();
    let h = grid.h();
    let mut out = Vec::new();
    for node in 0..grid.len() {
        let idx = grid.multi_index(node);
        let base: Vec<f64> = (0..d).map(|a| (idx[a] as f64 + 1.0) * h).collect();
        out.push((node, base.clone()));
        for axis in 0..d {
            for twice_offset in [-1isize, 1, -2, 2] {
                let mut x = base.clone();
                x[axis] = ((2 * (idx[axis] as isize + 1) + twice_offset) as f64) * 0.5 * h;
                out.push((node, x));
            }
        }
    }
    out
}

/// Sup-norm table feeding [`growth_constant`].
#[derive(Debug, Clone, PartialEq)]
pub struct SupTable {
    /// Row-major `d×d`; entry `(i,j)` is `max_{|α|<=3} ‖∂^α a_ij‖_∞`.
    pub a: Vec<f64>,
    /// `max_{|α|<=2} ‖∂^α c‖_∞`.
    pub c: f64,
}

/// `C = (2d²+1)·max{max ‖∂^α a_ij‖_∞, max ‖∂^α c‖_∞}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthConstant {
    pub value: f64,
    pub dim: usize,
}

pub fn growth_constant(table: &SupTable, dim: usize) -> Result<GrowthConstant, OperatorError> {
    if table.a.len() != dim * dim {
        return Err(OperatorError::MissingSupEntries {
            expected: dim * dim,
            got: table.a.len(),
        });
    }
    let peak = table.a.iter().copied().fold(table.c, f64::max);
    Ok(GrowthConstant {
        value: (2.0 * (dim * dim) as f64 + 1.0) * peak,
        dim,
    })
}

/// Assembled operator on a grid.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    grid: Grid,
    matrix: CsrMatrix,
    coeff: CoefficientField,
    factor: OnceLock<BandCholesky>,
}

impl DiscreteOperator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn coefficients(&self) -> &CoefficientField {
        &self.coeff
    }

    pub fn apply(&self, u: &GridFunction) -> Result<GridFunction, OperatorError> {
        self.grid.ensure_same(u.grid())?;
        Ok(GridFunction::new(self.grid, self.matrix.mul_vec(u.values()))?)
    }

    /// `Lⁿ u` by repeated mat-vec; `n = 0` is the identity.
    pub fn apply_power(&self, u: &GridFunction, n: u32) -> Result<GridFunction, OperatorError> {
        self.grid.ensure_same(u.grid())?;
        let mut out = u.clone();
        for _ in 0..n {
            out = self.apply(&out)?;
        }
        Ok(out)
    }

    /// Direct solve of `L u = f` with a cached banded Cholesky factor.
    pub fn solve(&self, f: &GridFunction) -> Result<GridFunction, OperatorError> {
        self.grid.ensure_same(f.grid())?;
        let chol = match self.factor.get() {
            Some(c) => c,
            None => {
                let c = BandCholesky::factor(&self.matrix)?;
                self.factor.get_or_init(|| c)
            }
        };
        Ok(GridFunction::new(self.grid, chol.solve(f.values()))?)
    }

    /// `⟨L u, v⟩` in the discrete L² inner product.
    pub fn form(&self, u: &GridFunction, v: &GridFunction) -> Result<f64, OperatorError> {
        Ok(self.apply(u)?.inner(v)?)
    }
}

/// Assembles the flux discretisation of `-div(A∇u) + cu`.
pub fn assemble(coeff: &CoefficientField, grid: &Grid) -> Result<DiscreteOperator, OperatorError> {
    assemble_with_seed(coeff, grid, 0)
}

pub fn assemble_with_seed(
    coeff: &CoefficientField,
    grid: &Grid,
    seed: u64,
) -> Result<DiscreteOperator, OperatorError> {
    coeff.validate(grid, seed)?;
    let d = grid.dim();
    let h = grid.h();
    let inv_h2 = 1.0 / (h * h);
    let mut trip = Vec::with_capacity(grid.len() * (1 + 2 * d + 4 * d * d));
    for p in 0..grid.len() {
        let idx = grid.multi_index(p);
        let node: Vec<f64> = (0..d).map(|a| (idx[a] as f64 + 1.0) * h).collect();
        let shifted = |axis: usize, twice_offset: isize| -> Vec<f64> {
            let mut x = node.clone();
            x[axis] = ((2 * (idx[axis] as isize + 1) + twice_offset) as f64) * 0.5 * h;
            x
        };
        trip.push((p, p, coeff.c.eval(&node)));
        for i in 0..d {
            for s in [-1isize, 1] {
                let a = coeff.a(i, i).eval(&shifted(i, s)) * inv_h2;
                trip.push((p, p, a));
                if let Some(q) = grid.neighbor(p, i, s) {
                    trip.push((p, q, -a));
                }
            }
            for j in 0..d {
                if i == j || coeff.a(i, j).is_zero() {
                    continue;
                }
                for s in [-1isize, 1] {
                    let a = coeff.a(i, j).eval(&shifted(i, 2 * s)) * 0.25 * inv_h2;
                    let Some(mid) = grid.neighbor(p, i, s) else { continue };
                    for t in [-1isize, 1] {
                        if let Some(q) = grid.neighbor(mid, j, t) {
                            trip.push((p, q, -(s * t) as f64 * a));
                        }
                    }
                }
            }
        }
    }
    let raw = CsrMatrix::from_triplets(grid.len(), grid.len(), trip);
    let mut sym = Vec::with_capacity(raw.nnz());
    for r in 0..raw.nrows() {
        for (c, v) in raw.row(r) {
            sym.push((r, c, 0.5 * (v + raw.get(c, r))));
            if raw.get(c, r) == 0.0 && v != 0.0 {
                sym.push((c, r, 0.5 * v));
            }
        }
    }
    let matrix = CsrMatrix::from_triplets(grid.len(), grid.len(), sym);
    Ok(DiscreteOperator {
        grid: *grid,
        matrix,
        coeff: coeff.clone(),
        factor: OnceLock::new(),
    })
}

/// Function values on the closed box plus `ghost` layers on each side, used
/// for free-space finite-difference identities. Entries whose stencil would
/// leave the array are `NaN`.
#[derive(Debug, Clone)]
pub struct LatticeField {
    grid: Grid,
    ghost: usize,
    ext: usize,
    values: Vec<f64>,
}

impl LatticeField {
    pub fn sample(grid: &Grid, ghost: usize, f: &ScalarField) -> Self {
        let ext = grid.n() + 2 + 2 * ghost;
        let mut out = Self {
            grid: *grid,
            ghost,
            ext,
            values: vec![0.0; ext.pow(grid.dim() as u32)],
        };
        for k in 0..out.values.len() {
            let x = out.point(k);
            out.values[k] = f.eval(&x);
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            ..self.clone()
        }
    }

    fn coords(&self, k: usize) -> [usize; 3] {
        let mut idx = [0; 3];
        let mut rest = k;
        for slot in idx.iter_mut().take(self.grid.dim()) {
            *slot = rest % self.ext;
            rest /= self.ext;
        }
        idx
    }

    fn point(&self, k: usize) -> Vec<f64> {
        let idx = self.coords(k);
        (0..self.grid.dim())
            .map(|a| (idx[a] as f64 - self.ghost as f64) * self.grid.h())
            .collect()
    }

    fn shift(&self, k: usize, axis: usize, offset: isize) -> Option<usize> {
        let i = self.coords(k)[axis] as isize + offset;
        if i < 0 || i >= self.ext as isize {
            None
        } else {
            Some((k as isize + offset * (self.ext.pow(axis as u32) as isize)) as usize)
        }
    }

    fn value(&self, k: Option<usize>) -> f64 {
        k.map_or(f64::NAN, |j| self.values[j])
    }

    pub fn first_difference(&self, axis: usize) -> Self {
        let mut out = self.zeros_like();
        let inv = 1.0 / (2.0 * self.grid.h());
        for k in 0..self.values.len() {
            out.values[k] = (self.value(self.shift(k, axis, 1)) - self.value(self.shift(k, axis, -1))) * inv;
        }
        out
    }

    pub fn second_difference(&self, i: usize, j: usize) -> Self {
        if i != j {
            return self.first_difference(j).first_difference(i);
        }
        let mut out = self.zeros_like();
        let inv = 1.0 / (self.grid.h() * self.grid.h());
        for k in 0..self.values.len() {
            out.values[k] = (self.value(self.shift(k, i, 1)) - 2.0 * self.values[k]
                + self.value(self.shift(k, i, -1)))
                * inv;
        }
        out
    }

    fn axpy_field(&mut self, coef: &ScalarField, other: &LatticeField, sign: f64) {
        if coef.is_zero() {
            return;
        }
        for k in 0..self.values.len() {
            let x = self.point(k);
            self.values[k] += sign * coef.eval(&x) * other.values[k];
        }
    }

    pub fn sub(&self, other: &LatticeField) -> LatticeField {
        let mut out = self.clone();
        out.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a -= b);
        out
    }

    pub fn add(&self, other: &LatticeField) -> LatticeField {
        let mut out = self.clone();
        out.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
        out
    }

    /// Restriction to the interior nodes of the grid.
    pub fn interior(&self) -> GridFunction {
        let g = self.grid;
        let values = (0..g.len())
            .map(|node| {
                let idx = g.multi_index(node);
                let k: usize = (0..g.dim())
                    .map(|a| (idx[a] + 1 + self.ghost) * self.ext.pow(a as u32))
                    .sum();
                self.values[k]
            })
            .collect();
        GridFunction::new(g, values).expect("interior length matches grid")
    }
}

/// Which coefficient derivative an expanded-form operator uses: `L` itself,
/// `L_k` or `L_kl`.
#[derive(Debug, Clone, PartialEq)]
pub enum DerivedAxes {
    Base,
    One(usize),
    Two(usize, usize),
}

/// Expanded-form action `-Σ ã_ij ∂_ij u - Σ_j (Σ_i ∂_i ã_ij) ∂_j u + c̃ u`
/// where `(ã, c̃)` are the coefficients differentiated according to `axes`.
#[derive(Debug, Clone)]
pub struct ExpandedOperator {
    dim: usize,
    a: Vec<ScalarField>,
    drift: Vec<ScalarField>,
    c: ScalarField,
}

impl ExpandedOperator {
    pub fn apply(&self, u: &LatticeField) -> LatticeField {
        let d = self.dim;
        let mut out = u.zeros_like();
        out.axpy_field(&self.c, u, 1.0);
        for i in 0..d {
            for j in 0..d {
                let coef = &self.a[i * d + j];
                if !coef.is_zero() {
                    out.axpy_field(coef, &u.second_difference(i, j), -1.0);
                }
            }
        }
        for j in 0..d {
            if !self.drift[j].is_zero() {
                out.axpy_field(&self.drift[j], &u.first_difference(j), -1.0);
            }
        }
        out
    }

    pub fn apply_power(&self, u: &LatticeField, n: u32) -> LatticeField {
        (0..n).fold(u.clone(), |acc, _| self.apply(&acc))
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().all(ScalarField::is_zero)
            && self.drift.iter().all(ScalarField::is_zero)
            && self.c.is_zero()
    }
}

/// Builds `L`, `L_k` or `L_kl` with analytic coefficient derivatives:
/// `L_k u = -Σ ∂_k a_ij ∂_ij u - Σ_j (Σ_i ∂_i∂_k a_ij) ∂_j u + (∂_k c) u`.
pub fn derived_operator(coeff: &CoefficientField, axes: DerivedAxes) -> Result<ExpandedOperator, OperatorError> {
    let d = coeff.dim();
    let mut extra = MultiIndex::zero(d);
    match axes {
        DerivedAxes::Base => {}
        DerivedAxes::One(k) => {
            if k >= d {
                return Err(OperatorError::AxisOutOfRange { axis: k, dim: d });
            }
            extra = MultiIndex::unit(d, k);
        }
        DerivedAxes::Two(k, l) => {
            for axis in [k, l] {
                if axis >= d {
                    return Err(OperatorError::AxisOutOfRange { axis, dim: d });
                }
            }
            extra = MultiIndex::unit(d, k).plus(&MultiIndex::unit(d, l));
        }
    }
    let a: Vec<ScalarField> = coeff.a.iter().map(|f| f.derivative(&extra)).collect();
    let drift = (0..d)
        .map(|j| {
            (0..d).fold(ScalarField::zero(d), |acc, i| {
                acc.plus(&coeff.a(i, j).derivative(&extra.plus(&MultiIndex::unit(d, i))))
            })
        })
        .collect();
    Ok(ExpandedOperator {
        dim: d,
        a,
        drift,
        c: coeff.c.derivative(&extra),
    })
}

/// Relative residual of `∇_k Lⁿu = Σ_i L^{n-i} L_k L^{i-1} u + Lⁿ ∇_k u`
/// over interior nodes. Returns 0 when both sides vanish.
pub fn chain_rule_residual(
    op: &DiscreteOperator,
    u: &ScalarField,
    n: u32,
    k: usize,
) -> Result<f64, OperatorError> {
    let coeff = op.coefficients();
    let l = derived_operator(coeff, DerivedAxes::Base)?;
    let lk = derived_operator(coeff, DerivedAxes::One(k))?;
    let field = LatticeField::sample(op.grid(), n as usize + 2, u);

    let lhs = l.apply_power(&field, n).first_difference(k);
    let mut rhs = l.apply_power(&field.first_difference(k), n);
    for i in 1..=n {
        let inner = l.apply_power(&field, i - 1);
        rhs = rhs.add(&l.apply_power(&lk.apply(&inner), n - i));
    }
    let lhs_i = lhs.interior();
    let diff = lhs_i.sub(&rhs.interior())?;
    let denom = lhs_i.norm_l2();
    let num = diff.norm_l2();
    if num == 0.0 {
        return Ok(0.0);
    }
    Ok(num / denom)
}

/// Both sides of `‖Lⁿu‖ <= (n!)² Cⁿ max_{|α|<=n+2} ‖∂^α u‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderBoundCheck {
    pub n: u32,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Multiplicative tolerance applied to analytic right-hand sides.
pub const ANALYTIC_REL_TOL: f64 = 1e-6;

pub fn check_order_bounds(op: &DiscreteOperator, u: &ScalarField, n: u32) -> Result<OrderBoundCheck, OperatorError> {
    let coeff = op.coefficients();
    let c = growth_constant(&coeff.sup_table(), coeff.dim())?.value;
    let l = derived_operator(coeff, DerivedAxes::Base)?;
    let field = LatticeField::sample(op.grid(), n as usize + 1, u);
    let lhs = l.apply_power(&field, n).interior().norm_l2();
    let fact: f64 = (1..=n).map(f64::from).product();
    let rhs = fact * fact * c.powi(n as i32) * u.max_derivative_l2(n as usize + 2);
    let h2 = op.grid().h().powi(2);
    Ok(OrderBoundCheck {
        n,
        lhs,
        rhs,
        pass: lhs <= rhs * (1.0 + ANALYTIC_REL_TOL) + h2,
    })
}
