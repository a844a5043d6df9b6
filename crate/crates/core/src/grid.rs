//! Uniform interior-node grids on the unit box `(0,1)^d`.
//!
//! Functions live on the `n^d` interior nodes; boundary values are implicitly
//! zero. The inner product is midpoint quadrature with weight `h^d` per node.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension must be 1, 2 or 3 (got {0})")]
    BadDimension(usize),
    #[error("points per axis must be at least 3 (got {0})")]
    TooFewPoints(usize),
    #[error("grid mismatch: {left} vs {right}")]
    Mismatch { left: Grid, right: Grid },
    #[error("value vector has length {got}, grid has {expected} interior nodes")]
    Length { expected: usize, got: usize },
    #[error("derivative order {0} is not supported (max 4)")]
    UnsupportedOrder(usize),
    #[error("multi-index has {got} axes, grid has {expected}")]
    IndexDimension { expected: usize, got: usize },
    #[error("sampled value at node {node} is not finite")]
    NonFinite { node: usize },
}

/// Highest derivative order accepted by [`GridFunction::partial`].
pub const MAX_PARTIAL_ORDER: usize = 4;

/// Uniform grid with `n` interior points per axis and spacing `h = 1/(n+1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dim: usize,
    n: usize,
    h: f64,
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}D grid n={}", self.dim, self.n)
    }
}

impl Grid {
    pub fn new(dim: usize, n: usize) -> Result<Self, GridError> {
        if !(1..=3).contains(&dim) {
            return Err(GridError::BadDimension(dim));
        }
        if n < 3 {
            return Err(GridError::TooFewPoints(n));
        }
        Ok(Self {
            dim,
            n,
            h: 1.0 / (n as f64 + 1.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Interior points per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Quadrature weight `h^d` attached to every interior node.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// Number of interior nodes, `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Axis strides of the lexicographic node ordering (axis 0 fastest).
    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow(axis as u32)
    }

    /// Zero-based per-axis indices of a flat node index.
    pub fn multi_index(&self, flat: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        let mut rest = flat;
        for slot in idx.iter_mut().take(self.dim) {
            *slot = rest % self.n;
            rest /= self.n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .take(self.dim)
            .enumerate()
            .map(|(axis, &i)| i * self.stride(axis))
            .sum()
    }

    /// Coordinates of an interior node; unused trailing axes are zero.
    pub fn point(&self, flat: usize) -> [f64; 3] {
        let idx = self.multi_index(flat);
        let mut x = [0.0; 3];
        for axis in 0..self.dim {
            x[axis] = (idx[axis] as f64 + 1.0) * self.h;
        }
        x
    }

    /// Neighbour `offset` steps along `axis`, or `None` when it is a boundary
    /// (or exterior) node.
    pub fn neighbor(&self, flat: usize, axis: usize, offset: isize) -> Option<usize> {
        let i = self.multi_index(flat)[axis] as isize + offset;
        if i < 0 || i >= self.n as isize {
            return None;
        }
        let shifted = flat as isize + offset * self.stride(axis) as isize;
        Some(shifted as usize)
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<(), GridError> {
        if self == other {
            Ok(())
        } else {
            Err(GridError::Mismatch {
                left: *self,
                right: *other,
            })
        }
    }
}

/// Per-axis derivative orders.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(orders: Vec<usize>) -> Self {
        Self(orders)
    }

    pub fn zero(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    /// Unit index `e_axis` in `dim` dimensions.
    pub fn unit(dim: usize, axis: usize) -> Self {
        let mut v = vec![0; dim];
        v[axis] = 1;
        Self(v)
    }

    pub fn orders(&self) -> &[usize] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `|α|`.
    pub fn order(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn plus(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Every multi-index in `dim` dimensions with `|α| <= max_order`,
    /// ordered by total order then lexicographically.
    pub fn all_up_to(dim: usize, max_order: usize) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        let mut cur = vec![0; dim];
        fn rec(axis: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
            if axis == cur.len() {
                out.push(MultiIndex(cur.clone()));
                return;
            }
            for k in 0..=left {
                cur[axis] = k;
                rec(axis + 1, left - k, cur, out);
            }
            cur[axis] = 0;
        }
        rec(0, max_order, &mut cur, &mut out);
        out.sort_by(|a, b| a.order().cmp(&b.order()).then_with(|| a.0.cmp(&b.0)));
        out
    }
}

/// Real values on the interior nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::Length {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Evaluates `field` at every interior node.
    pub fn sample<F>(grid: Grid, field: F) -> Result<Self, GridError>
    where
        F: Fn(&[f64]) -> f64,
    {
        let mut values = Vec::with_capacity(grid.len());
        for node in 0..grid.len() {
            let x = grid.point(node);
            let v = field(&x[..grid.dim()]);
            if !v.is_finite() {
                return Err(GridError::NonFinite { node });
            }
            values.push(v);
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Discrete L² inner product `h^d Σ u_i v_i`.
    pub fn inner(&self, other: &GridFunction) -> Result<f64, GridError> {
        self.grid.ensure_same(&other.grid)?;
        Ok(self.grid.cell_volume() * dot(&self.values, &other.values))
    }

    pub fn norm_l2(&self) -> f64 {
        (self.grid.cell_volume() * dot(&self.values, &self.values)).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> GridFunction {
        GridFunction {
            grid: self.grid,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &GridFunction) -> Result<GridFunction, GridError> {
        self.grid.ensure_same(&other.grid)?;
        Ok(GridFunction {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + s * b)
                .collect(),
        })
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction, GridError> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction, GridError> {
        self.axpy(-1.0, other)
    }

    /// Central finite-difference approximation of `∂^α u` with zero extension
    /// past the boundary. Orders are applied one axis at a time: pairs of
    /// derivatives use the compact second difference, a leftover odd order
    /// uses the central first difference.
    pub fn partial(&self, alpha: &MultiIndex) -> Result<GridFunction, GridError> {
        if alpha.dim() != self.grid.dim() {
            return Err(GridError::IndexDimension {
                expected: self.grid.dim(),
                got: alpha.dim(),
            });
        }
        if alpha.order() > MAX_PARTIAL_ORDER {
            return Err(GridError::UnsupportedOrder(alpha.order()));
        }
        let mut out = self.clone();
        for (axis, &order) in alpha.orders().iter().enumerate() {
            for _ in 0..order / 2 {
                out = out.second_difference(axis);
            }
            if order % 2 == 1 {
                out = out.first_difference(axis);
            }
        }
        Ok(out)
    }

    /// `‖∇u‖` built from forward differences over every cell face, including
    /// the faces touching the zero boundary values.
    pub fn gradient_norm_l2(&self) -> f64 {
        let inv = 1.0 / self.grid.h;
        let mut sum = 0.0;
        for axis in 0..self.grid.dim() {
            for i in 0..self.grid.len() {
                let d = (self.at(i, axis, 1) - self.values[i]) * inv;
                sum += d * d;
                if self.grid.neighbor(i, axis, -1).is_none() {
                    let d = self.values[i] * inv;
                    sum += d * d;
                }
            }
        }
        (self.grid.cell_volume() * sum).sqrt()
    }

    fn at(&self, node: usize, axis: usize, offset: isize) -> f64 {
        self.grid
            .neighbor(node, axis, offset)
            .map_or(0.0, |j| self.values[j])
    }

    fn first_difference(&self, axis: usize) -> GridFunction {
        let inv = 1.0 / (2.0 * self.grid.h);
        let values = (0..self.grid.len())
            .map(|i| (self.at(i, axis, 1) - self.at(i, axis, -1)) * inv)
            .collect();
        GridFunction {
            grid: self.grid,
            values,
        }
    }

    fn second_difference(&self, axis: usize) -> GridFunction {
        let inv = 1.0 / (self.grid.h * self.grid.h);
        let values = (0..self.grid.len())
            .map(|i| (self.at(i, axis, 1) - 2.0 * self.values[i] + self.at(i, axis, -1)) * inv)
            .collect();
        GridFunction {
            grid: self.grid,
            values,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Discrete L² inner product of two grid functions.
pub fn inner_product(u: &GridFunction, v: &GridFunction) -> Result<f64, GridError> {
    u.inner(v)
}

pub fn norm_l2(u: &GridFunction) -> f64 {
    u.norm_l2()
}
