//! Closed-form scalar fields on `[0,1]^d` with exact partial derivatives.
//!
//! A field is a finite sum of separable terms `coef · Π_axis factor(x_axis)`
//! where each factor is a monomial `x^p` or a shifted sine `sin(ωx + φ)`.
//! That family covers every preset the runner accepts (constants, affine and
//! quadratic profiles, trigonometric bumps, sine products) and is closed under
//! differentiation.

use std::f64::consts::PI;

use crate::grid::MultiIndex;

/// One-dimensional factor of a separable term.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// `x^p`.
    Poly(u32),
    /// `sin(ωx + φ)` after `quarter` derivatives, i.e. `sin(ωx + φ + quarter·π/2)`.
    Wave { omega: f64, phase: f64, quarter: u8 },
}

impl Factor {
    pub fn one() -> Self {
        Factor::Poly(0)
    }

    pub fn sin(omega: f64, phase: f64) -> Self {
        Factor::Wave {
            omega,
            phase,
            quarter: 0,
        }
    }

    fn eval(&self, x: f64) -> f64 {
        match *self {
            Factor::Poly(p) => x.powi(p as i32),
            Factor::Wave {
                omega,
                phase,
                quarter,
            } => {
                let theta = omega * x + phase;
                match quarter % 4 {
                    0 => theta.sin(),
                    1 => theta.cos(),
                    2 => -theta.sin(),
                    _ => -theta.cos(),
                }
            }
        }
    }

    /// `order`-th derivative as (multiplier, factor); `None` when identically zero.
    fn derivative(&self, order: usize) -> Option<(f64, Factor)> {
        if order == 0 {
            return Some((1.0, self.clone()));
        }
        match *self {
            Factor::Poly(p) => {
                if order > p as usize {
                    return None;
                }
                let mult: f64 = (0..order).map(|i| (p as usize - i) as f64).product();
                Some((mult, Factor::Poly(p - order as u32)))
            }
            Factor::Wave {
                omega,
                phase,
                quarter,
            } => {
                if omega == 0.0 {
                    return None;
                }
                Some((
                    omega.powi(order as i32),
                    Factor::Wave {
                        omega,
                        phase,
                        quarter: ((quarter as usize + order) % 4) as u8,
                    },
                ))
            }
        }
    }

    /// Upper bound of `|factor|` on `[0,1]`.
    fn sup_bound(&self) -> f64 {
        match *self {
            Factor::Poly(_) => 1.0,
            Factor::Wave { omega, .. } if omega != 0.0 => 1.0,
            Factor::Wave { .. } => self.eval(0.0).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub coef: f64,
    pub factors: Vec<Factor>,
}

impl Term {
    fn eval(&self, x: &[f64]) -> f64 {
        self.factors
            .iter()
            .zip(x)
            .fold(self.coef, |acc, (f, &xi)| acc * f.eval(xi))
    }
}

/// Sum of separable terms in `dim` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    dim: usize,
    terms: Vec<Term>,
}

impl ScalarField {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: Vec::new(),
        }
    }

    pub fn from_terms(dim: usize, terms: Vec<Term>) -> Self {
        assert!(terms.iter().all(|t| t.factors.len() == dim));
        let mut f = Self { dim, terms };
        f.prune();
        f
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Self::from_terms(
            dim,
            vec![Term {
                coef: value,
                factors: vec![Factor::one(); dim],
            }],
        )
    }

    /// `offset + Σ slope_i x_i`.
    pub fn affine(offset: f64, slope: &[f64]) -> Self {
        let dim = slope.len();
        let mut f = Self::constant(dim, offset);
        for (axis, &s) in slope.iter().enumerate() {
            f = f.plus(&Self::monomial(dim, axis, 1, s));
        }
        f
    }

    /// `offset + Σ q_i x_i²`.
    pub fn quadratic(offset: f64, coeffs: &[f64]) -> Self {
        let dim = coeffs.len();
        let mut f = Self::constant(dim, offset);
        for (axis, &q) in coeffs.iter().enumerate() {
            f = f.plus(&Self::monomial(dim, axis, 2, q));
        }
        f
    }

    /// `coef · x_axis^power`.
    pub fn monomial(dim: usize, axis: usize, power: u32, coef: f64) -> Self {
        let mut factors = vec![Factor::one(); dim];
        factors[axis] = Factor::Poly(power);
        Self::from_terms(dim, vec![Term { coef, factors }])
    }

    /// `amplitude · Π sin(m_i π x_i)`; a zero mode leaves that axis constant.
    pub fn sine_product(amplitude: f64, modes: &[u32]) -> Self {
        let factors = modes
            .iter()
            .map(|&m| {
                if m == 0 {
                    Factor::one()
                } else {
                    Factor::sin(m as f64 * PI, 0.0)
                }
            })
            .collect();
        Self::from_terms(
            modes.len(),
            vec![Term {
                coef: amplitude,
                factors,
            }],
        )
    }

    /// `amplitude · Π x_i (1 - x_i)`.
    pub fn bubble(dim: usize, amplitude: f64) -> Self {
        let mut f = Self::constant(dim, amplitude);
        for axis in 0..dim {
            let profile = Self::monomial(dim, axis, 1, 1.0).plus(&Self::monomial(dim, axis, 2, -1.0));
            f = f.times(&profile);
        }
        f
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    fn prune(&mut self) {
        self.terms.retain(|t| t.coef != 0.0);
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x)).sum()
    }

    pub fn plus(&self, other: &ScalarField) -> ScalarField {
        assert_eq!(self.dim, other.dim);
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Self::from_terms(self.dim, terms)
    }

    pub fn scaled(&self, s: f64) -> ScalarField {
        let terms = self
            .terms
            .iter()
            .map(|t| Term {
                coef: t.coef * s,
                factors: t.factors.clone(),
            })
            .collect();
        Self::from_terms(self.dim, terms)
    }

    /// Pointwise product. Factors are multiplied only when at least one of
    /// them is constant along that axis; general products are expanded via
    /// the sum-of-terms representation.
    pub fn times(&self, other: &ScalarField) -> ScalarField {
        assert_eq!(self.dim, other.dim);
        let mut terms = Vec::new();
        for a in &self.terms {
            for b in &other.terms {
                terms.extend(multiply_terms(a, b));
            }
        }
        Self::from_terms(self.dim, terms)
    }

    /// Exact `∂^α` of the field.
    pub fn derivative(&self, alpha: &MultiIndex) -> ScalarField {
        assert_eq!(alpha.dim(), self.dim);
        let terms = self
            .terms
            .iter()
            .filter_map(|t| {
                let mut coef = t.coef;
                let mut factors = Vec::with_capacity(self.dim);
                for (f, &order) in t.factors.iter().zip(alpha.orders()) {
                    let (m, g) = f.derivative(order)?;
                    coef *= m;
                    factors.push(g);
                }
                Some(Term { coef, factors })
            })
            .collect();
        Self::from_terms(self.dim, terms)
    }

    pub fn eval_partial(&self, x: &[f64], alpha: &MultiIndex) -> f64 {
        self.derivative(alpha).eval(x)
    }

    /// Upper bound on `sup_{[0,1]^d} |f|` from the term structure. Exact for
    /// single-term fields whose factors attain their maxima.
    pub fn sup_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coef.abs() * t.factors.iter().map(Factor::sup_bound).product::<f64>())
            .sum()
    }

    /// `max_{|α| <= order} sup |∂^α f|` (term-structure bound).
    pub fn max_derivative_sup(&self, order: usize) -> f64 {
        MultiIndex::all_up_to(self.dim, order)
            .iter()
            .map(|a| self.derivative(a).sup_bound())
            .fold(0.0, f64::max)
    }

    /// `‖f‖_{L²((0,1)^d)}` by tensor Gauss-Legendre quadrature.
    pub fn l2_norm(&self) -> f64 {
        let panels = match self.dim {
            1 => 256,
            2 => 48,
            _ => 16,
        };
        let rule = composite_gauss(panels);
        let mut total = 0.0;
        let mut idx = vec![0usize; self.dim];
        let mut x = vec![0.0; self.dim];
        loop {
            let mut w = 1.0;
            for axis in 0..self.dim {
                let (xi, wi) = rule[idx[axis]];
                x[axis] = xi;
                w *= wi;
            }
            let v = self.eval(&x);
            total += w * v * v;
            let mut axis = 0;
            loop {
                if axis == self.dim {
                    return total.sqrt();
                }
                idx[axis] += 1;
                if idx[axis] < rule.len() {
                    break;
                }
                idx[axis] = 0;
                axis += 1;
            }
        }
    }

    /// `max_{|α| <= order} ‖∂^α f‖_{L²}`.
    pub fn max_derivative_l2(&self, order: usize) -> f64 {
        MultiIndex::all_up_to(self.dim, order)
            .iter()
            .map(|a| self.derivative(a).l2_norm())
            .fold(0.0, f64::max)
    }
}

fn multiply_terms(a: &Term, b: &Term) -> Vec<Term> {
    // Product of per-axis factors expands into a sum over axes where both
    // factors are waves: sin·sin = ½[cos(Δ) − cos(Σ)].
    let mut partial = vec![Term {
        coef: a.coef * b.coef,
        factors: Vec::new(),
    }];
    for (fa, fb) in a.factors.iter().zip(&b.factors) {
        let options: Vec<(f64, Factor)> = match (fa, fb) {
            (Factor::Poly(p), Factor::Poly(q)) => vec![(1.0, Factor::Poly(p + q))],
            (Factor::Poly(0), w @ Factor::Wave { .. }) | (w @ Factor::Wave { .. }, Factor::Poly(0)) => {
                vec![(1.0, w.clone())]
            }
            (Factor::Wave { omega: o1, phase: p1, quarter: q1 }, Factor::Wave { omega: o2, phase: p2, quarter: q2 }) => {
                let ph1 = p1 + *q1 as f64 * PI / 2.0;
                let ph2 = p2 + *q2 as f64 * PI / 2.0;
                // sin A sin B = ½ sin(A − B + π/2) − ½ sin(A + B + π/2)
                vec![
                    (0.5, Factor::sin(o1 - o2, ph1 - ph2 + PI / 2.0)),
                    (-0.5, Factor::sin(o1 + o2, ph1 + ph2 + PI / 2.0)),
                ]
            }
            _ => panic!("product of a monomial of positive degree and a wave is outside the field family"),
        };
        partial = partial
            .into_iter()
            .flat_map(|t| {
                options.iter().map(move |(m, f)| {
                    let mut factors = t.factors.clone();
                    factors.push(f.clone());
                    Term {
                        coef: t.coef * m,
                        factors,
                    }
                })
            })
            .collect();
    }
    partial
}

/// Composite 5-point Gauss-Legendre rule on `[0,1]`.
fn composite_gauss(panels: usize) -> Vec<(f64, f64)> {
    const NODES: [f64; 5] = [
        -0.906_179_845_938_664,
        -0.538_469_310_105_683_1,
        0.0,
        0.538_469_310_105_683_1,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.236_926_885_056_189_1,
        0.478_628_670_499_366_5,
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
    ];
    let width = 1.0 / panels as f64;
    let mut rule = Vec::with_capacity(panels * 5);
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * width;
        for (x, w) in NODES.iter().zip(WEIGHTS) {
            rule.push((mid + 0.5 * width * x, 0.5 * width * w));
        }
    }
    rule
}
