//! Perturbed coefficients `(Ã, c̃)`, the relative perturbation level `δ`, and
//! numerical checks of the perturbation inequalities relating `L`, `L̃`, their
//! spectra and their spectral projectors.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::field::ScalarField;
use crate::grid::{Grid, GridError, GridFunction};
use crate::linalg::{self, random_vector, CsrMatrix, LinalgError};
use crate::operator::{assemble, growth_constant, sample_points, CoefficientField, DiscreteOperator, OperatorError};
use crate::report::num;
use crate::spectral::{eigensolve, DENSE_LIMIT, projector_distance, EigenDecomposition, SpectralError, SpectralProjector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("perturbation size must be finite and non-negative, got eps_a = {eps_a}, eps_c = {eps_c}")]
    NegativeSize { eps_a: f64, eps_c: f64 },
    #[error("eps_a = {eps_a} does not stay below the ellipticity floor m = {m}")]
    EllipticityFloor { eps_a: f64, m: f64 },
    #[error("eps_c = {eps_c} does not stay below the zeroth-order floor zeta = {zeta}")]
    ZerothOrderFloor { eps_c: f64, zeta: f64 },
    #[error("non-positive energy <Lu,u> = {0}")]
    Energy(f64),
}

/// Spatial profile of a coefficient perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    /// `Ã = A + ε_A I`, `c̃ = c + ε_c`.
    Shift,
    /// `Ã = (1 + s)A`, `c̃ = (1 + s_c)c` with `s` chosen so the sup-norm is `ε`.
    Scaling,
    /// `Ã = A + ε_A B I`, `c̃ = c + ε_c B`, where `B = Π sin(πx_i)` has maximum 1.
    Bump,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Shift, Shape::Scaling, Shape::Bump];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Shift => "shift",
            Shape::Scaling => "scaling",
            Shape::Bump => "bump",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub eps_a: f64,
    pub eps_c: f64,
    pub shape: Shape,
}

impl PerturbationSpec {
    pub fn none() -> Self {
        Self {
            eps_a: 0.0,
            eps_c: 0.0,
            shape: Shape::Shift,
        }
    }
}

/// `δ = max{ε_A/m, ε_c/ζ}`; the second ratio is read as zero when `ε_c = 0`,
/// which admits `ζ = 0` for operators without a zeroth-order term.
pub fn delta(spec: &PerturbationSpec, base: &CoefficientField) -> f64 {
    let a = spec.eps_a / base.m();
    let c = if spec.eps_c == 0.0 { 0.0 } else { spec.eps_c / base.zeta() };
    a.max(c)
}

/// `γ = 1/λ_k − 1/λ_{k+1}` of the unperturbed operator.
pub fn gamma(eig: &EigenDecomposition, k: usize) -> f64 {
    1.0 / eig.value(k) - 1.0 / eig.value(k + 1)
}

#[derive(Debug, Clone)]
pub struct Perturbed {
    pub coeff: CoefficientField,
    pub spec: PerturbationSpec,
    /// `max |Ã − A|` (pointwise spectral norm) over the assembly sample points.
    pub realized_a: f64,
    /// `max |c̃ − c|` over the assembly sample points.
    pub realized_c: f64,
    pub delta: f64,
}

fn largest_eigen_abs(mat: &[f64], d: usize) -> f64 {
    let m = DMatrix::from_row_slice(d, d, mat);
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Builds `(Ã, c̃)` for the requested shape and size, normalised so the sup-norm
/// over the assembly sample points equals the requested size.
pub fn perturb_coefficients(
    base: &CoefficientField,
    spec: &PerturbationSpec,
    grid: &Grid,
) -> Result<Perturbed, PerturbError> {
    let (eps_a, eps_c) = (spec.eps_a, spec.eps_c);
    if !(eps_a >= 0.0 && eps_c >= 0.0 && eps_a.is_finite() && eps_c.is_finite()) {
        return Err(PerturbError::NegativeSize { eps_a, eps_c });
    }
    if eps_a >= base.m() {
        return Err(PerturbError::EllipticityFloor { eps_a, m: base.m() });
    }
    if eps_c > 0.0 && eps_c >= base.zeta() {
        return Err(PerturbError::ZerothOrderFloor {
            eps_c,
            zeta: base.zeta(),
        });
    }
    let d = base.dim();
    let points = sample_points(grid);
    let identity_add = |a: &[ScalarField], add: &ScalarField| -> Vec<ScalarField> {
        a.iter()
            .enumerate()
            .map(|(k, f)| if k / d == k % d { f.plus(add) } else { f.clone() })
            .collect()
    };

    let (a_new, c_new) = match spec.shape {
        Shape::Shift => (
            identity_add(base.a_entries(), &ScalarField::constant(d, eps_a)),
            base.c().plus(&ScalarField::constant(d, eps_c)),
        ),
        Shape::Scaling => {
            let peak_a = points
                .iter()
                .map(|(_, x)| {
                    let mat: Vec<f64> = base.a_entries().iter().map(|f| f.eval(x)).collect();
                    largest_eigen_abs(&mat, d)
                })
                .fold(0.0_f64, f64::max);
            let peak_c = points
                .iter()
                .map(|(_, x)| base.c().eval(x).abs())
                .fold(0.0_f64, f64::max);
            let s_a = if peak_a > 0.0 { eps_a / peak_a } else { 0.0 };
            let s_c = if peak_c > 0.0 { eps_c / peak_c } else { 0.0 };
            (
                base.a_entries().iter().map(|f| f.scaled(1.0 + s_a)).collect(),
                base.c().scaled(1.0 + s_c),
            )
        }
        Shape::Bump => {
            let raw = ScalarField::sine_product(1.0, &vec![1; d]);
            let peak = points.iter().map(|(_, x)| raw.eval(x).abs()).fold(0.0_f64, f64::max);
            let unit = raw.scaled(1.0 / peak);
            (
                identity_add(base.a_entries(), &unit.scaled(eps_a)),
                base.c().plus(&unit.scaled(eps_c)),
            )
        }
    };

    let mut realized_a = 0.0_f64;
    let mut realized_c = 0.0_f64;
    for (_, x) in &points {
        let diff: Vec<f64> = a_new
            .iter()
            .zip(base.a_entries())
            .map(|(n, o)| n.eval(x) - o.eval(x))
            .collect();
        realized_a = realized_a.max(largest_eigen_abs(&diff, d));
        realized_c = realized_c.max((c_new.eval(x) - base.c().eval(x)).abs());
    }

    let coeff = CoefficientField::new(
        a_new,
        c_new,
        base.m() - eps_a,
        base.big_m() + eps_a,
        (base.zeta() - eps_c).max(0.0),
    )?;
    Ok(Perturbed {
        coeff,
        spec: *spec,
        realized_a,
        realized_c,
        delta: delta(spec, base),
    })
}

pub fn perturb_operator(
    base: &CoefficientField,
    spec: &PerturbationSpec,
    grid: &Grid,
) -> Result<(DiscreteOperator, Perturbed), PerturbError> {
    let p = perturb_coefficients(base, spec, grid)?;
    let op = assemble(&p.coeff, grid)?;
    Ok((op, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Inapplicable,
}

impl CheckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Inapplicable => "inapplicable",
        }
    }
}

/// Outcome of one inequality check `lhs <= rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaRecord {
    pub lemma: &'static str,
    pub power: Option<u32>,
    pub shape: Option<Shape>,
    pub epsilon: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub status: CheckStatus,
    pub note: Option<String>,
}

impl LemmaRecord {
    fn judged(lemma: &'static str, power: Option<u32>, lhs: f64, rhs: f64, rel_tol: f64, allowance: f64) -> Self {
        let ok = lhs.is_finite() && lhs <= rhs * (1.0 + rel_tol) + allowance;
        Self {
            lemma,
            power,
            shape: None,
            epsilon: None,
            lhs,
            rhs,
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
            note: None,
        }
    }

    fn inapplicable(lemma: &'static str, power: Option<u32>, lhs: f64, rhs: f64, why: String) -> Self {
        Self {
            lemma,
            power,
            shape: None,
            epsilon: None,
            lhs,
            rhs,
            status: CheckStatus::Inapplicable,
            note: Some(why),
        }
    }

    pub fn tagged(mut self, shape: Shape, epsilon: f64) -> Self {
        self.shape = Some(shape);
        self.epsilon = Some(epsilon);
        self
    }

    /// `rhs − lhs`.
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }

    pub fn to_json(&self) -> Value {
        json!({
            "lemma": self.lemma,
            "n": self.power,
            "shape": self.shape.map(Shape::name),
            "epsilon": self.epsilon.map(num),
            "LHS": num(self.lhs),
            "RHS": num(self.rhs),
            "slack": num(self.slack()),
            "status": self.status.as_str(),
            "note": self.note,
        })
    }
}

/// Relative tolerance for most checks.
pub const CHECK_TOL: f64 = 1e-9;
/// Relative tolerance for the inverse-form check.
pub const INVERSE_FORM_TOL: f64 = 1e-8;
/// Power-iteration stopping tolerance for operator norms.
pub const NORM_TOL: f64 = 1e-10;
const NORM_MAX_ITER: usize = 200_000;
/// Absolute tolerance on squared operator norms; resolves `‖·‖` to
/// `0.1·CHECK_TOL`, which is all the judgement needs.
const NORM_SQ_ABS_TOL: f64 = (0.1 * CHECK_TOL) * (0.1 * CHECK_TOL);

fn random_functions(grid: &Grid, trials: usize, seed: u64) -> Vec<GridFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| GridFunction::new(*grid, random_vector(&mut rng, grid.len())).expect("matching length"))
        .collect()
}

/// `max ⟨(L̃ − L)u, u⟩/⟨Lu, u⟩ <= δ` over random `u` and the supplied extra probes.
pub fn relative_form_bound(
    op: &DiscreteOperator,
    op_t: &DiscreteOperator,
    delta: f64,
    trials: usize,
    seed: u64,
    extra: &[GridFunction],
) -> Result<LemmaRecord, PerturbError> {
    let mut worst = f64::NEG_INFINITY;
    for u in random_functions(op.grid(), trials, seed).iter().chain(extra) {
        let base = op.form(u, u)?;
        if base <= 0.0 {
            return Err(PerturbError::Energy(base));
        }
        let diff = op_t.apply(u)?.sub(&op.apply(u)?)?.inner(u)?;
        worst = worst.max(diff / base);
    }
    Ok(LemmaRecord::judged("relative-form", None, worst.max(0.0), delta, CHECK_TOL, 0.0))
}

/// `max ⟨(L⁻¹L̃ − I)u, u⟩/‖u‖² <= δ` over random `u`, with `L⁻¹` applied by a
/// direct solve of `L w = (L̃ − L)u`.
pub fn relative_inverse_form_bound(
    op: &DiscreteOperator,
    op_t: &DiscreteOperator,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<LemmaRecord, PerturbError> {
    let mut worst = f64::NEG_INFINITY;
    for u in random_functions(op.grid(), trials, seed) {
        let e = op_t.apply(&u)?.sub(&op.apply(&u)?)?;
        let w = op.solve(&e)?;
        worst = worst.max(w.inner(&u)? / u.inner(&u)?);
    }
    Ok(LemmaRecord::judged(
        "relative-form-inverse",
        None,
        worst.max(0.0),
        delta,
        INVERSE_FORM_TOL,
        0.0,
    ))
}

/// `max_i |1/λ_i − 1/λ̃_i| <= δ`.
pub fn weyl_check(eig: &EigenDecomposition, eig_t: &EigenDecomposition, delta: f64) -> LemmaRecord {
    let lhs = eig
        .values()
        .iter()
        .zip(eig_t.values())
        .map(|(a, b)| (1.0 / a - 1.0 / b).abs())
        .fold(0.0_f64, f64::max);
    LemmaRecord::judged("weyl", None, lhs, delta, CHECK_TOL, 0.0)
}

/// `‖L⁻¹ − L̃⁻¹‖ <= δ`, by power iteration on the square of the symmetric
/// difference of the two solve operators.
pub fn inverse_difference_check(
    op: &DiscreteOperator,
    op_t: &DiscreteOperator,
    delta: f64,
) -> Result<LemmaRecord, PerturbError> {
    let grid = *op.grid();
    let diff = |v: &[f64]| -> Vec<f64> {
        let g = GridFunction::new(grid, v.to_vec()).expect("matching length");
        let a = op.solve(&g).expect("factorised");
        let b = op_t.solve(&g).expect("factorised");
        a.sub(&b).expect("same grid").into_values()
    };
    // factor both up front so a failure surfaces as an error, not a panic
    let probe = GridFunction::zeros(grid);
    op.solve(&probe)?;
    op_t.solve(&probe)?;
    let r = linalg::power_iteration(|v| diff(&diff(v)), grid.len(), NORM_TOL, NORM_SQ_ABS_TOL, NORM_MAX_ITER, 0x1d)?;
    Ok(LemmaRecord::judged(
        "inverse-difference",
        None,
        r.eigenvalue.max(0.0).sqrt(),
        delta,
        CHECK_TOL,
        0.0,
    ))
}

/// `‖P_k − P̃_k‖ <= δ/(γ − δ)`.
pub fn davis_kahan_check(
    p: &SpectralProjector<'_>,
    p_t: &SpectralProjector<'_>,
    delta: f64,
    gamma: f64,
) -> Result<LemmaRecord, PerturbError> {
    let lhs = projector_distance(p, p_t)?;
    if gamma <= delta {
        return Ok(LemmaRecord::inapplicable(
            "davis-kahan",
            None,
            lhs,
            f64::INFINITY,
            format!("gamma {gamma:e} <= delta {delta:e}"),
        ));
    }
    Ok(LemmaRecord::judged("davis-kahan", None, lhs, delta / (gamma - delta), CHECK_TOL, 0.0))
}

/// `‖P f − P̃ f‖ <= ‖f‖ δ/(γ − δ)`.
pub fn source_projection_distance(
    f: &GridFunction,
    p: &SpectralProjector<'_>,
    p_t: &SpectralProjector<'_>,
    delta: f64,
    gamma: f64,
) -> Result<LemmaRecord, PerturbError> {
    let lhs = p.project(f)?.sub(&p_t.project(f)?)?.norm_l2();
    if gamma <= delta {
        return Ok(LemmaRecord::inapplicable(
            "source-projection",
            None,
            lhs,
            f64::INFINITY,
            format!("gamma {gamma:e} <= delta {delta:e}"),
        ));
    }
    let rhs = f.norm_l2() * delta / (gamma - delta);
    Ok(LemmaRecord::judged("source-projection", None, lhs, rhs, CHECK_TOL, 0.0))
}

/// `max_{i<=k} λ̃_iⁿ/λ_iⁿ <= 1 + 2nδλ_k`, applicable when `nδλ_k <= 1/20`.
pub fn eigen_power_check(
    eig: &EigenDecomposition,
    eig_t: &EigenDecomposition,
    k: usize,
    delta: f64,
    n: u32,
) -> LemmaRecord {
    let lk = eig.value(k);
    let lhs = (1..=k)
        .map(|i| (eig_t.value(i) / eig.value(i)).powi(n as i32))
        .fold(0.0_f64, f64::max);
    let rhs = 1.0 + 2.0 * n as f64 * delta * lk;
    if n as f64 * delta * lk > 1.0 / 20.0 {
        return LemmaRecord::inapplicable(
            "eigen-power",
            Some(n),
            lhs,
            rhs,
            format!("n*delta*lambda_k = {:e} > 1/20", n as f64 * delta * lk),
        );
    }
    LemmaRecord::judged("eigen-power", Some(n), lhs, rhs, CHECK_TOL, 0.0)
}

/// Applications of `(M − I)` and `(M − I)ᵀ` for `M = L⁻ⁿL̃ⁿ`, written as
/// `M − I = Σ_{j=1..n} L⁻ʲ E L̃^{j−1}` with `E = L̃ − L` so that the large
/// factors of `L̃ⁿ` never have to cancel against `L⁻ⁿ` in floating point.
/// `E` is assembled entrywise for the same reason.
fn peel_apply(
    op: &DiscreteOperator,
    op_t: &DiscreteOperator,
    e: &CsrMatrix,
    n: u32,
    v: &GridFunction,
    transpose: bool,
) -> GridFunction {
    let grid = *v.grid();
    let e = |w: &GridFunction| GridFunction::new(grid, e.mul_vec(w.values())).expect("matching length");
    let mut acc = GridFunction::zeros(grid);
    for j in 1..=n {
        let term = if !transpose {
            let mut w = e(&op_t.apply_power(v, j - 1).expect("same grid"));
            for _ in 0..j {
                w = op.solve(&w).expect("factorised");
            }
            w
        } else {
            let mut w = v.clone();
            for _ in 0..j {
                w = op.solve(&w).expect("factorised");
            }
            op_t.apply_power(&e(&w), j - 1).expect("same grid")
        };
        acc = acc.add(&term).expect("same grid");
    }
    acc
}

/// `‖L⁻ⁿL̃ⁿ‖ <= 1 + 2nδ`. The reported left side is `1 + ‖L⁻ⁿL̃ⁿ − I‖`,
/// an upper bound on the norm itself.
///
/// For `n >= 2` the bound fails once `L̃ − L` does not commute with `L`: the
/// term `L⁻ⁿ E L̃ⁿ⁻¹` has adjoint `L̃ⁿ⁻¹ E L⁻ⁿ`, and `E L⁻ⁿ g` does not vanish on
/// the boundary, so applying `L̃` to it produces a boundary layer whose norm
/// grows as the grid is refined. Shifts and scalings of constant-coefficient
/// operators commute with `L` and satisfy the bound.
pub fn peeling_check(
    op: &DiscreteOperator,
    op_t: &DiscreteOperator,
    delta: f64,
    n: u32,
) -> Result<LemmaRecord, PerturbError> {
    let grid = *op.grid();
    op.solve(&GridFunction::zeros(grid))?;
    let len = grid.len();
    let diff = op_t.matrix().add_scaled(-1.0, op.matrix());
    // Power iteration on this non-normal product stalls in rounding noise,
    // so small grids take the largest singular value of the assembled matrix.
    let norm = if len <= DENSE_LIMIT {
        let mut m = DMatrix::zeros(len, len);
        for i in 0..len {
            let mut e = GridFunction::zeros(grid);
            e.values_mut()[i] = 1.0;
            let col = peel_apply(op, op_t, &diff, n, &e, false);
            m.set_column(i, &nalgebra::DVector::from_column_slice(col.values()));
        }
        m.singular_values().max()
    } else {
        let apply = |v: &[f64]| -> Vec<f64> {
            let g = GridFunction::new(grid, v.to_vec()).expect("matching length");
            let d = peel_apply(op, op_t, &diff, n, &g, false);
            peel_apply(op, op_t, &diff, n, &d, true).into_values()
        };
        let r = linalg::power_iteration(apply, len, NORM_TOL, NORM_SQ_ABS_TOL, NORM_MAX_ITER, 0x9ee1)?;
        r.eigenvalue.max(0.0).sqrt()
    };
    let lhs = 1.0 + norm;
    Ok(LemmaRecord::judged(
        "peeling",
        Some(n),
        lhs,
        1.0 + 2.0 * n as f64 * delta,
        CHECK_TOL,
        0.0,
    ))
}

/// Constants for the `L̃ⁿ` application bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApplicationConstants {
    pub growth: f64,
    pub delta: f64,
    pub gamma: f64,
    pub lambda_k: f64,
    pub f_norm: f64,
}

/// Both parts of the `L̃ⁿ` application bound:
/// `‖L̃ⁿ(f_nn − f_spn)‖ <= (n!)² Cⁿ (ε_spn + ε_nn)` and
/// `‖L̃ⁿ(f_nn − f̃_spn)‖ <= (n!)² Cⁿ (ε_spn + ε_nn) + 4(1 + δ/(γ−δ)) λ_kⁿ ‖f‖`,
/// where the `ε` values are `max_{|α|<=n+2}` L² norms of derivatives of
/// `f − f_spn` and `f − f_nn`, taken from the closed forms.
pub fn ltilde_application_bound(
    op_t: &DiscreteOperator,
    f: &ScalarField,
    f_spn: &ScalarField,
    f_nn: &ScalarField,
    f_spn_t: &GridFunction,
    n: u32,
    c: ApplicationConstants,
) -> Result<[LemmaRecord; 2], PerturbError> {
    let grid = *op_t.grid();
    let order = n as usize + 2;
    let eps_spn = f.plus(&f_spn.scaled(-1.0)).max_derivative_l2(order);
    let eps_nn = f.plus(&f_nn.scaled(-1.0)).max_derivative_l2(order);
    let nn = GridFunction::sample(grid, |x| f_nn.eval(x))?;
    let spn = GridFunction::sample(grid, |x| f_spn.eval(x))?;
    let fact: f64 = (1..=n).map(|i| i as f64).product();
    let rhs1 = fact * fact * c.growth.powi(n as i32) * (eps_spn + eps_nn);
    let lhs1 = op_t.apply_power(&nn.sub(&spn)?, n)?.norm_l2();
    let lhs2 = op_t.apply_power(&nn.sub(f_spn_t)?, n)?.norm_l2();
    let part1 = LemmaRecord::judged("ltilde-application-1", Some(n), lhs1, rhs1, CHECK_TOL, 0.0);
    let part2 = if c.gamma <= c.delta {
        LemmaRecord::inapplicable(
            "ltilde-application-2",
            Some(n),
            lhs2,
            f64::INFINITY,
            format!("gamma {:e} <= delta {:e}", c.gamma, c.delta),
        )
    } else {
        let rhs2 = rhs1 + 4.0 * (1.0 + c.delta / (c.gamma - c.delta)) * c.lambda_k.powi(n as i32) * c.f_norm;
        LemmaRecord::judged("ltilde-application-2", Some(n), lhs2, rhs2, CHECK_TOL, 0.0)
    };
    Ok([part1, part2])
}

/// Inputs of a perturbation sweep.
#[derive(Debug, Clone)]
pub struct SweepSetup {
    pub base: CoefficientField,
    pub grid: Grid,
    pub k: usize,
    pub f: ScalarField,
    pub f_nn: ScalarField,
    pub shapes: Vec<Shape>,
    pub epsilons: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub max_power: u32,
    /// Adds the `‖L⁻ⁿL̃ⁿ‖ <= 1 + 2nδ` records. That bound only holds when the
    /// perturbation commutes with `L`; see [`peeling_check`].
    pub peeling: bool,
}

/// Runs every check for every `(shape, ε)` pair. The same `ε` is used for
/// `A` and, when the base operator has a positive floor `ζ`, for `c`.
pub fn run_sweep(setup: &SweepSetup) -> Result<Vec<LemmaRecord>, PerturbError> {
    let k = setup.k;
    let op = assemble(&setup.base, &setup.grid)?;
    let eig = eigensolve(&op, k + 1)?;
    let p = eig.projector(k)?;
    let g = gamma(&eig, k);
    let f_grid = GridFunction::sample(setup.grid, |x| setup.f.eval(x))?;
    let f_norm = f_grid.norm_l2();
    let in_span = p.out_of_span(&f_grid)? <= 1e-10 * f_norm.max(f64::MIN_POSITIVE);
    let probes: Vec<GridFunction> = eig.vectors().to_vec();

    let mut out = Vec::new();
    for &shape in &setup.shapes {
        for &eps in &setup.epsilons {
            let spec = PerturbationSpec {
                eps_a: eps,
                eps_c: if setup.base.zeta() > 0.0 { eps } else { 0.0 },
                shape,
            };
            let (op_t, pert) = perturb_operator(&setup.base, &spec, &setup.grid)?;
            let d = pert.delta;
            let eig_t = eigensolve(&op_t, k + 1)?;
            let p_t = eig_t.projector(k)?;
            let mut recs = vec![
                relative_form_bound(&op, &op_t, d, setup.trials, setup.seed, &probes)?,
                relative_inverse_form_bound(&op, &op_t, d, setup.trials, setup.seed ^ 0xa5a5)?,
                weyl_check(&eig, &eig_t, d),
                inverse_difference_check(&op, &op_t, d)?,
                davis_kahan_check(&p, &p_t, d, g)?,
                source_projection_distance(&f_grid, &p, &p_t, d, g)?,
            ];
            for n in 1..=setup.max_power {
                recs.push(eigen_power_check(&eig, &eig_t, k, d, n));
                if setup.peeling {
                    recs.push(peeling_check(&op, &op_t, d, n)?);
                }
            }
            let growth = growth_constant(&pert.coeff.sup_table(), setup.grid.dim())?.value;
            let f_spn_t = p_t.project(&f_grid)?;
            for n in 0..=setup.max_power {
                if in_span {
                    let consts = ApplicationConstants {
                        growth,
                        delta: d,
                        gamma: g,
                        lambda_k: eig.value(k),
                        f_norm,
                    };
                    recs.extend(ltilde_application_bound(
                        &op_t, &setup.f, &setup.f, &setup.f_nn, &f_spn_t, n, consts,
                    )?);
                } else {
                    for lemma in ["ltilde-application-1", "ltilde-application-2"] {
                        recs.push(LemmaRecord::inapplicable(
                            lemma,
                            Some(n),
                            f64::NAN,
                            f64::NAN,
                            "source has no closed-form spectral projection".to_string(),
                        ));
                    }
                }
            }
            out.extend(recs.into_iter().map(|r| r.tagged(shape, eps)));
        }
    }
    Ok(out)
}

pub fn sweep_json(records: &[LemmaRecord]) -> Value {
    json!({
        "schema_version": 1,
        "records": records.iter().map(LemmaRecord::to_json).collect::<Vec<_>>(),
    })
}
