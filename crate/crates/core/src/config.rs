//! Experiment configuration: one JSON document, strict about unknown fields,
//! with coefficients and sources chosen from named presets.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::field::ScalarField;
use crate::grid::{Grid, GridError};
use crate::operator::{CoefficientField, OperatorError};
use crate::perturb::{PerturbationSpec, Shape};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unsupported schema_version {0}, expected 1")]
    Version(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dimension: usize,
    /// Interior points per axis.
    pub n: usize,
    pub coefficients: CoefficientPreset,
    pub k: usize,
    /// Number of descent steps `T`.
    pub steps: usize,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    pub source: Vec<SourceTerm>,
    #[serde(default)]
    pub source_nn: NetworkSource,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<String>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientPreset {
    /// `A = a I`, `c = c`.
    Constant {
        #[serde(default = "one")]
        a: f64,
        #[serde(default)]
        c: f64,
    },
    /// `A = (a0 + Σ slope_i x_i) I`.
    Affine {
        a0: f64,
        slope: Vec<f64>,
        #[serde(default)]
        c: f64,
    },
    /// `A = (a0 + Σ q_i x_i²) I`.
    Quadratic {
        a0: f64,
        coeffs: Vec<f64>,
        #[serde(default)]
        c: f64,
    },
    /// `a_ii = a0 + amplitude Π sin(m_i π x_i)`, `a_ij = off_diagonal` for
    /// `i ≠ j`, `c = c0 + c_amplitude Π sin(π x_i)`.
    Trigonometric {
        a0: f64,
        amplitude: f64,
        modes: Vec<u32>,
        #[serde(default)]
        off_diagonal: f64,
        #[serde(default)]
        c0: f64,
        #[serde(default)]
        c_amplitude: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceTerm {
    /// `amplitude Π sin(m_i π x_i)`.
    Sine { amplitude: f64, modes: Vec<u32> },
    /// `amplitude Π x_i(1 − x_i)`.
    Bubble { amplitude: f64 },
    /// `amplitude x_axis^power`.
    Monomial { amplitude: f64, axis: usize, power: u32 },
}

/// The network `f_nn` that stands in for `f`.
#[derive(Debug, Clone, Deserialize, PartialEq, Default)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSource {
    /// `f_nn = f`.
    #[default]
    Exact,
    /// `f_nn = f + amplitude Π sin(m_i π x_i)`.
    Perturbed { amplitude: f64, modes: Vec<u32> },
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ShapeName {
    Shift,
    Scaling,
    Bump,
}

impl From<ShapeName> for Shape {
    fn from(s: ShapeName) -> Shape {
        match s {
            ShapeName::Shift => Shape::Shift,
            ShapeName::Scaling => Shape::Scaling,
            ShapeName::Bump => Shape::Bump,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    #[serde(default)]
    pub eps_a: f64,
    #[serde(default)]
    pub eps_c: f64,
    #[serde(default = "default_shape")]
    pub shape: ShapeName,
}

fn default_shape() -> ShapeName {
    ShapeName::Shift
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            eps_a: 0.0,
            eps_c: 0.0,
            shape: ShapeName::Shift,
        }
    }
}

impl PerturbationConfig {
    pub fn spec(&self) -> PerturbationSpec {
        PerturbationSpec {
            eps_a: self.eps_a,
            eps_c: self.eps_c,
            shape: self.shape.into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_shapes")]
    pub shapes: Vec<ShapeName>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_max_power")]
    pub max_power: u32,
    #[serde(default)]
    pub peeling: bool,
}

fn default_epsilons() -> Vec<f64> {
    vec![0.0, 1e-5, 1e-4, 1e-3]
}

fn default_shapes() -> Vec<ShapeName> {
    vec![ShapeName::Shift, ShapeName::Scaling, ShapeName::Bump]
}

fn default_trials() -> usize {
    20
}

fn default_max_power() -> u32 {
    3
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            epsilons: default_epsilons(),
            shapes: default_shapes(),
            trials: default_trials(),
            max_power: default_max_power(),
            peeling: false,
        }
    }
}

fn finite(name: &str, x: f64) -> Result<f64, ConfigError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(ConfigError::Invalid(format!("{name} must be finite, got {x}")))
    }
}

fn check_len(name: &str, len: usize, dim: usize) -> Result<(), ConfigError> {
    if len != dim {
        return Err(ConfigError::Invalid(format!(
            "{name} has {len} entries but the dimension is {dim}"
        )));
    }
    Ok(())
}

/// `(min, max)` of `a0 + Σ s_i t_i` over `t ∈ [0,1]^d`.
fn linear_range(a0: f64, s: &[f64]) -> (f64, f64) {
    let lo = a0 + s.iter().map(|v| v.min(0.0)).sum::<f64>();
    let hi = a0 + s.iter().map(|v| v.max(0.0)).sum::<f64>();
    (lo, hi)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// Structural checks that need no assembly.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Version(self.schema_version));
        }
        Grid::new(self.dimension, self.n)?;
        if self.k == 0 {
            return Err(ConfigError::Invalid("k must be at least 1".into()));
        }
        if self.k + 1 > self.n.pow(self.dimension as u32) {
            return Err(ConfigError::Invalid(format!(
                "k + 1 = {} eigenpairs exceed the {} grid nodes",
                self.k + 1,
                self.n.pow(self.dimension as u32)
            )));
        }
        let p = &self.perturbation;
        if !(finite("eps_a", p.eps_a)? >= 0.0 && finite("eps_c", p.eps_c)? >= 0.0) {
            return Err(ConfigError::Invalid(format!(
                "perturbation sizes must be non-negative, got eps_a = {}, eps_c = {}",
                p.eps_a, p.eps_c
            )));
        }
        for &e in &self.sweep.epsilons {
            if finite("sweep epsilon", e)? < 0.0 {
                return Err(ConfigError::Invalid(format!("sweep epsilons must be non-negative, got {e}")));
            }
        }
        if self.sweep.epsilons.is_empty() || self.sweep.shapes.is_empty() {
            return Err(ConfigError::Invalid("sweep needs at least one epsilon and one shape".into()));
        }
        if self.sweep.trials == 0 {
            return Err(ConfigError::Invalid("sweep trials must be positive".into()));
        }
        if self.source.is_empty() {
            return Err(ConfigError::Invalid("source needs at least one term".into()));
        }
        for term in &self.source {
            match term {
                SourceTerm::Sine { amplitude, modes } => {
                    finite("source amplitude", *amplitude)?;
                    check_len("source modes", modes.len(), self.dimension)?;
                }
                SourceTerm::Bubble { amplitude } => {
                    finite("source amplitude", *amplitude)?;
                }
                SourceTerm::Monomial { amplitude, axis, .. } => {
                    finite("source amplitude", *amplitude)?;
                    if *axis >= self.dimension {
                        return Err(ConfigError::Invalid(format!(
                            "monomial axis {axis} out of range for dimension {}",
                            self.dimension
                        )));
                    }
                }
            }
        }
        if let NetworkSource::Perturbed { amplitude, modes } = &self.source_nn {
            finite("source_nn amplitude", *amplitude)?;
            check_len("source_nn modes", modes.len(), self.dimension)?;
        }
        self.coefficient_field()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        Ok(Grid::new(self.dimension, self.n)?)
    }

    /// Coefficients with ellipticity constants derived from the preset's
    /// closed-form range over the unit box.
    pub fn coefficient_field(&self) -> Result<CoefficientField, ConfigError> {
        let d = self.dimension;
        let field = match &self.coefficients {
            CoefficientPreset::Constant { a, c } => {
                let (a, c) = (finite("a", *a)?, finite("c", *c)?);
                CoefficientField::isotropic(
                    d,
                    ScalarField::constant(d, a),
                    None,
                    ScalarField::constant(d, c),
                    a,
                    a,
                    c,
                )?
            }
            CoefficientPreset::Affine { a0, slope, c } => {
                check_len("slope", slope.len(), d)?;
                let (lo, hi) = linear_range(finite("a0", *a0)?, slope);
                let c = finite("c", *c)?;
                CoefficientField::isotropic(
                    d,
                    ScalarField::affine(*a0, slope),
                    None,
                    ScalarField::constant(d, c),
                    lo,
                    hi,
                    c,
                )?
            }
            CoefficientPreset::Quadratic { a0, coeffs, c } => {
                check_len("coeffs", coeffs.len(), d)?;
                let (lo, hi) = linear_range(finite("a0", *a0)?, coeffs);
                let c = finite("c", *c)?;
                CoefficientField::isotropic(
                    d,
                    ScalarField::quadratic(*a0, coeffs),
                    None,
                    ScalarField::constant(d, c),
                    lo,
                    hi,
                    c,
                )?
            }
            CoefficientPreset::Trigonometric {
                a0,
                amplitude,
                modes,
                off_diagonal,
                c0,
                c_amplitude,
            } => {
                check_len("modes", modes.len(), d)?;
                let amp = finite("amplitude", *amplitude)?.abs();
                let off = if d == 1 { 0.0 } else { finite("off_diagonal", *off_diagonal)? };
                let (c0, c_amp) = (finite("c0", *c0)?, finite("c_amplitude", *c_amplitude)?.abs());
                let spread = (d as f64 - 1.0) * off;
                let m = a0 - amp + (-off).min(spread);
                let big_m = a0 + amp + (-off).max(spread);
                let diag = ScalarField::constant(d, *a0).plus(&ScalarField::sine_product(*amplitude, modes));
                let off_field = (d > 1).then(|| ScalarField::constant(d, off));
                let c = ScalarField::constant(d, c0).plus(&ScalarField::sine_product(*c_amplitude, &vec![1; d]));
                CoefficientField::isotropic(d, diag, off_field, c, m, big_m, (c0 - c_amp).max(0.0))?
            }
        };
        Ok(field)
    }

    pub fn source_field(&self) -> ScalarField {
        let d = self.dimension;
        self.source.iter().fold(ScalarField::zero(d), |acc, term| {
            let f = match term {
                SourceTerm::Sine { amplitude, modes } => ScalarField::sine_product(*amplitude, modes),
                SourceTerm::Bubble { amplitude } => ScalarField::bubble(d, *amplitude),
                SourceTerm::Monomial { amplitude, axis, power } => ScalarField::monomial(d, *axis, *power, *amplitude),
            };
            acc.plus(&f)
        })
    }

    pub fn network_source_field(&self) -> ScalarField {
        let f = self.source_field();
        match &self.source_nn {
            NetworkSource::Exact => f,
            NetworkSource::Perturbed { amplitude, modes } => f.plus(&ScalarField::sine_product(*amplitude, modes)),
        }
    }

    pub fn with_overrides(mut self, out: Option<String>, seed: Option<u64>) -> Self {
        if out.is_some() {
            self.out = out;
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }
}
