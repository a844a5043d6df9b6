//! End-to-end runs behind the four commands. Each run returns its artifacts
//! and the list of violated invariants; writing files and choosing an exit
//! code is left to the caller.

use std::path::Path;

use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, NetworkSource};
use crate::descent::{
    error_budget, gd_run, initialization_bound, BoundReport, BudgetInputs, BudgetStatus, ConvergenceTrace,
    DescentConfig, DescentError, InitializationBound,
};
use crate::exprgraph::{grow, residual_trace, Graph, GraphError, Growth, ResidualConstants, ResidualTrace, C_REC, C_UNROLL};
use crate::field::ScalarField;
use crate::grid::{Grid, GridError, GridFunction, MultiIndex, MAX_PARTIAL_ORDER};
use crate::operator::{assemble_with_seed, growth_constant, CoefficientField, DiscreteOperator, OperatorError};
use crate::perturb::{gamma, perturb_operator, run_sweep, sweep_json, CheckStatus, PerturbError, Perturbed, Shape, SweepSetup};
use crate::report::{fmt17, num, to_json_string};
use crate::spectral::{eigensolve, EigenDecomposition, SpectralError};

/// Discretisation allowance `C_SLACK · h²` added wherever a grid quantity is
/// compared with a continuum one (network iterates evaluated at nodes against
/// grid iterates). The largest measured `max_node / h²` over constant-coefficient
/// runs in `d = 1, 2, 3` with sources inside the eigen-span is 0.28.
pub const C_SLACK: f64 = 1.0;

/// Relative out-of-span residual below which a sampled source counts as lying
/// in the eigen-span.
pub const SPAN_MEMBERSHIP_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("gap condition violated: gamma = {gamma} <= delta = {delta} for k = {k}")]
    Gap { k: usize, gamma: f64, delta: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

impl PipelineError {
    /// 2 for configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Gap { .. } | PipelineError::Io { .. } => 2,
            PipelineError::Numerical(_) => 3,
        }
    }
}

impl From<OperatorError> for PipelineError {
    fn from(e: OperatorError) -> Self {
        match e {
            OperatorError::Linalg(_) | OperatorError::Grid(GridError::NonFinite { .. }) => {
                PipelineError::Numerical(e.to_string())
            }
            other => PipelineError::Config(ConfigError::Operator(other)),
        }
    }
}

impl From<GridError> for PipelineError {
    fn from(e: GridError) -> Self {
        PipelineError::Numerical(e.to_string())
    }
}

impl From<SpectralError> for PipelineError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::Operator(o) => o.into(),
            SpectralError::TooMany { .. } => PipelineError::Config(ConfigError::Invalid(e.to_string())),
            other => PipelineError::Numerical(other.to_string()),
        }
    }
}

impl From<PerturbError> for PipelineError {
    fn from(e: PerturbError) -> Self {
        match e {
            PerturbError::NegativeSize { .. }
            | PerturbError::EllipticityFloor { .. }
            | PerturbError::ZerothOrderFloor { .. } => PipelineError::Config(ConfigError::Invalid(e.to_string())),
            PerturbError::Operator(o) => o.into(),
            PerturbError::Spectral(s) => s.into(),
            other => PipelineError::Numerical(other.to_string()),
        }
    }
}

impl From<DescentError> for PipelineError {
    fn from(e: DescentError) -> Self {
        match e {
            DescentError::Gap { .. } | DescentError::ZeroK | DescentError::TooFewPairs { .. } => {
                PipelineError::Config(ConfigError::Invalid(e.to_string()))
            }
            DescentError::Operator(o) => o.into(),
            DescentError::Spectral(s) => s.into(),
            other => PipelineError::Numerical(other.to_string()),
        }
    }
}

impl From<GraphError> for PipelineError {
    fn from(e: GraphError) -> Self {
        PipelineError::Numerical(e.to_string())
    }
}

/// A named file produced by a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

impl Artifact {
    fn new(name: &str, contents: String) -> Self {
        Self {
            name: name.to_string(),
            contents,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    /// One entry per violated invariant, each starting with the check name.
    pub violations: Vec<String>,
    /// One-line human-readable result.
    pub summary: String,
}

impl Outcome {
    pub fn artifact(&self, name: &str) -> Option<&str> {
        self.artifacts.iter().find(|a| a.name == name).map(|a| a.contents.as_str())
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let io = |path: &Path, e: std::io::Error| PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for a in &self.artifacts {
            let path = dir.join(&a.name);
            std::fs::write(&path, &a.contents).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

/// Everything derived from a config before any command-specific work.
#[derive(Debug, Clone)]
pub struct Problem {
    pub cfg: ExperimentConfig,
    pub grid: Grid,
    pub base: CoefficientField,
    pub op: DiscreteOperator,
    pub perturbed: Perturbed,
    pub op_t: DiscreteOperator,
    pub eig: EigenDecomposition,
    pub eig_t: EigenDecomposition,
    pub f_field: ScalarField,
    pub f_nn_field: ScalarField,
    pub f: GridFunction,
    pub delta: f64,
    pub gamma: f64,
}

impl Problem {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let base = cfg.coefficient_field()?;
        let op = assemble_with_seed(&base, &grid, cfg.seed)?;
        let (op_t, perturbed) = perturb_operator(&base, &cfg.perturbation.spec(), &grid)?;
        let k = cfg.k;
        let eig = eigensolve(&op, k + 1)?;
        let delta = perturbed.delta;
        let gamma = gamma(&eig, k);
        if delta > 0.0 && gamma <= delta {
            return Err(PipelineError::Gap { k, gamma, delta });
        }
        let eig_t = eigensolve(&op_t, k + 1)?;
        let f_field = cfg.source_field();
        let f_nn_field = cfg.network_source_field();
        let f = GridFunction::sample(grid, |x| f_field.eval(x))?;
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            base,
            op,
            perturbed,
            op_t,
            eig,
            eig_t,
            f_field,
            f_nn_field,
            f,
            delta,
            gamma,
        })
    }

    pub fn slack(&self) -> f64 {
        let h = self.grid.h();
        C_SLACK * h * h
    }

    pub fn growth_constant(&self) -> Result<f64, PipelineError> {
        Ok(growth_constant(&self.perturbed.coeff.sup_table(), self.grid.dim())?.value)
    }

    /// True when neither `Ã` nor `c̃` varies in space.
    pub fn constant_coefficients(&self) -> bool {
        let d = self.grid.dim();
        let coeff = &self.perturbed.coeff;
        coeff
            .a_entries()
            .iter()
            .chain(std::iter::once(coeff.c()))
            .all(|f| (0..d).all(|axis| f.derivative(&MultiIndex::unit(d, axis)).is_zero()))
    }
}

/// `max_{|α| <= order} ‖∂^α g‖` with finite-difference partials.
pub fn fd_derivative_max(g: &GridFunction, order: usize) -> Result<f64, PipelineError> {
    let mut worst = 0.0_f64;
    for alpha in MultiIndex::all_up_to(g.grid().dim(), order) {
        worst = worst.max(g.partial(&alpha)?.norm_l2());
    }
    Ok(worst)
}

/// Grid half of the pipeline: descent on `L̃` driven by `f̃_spn`, compared with
/// the direct solve of the unperturbed system.
#[derive(Debug, Clone)]
pub struct SolveRun {
    pub trace: ConvergenceTrace,
    pub report: BoundReport,
    pub init: InitializationBound,
    pub u_star: GridFunction,
    pub f_spn: GridFunction,
    pub f_spn_t: GridFunction,
    /// `max_{|α|<=4} ‖∂^α(f − f_spn)‖` by finite differences.
    pub eps_spn: f64,
    pub growth: f64,
    pub r: f64,
}

impl SolveRun {
    fn budget_inputs(&self, p: &Problem, eps_nn: f64, measured: f64) -> BudgetInputs {
        budget_inputs(p, self.eps_spn, eps_nn, self.r, self.growth, self.u_star.norm_l2(), measured)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = self.trace.violations();
        if !self.init.holds {
            out.push(format!(
                "initialization bound: ||u*|| = {} exceeds ||f||/lambda_1 = {}",
                fmt17(self.init.solution_norm),
                fmt17(self.init.bound)
            ));
        }
        if self.report.status == BudgetStatus::Fail {
            out.push(format!(
                "error budget: measured {} exceeds epsilon + epsilon~ + slack = {}",
                fmt17(self.report.inputs.measured),
                fmt17(self.report.budget + self.report.inputs.slack)
            ));
        }
        out
    }
}

fn budget_inputs(
    p: &Problem,
    eps_spn: f64,
    eps_nn: f64,
    r: f64,
    growth: f64,
    solution_norm: f64,
    measured: f64,
) -> BudgetInputs {
    let k = p.cfg.k;
    BudgetInputs {
        delta: p.delta,
        gamma: p.gamma,
        eps_spn,
        eps_nn,
        r,
        lambda_1: p.eig.value(1),
        lambda_k: p.eig.value(k),
        lambda_t1: p.eig_t.value(1),
        lambda_tk: p.eig_t.value(k),
        growth,
        steps: p.cfg.steps,
        f_norm: p.f.norm_l2(),
        solution_norm,
        measured,
        slack: p.slack(),
    }
}

pub fn solve_run(p: &Problem) -> Result<SolveRun, PipelineError> {
    let k = p.cfg.k;
    let proj = p.eig.projector(k)?;
    let proj_t = p.eig_t.projector(k)?;
    let f_spn = proj.project(&p.f)?;
    let f_spn_t = proj_t.project(&p.f)?;
    let trace = gd_run(&p.op_t, &p.eig_t, &f_spn_t, &DescentConfig::new(k, p.cfg.steps))?;
    let u_star = p.op.solve(&p.f)?;
    let init = initialization_bound(&p.op, &p.f, p.eig.value(1))?;
    let eps_spn = fd_derivative_max(&p.f.sub(&f_spn)?, MAX_PARTIAL_ORDER)?;
    let growth = p.growth_constant()?;
    let r = init.bound;
    let measured = u_star.sub(trace.final_iterate())?.norm_l2();
    let report = error_budget(budget_inputs(p, eps_spn, 0.0, r, growth, u_star.norm_l2(), measured));
    Ok(SolveRun {
        trace,
        report,
        init,
        u_star,
        f_spn,
        f_spn_t,
        eps_spn,
        growth,
        r,
    })
}

fn descent_json(trace: &ConvergenceTrace) -> Value {
    json!({
        "k": trace.k,
        "eta": num(trace.eta),
        "rate": num(trace.rate),
        "final_error": num(trace.records.last().map_or(f64::NAN, |r| r.error)),
        "init_projection_residual": num(trace.init_projection_residual),
        "max_span_residual": num(trace.max_span_residual),
        "max_update_mismatch": num(trace.max_update_mismatch),
        "max_objective_mismatch": num(trace.max_objective_mismatch),
    })
}

pub fn cmd_solve(cfg: &ExperimentConfig) -> Result<Outcome, PipelineError> {
    let p = Problem::new(cfg)?;
    let run = solve_run(&p)?;
    let violations = run.violations();
    let report = json!({
        "schema_version": 1,
        "budget": run.report.to_json(),
        "initialization": {
            "bound": num(run.init.bound),
            "u_star_norm": num(run.init.solution_norm),
            "holds": run.init.holds,
        },
        "descent": descent_json(&run.trace),
        "violations": violations,
    });
    let summary = format!(
        "solve: measured {} against budget {} ({})",
        fmt17(run.report.inputs.measured),
        fmt17(run.report.budget + run.report.inputs.slack),
        run.report.status.as_str()
    );
    Ok(Outcome {
        artifacts: vec![
            Artifact::new("trace.csv", run.trace.to_csv()),
            Artifact::new("eigenpairs.csv", p.eig_t.to_csv()),
            Artifact::new("bound_report.json", to_json_string(&report)),
        ],
        violations,
        summary,
    })
}

pub fn cmd_perturb_sweep(cfg: &ExperimentConfig) -> Result<Outcome, PipelineError> {
    cfg.validate()?;
    let setup = SweepSetup {
        base: cfg.coefficient_field()?,
        grid: cfg.grid()?,
        k: cfg.k,
        f: cfg.source_field(),
        f_nn: cfg.network_source_field(),
        shapes: cfg.sweep.shapes.iter().map(|&s| Shape::from(s)).collect(),
        epsilons: cfg.sweep.epsilons.clone(),
        trials: cfg.sweep.trials,
        seed: cfg.seed,
        max_power: cfg.sweep.max_power,
        peeling: cfg.sweep.peeling,
    };
    setup.base.validate(&setup.grid, cfg.seed)?;
    let records = run_sweep(&setup)?;
    let violations: Vec<String> = records
        .iter()
        .filter(|r| r.status == CheckStatus::Fail)
        .map(|r| {
            format!(
                "{}: shape {} eps {} n {}: LHS {} > RHS {}",
                r.lemma,
                r.shape.map_or("-", Shape::name),
                r.epsilon.map_or("-".to_string(), fmt17),
                r.power.map_or("-".to_string(), |n| n.to_string()),
                fmt17(r.lhs),
                fmt17(r.rhs)
            )
        })
        .collect();
    let count = |s: CheckStatus| records.iter().filter(|r| r.status == s).count();
    let summary = format!(
        "perturb-sweep: {} records, {} pass, {} fail, {} inapplicable",
        records.len(),
        count(CheckStatus::Pass),
        count(CheckStatus::Fail),
        count(CheckStatus::Inapplicable)
    );
    Ok(Outcome {
        artifacts: vec![Artifact::new("sweep.json", to_json_string(&sweep_json(&records)))],
        violations,
        summary,
    })
}

/// Network iterates `û_0 = 0, …, û_T` built from `Ã`, `c̃` and `f_nn`.
#[derive(Debug)]
pub struct NetworkRun {
    pub graph: Graph,
    pub growth: Growth,
}

pub fn network_run(p: &Problem, eta: f64) -> Result<NetworkRun, PipelineError> {
    let d = p.grid.dim();
    let mut graph = Graph::new(d);
    let coeff = &p.perturbed.coeff;
    let a = coeff
        .a_entries()
        .iter()
        .map(|f| graph.from_field(f))
        .collect::<Result<Vec<_>, _>>()?;
    let c = graph.from_field(coeff.c())?;
    let f = graph.from_field(&p.f_nn_field)?;
    let u0 = graph.constant(0.0);
    let growth = grow(&mut graph, u0, &a, c, f, eta, p.cfg.steps)?;
    Ok(NetworkRun { graph, growth })
}

pub fn cmd_netgrow(cfg: &ExperimentConfig) -> Result<Outcome, PipelineError> {
    let p = Problem::new(cfg)?;
    let k = cfg.k;
    let eta = 2.0 / (p.eig_t.value(1) + p.eig_t.value(k));
    let net = network_run(&p, eta)?;
    let last = *net.growth.iterates.last().expect("u_0 present");
    let dump = net.graph.dump(last)?;
    let violations = net.growth.violations();
    let summary = format!(
        "netgrow: N_{} = {}, recurrence ratio {} (C_REC = {}), unrolled ratio {} (C_UNROLL = {})",
        cfg.steps,
        net.growth.records.last().map_or(0, |r| r.n_t),
        fmt17(net.growth.recurrence_ratio(p.grid.dim())),
        C_REC,
        fmt17(net.growth.unrolled_ratio()),
        C_UNROLL
    );
    Ok(Outcome {
        artifacts: vec![
            Artifact::new("counts.csv", net.growth.to_csv()),
            Artifact::new("graph.json", to_json_string(&dump)),
        ],
        violations,
        summary,
    })
}

/// Final status of a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertificateStatus {
    /// `‖u* − û_T‖ <= ρ^T R + slack`: the contraction term alone suffices.
    Tight,
    /// `‖u* − û_T‖ <= ε + ε̃ + slack`.
    Pass,
    /// Hypotheses hold but `γ − δ < 10δ`; reported without assertion.
    ReportOnly,
    Inapplicable,
    Fail,
}

impl CertificateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CertificateStatus::Tight => "tight",
            CertificateStatus::Pass => "pass",
            CertificateStatus::ReportOnly => "report-only",
            CertificateStatus::Inapplicable => "inapplicable",
            CertificateStatus::Fail => "fail",
        }
    }
}

#[derive(Debug)]
pub struct CertifyRun {
    pub solve: SolveRun,
    pub network: NetworkRun,
    pub residual: ResidualTrace,
    /// Budget evaluated for the network iterate `û_T`.
    pub report: BoundReport,
    pub eps_nn: f64,
    /// `‖u* − û_T‖` on the grid nodes.
    pub measured: f64,
    /// `max_nodes |û_t − u_t|` for `t = 0..=T`.
    pub graph_grid: Vec<f64>,
    /// Whether the graph/grid discrepancy is asserted against `C_SLACK h²`
    /// (constant coefficients, exact `f_nn`, source inside the eigen-span).
    pub graph_grid_asserted: bool,
    pub status: CertificateStatus,
}

impl CertifyRun {
    pub fn violations(&self, slack: f64) -> Vec<String> {
        let mut out = self.solve.violations();
        out.extend(self.network.growth.violations());
        out.extend(self.residual.violations());
        if self.graph_grid_asserted {
            for (t, &gap) in self.graph_grid.iter().enumerate() {
                if gap > slack {
                    out.push(format!(
                        "graph/grid equivalence: step {t} discrepancy {} exceeds C_slack h^2 = {}",
                        fmt17(gap),
                        fmt17(slack)
                    ));
                }
            }
        }
        if self.status == CertificateStatus::Fail {
            out.push(format!(
                "certificate: measured {} exceeds epsilon + epsilon~ + slack = {}",
                fmt17(self.measured),
                fmt17(self.report.budget + self.report.inputs.slack)
            ));
        }
        out
    }
}

pub fn certify_run(p: &Problem) -> Result<CertifyRun, PipelineError> {
    let solve = solve_run(p)?;
    let network = network_run(p, solve.trace.eta)?;
    let k = p.cfg.k;
    let steps = p.cfg.steps;

    let f_nn = GridFunction::sample(p.grid, |x| p.f_nn_field.eval(x))?;
    let r = solve.f_spn_t.sub(&f_nn)?;
    let eps_nn = match p.cfg.source_nn {
        NetworkSource::Exact => 0.0,
        NetworkSource::Perturbed { .. } => p
            .f_field
            .plus(&p.f_nn_field.scaled(-1.0))
            .max_derivative_l2(steps + 2),
    };
    let consts = ResidualConstants {
        eta: solve.trace.eta,
        growth: solve.growth,
        eps_nn,
        eps_spn: solve.eps_spn,
        delta: p.delta,
        gamma: p.gamma,
        lambda_k: p.eig.value(k),
        f_spn_norm: solve.f_spn.norm_l2(),
        slack: p.slack(),
    };
    let residual = residual_trace(
        &network.graph,
        &network.growth.iterates,
        &solve.trace.iterates,
        &p.op_t,
        &r,
        &consts,
    )?;
    let graph_grid: Vec<f64> = residual.rows.iter().map(|row| row.max_node).collect();

    let last = *network.growth.iterates.last().expect("u_0 present");
    let u_hat = network.graph.sample(last, &p.grid)?;
    let measured = solve.u_star.sub(&u_hat)?.norm_l2();
    let report = error_budget(solve.budget_inputs(p, eps_nn, measured));
    let status = match report.status {
        BudgetStatus::Inapplicable => CertificateStatus::Inapplicable,
        BudgetStatus::ReportOnly => CertificateStatus::ReportOnly,
        BudgetStatus::Fail => CertificateStatus::Fail,
        BudgetStatus::Pass if measured <= report.epsilon + report.inputs.slack => CertificateStatus::Tight,
        BudgetStatus::Pass => CertificateStatus::Pass,
    };

    let f_norm = p.f.norm_l2();
    let in_span = p.eig_t.projector(k)?.out_of_span(&p.f)? <= SPAN_MEMBERSHIP_TOL * f_norm.max(f64::MIN_POSITIVE);
    let graph_grid_asserted = p.constant_coefficients() && p.cfg.source_nn == NetworkSource::Exact && in_span;

    Ok(CertifyRun {
        solve,
        network,
        residual,
        report,
        eps_nn,
        measured,
        graph_grid,
        graph_grid_asserted,
        status,
    })
}

pub fn cmd_certify(cfg: &ExperimentConfig) -> Result<Outcome, PipelineError> {
    let p = Problem::new(cfg)?;
    let run = certify_run(&p)?;
    let slack = p.slack();
    let violations = run.violations(slack);
    let growth = &run.network.growth;
    let last = *growth.iterates.last().expect("u_0 present");
    let activations: Vec<&str> = run
        .network
        .graph
        .activations(last)?
        .into_iter()
        .map(|a| a.name())
        .collect();
    let residual_max = run.residual.rows.iter().map(|r| r.measured).fold(0.0, f64::max);
    let certificate = json!({
        "schema_version": 1,
        "status": run.status.as_str(),
        "measured": num(run.measured),
        "epsilon": num(run.report.epsilon),
        "tilde_epsilon": num(run.report.tilde_epsilon),
        "slack": num(slack),
        "budget": run.report.to_json(),
        "grid_budget": run.solve.report.to_json(),
        "network": {
            "N_T": growth.records.last().map_or(0, |r| r.n_t),
            "N_0": growth.n_0,
            "N_A": growth.n_a,
            "N_c": growth.n_c,
            "N_f": growth.n_f,
            "recurrence_ratio": num(growth.recurrence_ratio(p.grid.dim())),
            "unrolled_ratio": num(growth.unrolled_ratio()),
            "c_rec": num(C_REC),
            "c_unroll": num(C_UNROLL),
            "activations": activations,
        },
        "residual": {
            "eps_nn": num(run.eps_nn),
            "max_measured": num(residual_max),
            "violations": run.residual.violations(),
        },
        "graph_grid": {
            "asserted": run.graph_grid_asserted,
            "bound": num(slack),
            "max_discrepancy": num(run.graph_grid.iter().copied().fold(0.0, f64::max)),
            "per_step": run.graph_grid.iter().map(|v| num(*v)).collect::<Vec<_>>(),
        },
        "violations": violations,
    });
    let summary = format!(
        "certify: {} (measured {} against epsilon {} + epsilon~ {} + slack {})",
        run.status.as_str(),
        fmt17(run.measured),
        fmt17(run.report.epsilon),
        fmt17(run.report.tilde_epsilon),
        fmt17(slack)
    );
    Ok(Outcome {
        artifacts: vec![
            Artifact::new("certificate.json", to_json_string(&certificate)),
            Artifact::new("residual.csv", run.residual.to_csv()),
            Artifact::new("counts.csv", growth.to_csv()),
        ],
        violations,
        summary,
    })
}
