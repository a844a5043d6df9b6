use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ellipnet::config::ExperimentConfig;
use ellipnet::descent::{gd_run, initialization_bound, DescentConfig};
use ellipnet::exprgraph::{grow, Graph, Net, C_BP, C_REC, C_UNROLL, UNROLLED_MAX_STEPS};
use ellipnet::field::ScalarField;
use ellipnet::grid::{Grid, GridFunction};
use ellipnet::operator::{assemble, chain_rule_residual, check_order_bounds, CoefficientField};
use ellipnet::perturb::{perturb_operator, run_sweep, CheckStatus, PerturbationSpec, Shape, SweepSetup};
use ellipnet::pipeline::{certify_run, CertificateStatus, Problem};
use ellipnet::spectral::eigensolve;

type Check = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_sines(rng: &mut ChaCha8Rng, dim: usize, terms: usize) -> ScalarField {
    let mut f = ScalarField::zero(dim);
    for _ in 0..terms {
        let modes: Vec<u32> = (0..dim).map(|_| rng.gen_range(1..=6)).collect();
        f = f.plus(&ScalarField::sine_product(rng.gen_range(-1.0..1.0), &modes));
    }
    f
}

fn variable_1d() -> CoefficientField {
    CoefficientField::isotropic(
        1,
        ScalarField::constant(1, 1.0).plus(&ScalarField::sine_product(0.3, &[2])),
        None,
        ScalarField::constant(1, 1.0),
        0.7,
        1.3,
        1.0,
    )
    .unwrap()
}

fn spectrum() -> Check {
    let n = 199;
    let grid = Grid::new(1, n).map_err(err)?;
    let h = grid.h();
    let op = assemble(&CoefficientField::laplacian(1, 0.0), &grid).map_err(err)?;
    let eig = eigensolve(&op, 10).map_err(err)?;
    let mut worst = 0.0_f64;
    for i in 1..=10 {
        let exact = 4.0 / (h * h) * (i as f64 * PI * h / 2.0).sin().powi(2);
        worst = worst.max((eig.value(i) - exact).abs() / exact);
    }
    ensure(worst <= 1e-9, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e} over 10 eigenvalues"))
}

fn contraction() -> Check {
    let grid = Grid::new(1, 99).map_err(err)?;
    let base = variable_1d();
    let spec = PerturbationSpec {
        eps_a: 1e-4,
        eps_c: 1e-4,
        shape: Shape::Bump,
    };
    let (op_t, _) = perturb_operator(&base, &spec, &grid).map_err(err)?;
    let eig_t = eigensolve(&op_t, 11).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let field = random_sines(&mut rng, 1, 12).plus(&ScalarField::bubble(1, 1.0));
    let raw = GridFunction::sample(grid, |x| field.eval(x)).map_err(err)?;
    let mut worst_margin = f64::NEG_INFINITY;
    for k in [2, 5, 10] {
        let f = eig_t.projector(k).map_err(err)?.project(&raw).map_err(err)?;
        let trace = gd_run(&op_t, &eig_t, &f, &DescentConfig::new(k, 50)).map_err(err)?;
        let l1 = eig_t.value(1);
        let lk = eig_t.value(k);
        let rate = (lk - l1) / (lk + l1);
        ensure(trace.records.len() == 51, || format!("k={k}: {} records", trace.records.len()))?;
        for r in trace.records.iter().skip(1).filter(|r| r.ratio.is_finite()) {
            ensure(r.ratio <= rate + 1e-9, || format!("k={k} t={}: ratio {} > {}", r.t, r.ratio, rate))?;
            worst_margin = worst_margin.max(r.ratio - rate);
        }

        let phi = eig_t.vector(1).clone();
        let trace = gd_run(&op_t, &eig_t, &phi, &DescentConfig::new(k, 50)).map_err(err)?;
        let decay = 1.0 - trace.eta * l1;
        for (t, u) in trace.iterates.iter().enumerate() {
            let factor = (1.0 - decay.powi(t as i32)) / l1;
            let gap = u
                .values()
                .iter()
                .zip(phi.values())
                .map(|(a, b)| (a - factor * b).abs())
                .fold(0.0, f64::max);
            ensure(gap <= 1e-9, || format!("k={k} t={t}: closed form off by {gap:e}"))?;
        }
    }
    Ok(format!("largest ratio minus rate {worst_margin:.2e}; closed form within 1e-9"))
}

fn sweep_setup(peeling: bool) -> SweepSetup {
    let f = ScalarField::sine_product(1.0, &[1]).plus(&ScalarField::sine_product(0.5, &[2]));
    SweepSetup {
        base: variable_1d(),
        grid: Grid::new(1, 63).unwrap(),
        k: 4,
        f: f.clone(),
        f_nn: f,
        shapes: Shape::ALL.to_vec(),
        epsilons: vec![1e-6, 1e-5, 1e-4, 1e-3],
        trials: 20,
        seed: 5,
        max_power: 3,
        peeling,
    }
}

fn perturbation_suite() -> Check {
    let records = run_sweep(&sweep_setup(false)).map_err(err)?;
    let failures: Vec<String> = records
        .iter()
        .filter(|r| r.status == CheckStatus::Fail)
        .map(|r| format!("{} {:?} {:?}: {} > {}", r.lemma, r.shape, r.epsilon, r.lhs, r.rhs))
        .collect();
    ensure(failures.is_empty(), || failures.join("; "))?;
    for lemma in [
        "relative-form",
        "weyl",
        "inverse-difference",
        "davis-kahan",
        "source-projection",
        "eigen-power",
    ] {
        let passed = records.iter().filter(|r| r.lemma == lemma && r.status == CheckStatus::Pass).count();
        ensure(passed > 0, || format!("{lemma} never applied"))?;
    }
    let passed = records.iter().filter(|r| r.status == CheckStatus::Pass).count();
    Ok(format!("{} records, {passed} pass, 0 fail", records.len()))
}

fn chain_rule() -> Check {
    let coeff = CoefficientField::isotropic(
        1,
        ScalarField::quadratic(1.0, &[1.0]).plus(&ScalarField::sine_product(0.2, &[1])),
        None,
        ScalarField::affine(1.0, &[0.5]),
        1.0,
        2.2,
        1.0,
    )
    .map_err(err)?;
    let u = ScalarField::sine_product(1.0, &[1]).plus(&ScalarField::bubble(1, 0.5));
    let mut parts = Vec::new();
    for n in [1, 2] {
        let coarse = chain_rule_residual(&assemble(&coeff, &Grid::new(1, 199).map_err(err)?).map_err(err)?, &u, n, 0)
            .map_err(err)?;
        let fine = chain_rule_residual(&assemble(&coeff, &Grid::new(1, 399).map_err(err)?).map_err(err)?, &u, n, 0)
            .map_err(err)?;
        let ratio = coarse / fine;
        ensure(ratio >= 3.5, || format!("n={n}: residual {coarse:e} -> {fine:e}, ratio {ratio:.3}"))?;
        parts.push(format!("n={n} ratio {ratio:.2}"));
    }
    Ok(parts.join(", "))
}

fn finite_difference(g: &Graph, net: Net, x: &[f64], axis: usize) -> Result<f64, String> {
    let step = 1e-3;
    let at = |s: f64| -> Result<f64, String> {
        let mut y = x.to_vec();
        y[axis] += s;
        g.evaluate(net, &y).map_err(err)
    };
    Ok((8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?)) / (12.0 * step))
}

fn graph_suite(dim: usize) -> Result<(Graph, Vec<Net>), String> {
    let mut g = Graph::new(dim);
    let ones = vec![1; dim];
    let mut nets = Vec::new();
    let fields = [
        ScalarField::sine_product(1.0, &ones),
        ScalarField::affine(0.5, &vec![0.3; dim]),
        ScalarField::quadratic(1.0, &vec![0.7; dim]),
        ScalarField::bubble(dim, 2.0),
        ScalarField::monomial(dim, dim - 1, 3, 1.5),
    ];
    for field in &fields {
        nets.push(g.from_field(field).map_err(err)?);
    }
    let product = g.mul(nets[0], nets[2]).map_err(err)?;
    let triple = g.mul(product, nets[3]).map_err(err)?;
    nets.extend([product, triple]);

    let mut a = Vec::new();
    for i in 0..dim {
        for j in 0..dim {
            let field = if i == j {
                ScalarField::constant(dim, 1.0).plus(&ScalarField::sine_product(0.1, &ones))
            } else {
                ScalarField::sine_product(0.05, &ones)
            };
            a.push(g.from_field(&field).map_err(err)?);
        }
    }
    let c = g.from_field(&ScalarField::constant(dim, 1.0)).map_err(err)?;
    let growth = grow(&mut g, nets[3], &a, c, nets[0], 0.01, 2).map_err(err)?;
    nets.extend(growth.iterates.into_iter().skip(1));
    Ok((g, nets))
}

fn backprop() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_err = 0.0_f64;
    let mut worst_size = 0.0_f64;
    let mut graphs = 0;
    for dim in 1..=2 {
        let (mut g, nets) = graph_suite(dim)?;
        let points: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..dim).map(|_| rng.gen_range(0.05..0.95)).collect())
            .collect();
        for &net in &nets {
            graphs += 1;
            let budget = C_BP * (g.depth(net).map_err(err)? + g.param_count(net).map_err(err)?) as f64;
            for axis in 0..dim {
                let d = g.differentiate(net, axis).map_err(err)?;
                let size = g.param_count(d).map_err(err)? as f64;
                ensure(size <= budget, || format!("derivative size {size} > {budget}"))?;
                worst_size = worst_size.max(size / (budget / C_BP));
                for x in &points {
                    let exact = g.evaluate(d, x).map_err(err)?;
                    let fd = finite_difference(&g, net, x, axis)?;
                    let rel = (exact - fd).abs() / exact.abs().max(1.0);
                    ensure(rel <= 1e-6, || format!("at {x:?} axis {axis}: {exact} vs {fd}"))?;
                    worst_err = worst_err.max(rel);
                }
            }
        }
    }
    Ok(format!(
        "{graphs} graphs, max relative error {worst_err:.2e}, max size/(l+N) {worst_size:.2} <= {C_BP}"
    ))
}

fn recursion_sizes() -> Check {
    let mut worst_rec = 0.0_f64;
    let mut worst_unrolled = 0.0_f64;
    for dim in 1..=3 {
        let ones = vec![1; dim];
        for variable in [false, true] {
            for bubble_start in [false, true] {
                if dim == 3 && variable && bubble_start {
                    continue;
                }
                let mut g = Graph::new(dim);
                let mut a = Vec::new();
                for i in 0..dim {
                    for j in 0..dim {
                        let field = match (variable, i == j) {
                            (false, true) => ScalarField::constant(dim, 1.0),
                            (false, false) => ScalarField::zero(dim),
                            (true, true) => {
                                ScalarField::constant(dim, 1.0).plus(&ScalarField::sine_product(0.1, &ones))
                            }
                            (true, false) => ScalarField::sine_product(0.05, &ones),
                        };
                        a.push(g.from_field(&field).map_err(err)?);
                    }
                }
                let c = g.from_field(&ScalarField::constant(dim, 1.0)).map_err(err)?;
                let f = g.from_field(&ScalarField::sine_product(1.0, &ones)).map_err(err)?;
                let u0 = if bubble_start {
                    g.from_field(&ScalarField::bubble(dim, 1.0)).map_err(err)?
                } else {
                    g.constant(0.0)
                };
                let growth = grow(&mut g, u0, &a, c, f, 0.01, UNROLLED_MAX_STEPS).map_err(err)?;
                let v = growth.violations();
                ensure(v.is_empty(), || format!("d={dim}: {}", v.join("; ")))?;
                worst_rec = worst_rec.max(growth.recurrence_ratio(dim));
                worst_unrolled = worst_unrolled.max(growth.unrolled_ratio());
            }
        }
    }
    ensure(worst_rec <= C_REC, || format!("recurrence ratio {worst_rec}"))?;
    ensure(worst_unrolled <= C_UNROLL, || format!("unrolled ratio {worst_unrolled}"))?;
    Ok(format!(
        "max recurrence ratio {worst_rec:.2} <= {C_REC}, max unrolled ratio {worst_unrolled:.1} <= {C_UNROLL}"
    ))
}

fn problem(json: &str) -> Result<Problem, String> {
    let cfg = ExperimentConfig::from_json(json).map_err(err)?;
    Problem::new(&cfg).map_err(err)
}

fn constant_config(n: usize) -> String {
    format!(
        r#"{{"schema_version": 1, "dimension": 1, "n": {n}, "k": 5, "steps": 10,
            "coefficients": {{"preset": "constant", "a": 1.0, "c": 1.0}},
            "source": [
                {{"preset": "sine", "amplitude": 1.0, "modes": [1]}},
                {{"preset": "sine", "amplitude": 0.5, "modes": [3]}},
                {{"preset": "sine", "amplitude": 0.25, "modes": [5]}}
            ]}}"#
    )
}

fn graph_grid() -> Check {
    let mut maxima = Vec::new();
    for n in [49, 99] {
        let p = problem(&constant_config(n))?;
        let run = certify_run(&p).map_err(err)?;
        ensure(run.graph_grid_asserted, || format!("n={n}: equivalence not asserted"))?;
        let slack = p.slack();
        ensure(run.graph_grid.len() == 11, || format!("n={n}: {} steps", run.graph_grid.len()))?;
        for (t, &gap) in run.graph_grid.iter().enumerate() {
            ensure(gap <= slack, || format!("n={n} t={t}: {gap:e} > {slack:e}"))?;
        }
        maxima.push(run.graph_grid.iter().copied().fold(0.0, f64::max));
    }
    let ratio = maxima[0] / maxima[1];
    ensure(ratio >= 3.5, || format!("discrepancy {:e} -> {:e}, ratio {ratio:.3}", maxima[0], maxima[1]))?;
    Ok(format!("max discrepancy {:.2e} -> {:.2e}, ratio {ratio:.2}", maxima[0], maxima[1]))
}

fn main_budget() -> Check {
    let p = problem(
        r#"{"schema_version": 1, "dimension": 1, "n": 99, "k": 5, "steps": 20,
            "coefficients": {"preset": "constant", "a": 1.0, "c": 0.0},
            "perturbation": {"eps_a": 1e-4, "shape": "bump"},
            "source": [
                {"preset": "sine", "amplitude": 1.0, "modes": [1]},
                {"preset": "sine", "amplitude": 0.5, "modes": [3]}
            ]}"#,
    )?;
    let run = certify_run(&p).map_err(err)?;
    let limit = run.report.budget + run.report.inputs.slack;
    ensure(
        matches!(run.status, CertificateStatus::Tight | CertificateStatus::Pass),
        || format!("status {}", run.status.as_str()),
    )?;
    ensure(run.measured <= limit, || format!("measured {:e} > {limit:e}", run.measured))?;
    let v = run.violations(p.slack());
    ensure(v.is_empty(), || v.join("; "))?;
    Ok(format!(
        "status {}, measured {:.3e} <= {:.3e}",
        run.status.as_str(),
        run.measured,
        limit
    ))
}

fn initialization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0_f64;
    for (dim, n) in [(1, 63), (2, 15)] {
        let grid = Grid::new(dim, n).map_err(err)?;
        let coeff = if dim == 1 {
            variable_1d()
        } else {
            CoefficientField::isotropic(
                2,
                ScalarField::constant(2, 1.0).plus(&ScalarField::sine_product(0.2, &[1, 1])),
                Some(ScalarField::sine_product(0.1, &[1, 2])),
                ScalarField::constant(2, 0.5),
                0.7,
                1.3,
                0.5,
            )
            .map_err(err)?
        };
        let op = assemble(&coeff, &grid).map_err(err)?;
        let eig = eigensolve(&op, 1).map_err(err)?;
        let l1 = eig.value(1);
        for _ in 0..10 {
            let field = random_sines(&mut rng, dim, 5).plus(&ScalarField::bubble(dim, rng.gen_range(-1.0..1.0)));
            let f = GridFunction::sample(grid, |x| field.eval(x)).map_err(err)?;
            let b = initialization_bound(&op, &f, l1).map_err(err)?;
            ensure(b.holds, || format!("d={dim}: {} > {}", b.solution_norm, b.bound))?;
            worst = worst.max(b.solution_norm / b.bound);
        }
        let f = eig.vector(1).scaled(l1);
        let b = initialization_bound(&op, &f, l1).map_err(err)?;
        let gap = (b.solution_norm - b.bound).abs() / b.bound;
        ensure(gap <= 1e-9, || format!("d={dim}: eigenfunction source off by {gap:e}"))?;
    }
    Ok(format!("20 random sources, max ||u*|| lambda_1/||f|| = {worst:.4}; eigenfunction tight"))
}

fn order_bounds() -> Check {
    let mut parts = Vec::new();
    let tests = [
        ScalarField::sine_product(1.0, &[1]),
        ScalarField::sine_product(0.5, &[3]),
        ScalarField::bubble(1, 1.0),
        ScalarField::monomial(1, 0, 3, 1.0),
        ScalarField::sine_product(1.0, &[2]).times(&ScalarField::sine_product(1.0, &[1])),
    ];
    for (coeff, grid) in [
        (CoefficientField::laplacian(1, 0.0), Grid::new(1, 199).map_err(err)?),
        (variable_1d(), Grid::new(1, 199).map_err(err)?),
        (CoefficientField::laplacian(2, 1.0), Grid::new(2, 31).map_err(err)?),
    ] {
        let op = assemble(&coeff, &grid).map_err(err)?;
        let dim = coeff.dim();
        for u in &tests {
            let u = if dim == 1 { u.clone() } else { ScalarField::sine_product(1.0, &[1, 2]) };
            for n in 1..=3 {
                let check = check_order_bounds(&op, &u, n).map_err(err)?;
                ensure(check.pass, || format!("d={dim} n={n}: {} > {}", check.lhs, check.rhs))?;
            }
        }
        parts.push(format!("d={dim}"));
    }
    Ok(format!("{} functions x n=1..3 on {}", tests.len(), parts.join(", ")))
}

fn peeling_info() -> String {
    match run_sweep(&sweep_setup(true)) {
        Ok(records) => {
            let peel: Vec<_> = records.iter().filter(|r| r.lemma == "peeling").collect();
            let fails = peel.iter().filter(|r| r.status == CheckStatus::Fail).count();
            format!("{} peeling records, {fails} exceed 1 + 2n delta", peel.len())
        }
        Err(e) => format!("sweep error: {e}"),
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("discrete spectrum", 5, spectrum),
        ("contraction", 10, contraction),
        ("perturbation suite", 60, perturbation_suite),
        ("operator chain rule", 30, chain_rule),
        ("backpropagation", 10, backprop),
        ("recursion sizes", 10, recursion_sizes),
        ("graph/grid equivalence", 60, graph_grid),
        ("error budget", 60, main_budget),
        ("initialization bound", 10, initialization),
        ("order-n bounds", 10, order_bounds),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > Duration::from_secs(*limit) => {
                Err(format!("{detail}; took {:.2} s, limit {limit} s", elapsed.as_secs_f64()))
            }
            other => other,
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2} {name} ({:.2} s): {detail}", i + 1, elapsed.as_secs_f64());
    }
    println!("[INFO]    peeling: {}", peeling_info());
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
