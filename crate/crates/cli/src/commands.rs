//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;

use mveq::export;
use mveq::feedback::{self, FeedbackSolution};
use mveq::market::{self, derive_excess_moments, ExcessMoments, MarketSpec};
use mveq::mixed::{self, sample_pure_feedback, MixedSolution, PureFeedbackPart};
use mveq::numerics::Tolerances;
use mveq::open_loop::{self, OpenLoopSolution};
use mveq::oracle::{
    build_matched_tree, evaluate_cost_exact, simulate_monte_carlo, verify_equilibrium,
    Continuation, ReturnDistribution, Semantics, VerificationReport,
};
use mveq::policy::AffinePolicy;
use mveq::SolveError;

use crate::reference::{self, Table};
use crate::{
    BatchArgs, CliError, CommonArgs, Distribution, Format, MixedArgs, PhiArgs, ReproduceArgs,
    SimulateArgs, SolveArgs, Solver, VerifyArgs,
};

type Result<T> = std::result::Result<T, CliError>;

struct Problem {
    spec: MarketSpec<f64>,
    moments: ExcessMoments<f64>,
    tol: Tolerances<f64>,
}

fn load_problem(args: &CommonArgs) -> Result<Problem> {
    let path = Path::new(&args.market);
    let mut spec = if path.is_file() {
        market::load_market_spec(File::open(path).map_err(market::MarketError::from)?)?
    } else if args.market.ends_with(".json") || args.market.contains(std::path::MAIN_SEPARATOR) {
        return Err(CliError::Validation(format!("market file `{}` not found", args.market)));
    } else {
        market::preset(&args.market)?
    };
    if args.t.is_some() || args.x.is_some() {
        let t = args.t.unwrap_or(spec.initial_time());
        let x = args.x.unwrap_or(spec.initial_wealth());
        spec = spec.with_start(t, x)?;
    }
    let mut tol = Tolerances::default();
    if let Some(v) = args.tol_range {
        tol.range = v;
    }
    if let Some(v) = args.tol_psd {
        tol.psd = v;
    }
    if let Some(v) = args.tol_pinv {
        tol.pinv = v;
    }
    if let Some(v) = args.tol_dagger {
        tol.dagger = v;
    }
    tol.validate().map_err(CliError::Validation)?;
    let moments = derive_excess_moments(&spec);
    Ok(Problem { spec, moments, tol })
}

fn open_output(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(|e| {
            CliError::Validation(format!("cannot create `{}`: {e}", path.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    let mut w = open_output(out)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_trace(
    path: &Option<PathBuf>,
    f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> Result<()> {
    if let Some(path) = path {
        let mut w = BufWriter::new(File::create(path).map_err(|e| {
            CliError::Validation(format!("cannot create `{}`: {e}", path.display()))
        })?);
        f(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn load_phi(args: &PhiArgs, spec: &MarketSpec<f64>) -> Result<PureFeedbackPart<f64>> {
    let (n, m) = (spec.horizon(), spec.num_assets());
    let phi = match args.phi.as_str() {
        "zero" => PureFeedbackPart::zero(n, m),
        "sample" => sample_pure_feedback(args.seed, n, m),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("cannot read Φ file `{path}`: {e}")))?;
            PureFeedbackPart::from_json(&text)?
        }
    };
    if phi.horizon() != n || phi.num_assets() != m {
        return Err(CliError::Validation(format!(
            "Φ has {} stages of {} entries, market needs {n} of {m}",
            phi.horizon(),
            phi.num_assets()
        )));
    }
    Ok(phi)
}

fn row4(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| format!("{v:>9.4}")).collect::<Vec<_>>().join(" ")
}

fn pretty_policy(title: &str, spec: &MarketSpec<f64>, policy: &AffinePolicy<f64>) -> String {
    let m = spec.num_assets();
    let mut s = format!(
        "{title} (t = {}, x = {})\n",
        spec.initial_time(),
        spec.initial_wealth()
    );
    let head = |p: &str| (1..=m).map(|i| format!("{:>9}", format!("{p}_{i}"))).collect::<Vec<_>>().join(" ");
    let _ = writeln!(s, "stage {} | {}", head("K"), head("c"));
    for k in policy.start_stage..policy.end_stage() {
        let _ = writeln!(
            s,
            "{k:>5} {} | {}",
            row4(policy.gain(k).iter().copied()),
            row4(policy.offset(k).iter().copied())
        );
    }
    s
}

#[derive(Serialize)]
struct StageJson {
    stage: usize,
    gain: Vec<f64>,
    offset: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phi: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    o_eigenvalues: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct PolicyJson {
    solver: String,
    start_stage: usize,
    initial_wealth: f64,
    stages: Vec<StageJson>,
}

fn policy_json(policy: &AffinePolicy<f64>, spec: &MarketSpec<f64>, mixed: Option<&MixedSolution<f64>>) -> String {
    let stages = (policy.start_stage..policy.end_stage())
        .map(|k| StageJson {
            stage: k,
            gain: policy.gain(k).iter().copied().collect(),
            offset: policy.offset(k).iter().copied().collect(),
            phi: mixed.map(|m| m.phi.stage(k).iter().copied().collect()),
            o_eigenvalues: mixed.map(|m| m.trace.o_eigs[m.trace.index(k)].clone()),
        })
        .collect();
    let doc = PolicyJson {
        solver: policy.kind.to_string(),
        start_stage: policy.start_stage,
        initial_wealth: spec.initial_wealth(),
        stages,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("plain data serializes");
    s.push('\n');
    s
}

fn policy_output(
    format: Format,
    title: &str,
    spec: &MarketSpec<f64>,
    policy: &AffinePolicy<f64>,
    mixed: Option<&MixedSolution<f64>>,
) -> Result<String> {
    Ok(match format {
        Format::Pretty => {
            let mut s = pretty_policy(title, spec, policy);
            if let Some(sol) = mixed {
                let _ = writeln!(s, "\nstage {:>29} | eigenvalues of 𝒪_k", "Φ_k");
                for k in policy.start_stage..policy.end_stage() {
                    let _ = writeln!(
                        s,
                        "{k:>5} {} | {}",
                        row4(sol.phi.stage(k).iter().copied()),
                        row4(sol.trace.o_eigs[sol.trace.index(k)].iter().copied())
                    );
                }
            }
            s
        }
        Format::Csv => {
            let mut buf = Vec::new();
            export::write_policy_csv(&mut buf, policy)?;
            String::from_utf8(buf).expect("CSV is UTF-8")
        }
        Format::Json => policy_json(policy, spec, mixed),
    })
}

fn run_open_loop(p: &Problem) -> std::result::Result<OpenLoopSolution<f64>, SolveError> {
    open_loop::solve_open_loop(&p.moments, &p.spec, &p.tol)
}

fn run_feedback(p: &Problem) -> std::result::Result<FeedbackSolution<f64>, SolveError> {
    feedback::solve_feedback(&p.moments, &p.spec, &p.tol)
}

fn run_mixed(p: &Problem, phi: &PureFeedbackPart<f64>) -> std::result::Result<MixedSolution<f64>, SolveError> {
    mixed::solve_mixed(&p.moments, &p.spec, phi, &p.tol)
}

pub fn solve_open_loop(args: &SolveArgs) -> Result<()> {
    let p = load_problem(&args.common)?;
    let sol = run_open_loop(&p)?;
    write_trace(&args.trace, |w| export::write_open_loop_trace_csv(w, &sol))?;
    let text = policy_output(args.common.format, "open-loop equilibrium control", &p.spec, &sol.policy, None)?;
    emit(&args.common.out, &text)
}

pub fn solve_feedback(args: &SolveArgs) -> Result<()> {
    let p = load_problem(&args.common)?;
    let sol = run_feedback(&p)?;
    write_trace(&args.trace, |w| export::write_feedback_trace_csv(w, &sol))?;
    let text = policy_output(args.common.format, "feedback equilibrium strategy", &p.spec, &sol.policy, None)?;
    emit(&args.common.out, &text)
}

pub fn solve_mixed(args: &MixedArgs) -> Result<()> {
    let p = load_problem(&args.solve.common)?;
    let phi = load_phi(&args.phi, &p.spec)?;
    let sol = run_mixed(&p, &phi)?;
    write_trace(&args.solve.trace, |w| export::write_mixed_trace_csv(w, &sol))?;
    let text = policy_output(
        args.solve.common.format,
        "mixed equilibrium solution, applied policy",
        &p.spec,
        &sol.policy,
        Some(&sol),
    )?;
    emit(&args.solve.common.out, &text)
}

/// Policy of the chosen solver, plus Φ for the mixed solver.
fn solver_policy(
    p: &Problem,
    solver: Solver,
    phi_args: &PhiArgs,
) -> Result<(AffinePolicy<f64>, Option<PureFeedbackPart<f64>>)> {
    Ok(match solver {
        Solver::OpenLoop => (run_open_loop(p)?.policy, None),
        Solver::Feedback => (run_feedback(p)?.policy, None),
        Solver::Mixed => {
            let phi = load_phi(phi_args, &p.spec)?;
            (run_mixed(p, &phi)?.policy, Some(phi))
        }
    })
}

fn semantics_of(solver: Solver) -> Semantics {
    match solver {
        Solver::OpenLoop => Semantics::OpenLoop,
        Solver::Feedback => Semantics::Feedback,
        Solver::Mixed => Semantics::Mixed,
    }
}

fn verification_output(format: Format, report: &VerificationReport) -> Result<String> {
    Ok(match format {
        Format::Json => {
            let mut buf = Vec::new();
            export::write_verification_jsonl(&mut buf, report)?;
            String::from_utf8(buf).expect("JSON is UTF-8")
        }
        Format::Csv => {
            let mut s = String::from("stage,node,wealth,j_star,j_dev,gap,tol,passed\n");
            for r in &report.records {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    r.stage, r.node, r.wealth, r.j_star, r.j_dev, r.gap, r.tol, r.passed
                );
            }
            s
        }
        Format::Pretty => {
            let failures = report.failures().count();
            let mut s = format!(
                "semantics: {}\nnodes checked: {}\nfailures: {failures}\nmin gap: {:.3e}\nmin gap / tol: {:.3}\nresult: {}\n",
                report.semantics,
                report.records.len(),
                report.min_gap,
                report.min_scaled_gap,
                if report.passed { "PASS" } else { "FAIL" }
            );
            for r in report.failures().take(10) {
                let _ = writeln!(
                    s,
                    "  stage {} node {}: X* = {:.6}, J* = {:.9}, best deviation J = {:.9} (gap {:.3e})",
                    r.stage, r.node, r.wealth, r.j_star, r.j_dev, r.gap
                );
            }
            s
        }
    })
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    let p = load_problem(&args.common)?;
    if !(args.tol_verify > 0.0) {
        return Err(CliError::Validation("--tol-verify must be positive".into()));
    }
    let semantics = semantics_of(args.semantics.unwrap_or(args.solver));
    let (policy, phi) = solver_policy(&p, args.solver, &args.phi)?;
    // A non-mixed policy checked under mixed semantics still needs a Φ.
    let phi = match (semantics, phi) {
        (Semantics::Mixed, None) => Some(load_phi(&args.phi, &p.spec)?),
        (_, phi) => phi,
    };
    let atoms = args.atoms.unwrap_or(2 * p.spec.num_assets() + 1);
    let tree = build_matched_tree(&p.moments, atoms, args.phi.seed)?;
    let cont = Continuation::for_semantics(&policy, semantics, phi.as_ref())?;
    let report = verify_equilibrium(&tree, &p.spec, &cont, args.tol_verify)?;
    emit(&args.common.out, &verification_output(args.common.format, &report)?)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "{} of {} nodes admit a profitable deviation under {} semantics (min gap {:.3e})",
            report.failures().count(),
            report.records.len(),
            report.semantics,
            report.min_gap
        )))
    }
}

#[derive(Serialize)]
struct SimulationJson {
    solver: String,
    distribution: &'static str,
    seed: u64,
    #[serde(flatten)]
    summary: mveq::oracle::SimulationSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact_cost: Option<f64>,
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let p = load_problem(&args.common)?;
    if args.paths < 2 {
        return Err(CliError::Validation("--paths must be at least 2".into()));
    }
    let (policy, _) = solver_policy(&p, args.solver, &args.phi)?;
    let (summary, exact, dist_name) = match args.distribution {
        Distribution::Gaussian => (
            simulate_monte_carlo(&p.spec, &policy, args.paths, args.phi.seed, ReturnDistribution::GaussianMatched)?,
            None,
            "gaussian",
        ),
        Distribution::Tree => {
            let atoms = args.atoms.unwrap_or(2 * p.spec.num_assets() + 1);
            let tree = build_matched_tree(&p.moments, atoms, args.phi.seed)?;
            let summary =
                simulate_monte_carlo(&p.spec, &policy, args.paths, args.phi.seed, ReturnDistribution::TreeSampling(&tree))?;
            let exact = evaluate_cost_exact(&tree, &p.spec, &policy, policy.start_stage, p.spec.initial_wealth())
                .ok()
                .map(|e| e.cost);
            (summary, exact, "tree")
        }
    };
    let text = match args.common.format {
        Format::Pretty => {
            let mut s = format!(
                "solver: {}\ndistribution: {dist_name}\npaths: {}\nseed: {}\nmean X_N: {:.6} ± {:.2e}\nvar X_N: {:.6} ± {:.2e}\nJ: {:.6} ± {:.2e}\n",
                policy.kind,
                summary.n_paths,
                args.phi.seed,
                summary.mean,
                summary.se_mean,
                summary.variance,
                summary.se_variance,
                summary.cost,
                summary.se_cost
            );
            if let Some(j) = exact {
                let _ = writeln!(s, "exact J on tree: {j:.6} (z = {:.2})", (summary.cost - j) / summary.se_cost);
            }
            s
        }
        Format::Csv => format!(
            "solver,distribution,seed,n_paths,mean,variance,cost,se_mean,se_variance,se_cost,exact_cost\n{},{dist_name},{},{},{},{},{},{},{},{},{}\n",
            policy.kind,
            args.phi.seed,
            summary.n_paths,
            summary.mean,
            summary.variance,
            summary.cost,
            summary.se_mean,
            summary.se_variance,
            summary.se_cost,
            exact.map(|j| j.to_string()).unwrap_or_default()
        ),
        Format::Json => {
            let mut s = serde_json::to_string(&SimulationJson {
                solver: policy.kind.to_string(),
                distribution: dist_name,
                seed: args.phi.seed,
                summary,
                exact_cost: exact,
            })
            .expect("plain data serializes");
            s.push('\n');
            s
        }
    };
    emit(&args.common.out, &text)
}

/// Prints `values` next to `want`, marking entries off by more than the
/// tolerance, and records the mismatches.
fn compare_table(
    out: &mut String,
    mismatches: &mut Vec<String>,
    title: &str,
    values: impl Fn(usize) -> Vec<f64>,
    want: &Table,
) {
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, " k {:>9} {:>9} {:>9}", "1", "2", "3");
    for k in (0..want.len()).rev() {
        let got = values(k);
        let mut line = format!("{k:>2} {}", row4(got.iter().copied()));
        let bad: Vec<usize> = (0..3).filter(|&i| (got[i] - want[k][i]).abs() > reference::TOLERANCE).collect();
        if !bad.is_empty() {
            let _ = write!(line, "   ≠ reference {}", row4(want[k].iter().copied()));
            mismatches.push(format!(
                "{title}, k = {k}: max deviation {:.4}",
                (0..3).map(|i| (got[i] - want[k][i]).abs()).fold(0.0, f64::max)
            ));
        }
        let _ = writeln!(out, "{line}");
    }
    out.push('\n');
}

fn reference_phi() -> PureFeedbackPart<f64> {
    PureFeedbackPart::new(reference::MIXED_PHI.iter().map(|r| DVector::from_row_slice(r)).collect())
        .expect("reference Φ is valid")
}

pub fn reproduce_example(args: &ReproduceArgs) -> Result<()> {
    let spec = market::preset(mveq::EXAMPLE_PRESET)?.with_tradeoff(1.0, 1.0)?.with_start(0, 1.0)?;
    let p = Problem {
        moments: derive_excess_moments(&spec),
        spec,
        tol: Tolerances::default(),
    };
    let ol = run_open_loop(&p)?;
    let fb = run_feedback(&p)?;
    let mx = run_mixed(&p, &reference_phi())?;
    let v = |d: &DVector<f64>| d.iter().copied().collect::<Vec<f64>>();

    let mut out = String::from("Example market: N = 4, m = 3, s = 1.04, μ₁ = μ₂ = 1, t = 0, x = 1\n\n");
    let mut bad = Vec::new();
    compare_table(&mut out, &mut bad, "open-loop K_k", |k| v(ol.policy.gain(k)), &reference::OPEN_LOOP_GAIN);
    compare_table(&mut out, &mut bad, "open-loop c_k", |k| v(ol.policy.offset(k)), &reference::OPEN_LOOP_OFFSET);
    compare_table(&mut out, &mut bad, "feedback Φ_k", |k| v(fb.policy.gain(k)), &reference::FEEDBACK_GAIN);
    compare_table(&mut out, &mut bad, "feedback v_k", |k| v(fb.policy.offset(k)), &reference::FEEDBACK_OFFSET);
    compare_table(&mut out, &mut bad, "mixed Φ_k (input)", |k| v(mx.phi.stage(k)), &reference::MIXED_PHI);
    compare_table(&mut out, &mut bad, "mixed K_k", |k| v(mx.policy.gain(k)), &reference::MIXED_GAIN);
    compare_table(&mut out, &mut bad, "mixed c_k", |k| v(mx.policy.offset(k)), &reference::MIXED_OFFSET);
    compare_table(
        &mut out,
        &mut bad,
        "mixed eigenvalues of 𝒪_k",
        |k| mx.trace.o_eigs[k].clone(),
        &reference::MIXED_O_EIGENVALUES,
    );
    if bad.is_empty() {
        out.push_str("all values within 5e-4 of the reference\n");
    } else {
        let _ = writeln!(out, "{} rows deviate from the reference by more than 5e-4:", bad.len());
        for b in &bad {
            let _ = writeln!(out, "  {b}");
        }
    }
    emit(&args.out, &out)?;
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("{} rows deviate from the reference", bad.len())))
    }
}

#[derive(Serialize)]
struct BatchRow {
    draw: usize,
    phi_seed: u64,
    status: String,
    phi: Vec<Vec<f64>>,
    /// `None` for stages the recursion did not reach.
    o_eigenvalues: Vec<Option<Vec<f64>>>,
    solvable: Vec<Option<bool>>,
}

pub fn batch(args: &BatchArgs) -> Result<()> {
    let p = load_problem(&args.common)?;
    let (n, m, t) = (p.spec.horizon(), p.spec.num_assets(), p.spec.initial_time());
    let rows: Vec<BatchRow> = (0..args.draws)
        .map(|i| {
            let seed = args.seed.wrapping_add(i as u64);
            let phi = sample_pure_feedback(seed, n, m);
            let phi_rows = phi.stages().iter().map(|v| v.iter().copied().collect()).collect();
            match run_mixed(&p, &phi) {
                Ok(sol) => BatchRow {
                    draw: i,
                    phi_seed: seed,
                    status: "solved".into(),
                    phi: phi_rows,
                    o_eigenvalues: (0..n)
                        .map(|k| (k >= t).then(|| sol.trace.o_eigs[k - t].clone()))
                        .collect(),
                    solvable: (0..n).map(|k| (k >= t).then(|| sol.trace.solvable[k - t])).collect(),
                },
                Err(SolveError::Nonexistence(r)) => BatchRow {
                    draw: i,
                    phi_seed: seed,
                    status: format!("{} at stage {}", r.failing_condition, r.failing_stage),
                    phi: phi_rows,
                    o_eigenvalues: vec![None; n],
                    solvable: (0..n)
                        .map(|k| match k {
                            k if k > r.failing_stage => Some(true),
                            k if k == r.failing_stage => Some(false),
                            _ => None,
                        })
                        .collect(),
                },
                Err(e) => BatchRow {
                    draw: i,
                    phi_seed: seed,
                    status: format!("error: {e}").replace(',', ";"),
                    phi: phi_rows,
                    o_eigenvalues: vec![None; n],
                    solvable: vec![None; n],
                },
            }
        })
        .collect();

    let text = match args.common.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&rows).expect("plain data serializes");
            s.push('\n');
            s
        }
        Format::Csv | Format::Pretty => {
            let pretty = args.common.format == Format::Pretty;
            let num = |x: f64| if pretty { format!("{x:.4}") } else { x.to_string() };
            let mut header = vec!["draw".to_string(), "phi_seed".into(), "status".into()];
            for k in 0..n {
                header.extend((1..=m).map(|j| format!("phi_{k}_{j}")));
            }
            for k in 0..n {
                header.extend((1..=m).map(|j| format!("eig_{k}_{j}")));
                header.push(format!("solvable_{k}"));
            }
            let mut s = header.join(",") + "\n";
            for r in &rows {
                let mut cells = vec![r.draw.to_string(), r.phi_seed.to_string(), r.status.clone()];
                for stage in &r.phi {
                    cells.extend(stage.iter().map(|&x| num(x)));
                }
                for k in 0..n {
                    match &r.o_eigenvalues[k] {
                        Some(e) => cells.extend(e.iter().map(|&x| num(x))),
                        None => cells.extend(std::iter::repeat_n(String::new(), m)),
                    }
                    cells.push(r.solvable[k].map(|b| b.to_string()).unwrap_or_default());
                }
                s.push_str(&cells.join(","));
                s.push('\n');
            }
            s
        }
    };
    emit(&args.common.out, &text)
}
