use std::fs;
use std::path::Path;

use delq_core::bsde::{self, OracleOutcome};
use delq_core::instances::{self, FOUR_STEP_PRINTED_K, FOUR_STEP_PRINTED_W};
use delq_core::linalg::{is_pd, max_abs};
use delq_core::lmei::{self, LmeiCandidate};
use delq_core::riccati::{classify, optimal_value, solve_riccati_with, value_matrix};
use delq_core::simulate::{self, NoiseModel};
use delq_core::{
    Classification, Policy, ProblemData, RiccatiSolution, ScenarioTree, SolvabilityReport, Tolerances, Vector,
};
use serde_json::{json, Value};

use crate::format;
use crate::{CandidateSource, Cli, CliError, Command, Example, LmeiAction, Mode, Noise, OutputFormat, PolicyChoice, ProblemArgs, SolutionSource};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    let tol = tolerances(cli)?;
    let out = Printer { format: cli.format };
    match &cli.command {
        Command::Solve { problem, output } => solve(&out, &tol, problem, output.as_deref()),
        Command::Value { source, t, k, x } => value(&out, &tol, source, *t, *k, x),
        Command::Gains { source, t } => gains(&out, &tol, source, *t),
        Command::Oracle { problem, x, match_tol } => oracle(&out, &tol, problem, x, *match_tol),
        Command::Simulate {
            problem,
            x,
            mode,
            policy,
            noise,
            samples,
            seed,
        } => simulate(&out, &tol, problem, x, *mode, *policy, *noise, *samples, *seed),
        Command::Lmei { action } => match action {
            LmeiAction::Check { problem, candidate } => lmei_check(&out, &tol, problem, candidate),
            LmeiAction::Construct {
                problem,
                candidate,
                output,
            } => lmei_construct(&out, &tol, problem, candidate, output.as_deref()),
        },
        Command::Example { which: Example::Paper } => example_paper(&out, &tol),
    }
}

struct Printer {
    format: OutputFormat,
}

impl Printer {
    /// Prints `human` or the JSON value, whichever the format asks for.
    fn emit(&self, human: impl FnOnce() -> String, json: impl FnOnce() -> Value) {
        match self.format {
            OutputFormat::Human => print!("{}", human()),
            OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&json()).expect("JSON value")),
        }
    }
}

fn tolerances(cli: &Cli) -> Result<Tolerances> {
    for (name, v) in [("--pinv-tol", cli.pinv_tol), ("--psd-tol", cli.psd_tol), ("--feas-tol", cli.feas_tol)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CliError::Usage(format!("{name} must be a positive number, got {v}")));
        }
    }
    Ok(Tolerances {
        pinv_rel: cli.pinv_tol,
        psd: cli.psd_tol,
        feasibility: cli.feas_tol,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn load_problem(path: &Path) -> Result<ProblemData> {
    let text = read(path)?;
    ProblemData::load(&text).map_err(|e| match e {
        delq_core::DelqError::Json(j) => CliError::Usage(format!("{}: {j}", path.display())),
        other => other.into(),
    })
}

fn parse_state(text: &str, n: usize) -> Result<Vector> {
    let values: std::result::Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let values = values.map_err(|e| CliError::Usage(format!("--x '{text}': {e}")))?;
    if values.len() != n {
        return Err(delq_core::DelqError::Validation(format!(
            "  - --x has {} entries but the state dimension is {n}",
            values.len()
        ))
        .into());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(delq_core::DelqError::Validation("  - --x contains a non-finite entry".into()).into());
    }
    Ok(Vector::from_vec(values))
}

fn class_table(report: &SolvabilityReport) -> String {
    let mut s = format!("classification: {}\n", report.classification);
    s.push_str(&format!("{:>4} {:>16} {:>16} {:>5}\n", "k", "min eig W_k", "range residual", "pd"));
    for step in &report.steps {
        s.push_str(&format!(
            "{:>4} {:>16.6e} {:>16.3e} {:>5}\n",
            step.k, step.w_min_eig, step.range_residual, step.w_pd
        ));
    }
    if report.requires_oracle_check {
        s.push_str("note: W_k >= 0 but the range condition fails; solvability for a given x needs the oracle\n");
    }
    s
}

fn solution_value(sol: &RiccatiSolution, class: Option<Classification>) -> Result<Value> {
    let text = sol.to_json(class)?;
    Ok(serde_json::from_str(&text).expect("solution JSON"))
}

fn solve(out: &Printer, tol: &Tolerances, args: &ProblemArgs, output: Option<&Path>) -> Result<()> {
    let problem = load_problem(&args.problem)?;
    let sol = solve_riccati_with(&problem, args.t, tol)?;
    let report = classify(&sol, tol)?;
    if let Some(path) = output {
        write(path, &sol.to_json(Some(report.classification))?)?;
    }
    let p0 = sol.p(0, args.t)?.clone();
    out.emit(
        || {
            let mut s = class_table(&report);
            s.push_str(&format!("P(0)_{} =\n{}", args.t, format::matrix(&p0, 2)));
            s
        },
        || {
            json!({
                "classification": report.classification.to_string(),
                "steps": serde_json::to_value(&report.steps).expect("report"),
                "solution": solution_value(&sol, Some(report.classification)).expect("solution"),
            })
        },
    );
    Ok(())
}

/// Solution from either source, with its classification.
fn load_solution(tol: &Tolerances, source: &SolutionSource, t: usize) -> Result<(RiccatiSolution, Classification)> {
    let sol = match (&source.problem, &source.solution) {
        (Some(path), _) => solve_riccati_with(&load_problem(path)?, t, tol)?,
        (None, Some(path)) => {
            let text = read(path)?;
            RiccatiSolution::from_json(&text)
                .map_err(|e| match e {
                    delq_core::DelqError::Json(j) => CliError::Usage(format!("{}: {j}", path.display())),
                    other => other.into(),
                })?
                .0
        }
        (None, None) => return Err(CliError::Usage("one of --problem, --solution is required".into())),
    };
    let class = classify(&sol, tol)?.classification;
    Ok((sol, class))
}

fn require_solvable(class: Classification) -> Result<()> {
    if !class.is_solvable() {
        return Err(CliError::Refused(format!(
            "classification is {class}; the optimal value and feedback law are only defined for \
             UniquelySolvable or SolvableAllPairs instances"
        )));
    }
    Ok(())
}

fn value(out: &Printer, tol: &Tolerances, source: &SolutionSource, t: usize, k: Option<usize>, x: &str) -> Result<()> {
    let (sol, class) = load_solution(tol, source, t)?;
    require_solvable(class)?;
    let k = k.unwrap_or(sol.t());
    let xi = parse_state(x, sol.n())?;
    let v = optimal_value(&sol, k, &xi)?;
    out.emit(
        || format!("V({k}, x) = {v}\n"),
        || json!({ "k": k, "x": format::vector(&xi), "value": v, "classification": class.to_string() }),
    );
    Ok(())
}

fn gains(out: &Printer, tol: &Tolerances, source: &SolutionSource, t: usize) -> Result<()> {
    let (sol, class) = load_solution(tol, source, t)?;
    require_solvable(class)?;
    let t = sol.t();
    out.emit(
        || {
            let mut s = format!("u_k = K_k E[X_k | F_max(t, k-d)], classification {class}\n");
            for (i, g) in sol.k.iter().enumerate() {
                s.push_str(&format!("K_{} =\n{}", t + i, format::matrix(g, 2)));
            }
            s
        },
        || {
            json!({
                "t": t,
                "classification": class.to_string(),
                "K": sol.k.iter().map(format::rows).collect::<Vec<_>>(),
            })
        },
    );
    Ok(())
}

fn oracle(out: &Printer, tol: &Tolerances, args: &ProblemArgs, x: &str, match_tol: f64) -> Result<()> {
    let problem = load_problem(&args.problem)?;
    let xi = parse_state(x, problem.n)?;
    let sol = solve_riccati_with(&problem, args.t, tol)?;
    let class = classify(&sol, tol)?.classification;
    let outcome = bsde::oracle_value(&problem, args.t, &xi, tol)?;
    let riccati = if class.is_solvable() {
        Some(optimal_value(&sol, args.t, &xi)?)
    } else {
        None
    };
    let difference = match (&outcome, riccati) {
        (OracleOutcome::Bounded { value, .. }, Some(r)) => Some(value - r),
        _ => None,
    };
    out.emit(
        || {
            let mut s = format!("classification: {class}\n");
            match &outcome {
                OracleOutcome::Bounded { value, .. } => s.push_str(&format!("oracle minimum: {value}\n")),
                OracleOutcome::Unbounded { min_eig, range_residual } => s.push_str(&format!(
                    "oracle: Unbounded (min eig {min_eig:.3e}, range residual {range_residual:.3e})\n"
                )),
            }
            if let Some(r) = riccati {
                s.push_str(&format!("riccati value:  {r}\n"));
            }
            if let Some(d) = difference {
                s.push_str(&format!("difference:     {d:.3e}\n"));
            }
            s
        },
        || {
            let oracle = match &outcome {
                OracleOutcome::Bounded { value, .. } => json!({ "status": "Bounded", "value": value }),
                OracleOutcome::Unbounded { min_eig, range_residual } => {
                    json!({ "status": "Unbounded", "min_eig": min_eig, "range_residual": range_residual })
                }
            };
            json!({
                "classification": class.to_string(),
                "oracle": oracle,
                "riccati_value": riccati,
                "difference": difference,
            })
        },
    );
    match (&outcome, riccati) {
        (OracleOutcome::Bounded { value, .. }, Some(r)) => {
            if (value - r).abs() > match_tol * r.abs().max(1.0) {
                return Err(CliError::Mismatch(format!("oracle {value} vs Riccati {r}")));
            }
            Ok(())
        }
        (OracleOutcome::Unbounded { .. }, Some(r)) => Err(CliError::Mismatch(format!(
            "oracle reports Unbounded but the recursion gives a finite value {r}"
        ))),
        (OracleOutcome::Unbounded { .. }, None) => Err(CliError::Refused(format!(
            "the cost is unbounded below ({class})"
        ))),
        // the oracle found a finite minimum for this x on a problem that is
        // not solvable for every x
        (OracleOutcome::Bounded { .. }, None) => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    out: &Printer,
    tol: &Tolerances,
    args: &ProblemArgs,
    x: &str,
    mode: Mode,
    choice: PolicyChoice,
    noise: Noise,
    samples: u64,
    seed: u64,
) -> Result<()> {
    let problem = load_problem(&args.problem)?;
    let xi = parse_state(x, problem.n)?;
    let sol = solve_riccati_with(&problem, args.t, tol)?;
    let class = classify(&sol, tol)?.classification;
    let policy = match choice {
        PolicyChoice::Optimal => {
            require_solvable(class)?;
            Policy::Feedback { gains: sol.k.clone() }
        }
        PolicyChoice::Zero => Policy::zero(&problem, args.t),
    };
    let result = match mode {
        Mode::Exact => {
            let tree = ScenarioTree::for_problem(&problem, args.t)?;
            simulate::exact_cost(&problem, &xi, &policy, &tree)?
        }
        Mode::MonteCarlo => {
            let model = match noise {
                Noise::Rademacher => NoiseModel::Rademacher,
                Noise::Gaussian => NoiseModel::Gaussian,
            };
            simulate::monte_carlo_cost(&problem, args.t, &xi, &policy, model, samples, seed)?
        }
    };
    let reference = if class.is_solvable() {
        Some(optimal_value(&sol, args.t, &xi)?)
    } else {
        None
    };
    out.emit(
        || {
            let mut s = match result.mode {
                delq_core::simulate::EvalMode::Exact => format!("exact cost: {}\n", result.mean),
                delq_core::simulate::EvalMode::MonteCarlo => format!(
                    "mean cost: {} (std error {:.6e}, {} samples, seed {})\n",
                    result.mean, result.std_error, result.samples, result.seed
                ),
            };
            if let Some(v) = reference {
                s.push_str(&format!("optimal value: {v}\n"));
            }
            s
        },
        || {
            json!({
                "result": serde_json::to_value(&result).expect("result"),
                "optimal_value": reference,
            })
        },
    );
    Ok(())
}

fn candidate(problem: &ProblemData, t: usize, tol: &Tolerances, source: &CandidateSource) -> Result<LmeiCandidate> {
    if let Some(path) = &source.candidate {
        let text = read(path)?;
        return LmeiCandidate::from_json(&text).map_err(|e| match e {
            delq_core::DelqError::Json(j) => CliError::Usage(format!("{}: {j}", path.display())),
            other => other.into(),
        });
    }
    if source.zero {
        return Ok(LmeiCandidate::zeros(problem, t)?);
    }
    let sol = solve_riccati_with(problem, t, tol)?;
    Ok(lmei::certificate_from_riccati(problem, &sol, tol)?.0)
}

fn lmei_check(out: &Printer, tol: &Tolerances, args: &ProblemArgs, source: &CandidateSource) -> Result<()> {
    let problem = load_problem(&args.problem)?;
    let cand = candidate(&problem, args.t, tol, source)?;
    let report = lmei::check_membership(&cand, &problem, args.t, tol)?;
    out.emit(|| format!("{report}\n"), || serde_json::to_value(&report).expect("report"));
    if !report.feasible {
        let n = report.violations().count();
        return Err(CliError::Refused(format!("candidate violates {n} constraint(s)")));
    }
    Ok(())
}

fn lmei_construct(
    out: &Printer,
    tol: &Tolerances,
    args: &ProblemArgs,
    source: &CandidateSource,
    output: Option<&Path>,
) -> Result<()> {
    let problem = load_problem(&args.problem)?;
    let cand = candidate(&problem, args.t, tol, source)?;
    let built = lmei::construct_from_candidate(&cand, &problem, args.t, tol)?;
    let class = classify(&built, tol)?.classification;
    let direct = solve_riccati_with(&problem, args.t, tol)?;
    let deviation = built.family().relative_distance(direct.family())?;
    if let Some(path) = output {
        write(path, &built.to_json(Some(class))?)?;
    }
    let p0 = built.p(0, args.t)?.clone();
    out.emit(
        || {
            format!(
                "constructed solution: classification {class}\nrelative deviation from the direct solve: {deviation:.3e}\nP(0)_{} =\n{}",
                args.t,
                format::matrix(&p0, 2)
            )
        },
        || {
            json!({
                "classification": class.to_string(),
                "deviation_from_direct": deviation,
                "solution": solution_value(&built, Some(class)).expect("solution"),
            })
        },
    );
    Ok(())
}

fn example_paper(out: &Printer, tol: &Tolerances) -> Result<()> {
    let problem = instances::four_step_example();
    let sol = solve_riccati_with(&problem, 0, tol)?;
    let report = classify(&sol, tol)?;
    let x = Vector::from_vec(vec![1.0, 0.0]);
    let value = optimal_value(&sol, 0, &x)?;
    let oracle = bsde::oracle_value(&problem, 0, &x, tol)?.value();
    let mut rows = Vec::new();
    for k in 0..problem.horizon {
        let w = sol.w_at(k)?.clone();
        let gain = sol.gain_at(k)?.clone();
        let printed_w = instances::printed_matrix(&FOUR_STEP_PRINTED_W[k]);
        let printed_k = instances::printed_matrix(&FOUR_STEP_PRINTED_K[k]);
        rows.push((k, w, printed_w, gain, printed_k));
    }
    let printed_w0 = instances::printed_matrix(&FOUR_STEP_PRINTED_W[0]);
    let printed_w0_det = printed_w0.determinant();
    let all_pd = (0..problem.horizon).all(|k| is_pd(sol.w_at(k).unwrap(), tol.psd).unwrap_or(false));
    let p0 = value_matrix(&sol, 0)?;

    out.emit(
        || {
            let mut s = String::from("four-step example: n = m = 2, N = 4, d = 2\n\n");
            for (k, w, pw, g, pk) in &rows {
                s.push_str(&format!("W_{k} computed\n{}", format::matrix(w, 2)));
                s.push_str(&format!("W_{k} printed\n{}", format::matrix(pw, 2)));
                s.push_str(&format!("  max deviation {:.4e}\n", max_abs(&(w - pw))));
                s.push_str(&format!("K_{k} computed\n{}", format::matrix(g, 2)));
                s.push_str(&format!("K_{k} printed\n{}", format::matrix(pk, 2)));
                s.push_str(&format!("  max deviation {:.4e}\n\n", max_abs(&(g - pk))));
            }
            s.push_str(&format!(
                "note: the printed W_0 has determinant {printed_w0_det:.4e} < 0, so it cannot be positive \
                 definite as stated; the recomputed W_0 is. Only W_3 and K_3 are compared strictly.\n"
            ));
            s.push_str(&format!("all recomputed W_k positive definite: {all_pd}\n\n"));
            s.push_str(&class_table(&report));
            s.push_str(&format!("\nP(0)_0 =\n{}", format::matrix(&p0, 2)));
            s.push_str(&format!("V(0, (1,0)) = {value}\n"));
            if let Some(o) = oracle {
                s.push_str(&format!("oracle minimum = {o} (difference {:.3e})\n", o - value));
            }
            s
        },
        || {
            json!({
                "steps": rows.iter().map(|(k, w, pw, g, pk)| json!({
                    "k": k,
                    "W": format::rows(w),
                    "W_printed": format::rows(pw),
                    "W_max_deviation": max_abs(&(w - pw)),
                    "K": format::rows(g),
                    "K_printed": format::rows(pk),
                    "K_max_deviation": max_abs(&(g - pk)),
                })).collect::<Vec<_>>(),
                "printed_W0_determinant": printed_w0_det,
                "printed_W0_inconsistent": printed_w0_det < 0.0,
                "all_W_positive_definite": all_pd,
                "classification": report.classification.to_string(),
                "P0_0": format::rows(&p0),
                "value_at_e1": value,
                "oracle_value_at_e1": oracle,
            })
        },
    );
    Ok(())
}
