//! Subcommand bodies. Each returns the process exit code.

use std::path::PathBuf;

use log::info;
use serde::Serialize;
use thiserror::Error;

use rgd_core::fusion::chebyshev_bound_check;
use rgd_core::io::{
    agent_rows, bounds_rows, oos_summary, report_to_json, scenario_rows, to_csv, write_trace, CaseFile,
};
use rgd_core::oracles::{oos_evaluate, OosSettings, ScenarioLaw};
use rgd_core::sweep::{sweep_rows, SweepParam};
use rgd_core::{
    parse_case, parse_report, solve_ccg, CcgMode, CcgOptions, DispatchCase, FcForm, GapRule, SolverParams,
    Termination, TestDistribution,
};

use crate::output::{read, OutDir, MANIFEST};
use crate::{CheckArgs, FcArg, ModeArg, OosArgs, SolveArgs, SolverArgs, SweepArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;
pub const EXIT_ITER_CAP: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Input { path: PathBuf, source: rgd_core::Error },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rgd_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Read { .. } | CliError::Input { .. } | CliError::Usage(_) => EXIT_PARSE,
            CliError::Write { .. } => EXIT_SOLVER,
            CliError::Core(e) => match e {
                rgd_core::Error::Parse { .. }
                | rgd_core::Error::InvalidCase(_)
                | rgd_core::Error::Dimension(_)
                | rgd_core::Error::UnknownDistribution(_) => EXIT_PARSE,
                _ => EXIT_SOLVER,
            },
        }
    }
}

fn load_case(path: &PathBuf) -> Result<(String, DispatchCase), CliError> {
    let text = read(path)?;
    let case = parse_case(&text).map_err(|source| CliError::Input {
        path: path.clone(),
        source,
    })?;
    Ok((text, case))
}

fn solver_params(a: &SolverArgs) -> Result<SolverParams, CliError> {
    let seed = i32::try_from(a.seed).map_err(|_| CliError::Usage(format!("--seed {} is too large", a.seed)))?;
    Ok(SolverParams {
        seed,
        ..SolverParams::default()
    })
}

fn ccg_options(case: &DispatchCase, a: &SolverArgs) -> Result<CcgOptions, CliError> {
    if a.iter_cap == 0 {
        return Err(CliError::Usage("--iter-cap must be at least 1".into()));
    }
    let mut o = CcgOptions::for_case(case);
    if let Some(eps) = a.eps {
        if !(eps >= 0.0) {
            return Err(CliError::Usage(format!("--eps must be nonnegative, got {eps}")));
        }
        o.gap = GapRule::Absolute(eps);
    }
    o.iter_cap = a.iter_cap;
    o.fc_form = match a.fc {
        FcArg::Peak => FcForm::Peak,
        FcArg::TotalSlack => FcForm::TotalSlack,
    };
    o.record_timings = a.timings;
    o.solver = solver_params(a)?;
    Ok(o)
}

pub fn solve(a: &SolveArgs, args: &[String]) -> Result<u8, CliError> {
    let (text, case) = load_case(&a.case)?;
    let opts = ccg_options(&case, &a.solver)?;
    let mode = match a.mode {
        ModeArg::Mapping => CcgMode::Mapping,
        ModeArg::Traditional => CcgMode::Traditional,
    };
    let report = solve_ccg(&case, &mode, &opts)?;
    let out = OutDir::create(&a.out)?;
    out.manifest("solve", args, a.solver.seed, &opts.solver, &[&text])?;
    out.write("report.json", &report_to_json(&report, MANIFEST)?)?;
    let mut trace = Vec::new();
    write_trace(&mut trace, &report.iterations)?;
    out.write("trace.jsonl", &String::from_utf8_lossy(&trace))?;
    out.write("bounds.csv", &to_csv(&bounds_rows(&report), MANIFEST)?)?;
    out.write("agents.csv", &to_csv(&agent_rows(&case, &report), MANIFEST)?)?;

    let objective = report.objective.map_or("none".to_string(), |v| format!("{v:.4}"));
    println!(
        "{}: {:?} after {} iterations, objective {objective}, lower bound {:.4}",
        report.mode,
        report.termination,
        report.iterations.len(),
        report.lower_bound
    );
    Ok(match report.termination {
        Termination::Converged => EXIT_OK,
        Termination::IterationCap | Termination::RepeatedCut => EXIT_ITER_CAP,
        Termination::Infeasible => {
            eprintln!("error: no first-stage dispatch is robust feasible");
            EXIT_SOLVER
        }
    })
}

/// `a,b,c` or `start:stop:count` (inclusive, evenly spaced).
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = |what: &str| CliError::Usage(format!("bad --grid `{s}`: {what}"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad(&format!("`{t}` is not a number")));
    let grid = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, stop, count] = parts[..] else {
            return Err(bad("expected start:stop:count"));
        };
        let (start, stop) = (num(start)?, num(stop)?);
        let count: usize = count.trim().parse().map_err(|_| bad("count must be a positive integer"))?;
        match count {
            0 => return Err(bad("count must be a positive integer")),
            1 => vec![start],
            n => (0..n).map(|k| start + (stop - start) * k as f64 / (n - 1) as f64).collect(),
        }
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(bad("values must be finite"));
    }
    Ok(grid)
}

pub fn sweep(a: &SweepArgs, args: &[String]) -> Result<u8, CliError> {
    let (text, case) = load_case(&a.case)?;
    let param: SweepParam = a.param.parse().map_err(|e: rgd_core::Error| CliError::Usage(e.to_string()))?;
    let grid = parse_grid(&a.grid)?;
    let opts = ccg_options(&case, &a.solver)?;
    let points = rgd_core::sweep(&case, param, &grid, &opts, a.jobs)?;

    let out = OutDir::create(&a.out)?;
    out.manifest("sweep", args, a.solver.seed, &opts.solver, &[&text])?;
    let mut failed = 0;
    for (k, p) in points.iter().enumerate() {
        #[derive(Serialize)]
        struct PointFile<'a> {
            manifest: &'a str,
            #[serde(flatten)]
            point: &'a rgd_core::sweep::SweepPoint,
        }
        let mut body = serde_json::to_string_pretty(&PointFile { manifest: MANIFEST, point: p })
            .map_err(|e| CliError::Usage(e.to_string()))?;
        body.push('\n');
        out.write(&format!("points/{k:03}.json"), &body)?;
        for (label, o) in [("proposed", &p.proposed), ("baseline", &p.baseline)] {
            if let Some(e) = &o.error {
                failed += 1;
                eprintln!("warning: {param}={} {label}: {e}", p.value);
            }
        }
        info!(
            "{param}={}: proposed {:?} {:?}, baseline {:?} {:?}",
            p.value, p.proposed.termination, p.proposed.objective, p.baseline.termination, p.baseline.objective
        );
    }
    out.write("sweep.csv", &to_csv(&sweep_rows(&case, &points), MANIFEST)?)?;
    println!("{} grid points written to {}", points.len(), a.out.display());
    Ok(if failed > 0 { EXIT_SOLVER } else { EXIT_OK })
}

pub fn oos(a: &OosArgs, args: &[String]) -> Result<u8, CliError> {
    let (case_text, case) = load_case(&a.case)?;
    let report_text = read(&a.solution)?;
    let file = parse_report(&report_text).map_err(|source| CliError::Input {
        path: a.solution.clone(),
        source,
    })?;
    let x = file
        .report
        .first_stage
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{} has no first-stage decision", a.solution.display())))?;
    x.ensure_shape(&case).map_err(|source| CliError::Input {
        path: a.solution.clone(),
        source,
    })?;
    let law: ScenarioLaw = a.dist.parse()?;
    if !(a.mult >= 0.0) {
        return Err(CliError::Usage(format!("--mult must be nonnegative, got {}", a.mult)));
    }
    let settings = OosSettings {
        law,
        std_multiplier: a.mult,
        scenarios: a.scenarios,
        seed: a.seed,
        infeasible_penalty: a.penalty,
        ..OosSettings::default()
    };
    let params = SolverParams::default();
    let result = oos_evaluate(&case, x, &settings, &params)?;

    let out = OutDir::create(&a.out)?;
    out.manifest("oos", args, a.seed, &params, &[&case_text, &report_text])?;
    out.write("scenarios.csv", &to_csv(&scenario_rows(&result), MANIFEST)?)?;
    let label = a.label.clone().unwrap_or_else(|| file.report.mode.clone());
    let summary = oos_summary(&label, &result);
    out.write("summary.csv", &to_csv(std::slice::from_ref(&summary), MANIFEST)?)?;
    println!(
        "{label} {law} x{}: average total {:.4} over {} scenarios, {} infeasible",
        a.mult, summary.average_total_usd, summary.scenarios, summary.infeasible
    );
    Ok(EXIT_OK)
}

pub fn check(a: &CheckArgs) -> Result<u8, CliError> {
    let text = read(&a.case)?;
    let file: CaseFile = serde_json::from_str(&text).map_err(|e| CliError::Input {
        path: a.case.clone(),
        source: rgd_core::Error::Parse {
            line: e.line(),
            msg: format!("column {}: {e}", e.column()),
        },
    })?;
    let case = match file.into_case() {
        Ok(c) => c,
        Err(rgd_core::Error::InvalidCase(msg)) => {
            println!("case invalid: {msg}");
            return Ok(EXIT_CHECK_FAILED);
        }
        Err(source) => return Err(CliError::Input { path: a.case.clone(), source }),
    };
    println!("case valid: {} generators, {} agents, horizon {}", case.num_generators(), case.num_agents(), case.horizon);

    let dists: Vec<TestDistribution> = if a.dists.is_empty() {
        TestDistribution::STANDARD.to_vec()
    } else {
        a.dists.iter().map(|d| d.parse()).collect::<Result<_, _>>()?
    };
    let delta = a.delta.unwrap_or(case.delta);
    let xi = a.xi.unwrap_or(case.xi);
    let mut groups = vec![case.horizon, case.num_agents()];
    groups.sort_unstable();
    groups.dedup();

    println!(
        "{:<20} {:>5} {:>8} {:>10} {:>10} {:>10} {:>10}  verdict",
        "distribution", "group", "budget", "p_single", "bound", "p_sum", "bound"
    );
    let mut ok = true;
    for d in dists {
        for &g in &groups {
            let r = chebyshev_bound_check(d, g, delta, xi, a.samples, a.seed)?;
            ok &= r.passes();
            println!(
                "{:<20} {:>5} {:>8.4} {:>10.5} {:>10.5} {:>10.5} {:>10.5}  {}",
                d.id(),
                g,
                r.budget,
                r.p_single,
                r.bound_single,
                r.p_sum,
                r.bound_sum,
                if r.passes() { "ok" } else { "VIOLATED" }
            );
        }
    }
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("0,1e3, 2e3").unwrap(), vec![0.0, 1e3, 2e3]);
        assert_eq!(parse_grid("0:1:5").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_grid("3:9:1").unwrap(), vec![3.0]);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("a,b").is_err());
        assert!(parse_grid("inf").is_err());
    }

    #[test]
    fn core_errors_map_to_exit_codes() {
        let code = |e: rgd_core::Error| CliError::Core(e).exit_code();
        assert_eq!(code(rgd_core::Error::Dimension("x".into())), EXIT_PARSE);
        assert_eq!(code(rgd_core::Error::Solver("x".into())), EXIT_SOLVER);
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_PARSE);
    }
}
