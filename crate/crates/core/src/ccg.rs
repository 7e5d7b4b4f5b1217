//! Column-and-constraint generation with mapping cuts, plus the classic
//! variant whose cuts pin a numeric scenario.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::formulations::{
    build_mp, canonicalize, generation_cost, payment, solve_fc, solve_fc_peak, solve_mp, solve_sp, Cut,
    KktOptions, MasterMode, VertexSignature, WorstCase,
};
use crate::fusion::{build_set, DduUncertaintySet};
use crate::mip::SolverParams;
use crate::model::{DispatchCase, FirstStageDecision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcgMode {
    /// Cuts replay normalized vertices through the set chosen by the master.
    Mapping,
    /// Cuts pin the numeric worst-case realization.
    Traditional,
    /// Accuracies frozen; the set is static.
    Fixed(Vec<f64>),
}

impl CcgMode {
    pub fn label(&self) -> &'static str {
        match self {
            CcgMode::Mapping => "mapping",
            CcgMode::Traditional => "traditional",
            CcgMode::Fixed(_) => "fixed",
        }
    }
}

/// Stopping rule on the bound gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapRule {
    /// `UB - LB <= max(1, 1e-4 |UB|)`.
    Default,
    Absolute(f64),
    /// `UB / LB - 1 <= r`.
    Relative(f64),
}

impl GapRule {
    /// Absolute tolerance implied at the given upper bound.
    pub fn epsilon(&self, ub: f64) -> f64 {
        match self {
            GapRule::Default => (1e-4 * ub.abs()).max(1.0),
            GapRule::Absolute(e) => *e,
            GapRule::Relative(r) => r * ub.abs() / (1.0 + r),
        }
    }
}

/// Which MIP answers the feasibility check inside the loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcForm {
    /// Uniform relaxation with exact bound rows; one binary per row.
    Peak,
    /// Total slack with two binaries per row.
    TotalSlack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcgOptions {
    pub gap: GapRule,
    pub iter_cap: usize,
    /// FC slack (MW) above which the candidate counts as infeasible.
    pub slack_tol: f64,
    pub fc_form: FcForm,
    /// Keep wall times in the trace. Off by default so reports are reproducible.
    pub record_timings: bool,
    pub solver: SolverParams,
    pub kkt: KktOptions,
}

impl Default for CcgOptions {
    fn default() -> Self {
        Self {
            gap: GapRule::Default,
            iter_cap: 200,
            slack_tol: 1e-6,
            fc_form: FcForm::Peak,
            record_timings: false,
            solver: SolverParams::default(),
            kkt: KktOptions::default(),
        }
    }
}

impl CcgOptions {
    pub fn for_case(case: &DispatchCase) -> Self {
        Self {
            kkt: KktOptions::for_case(case),
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    FeasCut,
    OptCut,
    Converged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    IterationCap,
    /// The new cut was already in the master, so no further progress is possible.
    RepeatedCut,
    /// The master became infeasible: no dispatch survives the committed cuts.
    Infeasible,
}

/// One pass of master, feasibility check and (when feasible) subproblem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub lower_bound: f64,
    /// `None` until a robust-feasible candidate has been priced.
    pub upper_bound: Option<f64>,
    pub fc_slack: f64,
    pub accuracies: Vec<f64>,
    /// Normalized point of the cut committed this iteration, `[i][t]`.
    pub signature: Option<Vec<Vec<f64>>>,
    /// Realization of that cut, `[i][t]`.
    pub scenario: Option<Vec<Vec<f64>>>,
    pub vertex: bool,
    pub status: IterationStatus,
    pub center_gap: f64,
    pub mapping_residual: f64,
    pub mp_seconds: f64,
    pub fc_seconds: f64,
    pub sp_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub mode: String,
    pub termination: Termination,
    /// Cost of the incumbent: generation, reserves, payments and worst-case recourse.
    pub objective: Option<f64>,
    pub lower_bound: f64,
    pub first_stage: Option<FirstStageDecision>,
    pub generation_cost: Option<f64>,
    pub payments: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub worst_case_recourse: Option<f64>,
    /// FC slack of the incumbent; zero means robust feasible.
    pub incumbent_slack: Option<f64>,
    pub set: Option<DduUncertaintySet>,
    pub cuts: usize,
    /// Upper bound on how far the master's payment interpolation can overstate cost.
    pub payment_error: f64,
    pub iterations: Vec<IterationRecord>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    /// Signatures committed in mapping mode, in commit order.
    pub fn signatures(&self) -> Vec<Vec<Vec<f64>>> {
        self.iterations.iter().filter_map(|r| r.signature.clone()).collect()
    }
}

struct Incumbent {
    x: Vec<f64>,
    taus: Vec<f64>,
    generation: f64,
    payments: Vec<f64>,
    recourse: f64,
    slack: f64,
    set: DduUncertaintySet,
}

fn seconds(t: Instant, on: bool) -> f64 {
    if on {
        t.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

/// Runs the decomposition in the given mode.
pub fn solve_ccg(case: &DispatchCase, mode: &CcgMode, opts: &CcgOptions) -> Result<SolveReport> {
    let canon = canonicalize(case)?;
    let params = &opts.solver;
    let master_mode = match mode {
        CcgMode::Fixed(t) => MasterMode::Fixed(t.clone()),
        _ => MasterMode::Decision,
    };
    let mut cuts: Vec<Cut> = Vec::new();
    let mut lb = f64::NEG_INFINITY;
    let mut ub = f64::INFINITY;
    let mut best: Option<Incumbent> = None;
    let mut trace = Vec::new();
    let mut payment_error = 0.0;
    let mut termination = Termination::IterationCap;
    for k in 0..opts.iter_cap {
        let t_mp = Instant::now();
        let master = build_mp(case, &canon, &cuts, &master_mode)?;
        payment_error = master.payment_error;
        let Some(sol) = solve_mp(case, &master, &cuts, params)? else {
            termination = Termination::Infeasible;
            break;
        };
        lb = lb.max(sol.objective);
        let taus = sol.accuracies.clone();
        // Re-solve with the accuracies frozen so that x matches the exact centers.
        let mut x = sol.x.clone();
        if matches!(master_mode, MasterMode::Decision) {
            let fixed = build_mp(case, &canon, &cuts, &MasterMode::Fixed(taus.clone()))?;
            if let Some(repaired) = solve_mp(case, &fixed, &cuts, params)? {
                x = repaired.x;
            }
        }
        let mp_seconds = seconds(t_mp, opts.record_timings);
        let set = build_set(case, &taus)?;
        let t_fc = Instant::now();
        let fc = match opts.fc_form {
            FcForm::Peak => solve_fc_peak(&canon, &x, &set, &opts.kkt, params)?,
            FcForm::TotalSlack => solve_fc(&canon, &x, &set, &opts.kkt, params)?,
        };
        let fc_seconds = seconds(t_fc, opts.record_timings);
        let mut sp_seconds = 0.0;
        let (status, worst): (IterationStatus, WorstCase) = if fc.value > opts.slack_tol {
            (IterationStatus::FeasCut, fc.clone())
        } else {
            let t_sp = Instant::now();
            let sp = solve_sp(&canon, &x, &set, &opts.kkt, params)?;
            sp_seconds = seconds(t_sp, opts.record_timings);
            let generation = generation_cost(case, &canon, &x);
            let payments: Vec<f64> = (0..case.num_agents())
                .map(|i| payment(case, i, taus[i]))
                .collect::<Result<_>>()?;
            let total = generation + payments.iter().sum::<f64>() + sp.value;
            if total < ub {
                ub = total;
                best = Some(Incumbent {
                    x: x.clone(),
                    taus: taus.clone(),
                    generation,
                    payments,
                    recourse: sp.value,
                    slack: fc.value,
                    set: set.clone(),
                });
            }
            (IterationStatus::OptCut, sp)
        };
        let mut record = IterationRecord {
            k,
            lower_bound: lb,
            upper_bound: ub.is_finite().then_some(ub),
            fc_slack: fc.value,
            accuracies: taus,
            signature: None,
            scenario: None,
            vertex: worst.signature.vertex,
            status,
            center_gap: sol.center_gap,
            mapping_residual: sol.mapping_residual,
            mp_seconds,
            fc_seconds,
            sp_seconds,
        };
        log::info!(
            "{} k={k} lb={lb:.4} ub={ub:.4} fc_slack={:.3e} status={status:?}",
            mode.label(),
            fc.value
        );
        if ub.is_finite() && ub - lb <= opts.gap.epsilon(ub) {
            record.status = IterationStatus::Converged;
            trace.push(record);
            termination = Termination::Converged;
            break;
        }
        let cut = match mode {
            CcgMode::Traditional => Cut::Scenario(worst.u.clone()),
            _ => Cut::Mapping(worst.signature.phi.clone()),
        };
        let VertexSignature { phi, .. } = worst.signature;
        record.signature = Some(phi);
        record.scenario = Some(worst.u);
        trace.push(record);
        if cuts.contains(&cut) {
            termination = Termination::RepeatedCut;
            break;
        }
        cuts.push(cut);
    }
    let n_i = case.num_agents();
    let report = match best {
        Some(inc) => {
            let mut fs = canon.first_stage(&inc.x);
            fs.accuracies = inc.taus.clone();
            fs.payments = inc.payments.clone();
            SolveReport {
                mode: mode.label().to_string(),
                termination,
                objective: Some(ub),
                lower_bound: lb,
                first_stage: Some(fs),
                generation_cost: Some(inc.generation),
                payments: inc.payments,
                accuracies: inc.taus,
                worst_case_recourse: Some(inc.recourse),
                incumbent_slack: Some(inc.slack),
                set: Some(inc.set),
                cuts: cuts.len(),
                payment_error,
                iterations: trace,
            }
        }
        None => SolveReport {
            mode: mode.label().to_string(),
            termination,
            objective: None,
            lower_bound: lb,
            first_stage: None,
            generation_cost: None,
            payments: vec![0.0; n_i],
            accuracies: vec![0.0; n_i],
            worst_case_recourse: None,
            incumbent_slack: None,
            set: None,
            cuts: cuts.len(),
            payment_error,
            iterations: trace,
        },
    };
    Ok(report)
}

pub fn solve_mapping_ccg(case: &DispatchCase, opts: &CcgOptions) -> Result<SolveReport> {
    solve_ccg(case, &CcgMode::Mapping, opts)
}

pub fn solve_traditional_ccg(case: &DispatchCase, opts: &CcgOptions) -> Result<SolveReport> {
    solve_ccg(case, &CcgMode::Traditional, opts)
}

/// `(K, LB, UB)` per iteration.
pub fn bounds_trace(report: &SolveReport) -> Vec<(usize, f64, Option<f64>)> {
    report
        .iterations
        .iter()
        .map(|r| (r.k, r.lower_bound, r.upper_bound))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::toy1;
    use crate::fusion::half_width;
    use crate::oracles::{exact_full, FullSearch};

    fn closed_form(case: &DispatchCase) -> f64 {
        let var = case.agents[0].prior_variance;
        let scaled = case.scaled_prediction_cost();
        (0..=10_000)
            .map(|k| case.tolerances.tau_max * k as f64 / 10_000.0)
            .map(|tau| {
                let w = half_width(var, tau, case.delta);
                500.0 + 4.0 * w + scaled / var * tau / (1.0 - tau)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn toy_expensive_predictions() {
        let case = toy1();
        let report = solve_mapping_ccg(&case, &CcgOptions::default()).unwrap();
        assert!(report.converged());
        assert!(report.accuracies[0] < 1e-6);
        let obj = report.objective.unwrap();
        assert!((obj - closed_form(&case)).abs() <= 1.0, "{obj}");
        assert_eq!(report.payments, vec![0.0]);
    }

    #[test]
    fn toy_free_predictions() {
        let mut case = toy1();
        case.prediction_cost = 0.0;
        let report = solve_mapping_ccg(&case, &CcgOptions::default()).unwrap();
        assert!(report.converged());
        let obj = report.objective.unwrap();
        assert!((obj - closed_form(&case)).abs() <= 1.0, "{obj}");
        assert!(report.accuracies[0] > 0.99);
    }

    #[test]
    fn toy_interior_accuracy_matches_oracles() {
        let mut case = toy1();
        case.prediction_cost = 300.0;
        let report = solve_mapping_ccg(&case, &CcgOptions::default()).unwrap();
        let obj = report.objective.unwrap();
        let grid = closed_form(&case);
        assert!((obj - grid).abs() <= 1.0, "{obj} vs {grid}");
        let full = exact_full(&case, &FullSearch::default(), &SolverParams::default()).unwrap();
        assert!((obj - full.objective).abs() <= 1.0 + full.refinement_gain);
        let trace = bounds_trace(&report);
        assert!(trace.windows(2).all(|w| w[1].1 >= w[0].1));
        assert!(report.signatures().len() <= 2);
    }

    #[test]
    fn fixed_mode_is_classic() {
        let case = toy1();
        let fixed = solve_ccg(&case, &CcgMode::Fixed(vec![0.0]), &CcgOptions::default()).unwrap();
        let mapping = solve_mapping_ccg(&case, &CcgOptions::default()).unwrap();
        assert!((fixed.objective.unwrap() - mapping.objective.unwrap()).abs() <= 1.0);
        let trad = solve_traditional_ccg(&case, &CcgOptions::default()).unwrap();
        assert!((trad.objective.unwrap() - mapping.objective.unwrap()).abs() <= 1.0);
    }

    #[test]
    fn timings_off_by_default() {
        let report = solve_mapping_ccg(&toy1(), &CcgOptions::default()).unwrap();
        assert!(report.iterations.iter().all(|r| r.mp_seconds == 0.0 && r.sp_seconds == 0.0));
    }
}
