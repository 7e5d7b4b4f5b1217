//! Sensitivity sweeps: re-solve a case while one parameter moves along a grid,
//! with the no-purchase dispatch alongside for comparison.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccg::{solve_ccg, CcgMode, CcgOptions, SolveReport, Termination};
use crate::error::{Error, Result};
use crate::fusion::half_width;
use crate::model::DispatchCase;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Unit prediction cost `m`.
    PredictionCost,
    /// `δ = ξ` moved together.
    DeltaXi,
    /// Factor on every prior variance.
    VarianceMultiplier,
}

impl SweepParam {
    pub fn id(&self) -> &'static str {
        match self {
            SweepParam::PredictionCost => "m",
            SweepParam::DeltaXi => "delta_xi",
            SweepParam::VarianceMultiplier => "variance_multiplier",
        }
    }

    /// Copy of `case` with the parameter set to `value`.
    pub fn apply(&self, case: &DispatchCase, value: f64) -> Result<DispatchCase> {
        let mut out = case.clone();
        match self {
            SweepParam::PredictionCost => out.prediction_cost = value,
            SweepParam::DeltaXi => {
                out.delta = value;
                out.xi = value;
            }
            SweepParam::VarianceMultiplier => {
                if !(value > 0.0) {
                    return Err(Error::OutOfRange(format!("variance multiplier must be positive, got {value}")));
                }
                for a in &mut out.agents {
                    a.prior_variance *= value;
                }
            }
        }
        out.ensure_valid()?;
        Ok(out)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepParam::PredictionCost, SweepParam::DeltaXi, SweepParam::VarianceMultiplier]
            .into_iter()
            .find(|p| p.id() == s)
            .ok_or_else(|| Error::OutOfRange(format!("unknown sweep parameter `{s}`")))
    }
}

/// Summary of one solve inside a sweep. A solver error is kept as text so the
/// rest of the sweep survives it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub termination: Option<Termination>,
    pub error: Option<String>,
    pub objective: Option<f64>,
    pub generation_cost: Option<f64>,
    pub payments: Vec<f64>,
    pub accuracies: Vec<f64>,
    /// Interval widths `2 u^h` per agent.
    pub widths: Vec<f64>,
    pub iterations: usize,
}

impl SweepOutcome {
    fn from_report(case: &DispatchCase, r: &SolveReport) -> Self {
        let widths = case
            .agents
            .iter()
            .zip(&r.accuracies)
            .map(|(a, t)| 2.0 * half_width(a.prior_variance, *t, case.delta))
            .collect();
        Self {
            termination: Some(r.termination),
            error: None,
            objective: r.objective,
            generation_cost: r.generation_cost,
            payments: r.payments.clone(),
            accuracies: r.accuracies.clone(),
            widths,
            iterations: r.iterations.len(),
        }
    }

    fn from_error(e: &Error) -> Self {
        Self {
            termination: None,
            error: Some(e.to_string()),
            objective: None,
            generation_cost: None,
            payments: Vec::new(),
            accuracies: Vec::new(),
            widths: Vec::new(),
            iterations: 0,
        }
    }

    /// A converged solve with an incumbent.
    pub fn feasible(&self) -> bool {
        self.termination == Some(Termination::Converged) && self.objective.is_some()
    }

    /// The master ran out of dispatches that survive the cuts.
    pub fn infeasible(&self) -> bool {
        self.termination == Some(Termination::Infeasible)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: SweepParam,
    pub value: f64,
    /// Mapping C&CG with purchased accuracies.
    pub proposed: SweepOutcome,
    /// Accuracies fixed at zero.
    pub baseline: SweepOutcome,
}

fn run(case: &DispatchCase, mode: &CcgMode, opts: &CcgOptions) -> SweepOutcome {
    match solve_ccg(case, mode, opts) {
        Ok(r) => SweepOutcome::from_report(case, &r),
        Err(e) => SweepOutcome::from_error(&e),
    }
}

/// Solves every grid point, at most `jobs` at a time. Output follows grid order.
pub fn sweep(
    case: &DispatchCase,
    param: SweepParam,
    grid: &[f64],
    opts: &CcgOptions,
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    let cases: Vec<DispatchCase> = grid.iter().map(|v| param.apply(case, *v)).collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Solver(e.to_string()))?;
    Ok(pool.install(|| {
        cases
            .par_iter()
            .zip(grid.par_iter())
            .map(|(c, v)| {
                let mut o = CcgOptions::for_case(c);
                o.gap = opts.gap;
                o.iter_cap = opts.iter_cap;
                o.slack_tol = opts.slack_tol;
                o.fc_form = opts.fc_form;
                o.solver = opts.solver.clone();
                SweepPoint {
                    param,
                    value: *v,
                    proposed: run(c, &CcgMode::Mapping, &o),
                    baseline: run(c, &CcgMode::Fixed(vec![0.0; c.num_agents()]), &o),
                }
            })
            .collect()
    }))
}

/// Long-format row: one per grid point, model and agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub model: String,
    pub termination: String,
    pub objective_usd: Option<f64>,
    pub generation_cost_usd: Option<f64>,
    pub agent: String,
    pub accuracy: Option<f64>,
    pub width_mw: Option<f64>,
    pub payment_usd: Option<f64>,
}

pub fn sweep_rows(case: &DispatchCase, points: &[SweepPoint]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for p in points {
        for (model, o) in [("proposed", &p.proposed), ("baseline", &p.baseline)] {
            let termination = match (&o.termination, &o.error) {
                (Some(t), _) => format!("{t:?}").to_lowercase(),
                (None, _) => "error".to_string(),
            };
            for (i, a) in case.agents.iter().enumerate() {
                rows.push(SweepRow {
                    param: p.param.id().to_string(),
                    value: p.value,
                    model: model.to_string(),
                    termination: termination.clone(),
                    objective_usd: o.objective,
                    generation_cost_usd: o.generation_cost,
                    agent: a.id.clone(),
                    accuracy: o.accuracies.get(i).copied(),
                    width_mw: o.widths.get(i).copied(),
                    payment_usd: o.payments.get(i).copied(),
                });
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::toy1;

    #[test]
    fn parameter_names_round_trip() {
        for p in [SweepParam::PredictionCost, SweepParam::DeltaXi, SweepParam::VarianceMultiplier] {
            assert_eq!(p.id().parse::<SweepParam>().unwrap(), p);
        }
        assert!("gamma".parse::<SweepParam>().is_err());
    }

    #[test]
    fn apply_moves_one_parameter() {
        let c = SweepParam::VarianceMultiplier.apply(&toy1(), 4.0).unwrap();
        assert_eq!(c.agents[0].prior_variance, 400.0);
        let c = SweepParam::DeltaXi.apply(&toy1(), 0.9).unwrap();
        assert_eq!((c.delta, c.xi), (0.9, 0.9));
        assert!(SweepParam::DeltaXi.apply(&toy1(), 1.0).is_err());
        assert!(SweepParam::VarianceMultiplier.apply(&toy1(), 0.0).is_err());
    }

    #[test]
    fn toy_cost_sweep_keeps_grid_order() {
        let grid = [1e6, 0.0];
        let pts = sweep(&toy1(), SweepParam::PredictionCost, &grid, &CcgOptions::default(), 2).unwrap();
        assert_eq!(pts.iter().map(|p| p.value).collect::<Vec<_>>(), grid.to_vec());
        assert!(pts.iter().all(|p| p.proposed.feasible() && p.baseline.feasible()));
        assert!(pts[0].proposed.accuracies[0] < 0.01);
        assert!(pts[1].proposed.accuracies[0] > 0.99 * toy1().tolerances.tau_max);
        assert_eq!(sweep_rows(&toy1(), &pts).len(), 4);
    }
}
