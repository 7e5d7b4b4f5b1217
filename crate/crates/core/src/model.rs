//! Dispatch instance data and first/second-stage decisions.
//!
//! Periods are uniform one-hour intervals, so $/MWh coefficients multiply
//! MW quantities directly. PTDF rows are stored per participant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A controllable generator. Per-period on/off status is a given parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: String,
    pub on_status: Vec<bool>,
    pub output_cost: f64,
    pub reserve_cost_up: f64,
    pub reserve_cost_down: f64,
    pub adjust_cost_up: f64,
    pub adjust_cost_down: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub reserve_cap_up: f64,
    pub reserve_cap_down: f64,
    pub ramp_up: f64,
    pub ramp_down: f64,
    pub ptdf: Vec<f64>,
}

impl Generator {
    pub fn is_on(&self, t: usize) -> bool {
        self.on_status.get(t).copied().unwrap_or(false)
    }

    fn on(&self, t: usize) -> f64 {
        if self.is_on(t) {
            1.0
        } else {
            0.0
        }
    }

    /// `P_min * theta`, the lower output limit in period `t`.
    pub fn lower_limit(&self, t: usize) -> f64 {
        self.p_min * self.on(t)
    }

    pub fn upper_limit(&self, t: usize) -> f64 {
        self.p_max * self.on(t)
    }

    pub fn reserve_limit_up(&self, t: usize) -> f64 {
        self.reserve_cap_up * self.on(t)
    }

    pub fn reserve_limit_down(&self, t: usize) -> f64 {
        self.reserve_cap_down * self.on(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    /// Renewable source; `u` is its available output and may be curtailed.
    Res,
    /// Uncertain demand; never shed.
    Load,
}

/// An uncertain renewable source or load that can sell its prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: String,
    pub kind: AgentKind,
    /// Operator's own forecast per period (MW).
    pub prior_mean: Vec<f64>,
    /// Operator's forecast variance (MW^2), shared by all periods.
    pub prior_variance: f64,
    /// The agent's prediction per period (MW).
    pub prediction: Vec<f64>,
    /// Realized values, for hindsight and out-of-sample evaluation.
    pub truth: Option<Vec<f64>>,
    pub ptdf: Vec<f64>,
}

impl Agent {
    pub fn is_res(&self) -> bool {
        self.kind == AgentKind::Res
    }

    /// +1 for injections (RES), -1 for withdrawals (loads).
    pub fn injection_sign(&self) -> f64 {
        match self.kind {
            AgentKind::Res => 1.0,
            AgentKind::Load => -1.0,
        }
    }
}

/// A known, non-negotiable demand (MW per period).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedLoad {
    pub id: String,
    pub demand: Vec<f64>,
    pub ptdf: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: String,
    pub capacity: f64,
}

/// Numerical settings carried with an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Accuracy cap used wherever `tau` is a decision.
    pub tau_max: f64,
    /// Breakpoints per piecewise-linearized term.
    pub breakpoints: usize,
    /// Overrides every bound-derived big-M when set.
    pub big_m_override: Option<f64>,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tau_max: 0.999,
            breakpoints: 101,
            big_m_override: None,
        }
    }
}

/// A full robust dispatch instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchCase {
    pub generators: Vec<Generator>,
    pub agents: Vec<Agent>,
    #[serde(default)]
    pub fixed_loads: Vec<FixedLoad>,
    pub lines: Vec<Line>,
    pub horizon: usize,
    pub delta: f64,
    pub xi: f64,
    /// Per-period prediction cost coefficient `m` ($ MW^2).
    pub prediction_cost: f64,
    /// Curtailment penalty ($/MWh).
    pub curtailment_penalty: f64,
    /// Weight of the center-consistency penalty in the master problem ($/MW^2).
    pub penalty_weight: f64,
    pub tolerances: Tolerances,
}

/// Structural findings from [`validate_case`]; empty means valid.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }

    fn push(&mut self, msg: impl Into<String>) {
        self.findings.push(msg.into());
    }
}

impl DispatchCase {
    pub fn num_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_lines(&self) -> usize {
        self.lines.len()
    }

    /// Indices of RES agents in agent order.
    pub fn res_indices(&self) -> Vec<usize> {
        self.agents
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_res())
            .map(|(i, _)| i)
            .collect()
    }

    /// Total fixed demand in period `t`.
    pub fn fixed_demand(&self, t: usize) -> f64 {
        self.fixed_loads.iter().map(|d| d.demand[t]).sum()
    }

    /// Horizon-scaled prediction cost coefficient `T * m`.
    pub fn scaled_prediction_cost(&self) -> f64 {
        self.horizon as f64 * self.prediction_cost
    }

    pub fn validate(&self) -> ValidationReport {
        validate_case(self)
    }

    /// Like [`validate`](Self::validate) but as a `Result`.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidCase(report.findings.join("; ")))
        }
    }
}

/// Checks the structural invariants of a case. Deterministic and side-effect free.
pub fn validate_case(case: &DispatchCase) -> ValidationReport {
    let mut report = ValidationReport::default();
    let t_len = case.horizon;
    let n_lines = case.lines.len();

    if t_len < 1 {
        report.push("horizon must be at least 1");
    }
    if !(case.delta > 0.0 && case.delta < 1.0) {
        report.push("δ must lie in (0,1)");
    }
    if !(case.xi > 0.0 && case.xi < 1.0) {
        report.push("ξ must lie in (0,1)");
    }
    if !(case.prediction_cost >= 0.0) {
        report.push("prediction cost coefficient must be nonnegative");
    }
    if !(case.curtailment_penalty >= 0.0) {
        report.push("curtailment penalty must be nonnegative");
    }
    if !(case.penalty_weight >= 0.0) {
        report.push("penalty weight must be nonnegative");
    }
    let tol = &case.tolerances;
    if !(tol.tau_max > 0.0 && tol.tau_max < 1.0) {
        report.push("tau_max must lie in (0,1)");
    }
    if tol.breakpoints < 2 {
        report.push("at least two breakpoints are required");
    }
    if let Some(m) = tol.big_m_override {
        if !(m > 0.0) {
            report.push("big-M override must be positive");
        }
    }

    for line in &case.lines {
        if !(line.capacity > 0.0) {
            report.push(format!("line {}: line capacity must be positive", line.id));
        }
    }

    for g in &case.generators {
        let id = &g.id;
        if !(g.p_min >= 0.0 && g.p_min <= g.p_max) {
            report.push(format!("generator {id}: need 0 <= p_min <= p_max"));
        }
        let costs = [
            g.output_cost,
            g.reserve_cost_up,
            g.reserve_cost_down,
            g.adjust_cost_up,
            g.adjust_cost_down,
        ];
        if costs.iter().any(|c| !(*c >= 0.0)) {
            report.push(format!("generator {id}: cost coefficients must be nonnegative"));
        }
        let caps = [g.reserve_cap_up, g.reserve_cap_down, g.ramp_up, g.ramp_down];
        if caps.iter().any(|c| !(*c >= 0.0)) {
            report.push(format!("generator {id}: reserve and ramp caps must be nonnegative"));
        }
        if g.on_status.len() != t_len {
            report.push(format!("generator {id}: on_status length must equal the horizon"));
        }
        if g.ptdf.len() != n_lines {
            report.push(format!("generator {id}: PTDF row needs one entry per line"));
        }
    }

    for d in &case.fixed_loads {
        let id = &d.id;
        if d.demand.len() != t_len {
            report.push(format!("fixed load {id}: demand length must equal the horizon"));
        }
        if d.ptdf.len() != n_lines {
            report.push(format!("fixed load {id}: PTDF row needs one entry per line"));
        }
        if d.demand.iter().any(|v| !v.is_finite()) {
            report.push(format!("fixed load {id}: demand must be finite"));
        }
    }

    for a in &case.agents {
        let id = &a.id;
        if !(a.prior_variance > 0.0) {
            report.push(format!("agent {id}: prior variance must be positive"));
        }
        if a.prior_mean.len() != t_len {
            report.push(format!("agent {id}: prior_mean length must equal the horizon"));
        }
        if a.prediction.len() != t_len {
            report.push(format!("agent {id}: prediction length must equal the horizon"));
        }
        if let Some(truth) = &a.truth {
            if truth.len() != t_len {
                report.push(format!("agent {id}: truth length must equal the horizon"));
            }
        }
        if a.ptdf.len() != n_lines {
            report.push(format!("agent {id}: PTDF row needs one entry per line"));
        }
        let finite = a
            .prior_mean
            .iter()
            .chain(a.prediction.iter())
            .all(|v| v.is_finite());
        if !finite {
            report.push(format!("agent {id}: series must be finite"));
        }
    }
    report
}

/// Day-ahead decision: reference outputs, reserves, payments and purchased accuracies.
///
/// Generator series are indexed `[j][t]`; payments and accuracies `[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstStageDecision {
    pub output: Vec<Vec<f64>>,
    pub reserve_up: Vec<Vec<f64>>,
    pub reserve_down: Vec<Vec<f64>>,
    pub payments: Vec<f64>,
    pub accuracies: Vec<f64>,
}

impl FirstStageDecision {
    pub fn zeros(num_generators: usize, num_agents: usize, horizon: usize) -> Self {
        let grid = vec![vec![0.0; horizon]; num_generators];
        Self {
            output: grid.clone(),
            reserve_up: grid.clone(),
            reserve_down: grid,
            payments: vec![0.0; num_agents],
            accuracies: vec![0.0; num_agents],
        }
    }

    /// Checks that every series matches the case's generators, agents and horizon.
    pub fn ensure_shape(&self, case: &DispatchCase) -> Result<()> {
        let grid_ok = |g: &Vec<Vec<f64>>| {
            g.len() == case.num_generators() && g.iter().all(|row| row.len() == case.horizon)
        };
        if !(grid_ok(&self.output) && grid_ok(&self.reserve_up) && grid_ok(&self.reserve_down)) {
            return Err(Error::Dimension(format!(
                "generator series must be {} x {}",
                case.num_generators(),
                case.horizon
            )));
        }
        if self.accuracies.len() != case.num_agents() || self.payments.len() != case.num_agents() {
            return Err(Error::Dimension(format!("expected {} agents", case.num_agents())));
        }
        Ok(())
    }

    /// Multiplies every MW quantity and payment by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |g: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            g.iter().map(|row| row.iter().map(|v| v * factor).collect()).collect()
        };
        Self {
            output: scale(&self.output),
            reserve_up: scale(&self.reserve_up),
            reserve_down: scale(&self.reserve_down),
            payments: self.payments.iter().map(|v| v * factor).collect(),
            accuracies: self.accuracies.clone(),
        }
    }
}

/// Real-time re-dispatch. Curtailment is indexed `[r][t]` over RES agents only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondStageDecision {
    pub adjust_up: Vec<Vec<f64>>,
    pub adjust_down: Vec<Vec<f64>>,
    pub curtailment: Vec<Vec<f64>>,
}

impl SecondStageDecision {
    pub fn zeros(num_generators: usize, num_res: usize, horizon: usize) -> Self {
        Self {
            adjust_up: vec![vec![0.0; horizon]; num_generators],
            adjust_down: vec![vec![0.0; horizon]; num_generators],
            curtailment: vec![vec![0.0; horizon]; num_res],
        }
    }
}

fn check_grid(name: &str, grid: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    if grid.len() != rows || grid.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension(format!(
            "{name}: expected {rows}x{cols} values"
        )));
    }
    Ok(())
}

/// Day-ahead cost: generation and reserve costs plus prediction payments.
pub fn first_stage_cost(case: &DispatchCase, x: &FirstStageDecision) -> Result<f64> {
    let (j_len, t_len) = (case.num_generators(), case.horizon);
    check_grid("output", &x.output, j_len, t_len)?;
    check_grid("reserve_up", &x.reserve_up, j_len, t_len)?;
    check_grid("reserve_down", &x.reserve_down, j_len, t_len)?;
    if x.payments.len() != case.num_agents() {
        return Err(Error::Dimension("payments: one entry per agent".into()));
    }
    let mut total = 0.0;
    for (j, g) in case.generators.iter().enumerate() {
        for t in 0..t_len {
            total += g.output_cost * x.output[j][t]
                + g.reserve_cost_up * x.reserve_up[j][t]
                + g.reserve_cost_down * x.reserve_down[j][t];
        }
    }
    total += x.payments.iter().sum::<f64>();
    Ok(total)
}

/// Re-dispatch cost: generator adjustments plus the RES curtailment penalty.
pub fn second_stage_cost(case: &DispatchCase, y: &SecondStageDecision) -> Result<f64> {
    let (j_len, t_len) = (case.num_generators(), case.horizon);
    check_grid("adjust_up", &y.adjust_up, j_len, t_len)?;
    check_grid("adjust_down", &y.adjust_down, j_len, t_len)?;
    check_grid("curtailment", &y.curtailment, case.res_indices().len(), t_len)?;
    let mut total = 0.0;
    for (j, g) in case.generators.iter().enumerate() {
        for t in 0..t_len {
            total += g.adjust_cost_up * y.adjust_up[j][t] + g.adjust_cost_down * y.adjust_down[j][t];
        }
    }
    for row in &y.curtailment {
        total += case.curtailment_penalty * row.iter().sum::<f64>();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::toy1;

    #[test]
    fn toy_case_is_valid() {
        assert!(validate_case(&toy1()).is_valid());
    }

    #[test]
    fn delta_boundary_is_rejected() {
        let mut case = toy1();
        case.delta = 1.0;
        let report = validate_case(&case);
        assert!(report.findings.iter().any(|f| f.contains("δ must lie in (0,1)")));
    }

    #[test]
    fn negative_line_capacity_is_rejected() {
        let mut case = toy1();
        case.lines[0].capacity = -5.0;
        let report = validate_case(&case);
        assert!(report
            .findings
            .iter()
            .any(|f| f.contains("line capacity must be positive")));
    }

    #[test]
    fn ptdf_length_mismatch_is_reported() {
        let mut case = toy1();
        case.generators[0].ptdf.push(0.1);
        assert!(!validate_case(&case).is_valid());
    }

    #[test]
    fn validation_is_idempotent() {
        let mut case = toy1();
        case.xi = 0.0;
        assert_eq!(validate_case(&case), validate_case(&case));
    }

    #[test]
    fn single_term_first_stage_cost() {
        let case = toy1();
        let mut x = FirstStageDecision::zeros(1, 1, 1);
        x.output[0][0] = 50.0;
        assert_eq!(first_stage_cost(&case, &x).unwrap(), 500.0);
        assert_eq!(first_stage_cost(&case, &FirstStageDecision::zeros(1, 1, 1)).unwrap(), 0.0);
    }

    #[test]
    fn toy_first_stage_cost_with_reserves() {
        let case = toy1();
        let mut x = FirstStageDecision::zeros(1, 1, 1);
        x.output[0][0] = 50.0;
        x.reserve_up[0][0] = 44.72;
        x.reserve_down[0][0] = 44.72;
        let cost = first_stage_cost(&case, &x).unwrap();
        assert!((cost - 589.44).abs() < 1e-9);
    }

    #[test]
    fn second_stage_costs() {
        let case = toy1();
        let mut y = SecondStageDecision::zeros(1, 0, 1);
        assert_eq!(second_stage_cost(&case, &y).unwrap(), 0.0);
        y.adjust_up[0][0] = 44.72;
        assert!((second_stage_cost(&case, &y).unwrap() - 89.44).abs() < 1e-9);
    }

    #[test]
    fn curtailment_penalty_contribution() {
        let mut case = toy1();
        case.agents[0].kind = AgentKind::Res;
        case.curtailment_penalty = 100.0;
        let mut y = SecondStageDecision::zeros(1, 1, 1);
        y.curtailment[0][0] = 10.0;
        assert_eq!(second_stage_cost(&case, &y).unwrap(), 1000.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let case = toy1();
        let x = FirstStageDecision::zeros(2, 1, 1);
        assert!(matches!(first_stage_cost(&case, &x), Err(Error::Dimension(_))));
    }

    #[test]
    fn costs_scale_linearly() {
        let case = toy1();
        let mut x = FirstStageDecision::zeros(1, 1, 1);
        x.output[0][0] = 37.0;
        x.reserve_up[0][0] = 3.0;
        x.reserve_down[0][0] = 8.5;
        let base = first_stage_cost(&case, &x).unwrap();
        for a in [0.0, 0.5, 2.0, 7.25] {
            let scaled = first_stage_cost(&case, &x.scaled(a)).unwrap();
            assert!((scaled - a * base).abs() < 1e-9);
        }
    }
}
