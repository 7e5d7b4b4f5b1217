//! Brute-force references and the out-of-sample evaluator.
//!
//! The references enumerate every vertex of Φ, so they only run on small
//! instances (`I·T <= 8`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formulations::{
    build_mp, canonicalize, generation_cost, payment, solve_feasibility, solve_mp, solve_recourse,
    CanonicalTwoStage, Cut, MasterMode, Recourse,
};
use crate::fusion::{build_set, rank, Budgets, DduUncertaintySet, NormalizedPolytope};
use crate::mip::SolverParams;
use crate::model::{DispatchCase, FirstStageDecision};

/// Largest `I·T` accepted by the enumerating references.
pub const VERTEX_GUARD: usize = 8;

/// Extreme points of Φ, each `[i][t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexList {
    pub agents: usize,
    pub periods: usize,
    pub vertices: Vec<Vec<Vec<f64>>>,
}

impl VertexList {
    pub fn count(&self) -> usize {
        self.vertices.len()
    }
}

fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|x, y| a[*x][c].abs().total_cmp(&a[*y][c].abs()))?;
        if a[p][c].abs() < 1e-10 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                if f != 0.0 {
                    for k in c..n {
                        a[r][k] -= f * a[c][k];
                    }
                    b[r] -= f * b[c];
                }
            }
        }
    }
    Some((0..n).map(|k| b[k] / a[k][k]).collect())
}

fn for_each_subset(n: usize, k: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

/// Enumerates V(Φ) by basis enumeration on the nonnegative part
/// `{0 <= ψ <= 1, budgets}` followed by sign flips and a rank test.
pub fn enumerate_vertices(agents: usize, periods: usize, budgets: Budgets) -> Result<VertexList> {
    let n = agents * periods;
    if n == 0 || n > VERTEX_GUARD {
        return Err(Error::Guard(format!(
            "vertex enumeration needs 1 <= I·T <= {VERTEX_GUARD}, got {n}"
        )));
    }
    let poly = NormalizedPolytope {
        agents,
        periods,
        budgets,
    };
    // Rows of Φ⁺ as (a, b) with a·ψ <= b.
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for k in 0..n {
        let mut a = vec![0.0; n];
        a[k] = 1.0;
        rows.push((a.clone(), 1.0));
        a[k] = -1.0;
        rows.push((a, 0.0));
    }
    for t in 0..periods {
        let mut a = vec![0.0; n];
        for i in 0..agents {
            a[i * periods + t] = 1.0;
        }
        rows.push((a, budgets.spatial));
    }
    for i in 0..agents {
        let mut a = vec![0.0; n];
        for t in 0..periods {
            a[i * periods + t] = 1.0;
        }
        rows.push((a, budgets.temporal));
    }
    let mut nonneg: Vec<Vec<f64>> = Vec::new();
    for_each_subset(rows.len(), n, &mut |idx| {
        let a: Vec<Vec<f64>> = idx.iter().map(|r| rows[*r].0.clone()).collect();
        let b: Vec<f64> = idx.iter().map(|r| rows[*r].1).collect();
        if let Some(psi) = solve_square(a, b) {
            let feasible = rows
                .iter()
                .all(|(a, b)| a.iter().zip(&psi).map(|(x, y)| x * y).sum::<f64>() <= b + 1e-9);
            if feasible {
                let psi: Vec<f64> = psi.iter().map(|v| if v.abs() < 1e-12 { 0.0 } else { *v }).collect();
                if !nonneg.iter().any(|q| q.iter().zip(&psi).all(|(x, y)| (x - y).abs() < 1e-9)) {
                    nonneg.push(psi);
                }
            }
        }
    });
    let mut vertices: Vec<Vec<Vec<f64>>> = Vec::new();
    for psi in nonneg {
        let support: Vec<usize> = (0..n).filter(|k| psi[*k] > 1e-12).collect();
        for mask in 0..(1usize << support.len()) {
            let mut flat = psi.clone();
            for (b, k) in support.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    flat[*k] = -flat[*k];
                }
            }
            let phi: Vec<Vec<f64>> = flat.chunks(periods).map(|c| c.to_vec()).collect();
            if poly.is_vertex(&phi, 1e-9) && !vertices.contains(&phi) {
                vertices.push(phi);
            }
        }
    }
    vertices.sort_by(|a, b| {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(VertexList {
        agents,
        periods,
        vertices,
    })
}

/// Rank test for membership in V(Φ).
pub fn is_vertex(poly: &NormalizedPolytope, phi: &[Vec<f64>], tol: f64) -> bool {
    poly.contains(phi, tol) && rank(poly.active_normals(phi, tol), 1e-9) == poly.dim()
}

/// Worst-case recourse by enumeration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilevelValue {
    /// Largest recourse cost over feasible vertices; `None` when every vertex is infeasible.
    pub value: Option<f64>,
    /// Vertex attaining `value`.
    pub worst: Option<Vec<Vec<f64>>>,
    /// First vertex whose recourse is infeasible.
    pub certificate: Option<Vec<Vec<f64>>>,
    /// Largest minimum total slack over all vertices.
    pub max_slack: f64,
    pub vertices: usize,
}

impl BilevelValue {
    pub fn is_feasible(&self) -> bool {
        self.certificate.is_none()
    }
}

fn vertices_of(set: &DduUncertaintySet) -> Result<VertexList> {
    enumerate_vertices(set.num_agents(), set.horizon(), set.budgets)
}

/// `S(x, τ)` as the largest recourse LP over all mapped vertices.
pub fn exact_bilevel(
    case: &DispatchCase,
    x: &FirstStageDecision,
    set: &DduUncertaintySet,
    params: &SolverParams,
) -> Result<BilevelValue> {
    let canon = canonicalize(case)?;
    exact_bilevel_flat(&canon, &canon.x_vector(x), set, params)
}

pub fn exact_bilevel_flat(
    canon: &CanonicalTwoStage,
    x: &[f64],
    set: &DduUncertaintySet,
    params: &SolverParams,
) -> Result<BilevelValue> {
    let list = vertices_of(set)?;
    let mut out = BilevelValue {
        value: None,
        worst: None,
        certificate: None,
        max_slack: 0.0,
        vertices: list.count(),
    };
    for phi in &list.vertices {
        let u = canon.u_vector(&set.point(phi));
        match solve_recourse(canon, x, &u, params)? {
            Recourse::Feasible { cost, .. } => {
                if out.value.is_none_or(|v| cost > v) {
                    out.value = Some(cost);
                    out.worst = Some(phi.clone());
                }
            }
            Recourse::Infeasible => {
                let (slack, _) = solve_feasibility(canon, x, &u, params)?;
                out.max_slack = out.max_slack.max(slack);
                if out.certificate.is_none() {
                    out.certificate = Some(phi.clone());
                }
            }
        }
    }
    Ok(out)
}

/// One accuracy vector's robust optimum with every vertex as an explicit scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub accuracies: Vec<f64>,
    /// `None` when no first-stage decision is robust feasible.
    pub objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullOptimum {
    pub accuracies: Vec<f64>,
    pub objective: f64,
    pub first_stage: FirstStageDecision,
    /// Spacing of the finest grid searched, per agent.
    pub resolution: f64,
    /// Drop in the best value during the last refinement round.
    pub refinement_gain: f64,
    pub evaluated: Vec<GridPoint>,
}

/// Settings for [`exact_full`].
#[derive(Clone, Debug, PartialEq)]
pub struct FullSearch {
    /// Points per agent in the coarse grid over `[0, τ_max]`.
    pub coarse: usize,
    /// Points per agent in each refinement window.
    pub fine: usize,
    pub rounds: usize,
}

impl Default for FullSearch {
    fn default() -> Self {
        Self {
            coarse: 21,
            fine: 11,
            rounds: 3,
        }
    }
}

/// Robust cost at fixed accuracies, all vertices embedded in one LP.
pub fn robust_at(
    case: &DispatchCase,
    canon: &CanonicalTwoStage,
    taus: &[f64],
    params: &SolverParams,
) -> Result<Option<(f64, Vec<f64>)>> {
    let set = build_set(case, taus)?;
    let list = vertices_of(&set)?;
    let cuts: Vec<Cut> = list
        .vertices
        .iter()
        .map(|phi| Cut::Scenario(set.point(phi)))
        .collect();
    let master = build_mp(case, canon, &cuts, &MasterMode::Fixed(taus.to_vec()))?;
    Ok(solve_mp(case, &master, &cuts, params)?.map(|s| (s.objective, s.x)))
}

fn product(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect()
    })
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Global optimum over `(x, τ)` by grid search with local refinement.
pub fn exact_full(case: &DispatchCase, search: &FullSearch, params: &SolverParams) -> Result<FullOptimum> {
    let n_i = case.num_agents();
    if !(1..=2).contains(&n_i) {
        return Err(Error::Guard(format!("exact_full supports 1 or 2 agents, got {n_i}")));
    }
    let canon = canonicalize(case)?;
    let tau_max = case.tolerances.tau_max;
    let mut evaluated = Vec::new();
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let eval = |grid: Vec<Vec<f64>>,
                    evaluated: &mut Vec<GridPoint>,
                    best: &mut Option<(f64, Vec<f64>, Vec<f64>)>|
     -> Result<()> {
        let results: Vec<Result<Option<(f64, Vec<f64>)>>> = grid
            .par_iter()
            .map(|taus| robust_at(case, &canon, taus, params))
            .collect();
        for (taus, r) in grid.into_iter().zip(results) {
            let r = r?;
            evaluated.push(GridPoint {
                accuracies: taus.clone(),
                objective: r.as_ref().map(|v| v.0),
            });
            if let Some((obj, x)) = r {
                if best.as_ref().is_none_or(|b| obj < b.0) {
                    *best = Some((obj, taus, x));
                }
            }
        }
        Ok(())
    };
    let mut step = tau_max / (search.coarse.max(2) - 1) as f64;
    eval(
        product(&vec![linspace(0.0, tau_max, search.coarse); n_i]),
        &mut evaluated,
        &mut best,
    )?;
    let mut gain = 0.0;
    for _ in 0..search.rounds {
        let Some((before, center, _)) = best.clone() else {
            break;
        };
        let axes: Vec<Vec<f64>> = center
            .iter()
            .map(|c| linspace((c - step).max(0.0), (c + step).min(tau_max), search.fine))
            .collect();
        step = 2.0 * step / (search.fine.max(2) - 1) as f64;
        eval(product(&axes), &mut evaluated, &mut best)?;
        gain = before - best.as_ref().map_or(before, |b| b.0);
    }
    let (objective, accuracies, x) = best.ok_or_else(|| {
        Error::Solver("no accuracy on the grid admits a robust feasible dispatch".into())
    })?;
    let mut first_stage = canon.first_stage(&x);
    first_stage.accuracies = accuracies.clone();
    first_stage.payments = (0..n_i)
        .map(|i| payment(case, i, accuracies[i]))
        .collect::<Result<_>>()?;
    Ok(FullOptimum {
        accuracies,
        objective,
        first_stage,
        resolution: step,
        refinement_gain: gain,
        evaluated,
    })
}

// ---------------------------------------------------------------------------
// Out-of-sample evaluation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioLaw {
    /// Symmetric interval `mean ± √3·std`.
    Uniform,
    Gaussian,
}

impl std::fmt::Display for ScenarioLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScenarioLaw::Uniform => "uniform",
            ScenarioLaw::Gaussian => "gaussian",
        })
    }
}

impl std::str::FromStr for ScenarioLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScenarioLaw::Uniform),
            "gaussian" | "normal" => Ok(ScenarioLaw::Gaussian),
            other => Err(Error::UnknownDistribution(other.to_string())),
        }
    }
}

/// Where sampled scenarios are centered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioCenter {
    Truth,
    Forecast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OosSettings {
    pub law: ScenarioLaw,
    pub std_multiplier: f64,
    pub scenarios: usize,
    pub seed: u64,
    pub center: ScenarioCenter,
    /// Cost per MW of unavoidable imbalance; infeasible scenarios are dropped when unset.
    pub infeasible_penalty: Option<f64>,
}

impl Default for OosSettings {
    fn default() -> Self {
        Self {
            law: ScenarioLaw::Gaussian,
            std_multiplier: 1.0,
            scenarios: 10_000,
            seed: 0,
            center: ScenarioCenter::Truth,
            infeasible_penalty: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub index: usize,
    /// Recourse cost; `None` when the scenario is infeasible.
    pub cost: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OosResult {
    pub law: ScenarioLaw,
    pub std_multiplier: f64,
    pub scenarios: usize,
    pub first_stage_cost: f64,
    pub average_recourse: f64,
    /// First-stage cost plus the average recourse over counted scenarios.
    pub average_total: f64,
    pub infeasible: usize,
    pub outcomes: Vec<ScenarioOutcome>,
}

/// Samples realizations, solves the recourse for each and averages the total cost.
pub fn oos_evaluate(
    case: &DispatchCase,
    x: &FirstStageDecision,
    settings: &OosSettings,
    params: &SolverParams,
) -> Result<OosResult> {
    x.ensure_shape(case)?;
    let canon = canonicalize(case)?;
    let xv = canon.x_vector(x);
    let set = build_set(case, &x.accuracies)?;
    let mut means = Vec::with_capacity(case.num_agents());
    let mut stds = Vec::with_capacity(case.num_agents());
    for (i, a) in case.agents.iter().enumerate() {
        let mean = match settings.center {
            ScenarioCenter::Truth => a.truth.clone().ok_or_else(|| {
                Error::InvalidCase(format!("agent {} has no realized values", a.id))
            })?,
            ScenarioCenter::Forecast => set.centers[i].clone(),
        };
        means.push(mean);
        let residual = a.prior_variance * (1.0 - x.accuracies[i]);
        stds.push(settings.std_multiplier * residual.max(0.0).sqrt());
    }
    let first = generation_cost(case, &canon, &xv) + x.payments.iter().sum::<f64>();
    let outcomes: Vec<Result<ScenarioOutcome>> = (0..settings.scenarios)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(index as u64);
            let mut u = Vec::with_capacity(canon.nu());
            for (mean, std) in means.iter().zip(&stds) {
                for m in mean {
                    let v = if *std == 0.0 {
                        *m
                    } else {
                        match settings.law {
                            ScenarioLaw::Gaussian => Normal::new(*m, *std)
                                .map_err(|e| Error::OutOfRange(e.to_string()))?
                                .sample(&mut rng),
                            ScenarioLaw::Uniform => {
                                let w = 3f64.sqrt() * std;
                                Uniform::new_inclusive(m - w, m + w)
                                    .map_err(|e| Error::OutOfRange(e.to_string()))?
                                    .sample(&mut rng)
                            }
                        }
                    };
                    u.push(v.max(0.0));
                }
            }
            let cost = match solve_recourse(&canon, &xv, &u, params)? {
                Recourse::Feasible { cost, .. } => Some(cost),
                Recourse::Infeasible => match settings.infeasible_penalty {
                    Some(p) => {
                        let (slack, _) = solve_feasibility(&canon, &xv, &u, params)?;
                        Some(p * slack)
                    }
                    None => None,
                },
            };
            Ok(ScenarioOutcome { index, cost })
        })
        .collect();
    let outcomes: Vec<ScenarioOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
    let counted: Vec<f64> = outcomes.iter().filter_map(|o| o.cost).collect();
    let average_recourse = if counted.is_empty() {
        f64::NAN
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    };
    Ok(OosResult {
        law: settings.law,
        std_multiplier: settings.std_multiplier,
        scenarios: settings.scenarios,
        first_stage_cost: first,
        average_recourse,
        average_total: first + average_recourse,
        infeasible: outcomes.iter().filter(|o| o.cost.is_none()).count(),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::toy1;
    use crate::fusion::budgets;
    use proptest::prelude::*;

    fn b(s: f64, t: f64) -> Budgets {
        Budgets {
            spatial: s,
            temporal: t,
        }
    }

    #[test]
    fn small_vertex_counts() {
        assert_eq!(enumerate_vertices(1, 1, b(1.0, 1.0)).unwrap().count(), 2);
        assert_eq!(enumerate_vertices(2, 1, b(2.0, 1.0)).unwrap().count(), 4);
        assert_eq!(enumerate_vertices(2, 1, b(1.5, 1.0)).unwrap().count(), 8);
        assert!(enumerate_vertices(3, 3, b(1.0, 1.0)).is_err());
    }

    #[test]
    fn slack_budgets_give_box_corners() {
        for (i, t) in [(1, 3), (2, 2), (2, 3), (4, 2)] {
            let list = enumerate_vertices(i, t, b(i as f64, t as f64)).unwrap();
            assert_eq!(list.count(), 1 << (i * t));
        }
    }

    fn toy_x(p: f64, up: f64, down: f64) -> FirstStageDecision {
        FirstStageDecision {
            output: vec![vec![p]],
            reserve_up: vec![vec![up]],
            reserve_down: vec![vec![down]],
            payments: vec![0.0],
            accuracies: vec![0.0],
        }
    }

    #[test]
    fn toy_bilevel() {
        let case = toy1();
        let set = build_set(&case, &[0.0]).unwrap();
        let uh = set.half_widths[0];
        let v = exact_bilevel(&case, &toy_x(50.0, uh, uh), &set, &SolverParams::default()).unwrap();
        assert!((v.value.unwrap() - 89.442_719_1).abs() < 1e-6);
        assert!(v.is_feasible());
        let v = exact_bilevel(&case, &toy_x(50.0, 0.0, uh), &set, &SolverParams::default()).unwrap();
        assert_eq!(v.certificate, Some(vec![vec![1.0]]));
        let point = build_set(&case, &[1.0]).unwrap();
        let v = exact_bilevel(&case, &toy_x(50.0, 0.0, 0.0), &point, &SolverParams::default()).unwrap();
        assert_eq!(v.value, Some(0.0));
    }

    #[test]
    fn full_search_extremes() {
        let params = SolverParams::default();
        let search = FullSearch {
            coarse: 11,
            fine: 5,
            rounds: 1,
        };
        let mut case = toy1();
        let best = exact_full(&case, &search, &params).unwrap();
        assert_eq!(best.accuracies, vec![0.0]);
        case.prediction_cost = 0.0;
        let best = exact_full(&case, &search, &params).unwrap();
        assert!((best.accuracies[0] - case.tolerances.tau_max).abs() < 1e-12);
        // m̂ = 300: interior optimum of 500 + 4 u^h + h.
        case.prediction_cost = 300.0;
        let best = exact_full(&case, &FullSearch::default(), &params).unwrap();
        assert!(best.accuracies[0] > 0.8 && best.accuracies[0] < 0.95, "{:?}", best.accuracies);
    }

    #[test]
    fn zero_spread_is_deterministic_recourse() {
        let case = toy1();
        let mut x = toy_x(48.0, 5.0, 5.0);
        x.accuracies = vec![0.0];
        let settings = OosSettings {
            std_multiplier: 0.0,
            scenarios: 16,
            ..OosSettings::default()
        };
        let r = oos_evaluate(&case, &x, &settings, &SolverParams::default()).unwrap();
        assert_eq!(r.infeasible, 0);
        assert!((r.average_recourse - 4.0).abs() < 1e-9);
        assert!((r.average_total - (480.0 + 10.0 + 4.0)).abs() < 1e-9);
    }

    #[test]
    fn sampling_is_reproducible() {
        let case = toy1();
        let mut x = toy_x(50.0, 30.0, 30.0);
        x.accuracies = vec![0.5];
        let settings = OosSettings {
            scenarios: 200,
            seed: 9,
            ..OosSettings::default()
        };
        let a = oos_evaluate(&case, &x, &settings, &SolverParams::default()).unwrap();
        let b = oos_evaluate(&case, &x, &settings, &SolverParams::default()).unwrap();
        assert_eq!(a, b);
        assert!("cauchy".parse::<ScenarioLaw>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn enumerated_points_are_distinct_vertices(i in 1usize..=2, t in 1usize..=3, d in 0.5f64..0.99, xi in 0.5f64..0.99) {
            let bud = budgets(i, t, d, xi).unwrap();
            let list = enumerate_vertices(i, t, bud).unwrap();
            let poly = NormalizedPolytope { agents: i, periods: t, budgets: bud };
            for (k, v) in list.vertices.iter().enumerate() {
                prop_assert!(is_vertex(&poly, v, 1e-9));
                prop_assert!(!list.vertices[..k].contains(v));
            }
            prop_assert!(list.count() >= 2 * i * t);
        }
    }
}
