//! Built-in instances: a one-generator toy, a two-agent case where buying
//! predictions pays off, a five-bus-style case and a seeded random generator
//! for small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    Agent, AgentKind, DispatchCase, FirstStageDecision, FixedLoad, Generator, Line, Tolerances,
};

fn generator(id: &str, horizon: usize, lines: usize) -> Generator {
    Generator {
        id: id.to_string(),
        on_status: vec![true; horizon],
        output_cost: 10.0,
        reserve_cost_up: 1.0,
        reserve_cost_down: 1.0,
        adjust_cost_up: 2.0,
        adjust_cost_down: 2.0,
        p_min: 0.0,
        p_max: 100.0,
        reserve_cap_up: 50.0,
        reserve_cap_down: 50.0,
        ramp_up: 50.0,
        ramp_down: 50.0,
        ptdf: vec![0.0; lines],
    }
}

/// One generator, one load agent, one period and an unconstrained line.
pub fn toy1() -> DispatchCase {
    DispatchCase {
        generators: vec![generator("g1", 1, 1)],
        agents: vec![Agent {
            id: "load1".into(),
            kind: AgentKind::Load,
            prior_mean: vec![50.0],
            prior_variance: 100.0,
            prediction: vec![50.0],
            truth: Some(vec![50.0]),
            ptdf: vec![0.0],
        }],
        fixed_loads: Vec::new(),
        lines: vec![Line {
            id: "l1".into(),
            capacity: 1e4,
        }],
        horizon: 1,
        delta: 0.95,
        xi: 0.95,
        prediction_cost: 1e4,
        curtailment_penalty: 100.0,
        penalty_weight: 1e4,
        tolerances: Tolerances::default(),
    }
}

/// Two uncertain loads on a single bus. Predictions equal the realized values.
/// At this price the optimal accuracies are interior (about 0.90 and 0.82) and
/// the mapping solution undercuts the zero-accuracy one.
pub fn ddu_pair() -> DispatchCase {
    let mut cheap = generator("g1", 2, 1);
    cheap.p_max = 200.0;
    cheap.output_cost = 20.0;
    cheap.reserve_cost_up = 5.0;
    cheap.reserve_cost_down = 5.0;
    cheap.adjust_cost_up = 10.0;
    cheap.adjust_cost_down = 10.0;
    cheap.reserve_cap_up = 150.0;
    cheap.reserve_cap_down = 150.0;
    cheap.ramp_up = 150.0;
    cheap.ramp_down = 150.0;
    let mut peaker = cheap.clone();
    peaker.id = "g2".into();
    peaker.output_cost = 30.0;
    peaker.reserve_cost_up = 3.0;
    peaker.reserve_cost_down = 3.0;
    peaker.adjust_cost_up = 15.0;
    peaker.adjust_cost_down = 15.0;
    let load = |id: &str, mean: [f64; 2], var: f64, truth: [f64; 2]| Agent {
        id: id.to_string(),
        kind: AgentKind::Load,
        prior_mean: mean.to_vec(),
        prior_variance: var,
        prediction: truth.to_vec(),
        truth: Some(truth.to_vec()),
        ptdf: vec![0.0],
    };
    DispatchCase {
        generators: vec![cheap, peaker],
        agents: vec![
            load("load1", [60.0, 70.0], 400.0, [66.0, 75.0]),
            load("load2", [40.0, 45.0], 225.0, [37.0, 48.0]),
        ],
        fixed_loads: vec![FixedLoad {
            id: "base".into(),
            demand: vec![80.0, 90.0],
            ptdf: vec![0.0],
        }],
        lines: vec![Line {
            id: "l1".into(),
            capacity: 1e4,
        }],
        horizon: 2,
        delta: 0.95,
        xi: 0.95,
        prediction_cost: 1e4,
        curtailment_penalty: 100.0,
        penalty_weight: 1e4,
        tolerances: Tolerances::default(),
    }
}

/// DC power-flow PTDFs for a connected network; `branches` are `(from, to, x)`
/// and bus 0 is the slack. Returns `[bus][branch]`.
fn ptdf_matrix(buses: usize, branches: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let n = buses - 1;
    let mut b = vec![vec![0.0; n]; n];
    for &(f, t, x) in branches {
        let y = 1.0 / x;
        for (i, j) in [(f, t), (t, f)] {
            if i > 0 {
                b[i - 1][i - 1] += y;
                if j > 0 {
                    b[i - 1][j - 1] -= y;
                }
            }
        }
    }
    // Gauss-Jordan inverse of the reduced susceptance matrix.
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|a, c| b[*a][col].abs().total_cmp(&b[*c][col].abs()))
            .expect("non-empty");
        b.swap(col, piv);
        inv.swap(col, piv);
        let d = b[col][col];
        for k in 0..n {
            b[col][k] /= d;
            inv[col][k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = b[r][col];
                for k in 0..n {
                    b[r][k] -= f * b[col][k];
                    inv[r][k] -= f * inv[col][k];
                }
            }
        }
    }
    let reactance = |bus: usize, k: usize| if bus == 0 { 0.0 } else { inv[bus - 1][k] };
    (0..buses)
        .map(|bus| {
            branches
                .iter()
                .map(|&(f, t, x)| {
                    if bus == 0 {
                        0.0
                    } else {
                        (reactance(f, bus - 1) - reactance(t, bus - 1)) / x
                    }
                })
                .collect()
        })
        .collect()
}

const LOAD_SHAPE: [f64; 24] = [
    0.82, 0.78, 0.76, 0.75, 0.77, 0.82, 0.90, 0.97, 1.02, 1.05, 1.07, 1.08, 1.07, 1.06, 1.05,
    1.05, 1.07, 1.10, 1.12, 1.10, 1.05, 0.98, 0.92, 0.86,
];
const WIND_SHAPE: [f64; 24] = [
    1.20, 1.25, 1.28, 1.30, 1.26, 1.18, 1.08, 0.98, 0.90, 0.84, 0.80, 0.78, 0.76, 0.78, 0.82,
    0.86, 0.90, 0.96, 1.02, 1.08, 1.12, 1.15, 1.18, 1.20,
];

/// Five-bus-style case with three generators, two wind farms, three
/// uncertain loads and three fixed loads. Generator limits and prices follow
/// the published benchmark; forecast series are synthetic.
pub fn five_bus(horizon: usize) -> DispatchCase {
    assert!((1..=24).contains(&horizon), "horizon must be 1..=24");
    let branches = [
        (0, 1, 0.0281),
        (0, 3, 0.0304),
        (0, 4, 0.0064),
        (1, 2, 0.0108),
        (2, 3, 0.0297),
        (3, 4, 0.0297),
    ];
    let ptdf = ptdf_matrix(5, &branches);
    let capacity = [900.0, 900.0, 900.0, 900.0, 900.0, 600.0];
    let lines = capacity
        .iter()
        .enumerate()
        .map(|(k, c)| Line {
            id: format!("l{}", k + 1),
            capacity: *c,
        })
        .collect();
    let gens = [
        ("g1", 0, 35.0, 280.0, 700.0, 350.0, 4.0, 45.0, 10.0),
        ("g2", 2, 30.0, 280.0, 700.0, 350.0, 4.0, 40.0, 8.0),
        ("g3", 4, 25.0, 320.0, 800.0, 400.0, 3.0, 35.0, 6.0),
    ];
    let generators = gens
        .iter()
        .map(|&(id, bus, cost, pmin, pmax, cap, res, up, down)| Generator {
            id: id.into(),
            on_status: vec![true; horizon],
            output_cost: cost,
            reserve_cost_up: res,
            reserve_cost_down: res,
            adjust_cost_up: up,
            adjust_cost_down: down,
            p_min: pmin,
            p_max: pmax,
            reserve_cap_up: cap,
            reserve_cap_down: cap,
            ramp_up: cap,
            ramp_down: cap,
            ptdf: ptdf[bus].clone(),
        })
        .collect();
    // (id, kind, bus, level, variance, realized offset, prediction error)
    let agents = [
        ("wind1", AgentKind::Res, 0, 150.0, 800.0, -0.12, 0.02),
        ("wind2", AgentKind::Res, 4, 100.0, 200.0, 0.10, -0.03),
        ("load1", AgentKind::Load, 1, 300.0, 400.0, 0.06, 0.01),
        ("load2", AgentKind::Load, 2, 300.0, 900.0, -0.08, -0.01),
        ("load3", AgentKind::Load, 3, 150.0, 100.0, 0.03, 0.02),
    ];
    let agents = agents
        .iter()
        .map(|&(id, kind, bus, level, var, offset, err)| {
            let shape = if kind == AgentKind::Res {
                &WIND_SHAPE
            } else {
                &LOAD_SHAPE
            };
            let prior: Vec<f64> = (0..horizon).map(|t| level * shape[t]).collect();
            let truth: Vec<f64> = prior
                .iter()
                .enumerate()
                .map(|(t, p)| p * (1.0 + offset * (1.0 + 0.3 * ((t as f64) * 0.9).sin())))
                .collect();
            let prediction: Vec<f64> = truth
                .iter()
                .enumerate()
                .map(|(t, u)| u * (1.0 + err * ((t as f64) * 1.3).cos()))
                .collect();
            Agent {
                id: id.into(),
                kind,
                prior_mean: prior,
                prior_variance: var,
                prediction,
                truth: Some(truth),
                ptdf: ptdf[bus].clone(),
            }
        })
        .collect();
    let fixed = [("d1", 1, 300.0), ("d2", 2, 350.0), ("d3", 3, 250.0)];
    let fixed_loads = fixed
        .iter()
        .map(|&(id, bus, level)| FixedLoad {
            id: id.into(),
            demand: (0..horizon).map(|t| level * LOAD_SHAPE[t]).collect(),
            ptdf: ptdf[bus].clone(),
        })
        .collect();
    DispatchCase {
        generators,
        agents,
        fixed_loads,
        lines,
        horizon,
        delta: 0.95,
        xi: 0.95,
        prediction_cost: 1e4,
        curtailment_penalty: 100.0,
        penalty_weight: 1e4,
        tolerances: Tolerances {
            breakpoints: 41,
            ..Tolerances::default()
        },
    }
}

/// Size limits for [`random_case`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomCaseSpec {
    pub max_agents: usize,
    pub max_horizon: usize,
    pub max_generators: usize,
    /// Upper bound on agents times periods.
    pub max_coords: usize,
}

impl Default for RandomCaseSpec {
    fn default() -> Self {
        Self {
            max_agents: 2,
            max_horizon: 3,
            max_generators: 3,
            max_coords: 6,
        }
    }
}

/// A seeded small instance whose nominal point is first-stage feasible.
pub fn random_case(seed: u64, spec: &RandomCaseSpec) -> DispatchCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents_n = rng.random_range(1..=spec.max_agents);
    let horizon_cap = (spec.max_coords / agents_n).clamp(1, spec.max_horizon);
    let horizon = rng.random_range(1..=horizon_cap);
    let gens_n = rng.random_range(1..=spec.max_generators);
    let lines_n = rng.random_range(1..=2);
    let ptdf_row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..lines_n)
            .map(|_| (rng.random_range(-0.5..0.5f64) * 100.0).round() / 100.0)
            .collect()
    };
    let generators: Vec<Generator> = (0..gens_n)
        .map(|j| {
            let p_max = rng.random_range(120.0..200.0f64).round();
            let cap = rng.random_range(30.0..80.0f64).round();
            Generator {
                id: format!("g{}", j + 1),
                on_status: vec![true; horizon],
                output_cost: rng.random_range(10.0..40.0f64).round(),
                reserve_cost_up: rng.random_range(1.0..6.0f64).round(),
                reserve_cost_down: rng.random_range(1.0..6.0f64).round(),
                adjust_cost_up: rng.random_range(2.0..20.0f64).round(),
                adjust_cost_down: rng.random_range(1.0..10.0f64).round(),
                p_min: rng.random_range(0.0..20.0f64).round(),
                p_max,
                reserve_cap_up: cap,
                reserve_cap_down: cap,
                ramp_up: rng.random_range(40.0..120.0f64).round(),
                ramp_down: rng.random_range(40.0..120.0f64).round(),
                ptdf: ptdf_row(&mut rng),
            }
        })
        .collect();
    let agents: Vec<Agent> = (0..agents_n)
        .map(|i| {
            let kind = if rng.random_bool(0.4) {
                AgentKind::Res
            } else {
                AgentKind::Load
            };
            let prior: Vec<f64> = (0..horizon)
                .map(|_| rng.random_range(20.0..60.0f64).round())
                .collect();
            let truth: Vec<f64> = prior
                .iter()
                .map(|p| p + rng.random_range(-8.0..8.0f64).round())
                .collect();
            let prediction = truth
                .iter()
                .map(|u| u + rng.random_range(-3.0..3.0f64).round())
                .collect();
            Agent {
                id: format!("a{}", i + 1),
                kind,
                prior_mean: prior,
                prior_variance: rng.random_range(20.0..150.0f64).round(),
                prediction,
                truth: Some(truth),
                ptdf: ptdf_row(&mut rng),
            }
        })
        .collect();
    let min_out: f64 = generators.iter().map(|g| g.p_min).sum();
    let max_out: f64 = generators.iter().map(|g| g.p_max).sum();
    let demand: Vec<f64> = (0..horizon)
        .map(|t| {
            let net_agents: f64 = agents
                .iter()
                .map(|a| -a.injection_sign() * a.prior_mean[t])
                .sum();
            let target = min_out + rng.random_range(0.35..0.55) * (max_out - min_out);
            (target - net_agents).max(0.0).round()
        })
        .collect();
    let fixed_loads = vec![FixedLoad {
        id: "d1".into(),
        demand,
        ptdf: ptdf_row(&mut rng),
    }];
    let lines = (0..lines_n)
        .map(|l| Line {
            id: format!("l{}", l + 1),
            capacity: rng.random_range(150.0..400.0f64).round(),
        })
        .collect();
    DispatchCase {
        generators,
        agents,
        fixed_loads,
        lines,
        horizon,
        delta: [0.8, 0.9, 0.95][rng.random_range(0..3)],
        xi: [0.8, 0.9, 0.95][rng.random_range(0..3)],
        prediction_cost: [0.0, 50.0, 500.0, 5e3, 5e4][rng.random_range(0..5)],
        curtailment_penalty: 100.0,
        penalty_weight: 1e4,
        tolerances: Tolerances::default(),
    }
}

/// Random first-stage point for `case`: outputs inside their boxes and
/// reserves anywhere in `[0, cap]`, so some draws are not robust feasible.
pub fn random_first_stage(case: &DispatchCase, seed: u64) -> FirstStageDecision {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (j, t) = (case.num_generators(), case.horizon);
    let mut x = FirstStageDecision::zeros(j, case.num_agents(), t);
    for (k, g) in case.generators.iter().enumerate() {
        for s in 0..t {
            let lo = g.lower_limit(s);
            let hi = g.upper_limit(s);
            let r_up = rng.random_range(0.0..=g.reserve_limit_up(s).min(hi - lo).max(0.0));
            let r_dn = rng.random_range(0.0..=g.reserve_limit_down(s).min(hi - lo - r_up).max(0.0));
            x.reserve_up[k][s] = r_up;
            x.reserve_down[k][s] = r_dn;
            x.output[k][s] = if hi - r_up > lo + r_dn {
                rng.random_range(lo + r_dn..=hi - r_up)
            } else {
                lo + r_dn
            };
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_validate() {
        assert!(toy1().validate().is_valid());
        assert!(ddu_pair().validate().is_valid());
        assert!(five_bus(4).validate().is_valid(), "{:?}", five_bus(4).validate());
        for seed in 0..50 {
            let case = random_case(seed, &RandomCaseSpec::default());
            assert!(case.validate().is_valid());
            assert!(case.num_agents() * case.horizon <= 6);
        }
    }

    #[test]
    fn random_cases_are_reproducible() {
        let spec = RandomCaseSpec::default();
        assert_eq!(random_case(9, &spec), random_case(9, &spec));
        let case = random_case(9, &spec);
        assert_eq!(random_first_stage(&case, 4), random_first_stage(&case, 4));
    }

    #[test]
    fn ptdf_flows_balance_at_slack() {
        // Injecting at bus b and withdrawing at the slack moves power over branches
        // such that flows out of the slack sum to minus the injection.
        let branches = [(0, 1, 0.1), (1, 2, 0.1), (0, 2, 0.2)];
        let p = ptdf_matrix(3, &branches);
        assert!(p[0].iter().all(|v| *v == 0.0));
        let out_of_slack = p[1][0] + p[1][2];
        assert!((out_of_slack + 1.0).abs() < 1e-12, "{p:?}");
    }
}
