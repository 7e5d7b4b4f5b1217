//! Shared inputs for the benchmarks in `benches/`.

use rgd_core::fixtures::ddu_pair;
use rgd_core::fusion::build_set;
use rgd_core::oracles::robust_at;
use rgd_core::{canonicalize, CanonicalTwoStage, DduUncertaintySet, KktOptions, SolverParams};

/// The two-load case with its set at fixed accuracies and a robust-feasible dispatch.
pub struct Subproblem {
    pub canon: CanonicalTwoStage,
    pub x: Vec<f64>,
    pub set: DduUncertaintySet,
    pub kkt: KktOptions,
    pub params: SolverParams,
}

pub fn ddu_pair_subproblem(taus: &[f64]) -> Subproblem {
    let case = ddu_pair();
    let canon = canonicalize(&case).expect("canonical form");
    let params = SolverParams::default();
    let (_, x) = robust_at(&case, &canon, taus, &params)
        .expect("robust LP")
        .expect("robust-feasible dispatch");
    Subproblem {
        set: build_set(&case, taus).expect("set"),
        kkt: KktOptions::for_case(&case),
        canon,
        x,
        params,
    }
}
