//! Two-stage robust generation dispatch with purchased predictions.
//!
//! The operator buys prediction accuracy from renewable and load agents.
//! Better accuracy shrinks a budgeted polyhedral uncertainty set, so the set
//! depends on the first-stage decision. The problem is solved with a
//! column-and-constraint generation scheme whose cuts are stored as
//! normalized vertices and mapped back into the moving set on every master
//! solve. Brute-force oracles and an out-of-sample evaluator are included for
//! verification.

pub mod ccg;
pub mod error;
pub mod fixtures;
pub mod formulations;
pub mod fusion;
pub mod io;
pub mod mip;
pub mod model;
pub mod oracles;
pub mod sweep;

pub use ccg::{
    solve_ccg, solve_mapping_ccg, solve_traditional_ccg, CcgMode, CcgOptions, FcForm, GapRule,
    IterationRecord, IterationStatus, SolveReport, Termination,
};
pub use error::{Error, Result};
pub use formulations::{canonicalize, CanonicalTwoStage, KktOptions, VertexSignature, WorstCase};
pub use fusion::{
    budgets, build_set, fuse, prediction_cost, Budgets, DduUncertaintySet, FusionResult,
    NoiseVariance, NormalizedPolytope, TestDistribution,
};
pub use io::{parse_case, parse_report, RunManifest};
pub use mip::{LinearModel, SolveOutcome, SolveStatus, SolverParams};
pub use model::{
    Agent, AgentKind, DispatchCase, FirstStageDecision, FixedLoad, Generator, Line,
    SecondStageDecision, Tolerances, ValidationReport,
};
pub use oracles::{
    enumerate_vertices, exact_bilevel, exact_full, oos_evaluate, BilevelValue, FullOptimum,
    OosResult, OosSettings, ScenarioLaw,
};
pub use sweep::{sweep, SweepOutcome, SweepParam, SweepPoint};
