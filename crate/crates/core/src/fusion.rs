//! Forecast fusion and the decision-dependent uncertainty set.
//!
//! The operator combines its prior `(ū, σ_U²)` with an agent prediction through
//! the best linear predictor `u^e = α + τ u^pre`, where the weight `τ` is the
//! prediction accuracy `σ_U² / (σ_U² + σ_ε²)`. The residual variance
//! `σ_U² (1 - τ)` sets the half-width of a budgeted polyhedral set.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DispatchCase;

/// Variance of the agent's prediction error. `Infinite` is the limit of a
/// worthless prediction and maps to zero accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseVariance {
    Finite(f64),
    Infinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub alpha: f64,
    pub accuracy: f64,
    pub fused_center: f64,
    pub residual_variance: f64,
    pub noise_variance: NoiseVariance,
}

/// Best linear predictor of the uncertain quantity given one prediction.
pub fn fuse(
    prior_mean: f64,
    prior_variance: f64,
    noise_variance: NoiseVariance,
    prediction: f64,
) -> Result<FusionResult> {
    if !(prior_variance > 0.0) {
        return Err(Error::OutOfRange(format!(
            "prior variance must be positive, got {prior_variance}"
        )));
    }
    let accuracy = match noise_variance {
        NoiseVariance::Infinite => 0.0,
        NoiseVariance::Finite(v) if v >= 0.0 => prior_variance / (prior_variance + v),
        NoiseVariance::Finite(v) => {
            return Err(Error::OutOfRange(format!("noise variance must be >= 0, got {v}")))
        }
    };
    let alpha = (1.0 - accuracy) * prior_mean;
    Ok(FusionResult {
        alpha,
        accuracy,
        fused_center: alpha + accuracy * prediction,
        residual_variance: prior_variance * (1.0 - accuracy),
        noise_variance,
    })
}

/// Noise variance that yields accuracy `tau`. `tau = 0` is the infinite sentinel.
pub fn accuracy_to_noise(tau: f64, prior_variance: f64) -> Result<NoiseVariance> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::OutOfRange(format!(
            "accuracy must lie in [0,1) to invert, got {tau}"
        )));
    }
    if !(prior_variance > 0.0) {
        return Err(Error::OutOfRange("prior variance must be positive".into()));
    }
    if tau == 0.0 {
        return Ok(NoiseVariance::Infinite);
    }
    Ok(NoiseVariance::Finite(prior_variance * (1.0 - tau) / tau))
}

/// Accuracy implied by a noise variance.
pub fn noise_to_accuracy(noise: NoiseVariance, prior_variance: f64) -> f64 {
    match noise {
        NoiseVariance::Infinite => 0.0,
        NoiseVariance::Finite(v) => prior_variance / (prior_variance + v),
    }
}

/// Agent's cost of delivering accuracy `tau`: `(m̂/σ_U²) τ/(1-τ)`.
pub fn prediction_cost(tau: f64, prior_variance: f64, scaled_cost: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::OutOfRange(format!(
            "prediction cost needs tau in [0,1), got {tau}"
        )));
    }
    Ok(scaled_cost / prior_variance * tau / (1.0 - tau))
}

/// Half-width `sqrt(σ_U²(1-τ)/(1-δ))`.
pub fn half_width(prior_variance: f64, tau: f64, delta: f64) -> f64 {
    (prior_variance * (1.0 - tau).max(0.0) / (1.0 - delta)).sqrt()
}

/// Inverse of [`half_width`] in `tau`.
pub fn accuracy_from_half_width(prior_variance: f64, width: f64, delta: f64) -> f64 {
    1.0 - (1.0 - delta) * width * width / prior_variance
}

/// Prediction cost written in terms of the half-width.
pub fn prediction_cost_of_width(width: f64, prior_variance: f64, delta: f64, scaled_cost: f64) -> f64 {
    scaled_cost * (1.0 / ((1.0 - delta) * width * width) - 1.0 / prior_variance)
}

/// Fused center written in terms of the half-width.
pub fn center_of_width(
    width: f64,
    prior_variance: f64,
    delta: f64,
    prior_mean: f64,
    prediction: f64,
) -> f64 {
    let weight = (1.0 - delta) * width * width / prior_variance;
    weight * prior_mean + (1.0 - weight) * prediction
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub spatial: f64,
    pub temporal: f64,
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("{name} must lie in (0,1), got {p}")))
    }
}

/// Chebyshev-derived budget for a group of `n` i.i.d. normalized residuals, unclamped.
pub fn raw_budget(n: usize, delta: f64, xi: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::OutOfRange("group size must be at least 1".into()));
    }
    check_probability("δ", delta)?;
    check_probability("ξ", xi)?;
    let n = n as f64;
    Ok((n * (1.0 - delta) * (1.0 + n - n * xi) / (1.0 - xi)).sqrt())
}

/// Spatial and temporal budgets, each capped at its group size.
pub fn budgets(num_agents: usize, horizon: usize, delta: f64, xi: f64) -> Result<Budgets> {
    let spatial = raw_budget(num_agents, delta, xi)?.min(num_agents as f64);
    let temporal = raw_budget(horizon, delta, xi)?.min(horizon as f64);
    Ok(Budgets { spatial, temporal })
}

/// The normalized polytope Φ, independent of the purchased accuracies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPolytope {
    pub agents: usize,
    pub periods: usize,
    pub budgets: Budgets,
}

impl NormalizedPolytope {
    pub fn dim(&self) -> usize {
        self.agents * self.periods
    }

    /// Checks `|φ| <= 1` and both budget families. `phi` is `[i][t]`.
    pub fn contains(&self, phi: &[Vec<f64>], tol: f64) -> bool {
        if phi.len() != self.agents || phi.iter().any(|r| r.len() != self.periods) {
            return false;
        }
        if phi.iter().flatten().any(|v| v.abs() > 1.0 + tol) {
            return false;
        }
        for t in 0..self.periods {
            let s: f64 = phi.iter().map(|r| r[t].abs()).sum();
            if s > self.budgets.spatial + tol {
                return false;
            }
        }
        phi.iter()
            .all(|r| r.iter().map(|v| v.abs()).sum::<f64>() <= self.budgets.temporal + tol)
    }
}

impl NormalizedPolytope {
    /// Outward normals of the constraints active at `phi`.
    ///
    /// A tight budget contributes its sign pattern over the nonzero entries of
    /// the group plus a unit vector for every zero entry, which together span
    /// the normals of all tight sign-pattern inequalities.
    pub fn active_normals(&self, phi: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
        let (n_i, n_t) = (self.agents, self.periods);
        let idx = |i: usize, t: usize| i * n_t + t;
        let unit = |k: usize| {
            let mut e = vec![0.0; n_i * n_t];
            e[k] = 1.0;
            e
        };
        let mut out = Vec::new();
        for i in 0..n_i {
            for t in 0..n_t {
                if (phi[i][t].abs() - 1.0).abs() <= tol {
                    out.push(unit(idx(i, t)));
                }
            }
        }
        let group = |cells: Vec<(usize, usize)>, budget: f64, out: &mut Vec<Vec<f64>>| {
            let total: f64 = cells.iter().map(|&(i, t)| phi[i][t].abs()).sum();
            if (total - budget).abs() > tol {
                return;
            }
            let mut sign = vec![0.0; n_i * n_t];
            for &(i, t) in &cells {
                let v = phi[i][t];
                if v.abs() <= tol {
                    out.push(unit(idx(i, t)));
                } else {
                    sign[idx(i, t)] = v.signum();
                }
            }
            out.push(sign);
        };
        for t in 0..n_t {
            group((0..n_i).map(|i| (i, t)).collect(), self.budgets.spatial, &mut out);
        }
        for i in 0..n_i {
            group((0..n_t).map(|t| (i, t)).collect(), self.budgets.temporal, &mut out);
        }
        out
    }

    /// True when `phi` lies in Φ and its active normals have full rank.
    pub fn is_vertex(&self, phi: &[Vec<f64>], tol: f64) -> bool {
        self.contains(phi, tol) && rank(self.active_normals(phi, tol), 1e-9) == self.dim()
    }

    /// Coordinate values a vertex of Φ can take: `a + b Γ_S + c Γ_T` in `[-1, 1]`.
    pub fn lattice(&self) -> Vec<f64> {
        let n = self.dim().max(1) as i64;
        let mut out = Vec::new();
        for a in -n..=n {
            for b in -2..=2i64 {
                for c in -2..=2i64 {
                    let v = a as f64 + b as f64 * self.budgets.spatial + c as f64 * self.budgets.temporal;
                    let v = if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
                    if v.abs() <= 1.0 {
                        out.push(v);
                    }
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        out
    }

    /// Moves each coordinate to the nearest lattice value within `tol`.
    /// Returns the snapped point and whether every coordinate moved onto the lattice.
    pub fn snap(&self, phi: &[Vec<f64>], tol: f64) -> (Vec<Vec<f64>>, bool) {
        let lattice = self.lattice();
        let mut all = true;
        let snapped = phi
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| {
                        let k = lattice.partition_point(|x| *x < v);
                        let near = [k.checked_sub(1), Some(k)]
                            .into_iter()
                            .flatten()
                            .filter_map(|k| lattice.get(k))
                            .min_by(|a, b| (*a - v).abs().total_cmp(&(*b - v).abs()));
                        match near {
                            Some(x) if (x - v).abs() <= tol => *x,
                            _ => {
                                all = false;
                                v
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        (snapped, all)
    }
}

/// Numerical rank by Gaussian elimination with partial pivoting.
pub fn rank(mut rows: Vec<Vec<f64>>, tol: f64) -> usize {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..rows.len()).max_by(|a, b| rows[*a][c].abs().total_cmp(&rows[*b][c].abs()))
        else {
            break;
        };
        if rows[p][c].abs() <= tol {
            continue;
        }
        rows.swap(r, p);
        for k in r + 1..rows.len() {
            let f = rows[k][c] / rows[r][c];
            if f != 0.0 {
                for j in c..cols {
                    rows[k][j] -= f * rows[r][j];
                }
            }
        }
        r += 1;
        if r == rows.len() {
            break;
        }
    }
    r
}

/// Uncertainty set shaped by the purchased accuracies. Centers are `[i][t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DduUncertaintySet {
    pub centers: Vec<Vec<f64>>,
    pub half_widths: Vec<f64>,
    pub budgets: Budgets,
    pub delta: f64,
    pub xi: f64,
}

impl DduUncertaintySet {
    pub fn num_agents(&self) -> usize {
        self.centers.len()
    }

    pub fn horizon(&self) -> usize {
        self.centers.first().map_or(0, |c| c.len())
    }

    pub fn polytope(&self) -> NormalizedPolytope {
        NormalizedPolytope {
            agents: self.num_agents(),
            periods: self.horizon(),
            budgets: self.budgets,
        }
    }

    /// Maps a normalized point to a realization `u = u⁰ + u^h φ`.
    pub fn point(&self, phi: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.centers
            .iter()
            .zip(&self.half_widths)
            .zip(phi)
            .map(|((c, h), p)| c.iter().zip(p).map(|(c, p)| c + h * p).collect())
            .collect()
    }

    /// Lower and upper box bounds per coordinate.
    pub fn box_bounds(&self) -> Vec<Vec<(f64, f64)>> {
        self.centers
            .iter()
            .zip(&self.half_widths)
            .map(|(c, h)| c.iter().map(|c| (c - h, c + h)).collect())
            .collect()
    }

    fn normalized(&self, u: &[Vec<f64>], tol: f64) -> Option<Vec<Vec<f64>>> {
        if u.len() != self.num_agents() {
            return None;
        }
        let mut phi = Vec::with_capacity(u.len());
        for ((row, c), h) in u.iter().zip(&self.centers).zip(&self.half_widths) {
            if row.len() != c.len() {
                return None;
            }
            let mut out = Vec::with_capacity(row.len());
            for (u, c) in row.iter().zip(c) {
                let dev = u - c;
                if *h > 0.0 {
                    out.push(dev / h);
                } else if dev.abs() <= tol {
                    out.push(0.0);
                } else {
                    return None;
                }
            }
            phi.push(out);
        }
        Some(phi)
    }

    pub fn contains(&self, u: &[Vec<f64>], tol: f64) -> bool {
        match self.normalized(u, tol) {
            Some(phi) => self.polytope().contains(&phi, tol),
            None => false,
        }
    }

    /// Normalized coordinates `φ = (u - u⁰)/u^h` of a member point.
    pub fn signature(&self, u: &[Vec<f64>], tol: f64) -> Result<Vec<Vec<f64>>> {
        let phi = self.normalized(u, tol).ok_or_else(|| {
            Error::OffPolytope("dimension mismatch or deviation on a zero-width coordinate".into())
        })?;
        if !self.polytope().contains(&phi, tol) {
            return Err(Error::OffPolytope("normalized point violates Φ".into()));
        }
        Ok(phi)
    }
}

/// Builds the set for per-agent accuracies `taus` (each in `[0,1]`).
pub fn build_set(case: &DispatchCase, taus: &[f64]) -> Result<DduUncertaintySet> {
    if taus.len() != case.num_agents() {
        return Err(Error::Dimension("one accuracy per agent".into()));
    }
    let mut centers = Vec::with_capacity(taus.len());
    let mut half_widths = Vec::with_capacity(taus.len());
    for (agent, &tau) in case.agents.iter().zip(taus) {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::OutOfRange(format!("accuracy must lie in [0,1], got {tau}")));
        }
        let noise = if tau == 1.0 {
            NoiseVariance::Finite(0.0)
        } else {
            accuracy_to_noise(tau, agent.prior_variance)?
        };
        let mut row = Vec::with_capacity(case.horizon);
        let mut residual = 0.0;
        for (mean, pred) in agent.prior_mean.iter().zip(&agent.prediction) {
            let fused = fuse(*mean, agent.prior_variance, noise, *pred)?;
            residual = fused.residual_variance;
            row.push(fused.fused_center);
        }
        centers.push(row);
        half_widths.push((residual / (1.0 - case.delta)).sqrt());
    }
    Ok(DduUncertaintySet {
        centers,
        half_widths,
        budgets: budgets(case.num_agents(), case.horizon, case.delta, case.xi)?,
        delta: case.delta,
        xi: case.xi,
    })
}

/// Laws for the normalized residual `η/sqrt(var η)` used to probe the budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestDistribution {
    /// Mass `(1-δ)/2` at `±1/sqrt(1-δ)`, rest at zero. Attains the per-coordinate bound.
    ThreePointTight,
    /// `±1` with equal probability.
    Rademacher,
    /// Mass `p` at `±a`, parameterized by `ξ` and the group size.
    ThreePointXi,
    PointMassZero,
    /// `±1/sqrt(1-δ)`: variance above one, violates the modelling assumptions.
    InflatedRademacher,
}

impl TestDistribution {
    pub const STANDARD: [TestDistribution; 3] = [
        TestDistribution::ThreePointTight,
        TestDistribution::Rademacher,
        TestDistribution::ThreePointXi,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            TestDistribution::ThreePointTight => "three_point_tight",
            TestDistribution::Rademacher => "rademacher",
            TestDistribution::ThreePointXi => "three_point_xi",
            TestDistribution::PointMassZero => "point_mass_zero",
            TestDistribution::InflatedRademacher => "inflated_rademacher",
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, group: usize, delta: f64, xi: f64) -> f64 {
        let sign = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
        match self {
            TestDistribution::ThreePointTight => {
                if rng.random::<f64>() < 1.0 - delta {
                    sign(rng) / (1.0 - delta).sqrt()
                } else {
                    0.0
                }
            }
            TestDistribution::Rademacher => sign(rng),
            TestDistribution::ThreePointXi => {
                let n = group as f64;
                let a = ((1.0 + n - n * xi) / (n * (1.0 - xi))).sqrt();
                let p = n * (1.0 - xi) / (2.0 * (1.0 + n - n * xi));
                if rng.random::<f64>() < 2.0 * p {
                    sign(rng) * a
                } else {
                    0.0
                }
            }
            TestDistribution::PointMassZero => 0.0,
            TestDistribution::InflatedRademacher => sign(rng) / (1.0 - delta).sqrt(),
        }
    }
}

impl fmt::Display for TestDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TestDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            TestDistribution::ThreePointTight,
            TestDistribution::Rademacher,
            TestDistribution::ThreePointXi,
            TestDistribution::PointMassZero,
            TestDistribution::InflatedRademacher,
        ]
        .into_iter()
        .find(|d| d.id() == s)
        .ok_or_else(|| Error::UnknownDistribution(s.to_string()))
    }
}

/// Empirical exceedance frequencies against the Chebyshev bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChebyshevReport {
    pub distribution: TestDistribution,
    pub group_size: usize,
    pub samples: usize,
    pub budget: f64,
    /// Pooled frequency of `v >= 1` over all coordinates.
    pub p_single: f64,
    /// Frequency of `Σ v >= Γ` over groups.
    pub p_sum: f64,
    pub bound_single: f64,
    pub bound_sum: f64,
}

impl ChebyshevReport {
    fn slack(p: f64, n: usize) -> f64 {
        3.0 * (p * (1.0 - p) / n as f64).sqrt()
    }

    pub fn single_ok(&self) -> bool {
        self.p_single <= self.bound_single + Self::slack(self.bound_single, self.samples)
    }

    pub fn sum_ok(&self) -> bool {
        self.p_sum <= self.bound_sum + Self::slack(self.bound_sum, self.samples)
    }

    pub fn passes(&self) -> bool {
        self.single_ok() && self.sum_ok()
    }
}

/// Samples groups of normalized residuals and measures how often the
/// per-coordinate and summed deviations exceed the set's limits.
///
/// The summed check uses the unclamped budget, which is the quantity the
/// Chebyshev argument bounds.
pub fn chebyshev_bound_check(
    distribution: TestDistribution,
    group_size: usize,
    delta: f64,
    xi: f64,
    samples: usize,
    seed: u64,
) -> Result<ChebyshevReport> {
    let budget = raw_budget(group_size, delta, xi)?;
    if samples == 0 {
        return Err(Error::OutOfRange("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (1.0 - delta).sqrt();
    let (mut single_hits, mut sum_hits) = (0usize, 0usize);
    // A tiny guard keeps v = 1 exactly from being lost to rounding.
    let eps = 1e-12;
    for _ in 0..samples {
        let mut total = 0.0;
        for _ in 0..group_size {
            let v = (distribution.sample(&mut rng, group_size, delta, xi) * scale).abs();
            if v >= 1.0 - eps {
                single_hits += 1;
            }
            total += v;
        }
        if total >= budget - eps {
            sum_hits += 1;
        }
    }
    Ok(ChebyshevReport {
        distribution,
        group_size,
        samples,
        budget,
        p_single: single_hits as f64 / (samples * group_size) as f64,
        p_sum: sum_hits as f64 / samples as f64,
        bound_single: 1.0 - delta,
        bound_sum: 1.0 - xi,
    })
}

/// Sample moments of the fused residual `U - U^e`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OrthogonalityReport {
    pub mean_residual: f64,
    pub mean_std_error: f64,
    pub covariance: f64,
    pub covariance_std_error: f64,
}

impl OrthogonalityReport {
    pub fn within(&self, sigmas: f64) -> bool {
        self.mean_residual.abs() <= sigmas * self.mean_std_error
            && self.covariance.abs() <= sigmas * self.covariance_std_error
    }
}

/// Monte Carlo check that the fused residual has zero mean and is
/// uncorrelated with the prediction, with Gaussian `U` and independent noise.
pub fn orthogonality_check(
    prior_mean: f64,
    prior_variance: f64,
    noise_variance: f64,
    samples: usize,
    seed: u64,
) -> Result<OrthogonalityReport> {
    if samples < 2 {
        return Err(Error::OutOfRange("need at least two samples".into()));
    }
    let fused = fuse(prior_mean, prior_variance, NoiseVariance::Finite(noise_variance), 0.0)?;
    let truth = Normal::new(prior_mean, prior_variance.sqrt())
        .map_err(|e| Error::OutOfRange(e.to_string()))?;
    let noise =
        Normal::new(0.0, noise_variance.sqrt()).map_err(|e| Error::OutOfRange(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples as f64;
    let mut residuals = Vec::with_capacity(samples);
    let mut predictions = Vec::with_capacity(samples);
    for _ in 0..samples {
        let u = truth.sample(&mut rng);
        let pre = u - noise.sample(&mut rng);
        residuals.push(u - (fused.alpha + fused.accuracy * pre));
        predictions.push(pre);
    }
    let mean_r = residuals.iter().sum::<f64>() / n;
    let mean_p = predictions.iter().sum::<f64>() / n;
    let var_r = residuals.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / (n - 1.0);
    let products: Vec<f64> = residuals
        .iter()
        .zip(&predictions)
        .map(|(r, p)| (r - mean_r) * (p - mean_p))
        .collect();
    let cov = products.iter().sum::<f64>() / (n - 1.0);
    let var_prod = products.iter().map(|x| (x - cov).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(OrthogonalityReport {
        mean_residual: mean_r,
        mean_std_error: (var_r / n).sqrt(),
        covariance: cov,
        covariance_std_error: (var_prod / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::toy1;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_is_adopted() {
        let r = fuse(50.0, 100.0, NoiseVariance::Finite(0.0), 60.0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.fused_center, 60.0);
        assert_eq!(r.residual_variance, 0.0);
    }

    #[test]
    fn worthless_prediction_is_ignored() {
        let r = fuse(50.0, 100.0, NoiseVariance::Infinite, 60.0).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.fused_center, 50.0);
        assert_eq!(r.residual_variance, 100.0);
    }

    #[test]
    fn fuse_hand_values() {
        let r = fuse(100.0, 8000.0, NoiseVariance::Finite(2000.0), 120.0).unwrap();
        assert!((r.accuracy - 0.8).abs() < 1e-12);
        assert!((r.fused_center - 116.0).abs() < 1e-9);
        assert!((r.residual_variance - 1600.0).abs() < 1e-9);
        let two_term = (1.0 - r.accuracy).powi(2) * 8000.0 + r.accuracy.powi(2) * 2000.0;
        assert!((two_term - r.residual_variance).abs() < 1e-9);
    }

    #[test]
    fn fuse_rejects_nonpositive_prior() {
        assert!(fuse(0.0, 0.0, NoiseVariance::Infinite, 0.0).is_err());
    }

    #[test]
    fn noise_inversion() {
        assert_eq!(accuracy_to_noise(0.5, 8000.0).unwrap(), NoiseVariance::Finite(8000.0));
        match accuracy_to_noise(0.8, 8000.0).unwrap() {
            NoiseVariance::Finite(v) => assert!((v - 2000.0).abs() < 1e-9),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(accuracy_to_noise(0.0, 8000.0).unwrap(), NoiseVariance::Infinite);
        assert!(accuracy_to_noise(1.0, 8000.0).is_err());
        assert!(accuracy_to_noise(-0.1, 8000.0).is_err());
    }

    #[test]
    fn prediction_cost_hand_values() {
        assert_eq!(prediction_cost(0.0, 8000.0, 2.4e5).unwrap(), 0.0);
        assert!((prediction_cost(0.5, 8000.0, 2.4e5).unwrap() - 30.0).abs() < 1e-9);
        assert!((prediction_cost(0.9, 8000.0, 2.4e5).unwrap() - 270.0).abs() < 1e-9);
        assert!(prediction_cost(1.0, 8000.0, 2.4e5).is_err());
    }

    #[test]
    fn budget_hand_values() {
        let b = budgets(5, 24, 0.95, 0.95).unwrap();
        assert!((b.spatial - 2.5).abs() < 1e-12);
        assert!((b.temporal - 52.8f64.sqrt()).abs() < 1e-12);
        let single = budgets(1, 1, 0.95, 0.95).unwrap();
        assert!((raw_budget(1, 0.95, 0.95).unwrap() - 1.05f64.sqrt()).abs() < 1e-12);
        assert_eq!(single.spatial, 1.0);
        assert!(budgets(1, 1, 1.0, 0.5).is_err());
    }

    #[test]
    fn width_form_matches_accuracy_form() {
        let (var, delta, cost) = (8000.0, 0.95, 2.4e5);
        for tau in [0.0, 0.3, 0.9, 0.999] {
            let w = half_width(var, tau, delta);
            assert!((accuracy_from_half_width(var, w, delta) - tau).abs() < 1e-12);
            let h = prediction_cost(tau, var, cost).unwrap();
            let hw = prediction_cost_of_width(w, var, delta, cost);
            assert!((h - hw).abs() <= 1e-9 * h.max(1.0));
            let fused = fuse(100.0, var, accuracy_to_noise(tau, var).unwrap(), 130.0).unwrap();
            assert!((center_of_width(w, var, delta, 100.0, 130.0) - fused.fused_center).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_accuracy_collapses_the_set() {
        let case = toy1();
        let set = build_set(&case, &[1.0]).unwrap();
        assert_eq!(set.half_widths, vec![0.0]);
        assert_eq!(set.centers[0], case.agents[0].prediction);
        assert!(set.contains(&set.centers, 1e-9));
        let mut off = set.centers.clone();
        off[0][0] += 1.0;
        assert!(!set.contains(&off, 1e-9));
        assert!(set.signature(&off, 1e-9).is_err());
    }

    #[test]
    fn zero_accuracy_keeps_the_prior() {
        let case = toy1();
        let set = build_set(&case, &[0.0]).unwrap();
        assert_eq!(set.centers[0], case.agents[0].prior_mean);
        assert!((set.half_widths[0] - 2000f64.sqrt()).abs() < 1e-12);
        assert!((set.half_widths[0] - 44.721).abs() < 1e-3);
    }

    #[test]
    fn membership_and_signature() {
        let case = toy1();
        let set = build_set(&case, &[0.0]).unwrap();
        let phi = set.signature(&set.centers, 1e-9).unwrap();
        assert_eq!(phi, vec![vec![0.0]]);
        let up = vec![vec![set.centers[0][0] + set.half_widths[0]]];
        assert!(set.contains(&up, 1e-9));
        assert!((set.signature(&up, 1e-9).unwrap()[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn budget_excludes_box_corner() {
        let set = DduUncertaintySet {
            centers: vec![vec![0.0], vec![0.0]],
            half_widths: vec![1.0, 1.0],
            budgets: Budgets { spatial: 1.5, temporal: 1.0 },
            delta: 0.95,
            xi: 0.95,
        };
        assert!(!set.contains(&[vec![1.0], vec![1.0]], 1e-9));
        assert!(set.contains(&[vec![1.0], vec![0.5]], 1e-9));
    }

    fn square(spatial: f64) -> NormalizedPolytope {
        NormalizedPolytope {
            agents: 2,
            periods: 1,
            budgets: Budgets { spatial, temporal: 1.0 },
        }
    }

    #[test]
    fn vertex_rank_test() {
        let p = square(1.5);
        assert!(p.is_vertex(&[vec![1.0], vec![0.5]], 1e-9));
        assert!(p.is_vertex(&[vec![-0.5], vec![1.0]], 1e-9));
        assert!(!p.is_vertex(&[vec![1.0], vec![0.25]], 1e-9));
        assert!(!p.is_vertex(&[vec![0.0], vec![0.0]], 1e-9));
        let boxy = square(2.0);
        assert!(boxy.is_vertex(&[vec![1.0], vec![-1.0]], 1e-9));
        let segment = NormalizedPolytope {
            agents: 1,
            periods: 1,
            budgets: Budgets { spatial: 1.0, temporal: 1.0 },
        };
        assert!(segment.is_vertex(&[vec![-1.0]], 1e-9));
    }

    #[test]
    fn snapping_to_lattice() {
        let p = square(1.5);
        let (s, all) = p.snap(&[vec![0.999_999_5], vec![0.500_003]], 1e-5);
        assert!(all);
        assert_eq!(s, vec![vec![1.0], vec![0.5]]);
        let (_, all) = p.snap(&[vec![0.3], vec![0.5]], 1e-5);
        assert!(!all);
    }

    #[test]
    fn rank_of_dependent_rows() {
        assert_eq!(rank(vec![vec![1.0, 1.0], vec![2.0, 2.0]], 1e-12), 1);
        assert_eq!(rank(vec![vec![1.0, 0.0], vec![1.0, 1.0]], 1e-12), 2);
        assert_eq!(rank(Vec::new(), 1e-12), 0);
    }

    #[test]
    fn tight_three_point_law_hits_the_bound() {
        let r = chebyshev_bound_check(TestDistribution::ThreePointTight, 5, 0.95, 0.95, 20_000, 7)
            .unwrap();
        assert!((r.p_single - 0.05).abs() < 0.01, "{r:?}");
        assert!(r.passes());
    }

    #[test]
    fn rademacher_sum_never_reaches_budget() {
        let r = chebyshev_bound_check(TestDistribution::Rademacher, 5, 0.95, 0.95, 5_000, 1).unwrap();
        assert!(r.budget > 5.0 * 0.05f64.sqrt());
        assert_eq!(r.p_sum, 0.0);
    }

    #[test]
    fn point_mass_never_exceeds() {
        let r = chebyshev_bound_check(TestDistribution::PointMassZero, 3, 0.9, 0.8, 1_000, 3).unwrap();
        assert_eq!(r.p_single, 0.0);
        assert_eq!(r.p_sum, 0.0);
    }

    #[test]
    fn inflated_law_fails() {
        let r = chebyshev_bound_check(TestDistribution::InflatedRademacher, 5, 0.95, 0.95, 2_000, 3)
            .unwrap();
        assert!(!r.passes());
    }

    #[test]
    fn unknown_distribution_id() {
        assert!(matches!(
            "cauchy".parse::<TestDistribution>(),
            Err(Error::UnknownDistribution(_))
        ));
        assert_eq!("three_point_xi".parse::<TestDistribution>().unwrap(), TestDistribution::ThreePointXi);
    }

    proptest! {
        #[test]
        fn residual_variance_shrinks(var in 1e-3f64..1e5, tau in 0.0f64..1.0) {
            let noise = accuracy_to_noise(tau, var).unwrap();
            let r = fuse(10.0, var, noise, 20.0).unwrap();
            prop_assert!(r.residual_variance <= var);
            if tau > 0.0 {
                prop_assert!(r.residual_variance < var);
            }
        }

        #[test]
        fn accuracy_round_trip(var in 1e-2f64..1e5, tau in 1e-6f64..0.999) {
            let noise = accuracy_to_noise(tau, var).unwrap();
            prop_assert!((noise_to_accuracy(noise, var) - tau).abs() < 1e-12);
        }

        #[test]
        fn cost_is_midpoint_convex(a in 0.0f64..0.99, b in 0.0f64..0.99, var in 1.0f64..1e4) {
            let h = |t| prediction_cost(t, var, 2.4e5).unwrap();
            let mid = h((a + b) / 2.0);
            prop_assert!(mid <= (h(a) + h(b)) / 2.0 + 1e-9 * mid.abs().max(1.0));
        }

        #[test]
        fn sets_shrink_with_accuracy(lo in 0.0f64..1.0, step in 0.0f64..1.0) {
            let hi = lo + (1.0 - lo) * step;
            let case = toy1();
            let a = build_set(&case, &[lo]).unwrap();
            let b = build_set(&case, &[hi]).unwrap();
            prop_assert!(b.half_widths[0] <= a.half_widths[0] + 1e-12);
        }
    }
}
