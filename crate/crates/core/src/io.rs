//! Case files, result files and run manifests.
//!
//! Case files are JSON with units in the field names. Reports are pretty JSON,
//! iteration traces are one JSON object per line and tabular outputs are CSV
//! whose first line is a `# manifest=<file>` comment.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ccg::{IterationRecord, SolveReport};
use crate::error::{Error, Result};
use crate::fusion::half_width;
use crate::mip::SolverParams;
use crate::model::{Agent, AgentKind, DispatchCase, FixedLoad, Generator, Line, Tolerances};
use crate::oracles::OosResult;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorRecord {
    pub id: String,
    /// Defaults to on in every period.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_status: Option<Vec<bool>>,
    pub output_cost_usd_per_mwh: f64,
    pub reserve_cost_up_usd_per_mw: f64,
    pub reserve_cost_down_usd_per_mw: f64,
    pub adjust_cost_up_usd_per_mwh: f64,
    pub adjust_cost_down_usd_per_mwh: f64,
    pub p_min_mw: f64,
    pub p_max_mw: f64,
    pub reserve_cap_up_mw: f64,
    pub reserve_cap_down_mw: f64,
    pub ramp_up_mw: f64,
    pub ramp_down_mw: f64,
    pub ptdf: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentRecord {
    pub id: String,
    pub kind: AgentKind,
    pub prior_mean_mw: Vec<f64>,
    pub prior_variance_mw2: f64,
    pub prediction_mw: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_mw: Option<Vec<f64>>,
    pub ptdf: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedLoadRecord {
    pub id: String,
    pub demand_mw: Vec<f64>,
    pub ptdf: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub id: String,
    pub capacity_mw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceRecord {
    pub tau_max: f64,
    pub breakpoints: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub big_m: Option<f64>,
}

/// On-disk form of a [`DispatchCase`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub schema_version: u32,
    pub name: String,
    pub horizon: usize,
    pub delta: f64,
    pub xi: f64,
    pub prediction_cost_usd_mw2: f64,
    pub curtailment_penalty_usd_per_mwh: f64,
    pub penalty_weight_usd_per_mw2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<ToleranceRecord>,
    pub generators: Vec<GeneratorRecord>,
    pub agents: Vec<AgentRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed_loads: Vec<FixedLoadRecord>,
    pub lines: Vec<LineRecord>,
}

impl CaseFile {
    pub fn from_case(name: &str, case: &DispatchCase) -> Self {
        let tol = &case.tolerances;
        Self {
            schema_version: SCHEMA_VERSION,
            name: name.to_string(),
            horizon: case.horizon,
            delta: case.delta,
            xi: case.xi,
            prediction_cost_usd_mw2: case.prediction_cost,
            curtailment_penalty_usd_per_mwh: case.curtailment_penalty,
            penalty_weight_usd_per_mw2: case.penalty_weight,
            tolerances: Some(ToleranceRecord {
                tau_max: tol.tau_max,
                breakpoints: tol.breakpoints,
                big_m: tol.big_m_override,
            }),
            generators: case
                .generators
                .iter()
                .map(|g| GeneratorRecord {
                    id: g.id.clone(),
                    on_status: if g.on_status.iter().all(|s| *s) && g.on_status.len() == case.horizon {
                        None
                    } else {
                        Some(g.on_status.clone())
                    },
                    output_cost_usd_per_mwh: g.output_cost,
                    reserve_cost_up_usd_per_mw: g.reserve_cost_up,
                    reserve_cost_down_usd_per_mw: g.reserve_cost_down,
                    adjust_cost_up_usd_per_mwh: g.adjust_cost_up,
                    adjust_cost_down_usd_per_mwh: g.adjust_cost_down,
                    p_min_mw: g.p_min,
                    p_max_mw: g.p_max,
                    reserve_cap_up_mw: g.reserve_cap_up,
                    reserve_cap_down_mw: g.reserve_cap_down,
                    ramp_up_mw: g.ramp_up,
                    ramp_down_mw: g.ramp_down,
                    ptdf: g.ptdf.clone(),
                })
                .collect(),
            agents: case
                .agents
                .iter()
                .map(|a| AgentRecord {
                    id: a.id.clone(),
                    kind: a.kind,
                    prior_mean_mw: a.prior_mean.clone(),
                    prior_variance_mw2: a.prior_variance,
                    prediction_mw: a.prediction.clone(),
                    truth_mw: a.truth.clone(),
                    ptdf: a.ptdf.clone(),
                })
                .collect(),
            fixed_loads: case
                .fixed_loads
                .iter()
                .map(|f| FixedLoadRecord {
                    id: f.id.clone(),
                    demand_mw: f.demand.clone(),
                    ptdf: f.ptdf.clone(),
                })
                .collect(),
            lines: case
                .lines
                .iter()
                .map(|l| LineRecord {
                    id: l.id.clone(),
                    capacity_mw: l.capacity,
                })
                .collect(),
        }
    }

    /// Converts to a validated case.
    pub fn into_case(self) -> Result<DispatchCase> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidCase(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let horizon = self.horizon;
        let tolerances = match self.tolerances {
            Some(t) => Tolerances {
                tau_max: t.tau_max,
                breakpoints: t.breakpoints,
                big_m_override: t.big_m,
            },
            None => Tolerances::default(),
        };
        let case = DispatchCase {
            generators: self
                .generators
                .into_iter()
                .map(|g| Generator {
                    id: g.id,
                    on_status: g.on_status.unwrap_or_else(|| vec![true; horizon]),
                    output_cost: g.output_cost_usd_per_mwh,
                    reserve_cost_up: g.reserve_cost_up_usd_per_mw,
                    reserve_cost_down: g.reserve_cost_down_usd_per_mw,
                    adjust_cost_up: g.adjust_cost_up_usd_per_mwh,
                    adjust_cost_down: g.adjust_cost_down_usd_per_mwh,
                    p_min: g.p_min_mw,
                    p_max: g.p_max_mw,
                    reserve_cap_up: g.reserve_cap_up_mw,
                    reserve_cap_down: g.reserve_cap_down_mw,
                    ramp_up: g.ramp_up_mw,
                    ramp_down: g.ramp_down_mw,
                    ptdf: g.ptdf,
                })
                .collect(),
            agents: self
                .agents
                .into_iter()
                .map(|a| Agent {
                    id: a.id,
                    kind: a.kind,
                    prior_mean: a.prior_mean_mw,
                    prior_variance: a.prior_variance_mw2,
                    prediction: a.prediction_mw,
                    truth: a.truth_mw,
                    ptdf: a.ptdf,
                })
                .collect(),
            fixed_loads: self
                .fixed_loads
                .into_iter()
                .map(|f| FixedLoad {
                    id: f.id,
                    demand: f.demand_mw,
                    ptdf: f.ptdf,
                })
                .collect(),
            lines: self
                .lines
                .into_iter()
                .map(|l| Line {
                    id: l.id,
                    capacity: l.capacity_mw,
                })
                .collect(),
            horizon,
            delta: self.delta,
            xi: self.xi,
            prediction_cost: self.prediction_cost_usd_mw2,
            curtailment_penalty: self.curtailment_penalty_usd_per_mwh,
            penalty_weight: self.penalty_weight_usd_per_mw2,
            tolerances,
        };
        case.ensure_valid()?;
        Ok(case)
    }
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        msg: format!("column {}: {e}", e.column()),
    }
}

/// Parses and validates a case file.
pub fn parse_case(text: &str) -> Result<DispatchCase> {
    let file: CaseFile = serde_json::from_str(text).map_err(json_error)?;
    file.into_case()
}

pub fn case_to_json(name: &str, case: &DispatchCase) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&CaseFile::from_case(name, case))
        .map_err(|e| Error::Model(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// A solve report tagged with the manifest that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub schema_version: u32,
    pub manifest: String,
    pub report: SolveReport,
}

pub fn report_to_json(report: &SolveReport, manifest: &str) -> Result<String> {
    let file = ReportFile {
        schema_version: SCHEMA_VERSION,
        manifest: manifest.to_string(),
        report: report.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).map_err(|e| Error::Model(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn parse_report(text: &str) -> Result<ReportFile> {
    serde_json::from_str(text).map_err(json_error)
}

/// Writes one JSON object per iteration.
pub fn write_trace<W: Write>(out: &mut W, records: &[IterationRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Model(e.to_string()))?;
        writeln!(out, "{line}").map_err(io_error)?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<IterationRecord>> {
    let mut out = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line.map_err(io_error)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn io_error(e: std::io::Error) -> Error {
    Error::Model(format!("i/o: {e}"))
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Serializes rows as CSV under a manifest comment line.
pub fn to_csv<T: Serialize>(rows: &[T], manifest: &str) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    let body = w.into_inner().map_err(|e| Error::Model(e.to_string()))?;
    let body = String::from_utf8(body).map_err(|e| Error::Model(e.to_string()))?;
    Ok(format!("# manifest={manifest}\n{body}"))
}

/// Parses CSV written by [`to_csv`], skipping comment lines.
pub fn from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    pub k: usize,
    pub lower_bound: f64,
    pub upper_bound: Option<f64>,
    pub fc_slack: f64,
    pub status: String,
}

pub fn bounds_rows(report: &SolveReport) -> Vec<BoundsRow> {
    report
        .iterations
        .iter()
        .map(|r| BoundsRow {
            k: r.k,
            lower_bound: r.lower_bound,
            upper_bound: r.upper_bound,
            fc_slack: r.fc_slack,
            status: serde_json::to_value(r.status)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
        })
        .collect()
}

/// Per-agent accuracy, interval width `2 u^h` and payment. Empty without an incumbent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRow {
    pub agent: String,
    pub accuracy: f64,
    pub width_mw: f64,
    pub payment_usd: f64,
}

pub fn agent_rows(case: &DispatchCase, report: &SolveReport) -> Vec<AgentRow> {
    case.agents
        .iter()
        .zip(report.accuracies.iter().zip(&report.payments))
        .map(|(a, (tau, pay))| AgentRow {
            agent: a.id.clone(),
            accuracy: *tau,
            width_mw: 2.0 * half_width(a.prior_variance, *tau, case.delta),
            payment_usd: *pay,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: usize,
    pub cost: Option<f64>,
    pub feasible: bool,
}

pub fn scenario_rows(result: &OosResult) -> Vec<ScenarioRow> {
    result
        .outcomes
        .iter()
        .map(|o| ScenarioRow {
            scenario: o.index,
            cost: o.cost,
            feasible: o.cost.is_some(),
        })
        .collect()
}

/// Summary line in the shape of an out-of-sample comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OosSummaryRow {
    pub label: String,
    pub distribution: String,
    pub std_multiplier: f64,
    pub scenarios: usize,
    pub first_stage_usd: f64,
    pub average_recourse_usd: f64,
    pub average_total_usd: f64,
    pub infeasible: usize,
}

pub fn oos_summary(label: &str, r: &OosResult) -> OosSummaryRow {
    OosSummaryRow {
        label: label.to_string(),
        distribution: r.law.to_string(),
        std_multiplier: r.std_multiplier,
        scenarios: r.scenarios,
        first_stage_usd: r.first_stage_cost,
        average_recourse_usd: r.average_recourse,
        average_total_usd: r.average_total,
        infeasible: r.infeasible,
    }
}

/// Provenance of one CLI invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub solver: SolverParams,
    pub input_sha256: String,
    pub unix_time: u64,
    pub version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{ddu_pair, five_bus, toy1};

    #[test]
    fn case_round_trip() {
        for case in [toy1(), ddu_pair(), five_bus(4)] {
            let text = case_to_json("c", &case).unwrap();
            assert_eq!(parse_case(&text).unwrap(), case);
        }
    }

    #[test]
    fn unknown_field_reports_position() {
        let text = case_to_json("c", &toy1()).unwrap().replacen("\"horizon\"", "\"horizon_h\"", 1);
        match parse_case(&text) {
            Err(Error::Parse { line, msg }) => {
                assert!(line > 1);
                assert!(msg.contains("horizon_h"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_case("{\n  \"schema_version\": 1,\n  oops"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn invalid_case_is_rejected() {
        let mut file = CaseFile::from_case("c", &toy1());
        file.agents[0].prior_variance_mw2 = -1.0;
        assert!(matches!(file.into_case(), Err(Error::InvalidCase(_))));
    }

    #[test]
    fn csv_round_trip_with_manifest_line() {
        let rows = vec![
            ScenarioRow { scenario: 0, cost: Some(1.5), feasible: true },
            ScenarioRow { scenario: 1, cost: None, feasible: false },
        ];
        let text = to_csv(&rows, "manifest.json").unwrap();
        assert!(text.starts_with("# manifest=manifest.json\n"));
        assert_eq!(from_csv::<ScenarioRow>(&text).unwrap(), rows);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
