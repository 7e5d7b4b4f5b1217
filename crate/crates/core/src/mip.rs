//! A small linear / mixed-integer model representation with a HiGHS backend.
//!
//! Models are built in memory, can be dumped to and parsed from a plain
//! LP-style text format, and are solved through [`solve`]. Two reusable
//! linearizations live here as well: big-M complementarity and a
//! convex-combination piecewise-linear encoding.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use highs::{HighsModelStatus, RowProblem, Sense as HighsSense};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor and ceiling applied to bound-derived big-M constants.
pub const BIG_M_FLOOR: f64 = 1e3;
pub const BIG_M_CEIL: f64 = 1e7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub kind: VarKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSense {
    Le,
    Ge,
    Eq,
}

impl RowSense {
    fn symbol(&self) -> &'static str {
        match self {
            RowSense::Le => "<=",
            RowSense::Ge => ">=",
            RowSense::Eq => "=",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjSense {
    Minimize,
    Maximize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    pub terms: Vec<(VarId, f64)>,
    pub sense: RowSense,
    pub rhs: f64,
}

/// Affine expression `Σ a_k x_k + constant`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(value: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: value,
        }
    }

    pub fn term(mut self, var: VarId, coef: f64) -> Self {
        self.terms.push((var, coef));
        self
    }

    pub fn plus(mut self, value: f64) -> Self {
        self.constant += value;
        self
    }

    pub fn push(&mut self, var: VarId, coef: f64) {
        self.terms.push((var, coef));
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) {
        self.terms
            .extend(other.terms.iter().map(|(v, c)| (*v, c * scale)));
        self.constant += other.constant * scale;
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(v, c)| c * values[v.0]).sum::<f64>()
    }
}

impl From<VarId> for LinExpr {
    fn from(v: VarId) -> Self {
        LinExpr::new().term(v, 1.0)
    }
}

/// Sums duplicate variables, keeping first-occurrence order and dropping zeros.
fn merge_terms(terms: &[(VarId, f64)]) -> Vec<(VarId, f64)> {
    let mut index: HashMap<VarId, usize> = HashMap::new();
    let mut out: Vec<(VarId, f64)> = Vec::with_capacity(terms.len());
    for &(v, c) in terms {
        match index.get(&v) {
            Some(&k) => out[k].1 += c,
            None => {
                index.insert(v, out.len());
                out.push((v, c));
            }
        }
    }
    out.retain(|(_, c)| *c != 0.0);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub name: String,
    pub sense: ObjSense,
    pub objective: Vec<(VarId, f64)>,
    pub offset: f64,
    pub variables: Vec<Variable>,
    pub constraints: Vec<Constraint>,
    pub groups: BTreeMap<String, Vec<VarId>>,
}

impl LinearModel {
    pub fn new(name: impl Into<String>, sense: ObjSense) -> Self {
        Self {
            name: name.into(),
            sense,
            objective: Vec::new(),
            offset: 0.0,
            variables: Vec::new(),
            constraints: Vec::new(),
            groups: BTreeMap::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn num_binaries(&self) -> usize {
        self.variables
            .iter()
            .filter(|v| v.kind == VarKind::Binary)
            .count()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> VarId {
        let id = VarId(self.variables.len());
        self.variables.push(Variable {
            name: name.into(),
            lower,
            upper,
            kind: VarKind::Continuous,
        });
        id
    }

    pub fn add_free(&mut self, name: impl Into<String>) -> VarId {
        self.add_var(name, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn add_binary(&mut self, name: impl Into<String>) -> VarId {
        let id = VarId(self.variables.len());
        self.variables.push(Variable {
            name: name.into(),
            lower: 0.0,
            upper: 1.0,
            kind: VarKind::Binary,
        });
        id
    }

    pub fn var(&self, id: VarId) -> &Variable {
        &self.variables[id.0]
    }

    pub fn set_bounds(&mut self, id: VarId, lower: f64, upper: f64) {
        let v = &mut self.variables[id.0];
        v.lower = lower;
        v.upper = upper;
    }

    /// Adds `expr sense rhs`; the expression constant moves to the right-hand side.
    pub fn add_constraint(
        &mut self,
        name: impl Into<String>,
        expr: &LinExpr,
        sense: RowSense,
        rhs: f64,
    ) -> usize {
        self.constraints.push(Constraint {
            name: name.into(),
            terms: merge_terms(&expr.terms),
            sense,
            rhs: rhs - expr.constant,
        });
        self.constraints.len() - 1
    }

    pub fn set_objective(&mut self, sense: ObjSense, expr: &LinExpr) {
        self.sense = sense;
        self.objective = merge_terms(&expr.terms);
        self.offset = expr.constant;
    }

    /// Adds `coef * var` to the objective.
    pub fn add_objective_term(&mut self, var: VarId, coef: f64) {
        self.objective.push((var, coef));
        self.objective = merge_terms(&self.objective);
    }

    pub fn add_to_group(&mut self, group: &str, var: VarId) {
        self.groups.entry(group.to_string()).or_default().push(var);
    }

    pub fn group(&self, group: &str) -> &[VarId] {
        self.groups.get(group).map_or(&[], |g| g.as_slice())
    }

    /// Interval bounds of an expression over the variable box.
    pub fn expr_range(&self, expr: &LinExpr) -> (f64, f64) {
        let (mut lo, mut hi) = (expr.constant, expr.constant);
        for &(v, c) in &expr.terms {
            let var = &self.variables[v.0];
            if c == 0.0 {
                continue;
            }
            if c > 0.0 {
                lo += c * var.lower;
                hi += c * var.upper;
            } else {
                lo += c * var.upper;
                hi += c * var.lower;
            }
        }
        (lo, hi)
    }

    pub fn objective_value(&self, values: &[f64]) -> f64 {
        self.offset
            + self
                .objective
                .iter()
                .map(|(v, c)| c * values[v.0])
                .sum::<f64>()
    }

    /// Largest bound or row violation of `values`.
    pub fn max_violation(&self, values: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (v, x) in self.variables.iter().zip(values) {
            worst = worst.max(v.lower - x).max(x - v.upper);
        }
        for c in &self.constraints {
            let lhs: f64 = c.terms.iter().map(|(v, a)| a * values[v.0]).sum();
            let viol = match c.sense {
                RowSense::Le => lhs - c.rhs,
                RowSense::Ge => c.rhs - lhs,
                RowSense::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(viol);
        }
        worst
    }

    /// Structural checks: references, bound order, binary bounds, unique names.
    pub fn check(&self) -> Result<()> {
        let n = self.variables.len();
        let mut names = HashMap::new();
        for (k, v) in self.variables.iter().enumerate() {
            if v.lower.is_nan() || v.upper.is_nan() || v.lower > v.upper {
                return Err(Error::Model(format!("variable {}: bad bounds", v.name)));
            }
            if v.kind == VarKind::Binary && (v.lower < 0.0 || v.upper > 1.0) {
                return Err(Error::Model(format!("binary {} outside [0,1]", v.name)));
            }
            if v.name.is_empty() || v.name.contains(char::is_whitespace) || v.name.contains(':') {
                return Err(Error::Model(format!("variable name `{}` is not a token", v.name)));
            }
            if names.insert(v.name.as_str(), k).is_some() {
                return Err(Error::Model(format!("duplicate variable name {}", v.name)));
            }
        }
        let in_rows = self.constraints.iter().flat_map(|c| c.terms.iter().map(|t| t.0));
        let in_obj = self.objective.iter().map(|t| t.0);
        let in_groups = self.groups.values().flatten().copied();
        if let Some(v) = in_rows.chain(in_obj).chain(in_groups).find(|v| v.0 >= n) {
            return Err(Error::Model(format!("reference to undeclared variable {}", v.0)));
        }
        for c in &self.constraints {
            if c.rhs.is_nan() || c.terms.iter().any(|(_, a)| !a.is_finite()) {
                return Err(Error::Model(format!("constraint {}: non-finite data", c.name)));
            }
        }
        Ok(())
    }
}

/// Big-M for a nonnegative quantity whose interval upper bound is `upper`:
/// the bound itself plus a small margin, capped at [`BIG_M_CEIL`].
pub fn big_m(upper: f64, override_value: Option<f64>) -> f64 {
    if let Some(m) = override_value {
        return m;
    }
    if upper.is_finite() {
        (upper.max(0.0) * (1.0 + 1e-6) + 1e-6).min(BIG_M_CEIL)
    } else {
        BIG_M_CEIL
    }
}

/// Encodes `0 <= dual ⊥ slack >= 0` with a fresh binary `z`:
/// `slack <= m_slack z` and `dual <= m_dual (1 - z)`.
///
/// Nonnegativity of both sides must already hold in the model.
pub fn add_complementarity(
    model: &mut LinearModel,
    name: &str,
    slack: &LinExpr,
    dual: VarId,
    m_slack: f64,
    m_dual: f64,
) -> Result<VarId> {
    if !(m_slack > 0.0 && m_dual > 0.0) {
        return Err(Error::Model(format!(
            "{name}: big-M values must be positive, got {m_slack} and {m_dual}"
        )));
    }
    let z = model.add_binary(format!("{name}_z"));
    let mut row = slack.clone();
    row.push(z, -m_slack);
    model.add_constraint(format!("{name}_s"), &row, RowSense::Le, 0.0);
    let row = LinExpr::from(dual).term(z, m_dual);
    model.add_constraint(format!("{name}_d"), &row, RowSense::Le, m_dual);
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BreakpointGrid {
    Uniform,
    /// Geometric spacing, denser near the lower end. Needs `lo > 0`.
    Geometric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PiecewiseEncoding {
    /// Weights only. Exact for convex functions that are minimized.
    ConvexCombination,
    /// Weights plus adjacency binaries; exact interpolation for any function.
    Sos2,
}

/// Handle to a piecewise-linear block built by [`add_piecewise`].
#[derive(Clone, Debug, PartialEq)]
pub struct Piecewise {
    pub input: VarId,
    pub output: VarId,
    pub weights: Vec<VarId>,
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest gap between the interpolant and `f`, scanned between breakpoints.
    pub max_error: f64,
}

impl Piecewise {
    /// Interpolant value at `v` (clamped to the domain).
    pub fn interpolate(&self, v: f64) -> f64 {
        interpolate(&self.breakpoints, &self.values, v)
    }
}

/// Breakpoints for `[lo, hi]`.
pub fn breakpoints(lo: f64, hi: f64, n: usize, grid: BreakpointGrid) -> Vec<f64> {
    let last = (n - 1) as f64;
    let mut out: Vec<f64> = match grid {
        BreakpointGrid::Geometric if lo > 0.0 => {
            let ratio = hi / lo;
            (0..n).map(|k| lo * ratio.powf(k as f64 / last)).collect()
        }
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / last).collect(),
    };
    out[0] = lo;
    out[n - 1] = hi;
    if n % 2 == 1 && grid == BreakpointGrid::Uniform && lo == -hi {
        out[n / 2] = 0.0;
    }
    out
}

pub fn interpolate(xs: &[f64], ys: &[f64], v: f64) -> f64 {
    let v = v.clamp(xs[0], xs[xs.len() - 1]);
    let k = match xs.partition_point(|x| *x <= v) {
        0 => 0,
        k if k >= xs.len() => xs.len() - 2,
        k => k - 1,
    };
    let w = if xs[k + 1] > xs[k] {
        (v - xs[k]) / (xs[k + 1] - xs[k])
    } else {
        0.0
    };
    ys[k] + w * (ys[k + 1] - ys[k])
}

/// Largest `|interpolant - f|` over a fine scan of each segment.
pub fn interpolation_error(xs: &[f64], ys: &[f64], f: &dyn Fn(f64) -> f64) -> f64 {
    const SCAN: usize = 32;
    let mut worst: f64 = 0.0;
    for k in 0..xs.len() - 1 {
        for s in 1..SCAN {
            let w = s as f64 / SCAN as f64;
            let v = xs[k] + w * (xs[k + 1] - xs[k]);
            let lin = ys[k] + w * (ys[k + 1] - ys[k]);
            worst = worst.max((lin - f(v)).abs());
        }
    }
    worst
}

/// Adds an input variable on `[lo, hi]` and an output equal to the piecewise
/// interpolant of `f` through `n` breakpoints, using convex-combination weights.
#[allow(clippy::too_many_arguments)]
pub fn add_piecewise(
    model: &mut LinearModel,
    name: &str,
    f: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    n: usize,
    grid: BreakpointGrid,
    encoding: PiecewiseEncoding,
) -> Result<Piecewise> {
    if !(lo < hi) || n < 2 {
        return Err(Error::Model(format!(
            "{name}: need lo < hi and at least two breakpoints"
        )));
    }
    let xs = breakpoints(lo, hi, n, grid);
    let ys: Vec<f64> = xs.iter().map(|x| f(*x)).collect();
    if let Some(k) = ys.iter().position(|y| !y.is_finite()) {
        return Err(Error::Model(format!(
            "{name}: f is not finite at breakpoint {}",
            xs[k]
        )));
    }
    let input = model.add_var(format!("{name}_in"), lo, hi);
    let output = model.add_free(format!("{name}_out"));
    let weights: Vec<VarId> = (0..n)
        .map(|k| model.add_var(format!("{name}_w{k}"), 0.0, 1.0))
        .collect();
    let mut sum = LinExpr::new();
    let mut arg = LinExpr::from(input);
    let mut val = LinExpr::from(output);
    for (k, w) in weights.iter().enumerate() {
        sum.push(*w, 1.0);
        arg.push(*w, -xs[k]);
        val.push(*w, -ys[k]);
    }
    model.add_constraint(format!("{name}_sum"), &sum, RowSense::Eq, 1.0);
    model.add_constraint(format!("{name}_arg"), &arg, RowSense::Eq, 0.0);
    model.add_constraint(format!("{name}_val"), &val, RowSense::Eq, 0.0);
    if encoding == PiecewiseEncoding::Sos2 && n > 2 {
        let segs: Vec<VarId> = (0..n - 1)
            .map(|s| model.add_binary(format!("{name}_seg{s}")))
            .collect();
        let one = segs.iter().fold(LinExpr::new(), |e, z| e.term(*z, 1.0));
        model.add_constraint(format!("{name}_one"), &one, RowSense::Eq, 1.0);
        for (k, w) in weights.iter().enumerate() {
            let mut row = LinExpr::from(*w);
            if k > 0 {
                row.push(segs[k - 1], -1.0);
            }
            if k < n - 1 {
                row.push(segs[k], -1.0);
            }
            model.add_constraint(format!("{name}_adj{k}"), &row, RowSense::Le, 0.0);
        }
    }
    let max_error = interpolation_error(&xs, &ys, f);
    Ok(Piecewise {
        input,
        output,
        weights,
        breakpoints: xs,
        values: ys,
        max_error,
    })
}

/// Adds a second output driven by the same weights: `Σ_k w_k g(x_k)`.
/// Exact on the curve only under the SOS2 encoding (or when `g` is affine).
pub fn add_interpolant(
    model: &mut LinearModel,
    name: &str,
    block: &Piecewise,
    g: &dyn Fn(f64) -> f64,
) -> Result<VarId> {
    let out = model.add_free(name.to_string());
    let mut row = LinExpr::from(out);
    for (w, x) in block.weights.iter().zip(&block.breakpoints) {
        let y = g(*x);
        if !y.is_finite() {
            return Err(Error::Model(format!("{name}: g is not finite at {x}")));
        }
        row.push(*w, -y);
    }
    model.add_constraint(format!("{name}_def"), &row, RowSense::Eq, 0.0);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Text format

fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

fn write_terms(out: &mut String, terms: &[(VarId, f64)], vars: &[Variable]) {
    for (v, c) in terms {
        let sign = if c.is_sign_negative() { "" } else { "+" };
        let _ = write!(out, " {sign}{} {}", fmt_num(*c), vars[v.0].name);
    }
}

impl LinearModel {
    /// Serializes the model to the LP-style debug text format.
    pub fn to_lp_string(&self) -> Result<String> {
        self.check()?;
        let mut out = String::new();
        let _ = writeln!(out, "\\ {}", self.name);
        out.push_str(match self.sense {
            ObjSense::Minimize => "minimize\n",
            ObjSense::Maximize => "maximize\n",
        });
        out.push_str("obj:");
        write_terms(&mut out, &self.objective, &self.variables);
        out.push('\n');
        let _ = writeln!(out, "offset {}", fmt_num(self.offset));
        out.push_str("subject to\n");
        for c in &self.constraints {
            let _ = write!(out, "{}:", c.name);
            write_terms(&mut out, &c.terms, &self.variables);
            let _ = writeln!(out, " {} {}", c.sense.symbol(), fmt_num(c.rhs));
        }
        out.push_str("bounds\n");
        for v in &self.variables {
            let _ = writeln!(out, "{} {} {}", v.name, fmt_num(v.lower), fmt_num(v.upper));
        }
        out.push_str("binaries\n");
        for v in self.variables.iter().filter(|v| v.kind == VarKind::Binary) {
            let _ = writeln!(out, "{}", v.name);
        }
        out.push_str("groups\n");
        for (g, vars) in &self.groups {
            let _ = write!(out, "{g}:");
            for v in vars {
                let _ = write!(out, " {}", self.variables[v.0].name);
            }
            out.push('\n');
        }
        out.push_str("end\n");
        Ok(out)
    }

    /// Parses the text produced by [`to_lp_string`](Self::to_lp_string).
    pub fn from_lp_str(text: &str) -> Result<Self> {
        Parser::default().run(text)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Header,
    Objective,
    Rows,
    Bounds,
    Binaries,
    Groups,
    Done,
}

struct RawRow {
    line: usize,
    name: String,
    terms: Vec<(String, f64)>,
    sense: RowSense,
    rhs: f64,
}

#[derive(Default)]
struct Parser {
    name: String,
    sense: Option<ObjSense>,
    objective: Vec<(String, f64)>,
    offset: f64,
    rows: Vec<RawRow>,
    vars: Vec<Variable>,
    binaries: Vec<(usize, String)>,
    groups: Vec<(usize, String, Vec<String>)>,
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_num(line: usize, tok: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| perr(line, format!("expected a number, found `{tok}`")))?;
    if v.is_nan() {
        return Err(perr(line, "NaN is not allowed"));
    }
    Ok(v)
}

fn parse_terms(line: usize, toks: &[&str]) -> Result<Vec<(String, f64)>> {
    if toks.len() % 2 != 0 {
        return Err(perr(line, "terms must be `coef name` pairs"));
    }
    toks.chunks(2)
        .map(|p| Ok((p[1].to_string(), parse_num(line, p[0])?)))
        .collect()
}

fn split_label(line: usize, text: &str) -> Result<(String, Vec<&str>)> {
    let (label, rest) = text
        .split_once(':')
        .ok_or_else(|| perr(line, "expected `label:`"))?;
    let label = label.trim();
    if label.is_empty() || label.contains(char::is_whitespace) {
        return Err(perr(line, format!("bad label `{label}`")));
    }
    Ok((label.to_string(), rest.split_whitespace().collect()))
}

impl Parser {
    fn run(mut self, text: &str) -> Result<LinearModel> {
        let mut section = Section::Header;
        let mut last = 0;
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            last = line;
            let body = raw.trim();
            if body.is_empty() {
                continue;
            }
            if section == Section::Header {
                if let Some(name) = body.strip_prefix('\\') {
                    self.name = name.trim().to_string();
                    continue;
                }
            }
            let next = match body {
                "minimize" | "maximize" if section == Section::Header => {
                    self.sense = Some(if body == "minimize" {
                        ObjSense::Minimize
                    } else {
                        ObjSense::Maximize
                    });
                    Some(Section::Objective)
                }
                "subject to" if section == Section::Objective => Some(Section::Rows),
                "bounds" if section == Section::Rows => Some(Section::Bounds),
                "binaries" if section == Section::Bounds => Some(Section::Binaries),
                "groups" if section == Section::Binaries => Some(Section::Groups),
                "end" if section == Section::Groups => Some(Section::Done),
                _ => None,
            };
            if let Some(s) = next {
                section = s;
                continue;
            }
            match section {
                Section::Header => return Err(perr(line, "expected `minimize` or `maximize`")),
                Section::Objective => self.objective_line(line, body)?,
                Section::Rows => self.row_line(line, body)?,
                Section::Bounds => self.bound_line(line, body)?,
                Section::Binaries => {
                    if body.contains(char::is_whitespace) {
                        return Err(perr(line, "one binary name per line"));
                    }
                    self.binaries.push((line, body.to_string()));
                }
                Section::Groups => {
                    let (g, toks) = split_label(line, body)?;
                    self.groups
                        .push((line, g, toks.iter().map(|t| t.to_string()).collect()));
                }
                Section::Done => return Err(perr(line, "content after `end`")),
            }
        }
        if section != Section::Done {
            return Err(perr(last + 1, "missing `end`"));
        }
        self.finish()
    }

    fn objective_line(&mut self, line: usize, body: &str) -> Result<()> {
        if let Some(v) = body.strip_prefix("offset ") {
            self.offset = parse_num(line, v.trim())?;
            return Ok(());
        }
        let (label, toks) = split_label(line, body)?;
        if label != "obj" {
            return Err(perr(line, "objective line must start with `obj:`"));
        }
        self.objective = parse_terms(line, &toks)?;
        Ok(())
    }

    fn row_line(&mut self, line: usize, body: &str) -> Result<()> {
        let (name, toks) = split_label(line, body)?;
        if toks.len() < 2 {
            return Err(perr(line, "row needs a sense and a right-hand side"));
        }
        let (terms, tail) = toks.split_at(toks.len() - 2);
        let sense = match tail[0] {
            "<=" => RowSense::Le,
            ">=" => RowSense::Ge,
            "=" => RowSense::Eq,
            s => return Err(perr(line, format!("unknown sense `{s}`"))),
        };
        self.rows.push(RawRow {
            line,
            name,
            terms: parse_terms(line, terms)?,
            sense,
            rhs: parse_num(line, tail[1])?,
        });
        Ok(())
    }

    fn bound_line(&mut self, line: usize, body: &str) -> Result<()> {
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(perr(line, "bounds line is `name lower upper`"));
        }
        self.vars.push(Variable {
            name: toks[0].to_string(),
            lower: parse_num(line, toks[1])?,
            upper: parse_num(line, toks[2])?,
            kind: VarKind::Continuous,
        });
        Ok(())
    }

    fn finish(self) -> Result<LinearModel> {
        let index: HashMap<&str, usize> = self
            .vars
            .iter()
            .enumerate()
            .map(|(k, v)| (v.name.as_str(), k))
            .collect();
        let lookup = |line: usize, name: &str| -> Result<VarId> {
            index
                .get(name)
                .map(|k| VarId(*k))
                .ok_or_else(|| perr(line, format!("undeclared variable `{name}`")))
        };
        let resolve = |line: usize, terms: &[(String, f64)]| -> Result<Vec<(VarId, f64)>> {
            terms
                .iter()
                .map(|(n, c)| Ok((lookup(line, n)?, *c)))
                .collect()
        };
        let mut variables = self.vars.clone();
        for (line, b) in &self.binaries {
            let id = lookup(*line, b)?;
            variables[id.0].kind = VarKind::Binary;
        }
        let constraints = self
            .rows
            .iter()
            .map(|r| {
                Ok(Constraint {
                    name: r.name.clone(),
                    terms: resolve(r.line, &r.terms)?,
                    sense: r.sense,
                    rhs: r.rhs,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut groups = BTreeMap::new();
        for (line, g, names) in &self.groups {
            let ids = names
                .iter()
                .map(|n| lookup(*line, n))
                .collect::<Result<Vec<_>>>()?;
            groups.insert(g.clone(), ids);
        }
        let model = LinearModel {
            name: self.name,
            sense: self.sense.unwrap_or(ObjSense::Minimize),
            objective: resolve(0, &self.objective)?,
            offset: self.offset,
            variables,
            constraints,
            groups,
        };
        model.check()?;
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Solving

/// Backend settings. Defaults are single-threaded with a fixed seed so that
/// repeated runs are reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub threads: u32,
    pub seed: i32,
    pub mip_rel_gap: f64,
    pub feasibility_tol: f64,
    pub time_limit: Option<f64>,
    pub presolve: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        let threads = std::env::var("RGD_SOLVER_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|t: &u32| *t > 0)
            .unwrap_or(1);
        Self {
            threads,
            seed: 0,
            mip_rel_gap: 1e-7,
            feasibility_tol: 1e-9,
            time_limit: None,
            presolve: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
    Error,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    /// `cᵀx + offset` at the returned point; NaN unless optimal.
    pub objective: f64,
    /// Primal values, empty unless optimal.
    pub values: Vec<f64>,
    /// For pure LPs: sensitivity of the objective to each row's right-hand side.
    pub row_duals: Vec<f64>,
    pub wall_time: Duration,
}

impl SolveOutcome {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn value(&self, v: VarId) -> f64 {
        self.values[v.0]
    }

    pub fn group_values(&self, model: &LinearModel, group: &str) -> Vec<f64> {
        model.group(group).iter().map(|v| self.values[v.0]).collect()
    }

    fn failed(status: SolveStatus, started: Instant) -> Self {
        Self {
            status,
            objective: f64::NAN,
            values: Vec::new(),
            row_duals: Vec::new(),
            wall_time: started.elapsed(),
        }
    }
}

fn map_status(status: HighsModelStatus) -> SolveStatus {
    match status {
        HighsModelStatus::Optimal => SolveStatus::Optimal,
        HighsModelStatus::Infeasible => SolveStatus::Infeasible,
        HighsModelStatus::Unbounded => SolveStatus::Unbounded,
        HighsModelStatus::ReachedTimeLimit
        | HighsModelStatus::ReachedIterationLimit
        | HighsModelStatus::ReachedSolutionLimit => SolveStatus::IterLimit,
        _ => SolveStatus::Error,
    }
}

fn run_highs(
    model: &LinearModel,
    params: &SolverParams,
    presolve: bool,
) -> (HighsModelStatus, Vec<f64>, Vec<f64>) {
    let mut pb = RowProblem::default();
    let cost = {
        let mut c = vec![0.0; model.num_vars()];
        for (v, a) in &model.objective {
            c[v.0] += a;
        }
        c
    };
    let cols: Vec<_> = model
        .variables
        .iter()
        .zip(&cost)
        .map(|(v, c)| match v.kind {
            VarKind::Continuous => pb.add_column(*c, v.lower..=v.upper),
            VarKind::Binary => pb.add_integer_column(*c, v.lower..=v.upper),
        })
        .collect();
    for c in &model.constraints {
        let row: Vec<_> = c.terms.iter().map(|(v, a)| (cols[v.0], *a)).collect();
        match c.sense {
            RowSense::Le => pb.add_row(f64::NEG_INFINITY..=c.rhs, &row),
            RowSense::Ge => pb.add_row(c.rhs..=f64::INFINITY, &row),
            RowSense::Eq => pb.add_row(c.rhs..=c.rhs, &row),
        }
    }
    let sense = match model.sense {
        ObjSense::Minimize => HighsSense::Minimise,
        ObjSense::Maximize => HighsSense::Maximise,
    };
    let mut m = pb.optimise(sense);
    m.make_quiet();
    if std::env::var_os("RGD_SOLVER_LOG").is_some() {
        m.set_option("output_flag", true);
        m.set_option("log_to_console", true);
    }
    m.set_option("threads", params.threads as i32);
    m.set_option("random_seed", params.seed);
    m.set_option("mip_rel_gap", params.mip_rel_gap);
    m.set_option("mip_feasibility_tolerance", params.feasibility_tol);
    m.set_option("primal_feasibility_tolerance", params.feasibility_tol);
    m.set_option("dual_feasibility_tolerance", params.feasibility_tol);
    m.set_option("presolve", if presolve { "on" } else { "off" });
    if let Some(t) = params.time_limit {
        m.set_option("time_limit", t);
    }
    match m.try_solve() {
        Ok(solved) => {
            let status = solved.status();
            let sol = solved.get_solution();
            (status, sol.columns().to_vec(), sol.dual_rows().to_vec())
        }
        Err(_) => (HighsModelStatus::SolveError, Vec::new(), Vec::new()),
    }
}

/// Solves `model` with HiGHS.
pub fn solve(model: &LinearModel, params: &SolverParams) -> Result<SolveOutcome> {
    model.check()?;
    let started = Instant::now();
    if model.num_vars() == 0 {
        let ok = model.max_violation(&[]) <= params.feasibility_tol;
        let mut out = SolveOutcome::failed(
            if ok {
                SolveStatus::Optimal
            } else {
                SolveStatus::Infeasible
            },
            started,
        );
        if ok {
            out.objective = model.offset;
            out.row_duals = vec![0.0; model.num_constraints()];
        }
        return Ok(out);
    }
    let (mut status, mut values, mut duals) = run_highs(model, params, params.presolve);
    if status == HighsModelStatus::UnboundedOrInfeasible {
        (status, values, duals) = run_highs(model, params, false);
        if status == HighsModelStatus::UnboundedOrInfeasible {
            status = HighsModelStatus::Infeasible;
        }
    }
    let status = map_status(status);
    if status != SolveStatus::Optimal {
        return Ok(SolveOutcome::failed(status, started));
    }
    let row_duals = if model.num_binaries() == 0 {
        duals
    } else {
        vec![0.0; model.num_constraints()]
    };
    Ok(SolveOutcome {
        status,
        objective: model.objective_value(&values),
        values,
        row_duals,
        wall_time: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> SolverParams {
        SolverParams::default()
    }

    #[test]
    fn bounded_below() {
        let mut m = LinearModel::new("t", ObjSense::Minimize);
        let x = m.add_free("x");
        m.add_constraint("c", &LinExpr::from(x), RowSense::Ge, 3.0);
        m.set_objective(ObjSense::Minimize, &x.into());
        let out = solve(&m, &params()).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        assert!((out.objective - 3.0).abs() < 1e-9);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let mut m = LinearModel::new("t", ObjSense::Maximize);
        let x = m.add_free("x");
        m.add_constraint("a", &x.into(), RowSense::Le, 3.0);
        m.add_constraint("b", &x.into(), RowSense::Ge, 5.0);
        m.set_objective(ObjSense::Maximize, &x.into());
        assert_eq!(solve(&m, &params()).unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn free_direction_is_unbounded() {
        let mut m = LinearModel::new("t", ObjSense::Minimize);
        let x = m.add_var("x", 0.0, f64::INFINITY);
        m.set_objective(ObjSense::Minimize, &LinExpr::new().term(x, -1.0));
        assert_eq!(solve(&m, &params()).unwrap().status, SolveStatus::Unbounded);
    }

    #[test]
    fn row_duals_are_rhs_sensitivities() {
        for sense in [ObjSense::Minimize, ObjSense::Maximize] {
            // min x s.t. x >= 3 and max -2x s.t. x >= 3: d obj / d rhs = 1 and -2.
            let mut m = LinearModel::new("t", sense);
            let x = m.add_free("x");
            m.add_constraint("c", &x.into(), RowSense::Ge, 3.0);
            let coef = if sense == ObjSense::Minimize { 1.0 } else { -2.0 };
            m.set_objective(sense, &LinExpr::new().term(x, coef));
            let out = solve(&m, &params()).unwrap();
            assert!((out.row_duals[0] - coef).abs() < 1e-9, "{sense:?} {:?}", out.row_duals);
        }
    }

    #[test]
    fn objective_offset_is_reported() {
        let mut m = LinearModel::new("t", ObjSense::Minimize);
        let x = m.add_var("x", 1.0, 2.0);
        m.set_objective(ObjSense::Minimize, &LinExpr::from(x).plus(10.0));
        let out = solve(&m, &params()).unwrap();
        assert!((out.objective - 11.0).abs() < 1e-9);
    }

    #[test]
    fn empty_model() {
        let m = LinearModel::new("t", ObjSense::Minimize);
        let out = solve(&m, &params()).unwrap();
        assert!(out.is_optimal());
        assert_eq!(out.objective, 0.0);
    }

    #[test]
    fn malformed_models_are_rejected() {
        let mut m = LinearModel::new("t", ObjSense::Minimize);
        m.add_var("x", 1.0, 0.0);
        assert!(matches!(solve(&m, &params()), Err(Error::Model(_))));
        let mut m = LinearModel::new("t", ObjSense::Minimize);
        m.add_var("x", 0.0, 1.0);
        m.add_constraint("c", &LinExpr::new().term(VarId(7), 1.0), RowSense::Le, 1.0);
        assert!(m.check().is_err());
        let mut m = LinearModel::new("t", ObjSense::Minimize);
        m.add_var("x", 0.0, 1.0);
        m.add_var("x", 0.0, 1.0);
        assert!(m.check().is_err());
    }

    fn complementarity_model(slack_val: f64, dual_val: f64) -> LinearModel {
        let mut m = LinearModel::new("c", ObjSense::Minimize);
        let s = m.add_var("s", slack_val, slack_val);
        let d = m.add_var("d", dual_val, dual_val);
        add_complementarity(&mut m, "k", &s.into(), d, 10.0, 10.0).unwrap();
        m
    }

    #[test]
    fn complementarity_accepts_one_sided_pairs() {
        assert!(solve(&complementarity_model(0.0, 5.0), &params()).unwrap().is_optimal());
        assert!(solve(&complementarity_model(4.0, 0.0), &params()).unwrap().is_optimal());
    }

    #[test]
    fn complementarity_rejects_both_positive() {
        let out = solve(&complementarity_model(3.0, 2.0), &params()).unwrap();
        assert_eq!(out.status, SolveStatus::Infeasible);
    }

    #[test]
    fn complementarity_needs_positive_big_m() {
        let mut m = LinearModel::new("c", ObjSense::Minimize);
        let s = m.add_var("s", 0.0, 1.0);
        let d = m.add_var("d", 0.0, 1.0);
        assert!(add_complementarity(&mut m, "k", &s.into(), d, 0.0, 1.0).is_err());
    }

    #[test]
    fn kkt_recovers_dual_of_one_variable_lp() {
        // Inner LP: min y s.t. y >= u with u = 2. Stationarity 1 = λ, λ ⊥ (y - u).
        let mut m = LinearModel::new("kkt", ObjSense::Maximize);
        let y = m.add_var("y", 0.0, 100.0);
        let lam = m.add_var("lam", 0.0, 100.0);
        let slack = LinExpr::from(y).plus(-2.0);
        m.add_constraint("primal", &slack, RowSense::Ge, 0.0);
        m.add_constraint("stat", &lam.into(), RowSense::Eq, 1.0);
        add_complementarity(&mut m, "cs", &slack, lam, 1e3, 1e3).unwrap();
        m.set_objective(ObjSense::Maximize, &y.into());
        let out = solve(&m, &params()).unwrap();
        assert!((out.value(lam) - 1.0).abs() < 1e-9);
        assert!((out.value(y) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn big_m_clamping() {
        assert!((big_m(5.0, None) - 5.0).abs() < 1e-4);
        assert!(big_m(-1.0, None) > 0.0);
        assert_eq!(big_m(5e8, None), BIG_M_CEIL);
        assert_eq!(big_m(f64::INFINITY, None), BIG_M_CEIL);
        assert!((big_m(2e4, None) - 2e4).abs() < 0.1);
        assert_eq!(big_m(2e4, Some(7.0)), 7.0);
    }

    fn pwl_min_at(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n: usize, at: f64) -> (f64, Piecewise) {
        let mut m = LinearModel::new("p", ObjSense::Minimize);
        let pw = add_piecewise(
            &mut m,
            "f",
            f,
            lo,
            hi,
            n,
            BreakpointGrid::Uniform,
            PiecewiseEncoding::ConvexCombination,
        )
        .unwrap();
        m.set_bounds(pw.input, at, at);
        m.set_objective(ObjSense::Minimize, &pw.output.into());
        let out = solve(&m, &params()).unwrap();
        (out.value(pw.output), pw)
    }

    #[test]
    fn linear_function_is_exact() {
        let (v, pw) = pwl_min_at(&|v| v, 0.0, 1.0, 2, 0.37);
        assert!((v - 0.37).abs() < 1e-9);
        assert!(pw.max_error < 1e-15);
    }

    #[test]
    fn square_error_bound() {
        let (_, pw) = pwl_min_at(&|v| v * v, 0.0, 1.0, 101, 0.5);
        assert!(pw.max_error <= 2.5e-5 + 1e-12, "{}", pw.max_error);
    }

    #[test]
    fn inverse_square_error_matches_grid_scan() {
        let f = |v: f64| 1.0 / (v * v);
        let (v, pw) = pwl_min_at(&f, 0.05, 1.0, 201, 0.0512);
        assert!(v >= f(0.0512) - 1e-9);
        assert!(v - f(0.0512) <= pw.max_error + 1e-9);
    }

    #[test]
    fn sos2_interpolates_a_concave_function() {
        let f = |v: f64| -(v * v);
        let mut m = LinearModel::new("p", ObjSense::Maximize);
        let pw = add_piecewise(
            &mut m,
            "f",
            &f,
            0.0,
            2.0,
            5,
            BreakpointGrid::Uniform,
            PiecewiseEncoding::Sos2,
        )
        .unwrap();
        m.set_bounds(pw.input, 1.25, 1.25);
        // Maximizing would spread weight to the ends without adjacency.
        m.set_objective(ObjSense::Minimize, &pw.output.into());
        let out = solve(&m, &params()).unwrap();
        assert!((out.value(pw.output) - pw.interpolate(1.25)).abs() < 1e-7);
    }

    #[test]
    fn geometric_grid_hits_endpoints() {
        let xs = breakpoints(0.5, 8.0, 5, BreakpointGrid::Geometric);
        assert_eq!(xs, vec![0.5, 1.0, 2.0, 4.0, 8.0]);
        let xs = breakpoints(-1.0, 1.0, 5, BreakpointGrid::Uniform);
        assert_eq!(xs[2], 0.0);
    }

    #[test]
    fn nonfinite_breakpoint_is_an_error() {
        let mut m = LinearModel::new("p", ObjSense::Minimize);
        let r = add_piecewise(
            &mut m,
            "f",
            &|v: f64| 1.0 / v,
            0.0,
            1.0,
            3,
            BreakpointGrid::Uniform,
            PiecewiseEncoding::ConvexCombination,
        );
        assert!(r.is_err());
    }

    #[test]
    fn lp_text_round_trip() {
        let mut m = LinearModel::new("round trip", ObjSense::Maximize);
        let x = m.add_var("x", -1.5, 2.0);
        let y = m.add_free("y");
        let z = m.add_binary("z");
        m.add_constraint("r1", &LinExpr::from(x).term(y, -0.1), RowSense::Le, 4.0);
        m.add_constraint("r2", &LinExpr::from(y).term(z, 3.0), RowSense::Eq, 1.0 / 3.0);
        m.add_constraint("r3", &LinExpr::new(), RowSense::Ge, -1.0);
        m.set_objective(ObjSense::Maximize, &LinExpr::from(x).term(z, -2.0).plus(0.25));
        m.add_to_group("first", x);
        m.add_to_group("first", z);
        let text = m.to_lp_string().unwrap();
        let back = LinearModel::from_lp_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "\\ t\nminimize\nobj: +1.0 x\noffset 0.0\nsubject to\nc: +1.0 q <= 1.0\nbounds\nx 0.0 1.0\nbinaries\ngroups\nend\n";
        match LinearModel::from_lp_str(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
        let text = "minimize\nobj: +1.0 x\nsubject to\nc: +1.0 x ~ 1.0\n";
        assert!(matches!(
            LinearModel::from_lp_str(text),
            Err(Error::Parse { line: 4, .. })
        ));
    }

    proptest! {
        #[test]
        fn random_models_round_trip(
            coefs in proptest::collection::vec(-1e6f64..1e6, 1..12),
            rhs in -1e3f64..1e3,
            lower in -10.0f64..0.0,
        ) {
            let mut m = LinearModel::new("p", ObjSense::Minimize);
            let vars: Vec<VarId> = (0..coefs.len())
                .map(|k| m.add_var(format!("v{k}"), lower, lower + 1.0 + k as f64))
                .collect();
            let e = vars.iter().zip(&coefs).fold(LinExpr::new(), |e, (v, c)| e.term(*v, *c));
            m.add_constraint("row", &e, RowSense::Ge, rhs);
            m.set_objective(ObjSense::Minimize, &e);
            let back = LinearModel::from_lp_str(&m.to_lp_string().unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn interpolant_overestimates_convex(v in 0.05f64..1.0) {
            let f = |x: f64| 1.0 / (x * x);
            let xs = breakpoints(0.05, 1.0, 21, BreakpointGrid::Geometric);
            let ys: Vec<f64> = xs.iter().map(|x| f(*x)).collect();
            prop_assert!(interpolate(&xs, &ys, v) >= f(v) - 1e-9 * f(v));
        }
    }
}
