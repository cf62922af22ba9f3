//! Grid case data model, JSON case format and validation.
//!
//! Everything downstream consumes a [`GridCase`], which is only obtainable
//! through validation and is immutable afterwards. All quantities are per
//! unit; the optional `base_mva` key in the file is carried for
//! documentation only and never used to rescale.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default violation price ($/pu-h) when a case omits a penalty coefficient.
pub const DEFAULT_PENALTY: f64 = 1e6;

/// Slack on `total width >= p_max - p_min` to absorb summation roundoff.
const WIDTH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bus {
    pub id: usize,
    pub is_slack: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub id: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    pub susceptance: f64,
    pub flow_limit_base: f64,
    pub flow_limit_ctg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    ConvexCost,
    ConcaveBenefit,
}

/// One linear piece of a cost or benefit curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    /// $/pu-h
    pub slope: f64,
    /// pu
    pub width: f64,
}

/// Piecewise-linear curve anchored at the owning device's `p_min`, where it
/// takes the value zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlCurve {
    pub segments: Vec<Segment>,
    pub kind: CurveKind,
}

impl PwlCurve {
    pub fn new(segments: Vec<Segment>, kind: CurveKind) -> Self {
        Self { segments, kind }
    }

    pub fn from_pairs(pairs: &[[f64; 2]], kind: CurveKind) -> Self {
        let segments = pairs
            .iter()
            .map(|&[slope, width]| Segment { slope, width })
            .collect();
        Self { segments, kind }
    }

    pub fn total_width(&self) -> f64 {
        self.segments.iter().map(|s| s.width).sum()
    }

    /// Checks segment invariants; `path` prefixes error locations.
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::validation(path, "curve has no segments"));
        }
        for (k, s) in self.segments.iter().enumerate() {
            if !(s.width.is_finite() && s.width > 0.0) {
                return Err(Error::validation(
                    format!("{path}[{k}].width"),
                    format!("width must be finite and > 0, got {}", s.width),
                ));
            }
            if !(s.slope.is_finite() && s.slope >= 0.0) {
                return Err(Error::validation(
                    format!("{path}[{k}].slope"),
                    format!("slope must be finite and >= 0, got {}", s.slope),
                ));
            }
        }
        for (k, pair) in self.segments.windows(2).enumerate() {
            let ordered = match self.kind {
                CurveKind::ConvexCost => pair[1].slope >= pair[0].slope,
                CurveKind::ConcaveBenefit => pair[1].slope <= pair[0].slope,
            };
            if !ordered {
                let want = match self.kind {
                    CurveKind::ConvexCost => "nondecreasing (convex cost)",
                    CurveKind::ConcaveBenefit => "nonincreasing (concave benefit)",
                };
                return Err(Error::validation(
                    format!("{path}[{}].slope", k + 1),
                    format!("slopes must be {want}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub id: usize,
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub cost: PwlCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demand {
    pub id: usize,
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub benefit: PwlCurve,
}

/// A validated single-period SC-DCOPF instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub demands: Vec<Demand>,
    /// Outaged line ids, one N-1 scenario each.
    pub contingencies: Vec<usize>,
    /// Dispatch interval in hours.
    pub tau: f64,
    pub penalty_inj: f64,
    pub penalty_flow: f64,
    pub base_mva: Option<f64>,
}

impl GridCase {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    /// Dimension of the dispatch vector `(p^g, p^d)`.
    pub fn n_inputs(&self) -> usize {
        self.generators.len() + self.demands.len()
    }

    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.is_slack)
            .expect("validated case has a slack bus")
    }

    /// Lower and upper dispatch limits in `(p^g, p^d)` order.
    pub fn input_limits(&self) -> (DVector<f64>, DVector<f64>) {
        let lo = self
            .generators
            .iter()
            .map(|g| g.p_min)
            .chain(self.demands.iter().map(|d| d.p_min));
        let hi = self
            .generators
            .iter()
            .map(|g| g.p_max)
            .chain(self.demands.iter().map(|d| d.p_max));
        (
            DVector::from_iterator(self.n_inputs(), lo),
            DVector::from_iterator(self.n_inputs(), hi),
        )
    }

    /// Same case with a different contingency list, revalidated.
    pub fn with_contingencies(&self, contingencies: Vec<usize>) -> Result<GridCase> {
        let mut case = self.clone();
        case.contingencies = contingencies;
        case.validate()?;
        Ok(case)
    }

    /// Checks every model invariant.
    pub fn validate(&self) -> Result<()> {
        let n_b = self.buses.len();
        if n_b < 2 {
            return Err(Error::validation("buses", "at least two buses are required"));
        }
        for (k, b) in self.buses.iter().enumerate() {
            if b.id != k {
                return Err(Error::validation(
                    format!("buses[{k}].id"),
                    format!("bus ids must be contiguous 0..{n_b}, found {}", b.id),
                ));
            }
        }
        let slacks: Vec<usize> = self.buses.iter().filter(|b| b.is_slack).map(|b| b.id).collect();
        if slacks.len() != 1 {
            return Err(Error::validation(
                "buses",
                format!("exactly one slack bus required, found {} ({slacks:?})", slacks.len()),
            ));
        }

        if self.lines.is_empty() {
            return Err(Error::validation("lines", "at least one line is required"));
        }
        for (k, l) in self.lines.iter().enumerate() {
            let path = format!("lines[{k}]");
            if l.id != k {
                return Err(Error::validation(
                    format!("{path}.id"),
                    format!("line ids must be contiguous, found {}", l.id),
                ));
            }
            for (name, bus) in [("from", l.from_bus), ("to", l.to_bus)] {
                if bus >= n_b {
                    return Err(Error::validation(
                        format!("{path}.{name}"),
                        format!("line {} references unknown bus {bus}", l.id),
                    ));
                }
            }
            if l.from_bus == l.to_bus {
                return Err(Error::validation(
                    format!("{path}.to"),
                    format!("line {} is a self-loop on bus {}", l.id, l.from_bus),
                ));
            }
            for (name, v) in [
                ("susceptance", l.susceptance),
                ("limit_base", l.flow_limit_base),
                ("limit_ctg", l.flow_limit_ctg),
            ] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::validation(
                        format!("{path}.{name}"),
                        format!("line {} {name} must be finite and > 0, got {v}", l.id),
                    ));
                }
            }
        }

        if self.n_inputs() == 0 {
            return Err(Error::validation("generators", "case has no generators or demands"));
        }
        for (k, g) in self.generators.iter().enumerate() {
            let path = format!("generators[{k}]");
            check_device(&path, k, g.id, g.bus, n_b, g.p_min, g.p_max)?;
            g.cost.validate(&format!("{path}.cost"))?;
            if g.cost.kind != CurveKind::ConvexCost {
                return Err(Error::validation(
                    format!("{path}.cost"),
                    format!("generator {} curve must be a convex cost", g.id),
                ));
            }
            check_width(&path, "cost", g.id, &g.cost, g.p_min, g.p_max)?;
        }
        for (k, d) in self.demands.iter().enumerate() {
            let path = format!("demands[{k}]");
            check_device(&path, k, d.id, d.bus, n_b, d.p_min, d.p_max)?;
            d.benefit.validate(&format!("{path}.benefit"))?;
            if d.benefit.kind != CurveKind::ConcaveBenefit {
                return Err(Error::validation(
                    format!("{path}.benefit"),
                    format!("demand {} curve must be a concave benefit", d.id),
                ));
            }
            check_width(&path, "benefit", d.id, &d.benefit, d.p_min, d.p_max)?;
        }

        let mut seen = HashSet::new();
        for (k, &c) in self.contingencies.iter().enumerate() {
            if c >= self.lines.len() {
                return Err(Error::validation(
                    format!("contingencies[{k}]"),
                    format!("contingency references unknown line {c}"),
                ));
            }
            if !seen.insert(c) {
                return Err(Error::validation(
                    format!("contingencies[{k}]"),
                    format!("duplicate contingency on line {c}"),
                ));
            }
        }

        for (name, v) in [
            ("tau", self.tau),
            ("penalty_inj", self.penalty_inj),
            ("penalty_flow", self.penalty_flow),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, format!("{name} must be finite and > 0, got {v}")));
            }
        }

        if !is_connected(n_b, self.lines.iter().map(|l| (l.from_bus, l.to_bus))) {
            return Err(Error::Disconnected(format!(
                "base network of {n_b} buses and {} lines is not connected",
                self.lines.len()
            )));
        }
        Ok(())
    }

    /// Bus aggregation maps `A_g`, `A_d`.
    pub fn injection_map(&self) -> InjectionMap {
        InjectionMap {
            n_buses: self.n_buses(),
            gen_bus: self.generators.iter().map(|g| g.bus).collect(),
            demand_bus: self.demands.iter().map(|d| d.bus).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CaseFile::from(self)).expect("case serializes")
    }
}

fn check_device(
    path: &str,
    index: usize,
    id: usize,
    bus: usize,
    n_b: usize,
    p_min: f64,
    p_max: f64,
) -> Result<()> {
    if id != index {
        return Err(Error::validation(
            format!("{path}.id"),
            format!("device ids must be contiguous, found {id}"),
        ));
    }
    if bus >= n_b {
        return Err(Error::validation(
            format!("{path}.bus"),
            format!("device {id} references unknown bus {bus}"),
        ));
    }
    if !(p_min.is_finite() && p_max.is_finite()) || p_min > p_max {
        return Err(Error::validation(
            format!("{path}.p_min"),
            format!("device {id} needs finite p_min <= p_max, got [{p_min}, {p_max}]"),
        ));
    }
    Ok(())
}

fn check_width(path: &str, field: &str, id: usize, curve: &PwlCurve, p_min: f64, p_max: f64) -> Result<()> {
    let span = p_max - p_min;
    if curve.total_width() + WIDTH_TOLERANCE * span.max(1.0) < span {
        return Err(Error::validation(
            format!("{path}.{field}"),
            format!(
                "device {id} curve covers {} pu but the box spans {span} pu",
                curve.total_width()
            ),
        ));
    }
    Ok(())
}

/// Union-find connectivity check over an edge list.
pub(crate) fn is_connected(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = n;
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components == 1
}

/// Sparse device-to-bus aggregation: `p_inj = A_g p^g - A_d p^d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionMap {
    pub n_buses: usize,
    pub gen_bus: Vec<usize>,
    pub demand_bus: Vec<usize>,
}

impl InjectionMap {
    pub fn n_inputs(&self) -> usize {
        self.gen_bus.len() + self.demand_bus.len()
    }

    pub fn apply(&self, p_g: &[f64], p_d: &[f64]) -> Result<DVector<f64>> {
        if p_g.len() != self.gen_bus.len() {
            return Err(Error::Dimension {
                context: "injection map (generators)",
                expected: self.gen_bus.len(),
                actual: p_g.len(),
            });
        }
        if p_d.len() != self.demand_bus.len() {
            return Err(Error::Dimension {
                context: "injection map (demands)",
                expected: self.demand_bus.len(),
                actual: p_d.len(),
            });
        }
        let mut p = DVector::zeros(self.n_buses);
        for (&bus, &v) in self.gen_bus.iter().zip(p_g) {
            p[bus] += v;
        }
        for (&bus, &v) in self.demand_bus.iter().zip(p_d) {
            p[bus] -= v;
        }
        Ok(p)
    }

    /// `A_g` as a dense `n_b x n_g` matrix.
    pub fn gen_matrix(&self) -> DMatrix<f64> {
        placement(self.n_buses, &self.gen_bus, 1.0)
    }

    /// `A_d` as a dense `n_b x n_d` matrix.
    pub fn demand_matrix(&self) -> DMatrix<f64> {
        placement(self.n_buses, &self.demand_bus, 1.0)
    }

    /// `[A_g, -A_d]`, mapping the stacked dispatch `(p^g, p^d)` to `p_inj`.
    pub fn input_matrix(&self) -> DMatrix<f64> {
        let n_g = self.gen_bus.len();
        let mut a = DMatrix::zeros(self.n_buses, self.n_inputs());
        for (j, &bus) in self.gen_bus.iter().enumerate() {
            a[(bus, j)] = 1.0;
        }
        for (j, &bus) in self.demand_bus.iter().enumerate() {
            a[(bus, n_g + j)] = -1.0;
        }
        a
    }
}

fn placement(n_rows: usize, rows: &[usize], value: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n_rows, rows.len());
    for (j, &r) in rows.iter().enumerate() {
        a[(r, j)] = value;
    }
    a
}

/// Parses and validates a case file.
pub fn parse_case(text: &str) -> Result<GridCase> {
    let file: CaseFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let case = file.into_case()?;
    case.validate()?;
    Ok(case)
}

pub fn load_case(path: impl AsRef<std::path::Path>) -> Result<GridCase> {
    let text = std::fs::read_to_string(path)?;
    parse_case(&text)
}

// On-disk schema.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_mva: Option<f64>,
    buses: Vec<BusRecord>,
    lines: Vec<LineRecord>,
    #[serde(default)]
    generators: Vec<GeneratorRecord>,
    #[serde(default)]
    demands: Vec<DemandRecord>,
    #[serde(default)]
    contingencies: Vec<usize>,
    tau: f64,
    #[serde(default)]
    penalty_inj: Option<f64>,
    #[serde(default)]
    penalty_flow: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusRecord {
    id: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    slack: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRecord {
    id: usize,
    from: usize,
    to: usize,
    susceptance: f64,
    limit_base: f64,
    #[serde(default)]
    limit_ctg: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorRecord {
    id: usize,
    bus: usize,
    p_min: f64,
    p_max: f64,
    cost: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemandRecord {
    id: usize,
    bus: usize,
    p_min: f64,
    p_max: f64,
    benefit: Vec<[f64; 2]>,
}

impl CaseFile {
    fn into_case(self) -> Result<GridCase> {
        let mut buses: Vec<Bus> = self
            .buses
            .iter()
            .map(|b| Bus { id: b.id, is_slack: b.slack })
            .collect();
        buses.sort_by_key(|b| b.id);

        let mut lines: Vec<Line> = self
            .lines
            .iter()
            .map(|l| {
                let flow_limit_ctg = l.limit_ctg.unwrap_or_else(|| {
                    log::warn!(
                        "line {} has no limit_ctg; using limit_base {} for contingencies",
                        l.id,
                        l.limit_base
                    );
                    l.limit_base
                });
                Line {
                    id: l.id,
                    from_bus: l.from,
                    to_bus: l.to,
                    susceptance: l.susceptance,
                    flow_limit_base: l.limit_base,
                    flow_limit_ctg,
                }
            })
            .collect();
        lines.sort_by_key(|l| l.id);

        let mut generators: Vec<Generator> = self
            .generators
            .iter()
            .map(|g| Generator {
                id: g.id,
                bus: g.bus,
                p_min: g.p_min,
                p_max: g.p_max,
                cost: PwlCurve::from_pairs(&g.cost, CurveKind::ConvexCost),
            })
            .collect();
        generators.sort_by_key(|g| g.id);

        let mut demands: Vec<Demand> = self
            .demands
            .iter()
            .map(|d| Demand {
                id: d.id,
                bus: d.bus,
                p_min: d.p_min,
                p_max: d.p_max,
                benefit: PwlCurve::from_pairs(&d.benefit, CurveKind::ConcaveBenefit),
            })
            .collect();
        demands.sort_by_key(|d| d.id);

        Ok(GridCase {
            buses,
            lines,
            generators,
            demands,
            contingencies: self.contingencies,
            tau: self.tau,
            penalty_inj: self.penalty_inj.unwrap_or(DEFAULT_PENALTY),
            penalty_flow: self.penalty_flow.unwrap_or(DEFAULT_PENALTY),
            base_mva: self.base_mva,
        })
    }
}

impl From<&GridCase> for CaseFile {
    fn from(case: &GridCase) -> Self {
        let pairs = |c: &PwlCurve| c.segments.iter().map(|s| [s.slope, s.width]).collect();
        CaseFile {
            base_mva: case.base_mva,
            buses: case
                .buses
                .iter()
                .map(|b| BusRecord { id: b.id, slack: b.is_slack })
                .collect(),
            lines: case
                .lines
                .iter()
                .map(|l| LineRecord {
                    id: l.id,
                    from: l.from_bus,
                    to: l.to_bus,
                    susceptance: l.susceptance,
                    limit_base: l.flow_limit_base,
                    limit_ctg: Some(l.flow_limit_ctg),
                })
                .collect(),
            generators: case
                .generators
                .iter()
                .map(|g| GeneratorRecord {
                    id: g.id,
                    bus: g.bus,
                    p_min: g.p_min,
                    p_max: g.p_max,
                    cost: pairs(&g.cost),
                })
                .collect(),
            demands: case
                .demands
                .iter()
                .map(|d| DemandRecord {
                    id: d.id,
                    bus: d.bus,
                    p_min: d.p_min,
                    p_max: d.p_max,
                    benefit: pairs(&d.benefit),
                })
                .collect(),
            contingencies: case.contingencies.clone(),
            tau: case.tau,
            penalty_inj: Some(case.penalty_inj),
            penalty_flow: Some(case.penalty_flow),
        }
    }
}
