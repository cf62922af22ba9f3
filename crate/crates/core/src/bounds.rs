//! The soft-constrained SC-DCOPF market surplus as a static compute graph,
//! with concrete evaluation and interval bound propagation.
//!
//! The graph input is the stacked dispatch `x = (p^g, p^d)`. The scalar
//! output is
//!
//! ```text
//! tau * ( sum c_j(p^d_j) - sum g_i(p^g_i)
//!         - e_inj 1^T s_inj - e_f 1^T s_fb - e_f s_fc_agg )
//! s_inj    = |(E^T Phi - I) p_inj|
//! s_fb     = max(|Phi p_inj| - limit_base, 0)
//! s_fc_agg = sum_i 1^T max(|P_fc row i| - limit_ctg, 0)
//! ```

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contingency::{self, ContingencyOperators};
use crate::curves::{compile, CompiledCurve};
use crate::error::{Error, Result};
use crate::grid::GridCase;
use crate::interval::{masked_shift_excess_sum, AffineMap, Interval, IntervalMatrix, IntervalVec};
use crate::network::{self, NetworkMatrices};

pub type NodeId = usize;

/// Relative outward widening of the objective bounds, scaled by the summed
/// term magnitudes. The operators are floating-point approximations, so the
/// graph and any independent evaluation of the same dispatch can disagree
/// in the last few digits; with 1e6 penalty prices that reaches about 1e-9
/// absolute on desk-scale cases. This keeps certified bounds on the safe
/// side of that noise.
pub const ROUNDOFF_ALLOWANCE: f64 = 1e-12;

/// Primitive operations of the compute graph. Sources always precede the
/// node that reads them.
#[derive(Debug, Clone)]
pub enum Op {
    Input { dim: usize },
    Affine { src: NodeId, map: Arc<AffineMap> },
    Abs { src: NodeId },
    AddConst { src: NodeId, value: DVector<f64> },
    Relu { src: NodeId },
    /// `mask ⊗ (1 f^T) - b ⊗ (v 1^T)` for base flows `f` and shifts `v`.
    ContingencyFlows {
        flows: NodeId,
        shifts: NodeId,
        mask: Arc<DMatrix<f64>>,
        b: Arc<DMatrix<f64>>,
    },
    /// Adds `value[c]` to every entry of matrix column `c`.
    AddColumnConst { src: NodeId, value: DVector<f64> },
    /// Sum of every element, yielding a scalar.
    Sum { src: NodeId },
    /// Per-device curve evaluation of selected input entries.
    Curves {
        src: NodeId,
        entries: Vec<(usize, CompiledCurve)>,
        strict_cascade: bool,
    },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Affine { .. } => "affine",
            Op::Abs { .. } => "abs",
            Op::AddConst { .. } => "add_const",
            Op::Relu { .. } => "relu",
            Op::ContingencyFlows { .. } => "contingency_flows",
            Op::AddColumnConst { .. } => "add_column_const",
            Op::Sum { .. } => "sum",
            Op::Curves { .. } => "curves",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }

    fn sources(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } => vec![],
            Op::Affine { src, .. }
            | Op::Abs { src }
            | Op::AddConst { src, .. }
            | Op::Relu { src }
            | Op::AddColumnConst { src, .. }
            | Op::Sum { src }
            | Op::Curves { src, .. } => vec![*src],
            Op::ContingencyFlows { flows, shifts, .. } => vec![*flows, *shifts],
            Op::WeightedSum { terms } => terms.iter().map(|(n, _)| *n).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub label: &'static str,
}

/// The five objective terms, each in $/h before scaling by `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Benefit,
    Cost,
    InjectionPenalty,
    BaseFlowPenalty,
    ContingencyPenalty,
}

impl Term {
    pub const ALL: [Term; 5] = [
        Term::Benefit,
        Term::Cost,
        Term::InjectionPenalty,
        Term::BaseFlowPenalty,
        Term::ContingencyPenalty,
    ];
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GraphOptions {
    /// Propagate curve intervals node by node through the ReLU cascade
    /// instead of evaluating the monotone image at the endpoints.
    pub strict_cascade: bool,
}

/// Compiled generator and demand curves, in device order.
#[derive(Debug, Clone)]
pub struct CaseCurves {
    pub generators: Vec<CompiledCurve>,
    pub demands: Vec<CompiledCurve>,
}

impl CaseCurves {
    pub fn compile(case: &GridCase) -> Result<Self> {
        Ok(Self {
            generators: case
                .generators
                .iter()
                .map(|g| compile(&g.cost, g.p_min))
                .collect::<Result<_>>()?,
            demands: case
                .demands
                .iter()
                .map(|d| compile(&d.benefit, d.p_min))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ScDcopfGraph {
    nodes: Vec<Node>,
    last_use: Vec<NodeId>,
    /// Contingency-flow node whose abs, limit, relu and sum chain is
    /// evaluated in one pass during interval propagation.
    fused_tail: Option<NodeId>,
    output: NodeId,
    /// Scalar sum node for each term (`None` for an absent contingency term)
    /// and the $/h multiplier applied to it.
    terms: [(Option<NodeId>, f64); 5],
    tau: f64,
    input_lower: DVector<f64>,
    input_upper: DVector<f64>,
    n_generators: usize,
    name: String,
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, label: &'static str, op: Op) -> NodeId {
        self.nodes.push(Node { op, label });
        self.nodes.len() - 1
    }
}

/// Assembles the objective graph from precomputed operators.
///
/// `ops` may be `None` or empty, in which case the contingency subgraph is
/// omitted and its term is identically zero.
pub fn build_graph(
    case: &GridCase,
    nm: &NetworkMatrices,
    ops: Option<&ContingencyOperators>,
    curves: &CaseCurves,
    options: GraphOptions,
) -> Result<ScDcopfGraph> {
    let (n_b, n_l) = (case.n_buses(), case.n_lines());
    if nm.n_buses() != n_b || nm.n_lines() != n_l {
        return Err(Error::Consistency(format!(
            "network matrices are {}x{}, case has {n_l} lines and {n_b} buses",
            nm.n_lines(),
            nm.n_buses()
        )));
    }
    if curves.generators.len() != case.generators.len() || curves.demands.len() != case.demands.len() {
        return Err(Error::Consistency("curve count does not match device count".into()));
    }
    let ops = ops.filter(|o| !o.is_empty());
    if let Some(o) = ops {
        if o.mask.ncols() != n_l || o.b.shape() != o.mask.shape() || o.u.shape() != (o.len(), n_b) {
            return Err(Error::Consistency(format!(
                "contingency operators have shapes M {:?}, B {:?}, U {:?}",
                o.mask.shape(),
                o.b.shape(),
                o.u.shape()
            )));
        }
    }

    let n_g = case.generators.len();
    let mut g = Builder { nodes: Vec::new() };
    let input = g.push("dispatch", Op::Input { dim: case.n_inputs() });

    let injection = AffineMap::linear(case.injection_map().input_matrix());
    let p_inj = g.push("net injection", Op::Affine { src: input, map: Arc::new(injection) });
    let flows = g.push(
        "base flows",
        Op::Affine {
            src: p_inj,
            map: Arc::new(AffineMap::linear(nm.ptdf.clone())),
        },
    );

    // Nodal imbalance.
    let imbalance = g.push(
        "nodal imbalance",
        Op::Affine {
            src: p_inj,
            map: Arc::new(AffineMap::linear(nm.imbalance_operator())),
        },
    );
    let s_inj = g.push("s_inj", Op::Abs { src: imbalance });
    let inj_sum = g.push("sum s_inj", Op::Sum { src: s_inj });

    // Base-case flow violation.
    let limits_base = DVector::from_iterator(n_l, case.lines.iter().map(|l| -l.flow_limit_base));
    let abs_flows = g.push("|base flows|", Op::Abs { src: flows });
    let over_base = g.push("base excess", Op::AddConst { src: abs_flows, value: limits_base });
    let s_fb = g.push("s_fb", Op::Relu { src: over_base });
    let base_sum = g.push("sum s_fb", Op::Sum { src: s_fb });

    // Contingency flow violation.
    let ctg_sum = ops.map(|o| {
        let shifts = g.push(
            "contingency shifts",
            Op::Affine {
                src: p_inj,
                map: Arc::new(AffineMap::linear(o.u.clone())),
            },
        );
        let ctg = g.push(
            "contingency flows",
            Op::ContingencyFlows {
                flows,
                shifts,
                mask: Arc::new(o.mask.clone()),
                b: Arc::new(o.b.clone()),
            },
        );
        let limits_ctg = DVector::from_iterator(n_l, case.lines.iter().map(|l| -l.flow_limit_ctg));
        let abs_ctg = g.push("|contingency flows|", Op::Abs { src: ctg });
        let over_ctg = g.push("contingency excess", Op::AddColumnConst { src: abs_ctg, value: limits_ctg });
        let s_fc = g.push("s_fc", Op::Relu { src: over_ctg });
        g.push("s_fc_agg", Op::Sum { src: s_fc })
    });

    let gen_curves = g.push(
        "generation cost",
        Op::Curves {
            src: input,
            entries: curves.generators.iter().cloned().enumerate().collect(),
            strict_cascade: options.strict_cascade,
        },
    );
    let cost_sum = g.push("sum cost", Op::Sum { src: gen_curves });
    let demand_curves = g.push(
        "demand benefit",
        Op::Curves {
            src: input,
            entries: curves
                .demands
                .iter()
                .cloned()
                .enumerate()
                .map(|(j, c)| (n_g + j, c))
                .collect(),
            strict_cascade: options.strict_cascade,
        },
    );
    let benefit_sum = g.push("sum benefit", Op::Sum { src: demand_curves });

    let terms = [
        (Some(benefit_sum), 1.0),
        (Some(cost_sum), 1.0),
        (Some(inj_sum), case.penalty_inj),
        (Some(base_sum), case.penalty_flow),
        (ctg_sum, case.penalty_flow),
    ];
    let tau = case.tau;
    let weighted: Vec<(NodeId, f64)> = terms
        .iter()
        .zip(Term::ALL)
        .filter_map(|(&(node, mult), term)| {
            let sign = if term == Term::Benefit { 1.0 } else { -1.0 };
            node.map(|n| (n, sign * tau * mult))
        })
        .collect();
    let output = g.push("market surplus", Op::WeightedSum { terms: weighted });

    let mut last_use: Vec<NodeId> = (0..g.nodes.len()).collect();
    for (id, node) in g.nodes.iter().enumerate() {
        for src in node.op.sources() {
            last_use[src] = last_use[src].max(id);
        }
    }
    let fused_tail = fusable_tail(&g.nodes, &last_use, &terms, output);
    let (input_lower, input_upper) = case.input_limits();
    Ok(ScDcopfGraph {
        nodes: g.nodes,
        last_use,
        fused_tail,
        output,
        terms,
        tau,
        input_lower,
        input_upper,
        n_generators: n_g,
        name: String::new(),
    })
}

/// Finds `contingency_flows -> abs -> add_column_const -> relu -> sum`
/// where each intermediate is read only by its successor.
fn fusable_tail(
    nodes: &[Node],
    last_use: &[NodeId],
    terms: &[(Option<NodeId>, f64); 5],
    output: NodeId,
) -> Option<NodeId> {
    let start = nodes.iter().position(|n| matches!(n.op, Op::ContingencyFlows { .. }))?;
    let chain_ok = matches!(nodes.get(start + 1)?.op, Op::Abs { src } if src == start)
        && matches!(nodes.get(start + 2)?.op, Op::AddColumnConst { src, .. } if src == start + 1)
        && matches!(nodes.get(start + 3)?.op, Op::Relu { src } if src == start + 2)
        && matches!(nodes.get(start + 4)?.op, Op::Sum { src } if src == start + 3);
    let private = (start..start + 4).all(|id| {
        last_use[id] == id + 1
            && nodes.iter().filter(|n| n.op.sources().contains(&id)).count() == 1
            && id != output
            && terms.iter().all(|t| t.0 != Some(id))
    });
    (chain_ok && private).then_some(start)
}

#[derive(Debug, Clone)]
enum IValue {
    Vec(IntervalVec),
    Mat(IntervalMatrix),
    Scalar(Interval),
}

#[derive(Debug, Clone)]
enum CValue {
    Vec(DVector<f64>),
    Mat(DMatrix<f64>),
    Scalar(f64),
}

fn shape_error(node: &'static str) -> Error {
    Error::Consistency(format!("unexpected value shape at node '{node}'"))
}

impl ScDcopfGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.input_lower.len()
    }

    pub fn has_contingency_term(&self) -> bool {
        self.terms[4].0.is_some()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// The hard device limits as an interval box.
    pub fn full_box(&self) -> IntervalVec {
        IntervalVec::new(self.input_lower.clone(), self.input_upper.clone()).expect("validated limits")
    }

    fn check_input_dim(&self, len: usize) -> Result<()> {
        if len == self.input_dim() {
            Ok(())
        } else {
            Err(Error::Dimension {
                context: "graph input",
                expected: self.input_dim(),
                actual: len,
            })
        }
    }

    /// Splits a stacked input into `(p^g, p^d)`.
    pub fn split_input<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        x.split_at(self.n_generators)
    }

    /// Exact objective value at a dispatch point.
    pub fn evaluate_concrete(&self, p_g: &[f64], p_d: &[f64]) -> Result<f64> {
        let x: Vec<f64> = p_g.iter().chain(p_d).copied().collect();
        self.evaluate_stacked(&DVector::from_vec(x))
    }

    /// Exact objective value at a stacked dispatch `(p^g, p^d)`.
    pub fn evaluate_stacked(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_input_dim(x.len())?;
        for (k, &v) in x.iter().enumerate() {
            let (min, max) = (self.input_lower[k], self.input_upper[k]);
            if !(min..=max).contains(&v) {
                return Err(Error::Domain { value: v, min, max });
            }
        }
        let values = self.run_concrete(x)?;
        match &values[self.output] {
            Some(CValue::Scalar(v)) => Ok(*v),
            _ => Err(shape_error("output")),
        }
    }

    fn run_concrete(&self, x: &DVector<f64>) -> Result<Vec<Option<CValue>>> {
        let mut values: Vec<Option<CValue>> = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let get_vec = |n: NodeId| match &values[n] {
                Some(CValue::Vec(v)) => Ok(v),
                _ => Err(shape_error(node.label)),
            };
            let value = match &node.op {
                Op::Input { .. } => CValue::Vec(x.clone()),
                Op::Affine { src, map } => CValue::Vec(map.apply(get_vec(*src)?)?),
                Op::Abs { src } => match &values[*src] {
                    Some(CValue::Vec(v)) => CValue::Vec(v.abs()),
                    Some(CValue::Mat(m)) => CValue::Mat(m.abs()),
                    _ => return Err(shape_error(node.label)),
                },
                Op::Relu { src } => match &values[*src] {
                    Some(CValue::Vec(v)) => CValue::Vec(v.map(|e| e.max(0.0))),
                    Some(CValue::Mat(m)) => CValue::Mat(m.map(|e| e.max(0.0))),
                    _ => return Err(shape_error(node.label)),
                },
                Op::AddConst { src, value } => CValue::Vec(get_vec(*src)? + value),
                Op::ContingencyFlows { flows, shifts, mask, b } => {
                    let (f, v) = (get_vec(*flows)?, get_vec(*shifts)?);
                    CValue::Mat(DMatrix::from_fn(mask.nrows(), mask.ncols(), |k, l| {
                        mask[(k, l)] * f[l] - b[(k, l)] * v[k]
                    }))
                }
                Op::AddColumnConst { src, value } => match &values[*src] {
                    Some(CValue::Mat(m)) => {
                        let mut m = m.clone();
                        for (mut col, &c) in m.column_iter_mut().zip(value.iter()) {
                            col.add_scalar_mut(c);
                        }
                        CValue::Mat(m)
                    }
                    _ => return Err(shape_error(node.label)),
                },
                Op::Sum { src } => match &values[*src] {
                    Some(CValue::Vec(v)) => CValue::Scalar(v.sum()),
                    Some(CValue::Mat(m)) => CValue::Scalar(m.sum()),
                    _ => return Err(shape_error(node.label)),
                },
                Op::Curves { src, entries, .. } => {
                    let x = get_vec(*src)?;
                    let vals = entries
                        .iter()
                        .map(|(k, c)| c.eval_concrete(x[*k]))
                        .collect::<Result<Vec<_>>>()?;
                    CValue::Vec(DVector::from_vec(vals))
                }
                Op::WeightedSum { terms } => {
                    let mut acc = 0.0;
                    for &(n, w) in terms {
                        match &values[n] {
                            Some(CValue::Scalar(v)) => acc += w * v,
                            _ => return Err(shape_error(node.label)),
                        }
                    }
                    CValue::Scalar(acc)
                }
            };
            values[id] = Some(value);
        }
        Ok(values)
    }

    /// Interval propagation; keeps term and output values, drops the rest
    /// as soon as their last reader has run.
    fn run_interval(&self, input: &IntervalVec) -> Result<Vec<Option<IValue>>> {
        let mut values: Vec<Option<IValue>> = vec![None; self.nodes.len()];
        let keep: Vec<NodeId> = self
            .terms
            .iter()
            .filter_map(|t| t.0)
            .chain(std::iter::once(self.output))
            .collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if self.fused_tail.is_some_and(|start| (start + 1..=start + 4).contains(&id)) {
                continue;
            }
            let label = node.label;
            let get_vec = |n: NodeId| match &values[n] {
                Some(IValue::Vec(v)) => Ok(v),
                _ => Err(shape_error(label)),
            };
            let value = match &node.op {
                Op::Input { .. } => IValue::Vec(input.clone()),
                Op::Affine { src, map } => IValue::Vec(map.apply_interval(get_vec(*src)?)?),
                Op::Abs { src } => match &values[*src] {
                    Some(IValue::Vec(v)) => IValue::Vec(v.abs()?),
                    Some(IValue::Mat(m)) => IValue::Mat(m.abs()?),
                    _ => return Err(shape_error(label)),
                },
                Op::Relu { src } => match &values[*src] {
                    Some(IValue::Vec(v)) => IValue::Vec(v.relu()?),
                    Some(IValue::Mat(m)) => IValue::Mat(m.relu()?),
                    _ => return Err(shape_error(label)),
                },
                Op::AddConst { src, value } => IValue::Vec(get_vec(*src)?.add_const(value)?),
                Op::ContingencyFlows { flows, shifts, mask, b } => {
                    let (f, v) = (get_vec(*flows)?, get_vec(*shifts)?);
                    match (self.fused_tail, self.nodes.get(id + 2).map(|n| &n.op)) {
                        (Some(start), Some(Op::AddColumnConst { value, .. })) if start == id => {
                            let total = masked_shift_excess_sum(f, v, mask, b, value)?;
                            values[id + 4] = Some(IValue::Scalar(total));
                            for src in node.op.sources() {
                                if self.last_use[src] == id && !keep.contains(&src) {
                                    values[src] = None;
                                }
                            }
                            continue;
                        }
                        _ => IValue::Mat(IntervalMatrix::masked_shift(f, v, mask, b)?),
                    }
                }
                Op::AddColumnConst { src, value } => match &values[*src] {
                    Some(IValue::Mat(m)) => IValue::Mat(m.add_column_consts(value)?),
                    _ => return Err(shape_error(label)),
                },
                Op::Sum { src } => match &values[*src] {
                    Some(IValue::Vec(v)) => IValue::Scalar(v.sum_all()),
                    Some(IValue::Mat(m)) => IValue::Scalar(m.sum_all()),
                    _ => return Err(shape_error(label)),
                },
                Op::Curves {
                    src,
                    entries,
                    strict_cascade,
                } => {
                    let x = get_vec(*src)?;
                    let mut lower = DVector::zeros(entries.len());
                    let mut upper = DVector::zeros(entries.len());
                    for (row, (k, c)) in entries.iter().enumerate() {
                        let y = if *strict_cascade {
                            c.eval_interval_cascade(x.get(*k))?
                        } else {
                            c.eval_interval(x.get(*k))?
                        };
                        lower[row] = y.lower;
                        upper[row] = y.upper;
                    }
                    IValue::Vec(IntervalVec::new(lower, upper)?)
                }
                Op::WeightedSum { terms } => {
                    let mut acc = Interval::ZERO;
                    for &(n, w) in terms {
                        match &values[n] {
                            Some(IValue::Scalar(v)) => {
                                let s = v.scale(w);
                                acc = Interval::new(acc.lower + s.lower, acc.upper + s.upper);
                            }
                            _ => return Err(shape_error(label)),
                        }
                    }
                    if !(acc.lower.is_finite() && acc.upper.is_finite()) {
                        return Err(Error::NonFinite("objective"));
                    }
                    IValue::Scalar(acc)
                }
            };
            values[id] = Some(value);
            for src in node.op.sources() {
                if self.last_use[src] == id && !keep.contains(&src) {
                    values[src] = None;
                }
            }
        }
        Ok(values)
    }
}

/// Bounds on each objective term in $/h (before the `tau` factor).
/// Penalty terms include their price coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermBounds {
    pub benefit: Interval,
    pub cost: Interval,
    pub injection_penalty: Interval,
    pub base_flow_penalty: Interval,
    pub contingency_penalty: Interval,
}

impl TermBounds {
    pub fn get(&self, term: Term) -> Interval {
        match term {
            Term::Benefit => self.benefit,
            Term::Cost => self.cost,
            Term::InjectionPenalty => self.injection_penalty,
            Term::BaseFlowPenalty => self.base_flow_penalty,
            Term::ContingencyPenalty => self.contingency_penalty,
        }
    }

    fn penalties(&self) -> [Interval; 3] {
        [self.injection_penalty, self.base_flow_penalty, self.contingency_penalty]
    }

    /// Sum of the largest absolute value each term can take.
    pub fn magnitude(&self) -> f64 {
        Term::ALL
            .iter()
            .map(|&t| {
                let v = self.get(t);
                v.lower.abs().max(v.upper.abs())
            })
            .sum()
    }

    /// Objective bounds rebuilt from the term bounds, including the
    /// roundoff allowance.
    pub fn recompose(&self, tau: f64) -> Interval {
        let pen_lower: f64 = self.penalties().iter().map(|p| p.lower).sum();
        let pen_upper: f64 = self.penalties().iter().map(|p| p.upper).sum();
        let slack = self.roundoff_slack(tau);
        Interval::new(
            tau * (self.benefit.lower - self.cost.upper - pen_upper) - slack,
            tau * (self.benefit.upper - self.cost.lower - pen_lower) + slack,
        )
    }

    fn roundoff_slack(&self, tau: f64) -> f64 {
        ROUNDOFF_ALLOWANCE * tau.abs() * self.magnitude()
    }
}

/// Certified bounds for one input box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    #[serde(rename = "case")]
    pub case_id: String,
    pub time_index: usize,
    #[serde(rename = "lower")]
    pub objective_lower: f64,
    #[serde(rename = "upper")]
    pub objective_upper: f64,
    #[serde(rename = "infeasible")]
    pub infeasible_certificate: bool,
    pub tau: f64,
    #[serde(rename = "terms")]
    pub term_bounds: TermBounds,
    #[serde(rename = "wall_time_s")]
    pub wall_time: f64,
}

impl BoundReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Propagates `input_box` through the graph.
pub fn compute_bounds(graph: &ScDcopfGraph, input_box: &IntervalVec) -> Result<BoundReport> {
    compute_bounds_at(graph, input_box, 0)
}

fn compute_bounds_at(graph: &ScDcopfGraph, input_box: &IntervalVec, time_index: usize) -> Result<BoundReport> {
    let start = Instant::now();
    graph.check_input_dim(input_box.len())?;
    let values = graph.run_interval(input_box)?;
    let scalar = |n: Option<NodeId>| -> Result<Interval> {
        match n.map(|n| &values[n]) {
            None => Ok(Interval::ZERO),
            Some(Some(IValue::Scalar(v))) => Ok(*v),
            _ => Err(shape_error("term")),
        }
    };
    let term = |k: usize| -> Result<Interval> {
        let (node, mult) = graph.terms[k];
        Ok(scalar(node)?.scale(mult))
    };
    let term_bounds = TermBounds {
        benefit: term(0)?,
        cost: term(1)?,
        injection_penalty: term(2)?,
        base_flow_penalty: term(3)?,
        contingency_penalty: term(4)?,
    };
    let raw = scalar(Some(graph.output))?;
    let slack = term_bounds.roundoff_slack(graph.tau);
    let objective = Interval::new(raw.lower - slack, raw.upper + slack);
    Ok(BoundReport {
        case_id: graph.name.clone(),
        time_index,
        objective_lower: objective.lower,
        objective_upper: objective.upper,
        infeasible_certificate: objective.upper < 0.0,
        tau: graph.tau,
        term_bounds,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Default memory budget for batched propagation, in bytes.
pub const DEFAULT_BATCH_WATERMARK: usize = 2 << 30;

impl ScDcopfGraph {
    /// Rough peak bytes held while propagating one box.
    pub fn working_set_bytes(&self) -> usize {
        let mut total = 0usize;
        for node in &self.nodes {
            let elems = match &node.op {
                Op::ContingencyFlows { mask, .. } if self.fused_tail.is_none() => 4 * mask.len(),
                Op::Affine { map, .. } => map.out_dim(),
                _ => 0,
            };
            total += 2 * 8 * elems;
        }
        total.max(1)
    }
}

/// Bounds for several independent input boxes (time periods) over shared
/// operators. Runs in parallel unless the combined working set exceeds
/// `watermark` bytes, in which case periods are processed one at a time.
pub fn compute_bounds_batch(
    graph: &ScDcopfGraph,
    boxes: &[IntervalVec],
    watermark: usize,
) -> Vec<Result<BoundReport>> {
    let parallel = graph.working_set_bytes().saturating_mul(boxes.len()) <= watermark;
    if parallel {
        boxes
            .par_iter()
            .enumerate()
            .map(|(t, b)| compute_bounds_at(graph, b, t))
            .collect()
    } else {
        boxes
            .iter()
            .enumerate()
            .map(|(t, b)| compute_bounds_at(graph, b, t))
            .collect()
    }
}

/// Relative gap of the certified upper bound over a reference optimum.
pub fn gap(report: &BoundReport, reference_optimum: f64) -> Result<f64> {
    if !(reference_optimum > 0.0) {
        return Err(Error::NonpositiveReference(reference_optimum));
    }
    Ok((report.objective_upper - reference_optimum) / reference_optimum)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ModelOptions {
    pub skip_islanding: bool,
    pub strict_cascade: bool,
}

/// Everything derived from a case: matrices, contingency operators and
/// the objective graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub case: GridCase,
    pub network: NetworkMatrices,
    pub contingencies: ContingencyOperators,
    pub graph: ScDcopfGraph,
    /// Contingencies dropped because they island the network.
    pub skipped_contingencies: Vec<usize>,
}

impl BoundModel {
    pub fn build(case: GridCase, options: ModelOptions) -> Result<Self> {
        let network = network::build_ptdf(&case)?;
        let (contingencies, skipped) = contingency::precompute_with(&network, &case, options.skip_islanding)?;
        let curves = CaseCurves::compile(&case)?;
        let graph = build_graph(
            &case,
            &network,
            Some(&contingencies),
            &curves,
            GraphOptions {
                strict_cascade: options.strict_cascade,
            },
        )?;
        Ok(Self {
            case,
            network,
            contingencies,
            graph,
            skipped_contingencies: skipped,
        })
    }

    /// Bounds over the full device box.
    pub fn bounds(&self) -> Result<BoundReport> {
        compute_bounds(&self.graph, &self.graph.full_box())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_case;

    fn ring3() -> GridCase {
        parse_case(include_str!("../../../docs/cases/ring3.json")).unwrap()
    }

    fn model(case: GridCase) -> BoundModel {
        BoundModel::build(case, ModelOptions::default()).unwrap()
    }

    #[test]
    fn ring3_reference_topology() {
        let m = model(ring3());
        assert_eq!(m.contingencies.len(), 2);
        assert_eq!(
            m.graph.node_kinds(),
            vec![
                "input",
                "affine",
                "affine",
                "affine",
                "abs",
                "sum",
                "abs",
                "add_const",
                "relu",
                "sum",
                "affine",
                "contingency_flows",
                "abs",
                "add_column_const",
                "relu",
                "sum",
                "curves",
                "sum",
                "curves",
                "sum",
                "weighted_sum",
            ]
        );
    }

    #[test]
    fn no_contingencies_drops_subgraph() {
        let m = model(ring3().with_contingencies(vec![]).unwrap());
        assert!(!m.graph.has_contingency_term());
        assert!(!m.graph.node_kinds().contains(&"contingency_flows"));
        assert_eq!(m.graph.nodes().len(), 15);
        let r = m.bounds().unwrap();
        assert_eq!(r.term_bounds.contingency_penalty, Interval::ZERO);
    }

    #[test]
    fn zero_dispatch_is_zero() {
        let m = model(ring3());
        assert_eq!(m.graph.evaluate_concrete(&[0.0, 0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn ring3_reference_dispatch() {
        // Hand computation (docs/cases/README.md): benefit 100*0.6 + 40*0.4
        // = 76, cost 10*0.5 + 15*0.5 = 12.5, balanced and within limits.
        let m = model(ring3());
        let v = m.graph.evaluate_concrete(&[0.5, 0.5], &[1.0]).unwrap();
        assert!((v - 63.5).abs() < 1e-9, "{v}");
    }

    #[test]
    fn forced_overload_costs_exactly_the_penalty() {
        // Two-bus case with a 0.5 limit. Shipping 0.5 + delta over the line
        // adds a base overload of delta, priced at tau * e_f.
        let text = include_str!("../../../docs/cases/two_bus.json").replace(r#""limit_base": 1.0"#, r#""limit_base": 0.5"#);
        let case = parse_case(&text).unwrap();
        let m = model(case.clone());
        let delta = 0.125;
        let at_limit = m.graph.evaluate_concrete(&[0.5], &[0.5]).unwrap();
        let over = m.graph.evaluate_concrete(&[0.5 + delta], &[0.5 + delta]).unwrap();
        let surplus_change = (30.0 - 10.0) * delta;
        let want = surplus_change - case.tau * case.penalty_flow * delta;
        assert!((over - at_limit - want).abs() < 1e-6, "{}", over - at_limit);
    }

    #[test]
    fn out_of_box_dispatch_is_domain_error() {
        let m = model(ring3());
        assert!(matches!(m.graph.evaluate_concrete(&[1.5, 0.0], &[0.0]), Err(Error::Domain { .. })));
        assert!(matches!(m.graph.evaluate_concrete(&[0.0], &[0.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_radius_collapses() {
        let m = model(ring3());
        let x = DVector::from_vec(vec![0.3, 0.8, 0.7]);
        let r = compute_bounds(&m.graph, &IntervalVec::point(&x).unwrap()).unwrap();
        let v = m.graph.evaluate_stacked(&x).unwrap();
        assert!((r.objective_upper - v).abs() <= 1e-9 * v.abs().max(1.0));
        assert!((r.objective_lower - v).abs() <= 1e-9 * v.abs().max(1.0));
    }

    #[test]
    fn allowance_covers_binding_corner() {
        // The best dispatch sits on a box corner where the imbalance is
        // exactly 0.4; operator noise must not push the bound below it.
        let case = parse_case(include_str!("../../../docs/cases/infeasible3.json")).unwrap();
        let m = model(case.clone());
        let r = m.bounds().unwrap();
        assert!(r.infeasible_certificate);
        let exact = case.tau * (27.5 - case.penalty_inj * 0.4);
        assert!(r.objective_upper >= exact, "{} < {exact}", r.objective_upper);
        assert!(r.objective_upper < exact + 1e-4);
        let flat = crate::oracle::flat_objective(&case, &[0.8, 0.6], &[1.0]).unwrap();
        assert!(flat <= r.objective_upper);
    }

    #[test]
    fn terms_recompose() {
        let m = model(ring3());
        let r = m.bounds().unwrap();
        let re = r.term_bounds.recompose(r.tau);
        let scale = r.objective_upper.abs().max(r.objective_lower.abs()).max(1.0);
        assert!((re.upper - r.objective_upper).abs() <= 1e-9 * scale);
        assert!((re.lower - r.objective_lower).abs() <= 1e-9 * scale);
        assert!(r.objective_lower <= r.objective_upper);
        assert_eq!(r.infeasible_certificate, r.objective_upper < 0.0);
    }

    #[test]
    fn strict_cascade_matches_endpoint_eval() {
        let a = BoundModel::build(ring3(), ModelOptions::default()).unwrap().bounds().unwrap();
        let b = BoundModel::build(
            ring3(),
            ModelOptions {
                strict_cascade: true,
                ..Default::default()
            },
        )
        .unwrap()
        .bounds()
        .unwrap();
        assert!((a.objective_upper - b.objective_upper).abs() < 1e-9);
        assert!((a.objective_lower - b.objective_lower).abs() < 1e-9);
    }

    #[test]
    fn fused_contingency_tail_matches_node_by_node() {
        let case = crate::oracle::random_case(14, 1.8, 21);
        let m = model(case);
        assert!(m.graph.fused_tail.is_some());
        let mut plain = m.graph.clone();
        plain.fused_tail = None;
        let fused = compute_bounds(&m.graph, &m.graph.full_box()).unwrap();
        let unfused = compute_bounds(&plain, &plain.full_box()).unwrap();
        let tol = 1e-9 * fused.objective_lower.abs().max(1.0);
        assert!((fused.objective_lower - unfused.objective_lower).abs() < tol);
        assert!((fused.objective_upper - unfused.objective_upper).abs() < 1e-9 * fused.objective_upper.abs().max(1.0));
    }

    #[test]
    fn gap_examples() {
        let mut r = model(ring3()).bounds().unwrap();
        r.objective_upper = 100.0;
        assert_eq!(gap(&r, 100.0).unwrap(), 0.0);
        r.objective_upper = 1.0653 * 100.0;
        assert!((gap(&r, 100.0).unwrap() - 0.0653).abs() < 1e-12);
        assert!(matches!(gap(&r, 0.0), Err(Error::NonpositiveReference(_))));
        assert!(matches!(gap(&r, -3.0), Err(Error::NonpositiveReference(_))));
    }

    #[test]
    fn batch_matches_single_and_serial_fallback() {
        let m = model(ring3());
        let full = m.graph.full_box();
        let half = IntervalVec::new(full.lower().clone(), full.center()).unwrap();
        let boxes = vec![full.clone(), half.clone()];
        for watermark in [usize::MAX, 0] {
            let reports = compute_bounds_batch(&m.graph, &boxes, watermark);
            for (t, (r, b)) in reports.iter().zip(&boxes).enumerate() {
                let r = r.as_ref().unwrap();
                let single = compute_bounds(&m.graph, b).unwrap();
                assert_eq!(r.time_index, t);
                assert_eq!(r.objective_upper, single.objective_upper);
                assert_eq!(r.objective_lower, single.objective_lower);
            }
        }
    }

    #[test]
    fn inconsistent_operators_rejected() {
        let case = ring3();
        let other = parse_case(include_str!("../../../docs/cases/two_bus.json")).unwrap();
        let nm_other = network::build_ptdf(&other).unwrap();
        let curves = CaseCurves::compile(&case).unwrap();
        assert!(matches!(
            build_graph(&case, &nm_other, None, &curves, GraphOptions::default()),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn report_json_schema() {
        let r = model(ring3()).bounds().unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["case", "time_index", "lower", "upper", "infeasible", "terms", "wall_time_s"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        for key in ["benefit", "cost", "injection_penalty", "base_flow_penalty", "contingency_penalty"] {
            assert!(v["terms"].get(key).is_some(), "missing terms.{key}");
        }
    }
}
