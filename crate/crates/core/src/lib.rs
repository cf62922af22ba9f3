//! Certified interval bounds on the market surplus of a soft-constrained,
//! security-constrained DC optimal power flow.
//!
//! Load a case with [`load_case`], build a [`BoundModel`], and call
//! [`BoundModel::bounds`]. A negative upper bound certifies that no
//! dispatch in the device box clears the market without violations.

pub mod bounds;
pub mod contingency;
pub mod curves;
pub mod error;
pub mod grid;
pub mod interval;
pub mod network;
pub mod oracle;

pub use bounds::{
    build_graph, compute_bounds, compute_bounds_batch, gap, BoundModel, BoundReport, CaseCurves, GraphOptions,
    ModelOptions, ScDcopfGraph, Term, TermBounds,
};
pub use contingency::{contingency_flows, precompute, ContingencyOperators};
pub use curves::{compile, CompiledCurve};
pub use error::{Error, Result};
pub use grid::{load_case, parse_case, Bus, CurveKind, Demand, Generator, GridCase, Line, PwlCurve, Segment};
pub use interval::{affine, AffineMap, Interval, IntervalMatrix, IntervalVec};
pub use network::{build_ptdf, NetworkMatrices};
