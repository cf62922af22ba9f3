//! Piecewise-linear cost and benefit curves compiled to ReLU cascades.
//!
//! Convex costs become a plain sum of shifted ReLUs with slope increments.
//! Concave benefits use the capped recursion
//! `F*_i(x) = min(F*_{i-1}(x) + a_i ReLU(x - b_i), U_i)` with `F*_0 = 0`.

use crate::error::{Error, Result};
use crate::grid::{CurveKind, PwlCurve};
use crate::interval::{Interval, IntervalVec};

use nalgebra::DVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ReluTerm {
    pub slope: f64,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledCurve {
    pub kind: CurveKind,
    /// Convex: slope increments. Concave: raw segment slopes.
    pub terms: Vec<ReluTerm>,
    /// Cumulative caps `U_i`; empty for convex costs.
    pub caps: Vec<f64>,
    pub domain: (f64, f64),
}

pub fn compile(curve: &PwlCurve, p_min: f64) -> Result<CompiledCurve> {
    if curve.segments.is_empty() {
        return Err(Error::CurveShape("curve has no segments".into()));
    }
    for (k, pair) in curve.segments.windows(2).enumerate() {
        let bad = match curve.kind {
            CurveKind::ConvexCost => pair[1].slope < pair[0].slope,
            CurveKind::ConcaveBenefit => pair[1].slope > pair[0].slope,
        };
        if bad {
            return Err(Error::CurveShape(format!(
                "{:?} curve has slope {} after {} at segment {}",
                curve.kind,
                pair[1].slope,
                pair[0].slope,
                k + 1
            )));
        }
    }
    if let Some(s) = curve.segments.iter().find(|s| !(s.width > 0.0) || !(s.slope >= 0.0)) {
        return Err(Error::CurveShape(format!(
            "segment (slope {}, width {}) needs width > 0 and slope >= 0",
            s.slope, s.width
        )));
    }

    let mut shift = p_min;
    let mut previous_slope = 0.0;
    let mut cap = 0.0;
    let mut terms = Vec::with_capacity(curve.segments.len());
    let mut caps = Vec::new();
    for s in &curve.segments {
        let slope = match curve.kind {
            CurveKind::ConvexCost => s.slope - previous_slope,
            CurveKind::ConcaveBenefit => s.slope,
        };
        terms.push(ReluTerm { slope, shift });
        if curve.kind == CurveKind::ConcaveBenefit {
            cap += s.slope * s.width;
            caps.push(cap);
        }
        previous_slope = s.slope;
        shift += s.width;
    }
    Ok(CompiledCurve {
        kind: curve.kind,
        terms,
        caps,
        domain: (p_min, shift),
    })
}

impl CompiledCurve {
    /// The cascade as a function on the whole real line, without the
    /// domain check.
    pub fn cascade_value(&self, x: f64) -> f64 {
        match self.kind {
            CurveKind::ConvexCost => self
                .terms
                .iter()
                .map(|t| t.slope * (x - t.shift).max(0.0))
                .sum(),
            CurveKind::ConcaveBenefit => self
                .terms
                .iter()
                .zip(&self.caps)
                .fold(0.0, |acc, (t, &cap)| (acc + t.slope * (x - t.shift).max(0.0)).min(cap)),
        }
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        let (min, max) = self.domain;
        if (min..=max).contains(&x) {
            Ok(())
        } else {
            Err(Error::Domain { value: x, min, max })
        }
    }

    pub fn eval_concrete(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(self.cascade_value(x))
    }

    /// Exact image of an interval; both curve kinds are nondecreasing.
    pub fn eval_interval(&self, x: Interval) -> Result<Interval> {
        self.check_domain(x.lower)?;
        self.check_domain(x.upper)?;
        Ok(Interval::new(self.cascade_value(x.lower), self.cascade_value(x.upper)))
    }

    /// Node-by-node interval propagation through the ReLU cascade.
    pub fn eval_interval_cascade(&self, x: Interval) -> Result<Interval> {
        self.check_domain(x.lower)?;
        self.check_domain(x.upper)?;
        let input = IntervalVec::new(DVector::from_element(1, x.lower), DVector::from_element(1, x.upper))?;
        let relu_term = |t: &ReluTerm| -> Result<IntervalVec> {
            input
                .add_const(&DVector::from_element(1, -t.shift))?
                .relu()?
                .scale(t.slope)
        };
        let mut acc = IntervalVec::new(DVector::zeros(1), DVector::zeros(1))?;
        match self.kind {
            CurveKind::ConvexCost => {
                for t in &self.terms {
                    acc = acc.add(&relu_term(t)?)?;
                }
            }
            CurveKind::ConcaveBenefit => {
                for (t, &cap) in self.terms.iter().zip(&self.caps) {
                    acc = acc.add(&relu_term(t)?)?.min_const(cap)?;
                }
            }
        }
        Ok(acc.get(0))
    }

    /// Number of ReLU terms.
    pub fn n_segments(&self) -> usize {
        self.terms.len()
    }
}
