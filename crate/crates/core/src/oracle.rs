//! Ground-truth machinery kept independent of the bound engine: a flat
//! objective evaluator, exhaustive grid search for small cases, a seeded
//! soundness sampler, and a random case generator.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{compute_bounds, ScDcopfGraph};
use crate::contingency::{angle_solve_ptdf, direct_recompute_ptdf, is_islanding};
use crate::error::{Error, Result};
use crate::grid::{Bus, CurveKind, Demand, Generator, GridCase, Line, PwlCurve, Segment, DEFAULT_PENALTY};

/// Largest input dimension accepted by [`grid_search_max`].
pub const GRID_SEARCH_MAX_DIM: usize = 6;

/// Boxes up to this dimension also get every corner checked.
pub const CORNER_ENUMERATION_MAX_DIM: usize = 12;

/// Evaluates a curve by walking its segments from `p_min`.
pub fn segment_walk(curve: &PwlCurve, p_min: f64, x: f64) -> f64 {
    let mut remaining = x - p_min;
    let mut value = 0.0;
    for s in &curve.segments {
        if remaining <= 0.0 {
            break;
        }
        let used = remaining.min(s.width);
        value += s.slope * used;
        remaining -= used;
    }
    value
}

/// The objective evaluated directly from the case: segment-walk curves,
/// explicit Kirchhoff residuals, and a from-scratch PTDF per contingency.
#[derive(Debug, Clone)]
pub struct FlatObjective {
    case: GridCase,
    base_ptdf: DMatrix<f64>,
    contingency_ptdfs: Vec<(usize, DMatrix<f64>)>,
}

impl FlatObjective {
    pub fn new(case: &GridCase) -> Result<Self> {
        let base_ptdf = angle_solve_ptdf(case, None)?;
        let contingency_ptdfs = case
            .contingencies
            .iter()
            .map(|&line| direct_recompute_ptdf(case, line).map(|p| (line, p)))
            .collect::<Result<_>>()?;
        Ok(Self {
            case: case.clone(),
            base_ptdf,
            contingency_ptdfs,
        })
    }

    pub fn case(&self) -> &GridCase {
        &self.case
    }

    /// Objective at a stacked dispatch `(p^g, p^d)`.
    pub fn evaluate_stacked(&self, x: &[f64]) -> Result<f64> {
        let n_g = self.case.generators.len();
        if x.len() != self.case.n_inputs() {
            return Err(Error::Dimension {
                context: "flat objective input",
                expected: self.case.n_inputs(),
                actual: x.len(),
            });
        }
        self.evaluate(&x[..n_g], &x[n_g..])
    }

    pub fn evaluate(&self, p_g: &[f64], p_d: &[f64]) -> Result<f64> {
        let case = &self.case;
        if p_g.len() != case.generators.len() || p_d.len() != case.demands.len() {
            return Err(Error::Dimension {
                context: "flat objective dispatch",
                expected: case.n_inputs(),
                actual: p_g.len() + p_d.len(),
            });
        }
        let mut p_inj = DVector::zeros(case.n_buses());
        let mut cost = 0.0;
        for (g, &p) in case.generators.iter().zip(p_g) {
            in_box(p, g.p_min, g.p_max)?;
            cost += segment_walk(&g.cost, g.p_min, p);
            p_inj[g.bus] += p;
        }
        let mut benefit = 0.0;
        for (d, &p) in case.demands.iter().zip(p_d) {
            in_box(p, d.p_min, d.p_max)?;
            benefit += segment_walk(&d.benefit, d.p_min, p);
            p_inj[d.bus] -= p;
        }

        let flows = &self.base_ptdf * &p_inj;

        // Kirchhoff residual per bus: net outflow minus injection.
        let mut outflow = vec![0.0; case.n_buses()];
        for l in &case.lines {
            outflow[l.from_bus] += flows[l.id];
            outflow[l.to_bus] -= flows[l.id];
        }
        let s_inj: f64 = outflow.iter().zip(p_inj.iter()).map(|(o, p)| (o - p).abs()).sum();

        let s_fb: f64 = case
            .lines
            .iter()
            .map(|l| (flows[l.id].abs() - l.flow_limit_base).max(0.0))
            .sum();

        let mut s_fc = 0.0;
        for (outaged, ptdf) in &self.contingency_ptdfs {
            let post = ptdf * &p_inj;
            for l in case.lines.iter().filter(|l| l.id != *outaged) {
                s_fc += (post[l.id].abs() - l.flow_limit_ctg).max(0.0);
            }
        }

        Ok(case.tau
            * (benefit - cost - case.penalty_inj * s_inj - case.penalty_flow * s_fb - case.penalty_flow * s_fc))
    }
}

fn in_box(x: f64, min: f64, max: f64) -> Result<()> {
    if (min..=max).contains(&x) {
        Ok(())
    } else {
        Err(Error::Domain { value: x, min, max })
    }
}

/// One-shot flat evaluation; builds the per-contingency PTDFs each call.
pub fn flat_objective(case: &GridCase, p_g: &[f64], p_d: &[f64]) -> Result<f64> {
    FlatObjective::new(case)?.evaluate(p_g, p_d)
}

/// Coordinates of grid point `k` of `resolution` along `[lo, hi]`.
/// Resolution 1 is the midpoint; otherwise both endpoints are included.
fn grid_coordinate(lo: f64, hi: f64, resolution: usize, k: usize) -> f64 {
    if resolution == 1 {
        0.5 * (lo + hi)
    } else if k + 1 == resolution {
        hi
    } else {
        lo + (hi - lo) * k as f64 / (resolution - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSearchResult {
    pub value: f64,
    pub argmax: Vec<f64>,
    pub evaluations: usize,
}

/// Exhaustive maximum of the flat objective over a tensor grid with
/// `resolution` points per dimension. Ties resolve to the lowest grid index.
pub fn grid_search_max(case: &GridCase, resolution: usize) -> Result<GridSearchResult> {
    grid_search_with(&FlatObjective::new(case)?, resolution)
}

pub fn grid_search_with(flat: &FlatObjective, resolution: usize) -> Result<GridSearchResult> {
    let case = flat.case();
    let dim = case.n_inputs();
    if dim > GRID_SEARCH_MAX_DIM {
        return Err(Error::DimensionTooLarge {
            dim,
            max: GRID_SEARCH_MAX_DIM,
        });
    }
    if resolution == 0 {
        return Err(Error::Dimension {
            context: "grid resolution",
            expected: 1,
            actual: 0,
        });
    }
    let (lo, hi) = case.input_limits();
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|d| (0..resolution).map(|k| grid_coordinate(lo[d], hi[d], resolution, k)).collect())
        .collect();
    let total = resolution.pow(dim as u32);

    let point = |mut index: usize, x: &mut [f64]| {
        for d in (0..dim).rev() {
            x[d] = axes[d][index % resolution];
            index /= resolution;
        }
    };
    let chunk = 4096usize;
    let best = (0..total.div_ceil(chunk))
        .into_par_iter()
        .map(|c| -> Result<(f64, usize)> {
            let mut x = vec![0.0; dim];
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for index in c * chunk..((c + 1) * chunk).min(total) {
                point(index, &mut x);
                let v = flat.evaluate_stacked(&x)?;
                if v > best.0 {
                    best = (v, index);
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold((f64::NEG_INFINITY, usize::MAX), |a, b| {
            if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                b
            } else {
                a
            }
        });
    let mut argmax = vec![0.0; dim];
    point(best.1, &mut argmax);
    Ok(GridSearchResult {
        value: best.0,
        argmax,
        evaluations: total,
    })
}

/// Uniform samples from the box `[lo, hi]`, reproducible under `seed`.
pub fn sample_points(lo: &DVector<f64>, hi: &DVector<f64>, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| DVector::from_fn(lo.len(), |k, _| lo[k] + rng.random::<f64>() * (hi[k] - lo[k])))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SoundnessSummary {
    pub samples: usize,
    pub corners: usize,
    pub violations: usize,
    pub lower: f64,
    pub upper: f64,
    pub min_seen: f64,
    pub max_seen: f64,
}

/// Counts flat-objective values outside `[lower, upper]` over uniform
/// samples in the full device box, plus every box corner when the
/// dimension allows.
pub fn count_violations(flat: &FlatObjective, lower: f64, upper: f64, n_samples: usize, seed: u64) -> Result<SoundnessSummary> {
    let (lo, hi) = flat.case().input_limits();
    let dim = lo.len();
    let mut points = sample_points(&lo, &hi, n_samples, seed);
    let corners = if dim <= CORNER_ENUMERATION_MAX_DIM { 1usize << dim } else { 0 };
    points.extend((0..corners).map(|mask| DVector::from_fn(dim, |k, _| if mask >> k & 1 == 1 { hi[k] } else { lo[k] })));

    let values = points
        .par_iter()
        .map(|x| flat.evaluate_stacked(x.as_slice()))
        .collect::<Result<Vec<f64>>>()?;
    let violations = values.iter().filter(|&&v| !(lower <= v && v <= upper)).count();
    Ok(SoundnessSummary {
        samples: n_samples,
        corners,
        violations,
        lower,
        upper,
        min_seen: values.iter().copied().fold(f64::INFINITY, f64::min),
        max_seen: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Computes certified bounds over the full box and tries to falsify them.
pub fn sample_soundness(case: &GridCase, graph: &ScDcopfGraph, n_samples: usize, seed: u64) -> Result<SoundnessSummary> {
    let report = compute_bounds(graph, &graph.full_box())?;
    count_violations(&FlatObjective::new(case)?, report.objective_lower, report.objective_upper, n_samples, seed)
}

/// Random connected case: a random spanning tree plus extra distinct bus
/// pairs up to `round(density * (n_buses - 1))` lines. Every
/// non-islanding line is a contingency.
pub fn random_case(n_buses: usize, density: f64, seed: u64) -> GridCase {
    assert!(n_buses >= 2, "random_case needs at least two buses");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_buses;
    let max_pairs = n * (n - 1) / 2;
    let target = ((density * (n - 1) as f64).round() as usize).clamp(n - 1, max_pairs);

    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(target);
    let mut seen = HashSet::new();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for k in 1..n {
        let (a, b) = (order[k], order[rng.random_range(0..k)]);
        seen.insert((a.min(b), a.max(b)));
        pairs.push((a, b));
    }
    while pairs.len() < target {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && seen.insert((a.min(b), a.max(b))) {
            pairs.push((a, b));
        }
    }

    let lines: Vec<Line> = pairs
        .into_iter()
        .enumerate()
        .map(|(id, (from_bus, to_bus))| {
            let flow_limit_base = rng.random_range(0.3..1.5);
            Line {
                id,
                from_bus,
                to_bus,
                susceptance: rng.random_range(1.0..10.0),
                flow_limit_base,
                flow_limit_ctg: flow_limit_base * rng.random_range(1.0..1.5),
            }
        })
        .collect();

    let slack = rng.random_range(0..n);
    let buses = (0..n).map(|id| Bus { id, is_slack: id == slack }).collect();

    let n_g = n.div_ceil(4).max(1);
    let n_d = n.div_ceil(3).max(1);
    let generators = (0..n_g)
        .map(|id| {
            let p_min = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.3) };
            let p_max = p_min + rng.random_range(0.2..1.5);
            let cost = random_curve(&mut rng, p_max - p_min, 5.0..60.0, CurveKind::ConvexCost);
            Generator {
                id,
                bus: rng.random_range(0..n),
                p_min,
                p_max,
                cost,
            }
        })
        .collect();
    let demands = (0..n_d)
        .map(|id| {
            let p_min = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.2) };
            let p_max = p_min + rng.random_range(0.2..1.2);
            let benefit = random_curve(&mut rng, p_max - p_min, 30.0..150.0, CurveKind::ConcaveBenefit);
            Demand {
                id,
                bus: rng.random_range(0..n),
                p_min,
                p_max,
                benefit,
            }
        })
        .collect();

    let tau = [0.25, 0.5, 1.0][rng.random_range(0..3)];
    let mut case = GridCase {
        buses,
        lines,
        generators,
        demands,
        contingencies: Vec::new(),
        tau,
        penalty_inj: DEFAULT_PENALTY,
        penalty_flow: DEFAULT_PENALTY,
        base_mva: Some(100.0),
    };
    case.contingencies = (0..case.n_lines()).filter(|&l| !is_islanding(&case, l)).collect();
    debug_assert!(case.validate().is_ok());
    case
}

/// 1-3 segments covering `span` with a 10% tail, slopes ordered by kind.
fn random_curve(rng: &mut ChaCha8Rng, span: f64, slopes: std::ops::Range<f64>, kind: CurveKind) -> PwlCurve {
    let k = rng.random_range(1..=3);
    let mut s: Vec<f64> = (0..k).map(|_| rng.random_range(slopes.clone())).collect();
    s.sort_by(f64::total_cmp);
    if kind == CurveKind::ConcaveBenefit {
        s.reverse();
    }
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let covered = span * 1.1;
    let segments = s
        .into_iter()
        .zip(weights)
        .map(|(slope, w)| Segment {
            slope,
            width: covered * w / total,
        })
        .collect();
    PwlCurve::new(segments, kind)
}
