//! Loop-free N-1 contingency operators via Sherman–Morrison rank-1 updates.
//!
//! For an outage of line `i` with reduced incidence row `e_i`, the
//! post-outage flows are
//!
//! ```text
//! p_fc^i = M_i Phi p_inj - b_i (u_i' p_inj),   u_i = Y_B,r^{-1} e_i,
//! g_i = y_i / (1 + e_i^T u_i y_i),             b_i = M_i Y_D E_r u_i g_i,
//! ```
//!
//! with `y_i = -Y_D[i,i]` and `u_i'` the slack-padded `u_i`. Stacking rows
//! gives `P_fc = M ⊗ (1 (Phi p)^T) - B ⊗ ((U p) 1^T)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{is_connected, GridCase};
use crate::network::{reduced_index, NetworkMatrices};

/// `|1 + e_i^T u_i y_i|` below this means the outage islands the network.
pub const ISLANDING_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ContingencyOperators {
    /// `n_c x n_l`, ones except a zero at the outaged line.
    pub mask: DMatrix<f64>,
    /// Stacked `b_i`, `n_c x n_l`.
    pub b: DMatrix<f64>,
    /// Stacked slack-padded `u_i'`, `n_c x n_b`.
    pub u: DMatrix<f64>,
    /// `1 + e_i^T u_i y_i` per contingency.
    pub denominators: Vec<f64>,
    /// `g_i` per contingency.
    pub gains: Vec<f64>,
    /// Outaged line id for each row.
    pub line_ids: Vec<usize>,
}

impl ContingencyOperators {
    pub fn len(&self) -> usize {
        self.line_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.line_ids.is_empty()
    }

    pub fn n_lines(&self) -> usize {
        self.mask.ncols()
    }

    /// Post-outage flows for every contingency, `n_c x n_l`.
    pub fn flows(&self, nm: &NetworkMatrices, p_inj: &DVector<f64>) -> Result<DMatrix<f64>> {
        let base = nm.base_flows(p_inj)?;
        let shift = &self.u * p_inj;
        Ok(DMatrix::from_fn(self.len(), self.n_lines(), |k, l| {
            self.mask[(k, l)] * base[l] - self.b[(k, l)] * shift[k]
        }))
    }
}

/// Precomputes operators for every contingency in `case`, failing on the
/// first islanding outage.
pub fn precompute(nm: &NetworkMatrices, case: &GridCase) -> Result<ContingencyOperators> {
    build(nm, case, false).map(|(ops, _)| ops)
}

/// Like [`precompute`], but with `skip_islanding` set, islanding outages are
/// dropped and returned instead of failing.
pub fn precompute_with(
    nm: &NetworkMatrices,
    case: &GridCase,
    skip_islanding: bool,
) -> Result<(ContingencyOperators, Vec<usize>)> {
    build(nm, case, skip_islanding)
}

fn build(nm: &NetworkMatrices, case: &GridCase, skip_islanding: bool) -> Result<(ContingencyOperators, Vec<usize>)> {
    if nm.n_lines() != case.n_lines() || nm.n_buses() != case.n_buses() {
        return Err(Error::Consistency(format!(
            "network matrices are {}x{} but the case has {} lines and {} buses",
            nm.n_lines(),
            nm.n_buses(),
            case.n_lines(),
            case.n_buses()
        )));
    }
    let slack = nm.slack;
    let n_r = nm.n_buses() - 1;
    let n_l = nm.n_lines();

    // Column k of the right-hand side is e_i for the k-th contingency.
    let mut rhs = DMatrix::zeros(n_r, case.contingencies.len());
    for (k, &i) in case.contingencies.iter().enumerate() {
        rhs.set_column(k, &nm.incidence_reduced.row(i).transpose());
    }
    let u_red = nm.solve_reduced(&rhs)?;

    // Reduced endpoints of every line, for e^T u style differences.
    let ends: Vec<(Option<usize>, Option<usize>)> = case
        .lines
        .iter()
        .map(|l| (reduced_index(l.from_bus, slack), reduced_index(l.to_bus, slack)))
        .collect();
    let diff = |u: &[f64], line: usize| {
        let (f, t) = ends[line];
        f.map_or(0.0, |f| u[f]) - t.map_or(0.0, |t| u[t])
    };

    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    let mut denominators = Vec::new();
    let mut gains = Vec::new();
    for (k, &i) in case.contingencies.iter().enumerate() {
        let u = u_red.column(k);
        let u = u.as_slice();
        let y = -nm.line_admittance[i];
        let denominator = 1.0 + diff(u, i) * y;
        if denominator.abs() < ISLANDING_TOLERANCE {
            if skip_islanding {
                log::warn!("skipping contingency on line {i}: outage islands the network");
                skipped.push(i);
                continue;
            }
            return Err(Error::Islanding { line: i, denominator });
        }
        kept.push(k);
        denominators.push(denominator);
        gains.push(y / denominator);
    }

    let n_c = kept.len();
    let line_ids: Vec<usize> = kept.iter().map(|&k| case.contingencies[k]).collect();
    let mut mask = DMatrix::from_element(n_c, n_l, 1.0);
    let mut b = DMatrix::zeros(n_c, n_l);
    let mut u_pad = DMatrix::zeros(n_c, nm.n_buses());
    for (row, (&k, &i)) in kept.iter().zip(&line_ids).enumerate() {
        let u = u_red.column(k);
        let u = u.as_slice();
        mask[(row, i)] = 0.0;
        let g = gains[row];
        for l in (0..n_l).filter(|&l| l != i) {
            b[(row, l)] = nm.line_admittance[l] * diff(u, l) * g;
        }
        for (bus, mut col) in u_pad.column_iter_mut().enumerate() {
            if let Some(r) = reduced_index(bus, slack) {
                col[row] = u[r];
            }
        }
    }

    Ok((
        ContingencyOperators {
            mask,
            b,
            u: u_pad,
            denominators,
            gains,
            line_ids,
        },
        skipped,
    ))
}

/// Post-outage flows for all contingencies in `ops`.
pub fn contingency_flows(ops: &ContingencyOperators, nm: &NetworkMatrices, p_inj: &DVector<f64>) -> Result<DMatrix<f64>> {
    ops.flows(nm, p_inj)
}

/// True when removing `line` disconnects the network.
pub fn is_islanding(case: &GridCase, line: usize) -> bool {
    !is_connected(
        case.n_buses(),
        case.lines
            .iter()
            .filter(|l| l.id != line)
            .map(|l| (l.from_bus, l.to_bus)),
    )
}

/// Post-outage PTDF rebuilt from scratch with `line` deleted. Row `line`
/// is zero.
///
/// Shares no code with [`crate::network::build_ptdf`]; it exists to check
/// the rank-1 path.
pub fn direct_recompute_ptdf(case: &GridCase, line: usize) -> Result<DMatrix<f64>> {
    if line >= case.n_lines() {
        return Err(Error::Dimension {
            context: "contingency line id",
            expected: case.n_lines(),
            actual: line,
        });
    }
    if is_islanding(case, line) {
        return Err(Error::Disconnected(format!("outage of line {line} islands the network")));
    }
    angle_solve_ptdf(case, Some(line))
}

/// PTDF by solving the full angle system `B theta = e_bus` with the slack
/// angle pinned to zero, one right-hand side per bus, via LU. Lines in
/// `outage` are left out and get a zero row.
pub fn angle_solve_ptdf(case: &GridCase, outage: Option<usize>) -> Result<DMatrix<f64>> {
    let n = case.n_buses();
    let s = case.slack();
    let in_service = || case.lines.iter().filter(move |l| Some(l.id) != outage);
    let mut a = DMatrix::<f64>::zeros(n, n);
    for l in in_service() {
        let (f, t, y) = (l.from_bus, l.to_bus, l.susceptance);
        a[(f, f)] += y;
        a[(t, t)] += y;
        a[(f, t)] -= y;
        a[(t, f)] -= y;
    }
    for j in 0..n {
        a[(s, j)] = 0.0;
    }
    a[(s, s)] = 1.0;

    // Injecting at the slack moves no power, so its column stays zero.
    let mut rhs = DMatrix::<f64>::identity(n, n);
    rhs[(s, s)] = 0.0;
    let theta = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Disconnected(format!("angle system without line {outage:?} is singular")))?;
    let mut phi = DMatrix::zeros(case.n_lines(), n);
    for l in in_service() {
        for bus in 0..n {
            phi[(l.id, bus)] = l.susceptance * (theta[(l.from_bus, bus)] - theta[(l.to_bus, bus)]);
        }
    }
    Ok(phi)
}

/// Post-outage flows for a single line outage, computed by direct rebuild.
pub fn direct_recompute_oracle(case: &GridCase, line: usize, p_inj: &DVector<f64>) -> Result<DVector<f64>> {
    if p_inj.len() != case.n_buses() {
        return Err(Error::Dimension {
            context: "direct recompute injection",
            expected: case.n_buses(),
            actual: p_inj.len(),
        });
    }
    Ok(direct_recompute_ptdf(case, line)? * p_inj)
}
