//! Incidence and admittance assembly, reduced nodal admittance
//! factorization, and the zero-padded PTDF.
//!
//! Bus angles are never materialized: the PTDF is obtained by solving
//! `Y_B,r X = E_r^T Y_D` against a Cholesky factor of
//! `Y_B,r = E_r^T Y_D E_r` and transposing.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::GridCase;

/// Factorization pivots below this fraction of the largest matrix entry
/// are treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Right-hand sides per parallel solve task.
const SOLVE_CHUNK: usize = 64;

/// Dense network operators for one topology.
#[derive(Debug, Clone)]
pub struct NetworkMatrices {
    /// Full incidence, `n_l x n_b`.
    pub incidence: DMatrix<f64>,
    /// Incidence with the slack column removed, `n_l x (n_b - 1)`.
    pub incidence_reduced: DMatrix<f64>,
    /// Diagonal of `Y_D`.
    pub line_admittance: DVector<f64>,
    /// Full PTDF `Phi`, `n_l x n_b`, zero column at the slack bus.
    pub ptdf: DMatrix<f64>,
    pub slack: usize,
    factor: Cholesky<f64, Dyn>,
}

/// Maps a full bus index to its reduced index, `None` for the slack.
#[inline]
pub fn reduced_index(bus: usize, slack: usize) -> Option<usize> {
    match bus.cmp(&slack) {
        std::cmp::Ordering::Less => Some(bus),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(bus - 1),
    }
}

/// Builds `(E, E_r)`: `+1` at the from bus, `-1` at the to bus.
pub fn build_incidence(case: &GridCase) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n_l, n_b) = (case.n_lines(), case.n_buses());
    let slack = case.slack();
    let mut e = DMatrix::zeros(n_l, n_b);
    for line in &case.lines {
        e[(line.id, line.from_bus)] = 1.0;
        e[(line.id, line.to_bus)] = -1.0;
    }
    let e_r = e.clone().remove_column(slack);
    (e, e_r)
}

/// Assembles `Y_B,r = E_r^T Y_D E_r` directly from the line list.
fn reduced_admittance(case: &GridCase, slack: usize) -> DMatrix<f64> {
    let n_r = case.n_buses() - 1;
    let mut y = DMatrix::zeros(n_r, n_r);
    for line in &case.lines {
        let b = line.susceptance;
        let from = reduced_index(line.from_bus, slack);
        let to = reduced_index(line.to_bus, slack);
        if let Some(f) = from {
            y[(f, f)] += b;
        }
        if let Some(t) = to {
            y[(t, t)] += b;
        }
        if let (Some(f), Some(t)) = (from, to) {
            y[(f, t)] -= b;
            y[(t, f)] -= b;
        }
    }
    y
}

fn factorize(y: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let scale = y.amax();
    let factor = Cholesky::new(y).ok_or(Error::SingularMatrix { ratio: 0.0 })?;
    let min_pivot = factor
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d * d)
        .fold(f64::INFINITY, f64::min);
    let ratio = min_pivot / scale;
    if !(ratio >= PIVOT_TOLERANCE) {
        return Err(Error::SingularMatrix { ratio });
    }
    Ok(factor)
}

/// Solves `Y_B,r X = rhs` column by column against the factorization,
/// splitting columns across the rayon pool.
fn solve_columns(factor: &Cholesky<f64, Dyn>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let n = rhs.nrows();
    let cols = rhs.ncols();
    let chunks: Vec<(usize, usize)> = (0..cols)
        .step_by(SOLVE_CHUNK)
        .map(|start| (start, SOLVE_CHUNK.min(cols - start)))
        .collect();
    let solved: Vec<DMatrix<f64>> = chunks
        .par_iter()
        .map(|&(start, len)| {
            let mut block = rhs.columns(start, len).into_owned();
            factor.solve_mut(&mut block);
            block
        })
        .collect();
    let mut out = DMatrix::zeros(n, cols);
    for (&(start, len), block) in chunks.iter().zip(&solved) {
        out.columns_mut(start, len).copy_from(block);
    }
    out
}

/// Builds the network operators, including the full PTDF.
pub fn build_ptdf(case: &GridCase) -> Result<NetworkMatrices> {
    let slack = case.slack();
    let (incidence, incidence_reduced) = build_incidence(case);
    let line_admittance = DVector::from_iterator(case.n_lines(), case.lines.iter().map(|l| l.susceptance));
    let factor = factorize(reduced_admittance(case, slack))?;

    // X = Y_B,r^{-1} E_r^T Y_D, so Phi_r = X^T by symmetry of Y_B,r.
    let mut rhs = incidence_reduced.transpose();
    for (mut col, &y) in rhs.column_iter_mut().zip(line_admittance.iter()) {
        col *= y;
    }
    let solved = solve_columns(&factor, &rhs);
    let ptdf = solved.transpose().insert_column(slack, 0.0);

    Ok(NetworkMatrices {
        incidence,
        incidence_reduced,
        line_admittance,
        ptdf,
        slack,
        factor,
    })
}

impl NetworkMatrices {
    pub fn n_buses(&self) -> usize {
        self.incidence.ncols()
    }

    pub fn n_lines(&self) -> usize {
        self.incidence.nrows()
    }

    /// Base-case line flows `Phi p_inj`.
    pub fn base_flows(&self, p_inj: &DVector<f64>) -> Result<DVector<f64>> {
        if p_inj.len() != self.n_buses() {
            return Err(Error::Dimension {
                context: "base flows",
                expected: self.n_buses(),
                actual: p_inj.len(),
            });
        }
        Ok(&self.ptdf * p_inj)
    }

    /// Solves `Y_B,r x = rhs` for reduced-dimension right-hand sides.
    pub fn solve_reduced(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.n_buses() - 1 {
            return Err(Error::Dimension {
                context: "reduced solve",
                expected: self.n_buses() - 1,
                actual: rhs.nrows(),
            });
        }
        Ok(solve_columns(&self.factor, rhs))
    }

    /// Nodal imbalance operator `E^T Phi - I`; annihilates balanced injections.
    pub fn imbalance_operator(&self) -> DMatrix<f64> {
        let mut w = self.incidence.tr_mul(&self.ptdf);
        for k in 0..w.nrows() {
            w[(k, k)] -= 1.0;
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_case;

    fn ring3() -> GridCase {
        parse_case(include_str!("../../../docs/cases/ring3.json")).unwrap()
    }

    fn two_bus() -> GridCase {
        parse_case(include_str!("../../../docs/cases/two_bus.json")).unwrap()
    }

    /// Independent PTDF: for each non-slack bus, inject +1 there and -1 at
    /// the slack, solve the full angle system with theta_slack = 0 by
    /// Gaussian elimination, and read flows as y (theta_from - theta_to).
    fn angle_solve_ptdf(case: &GridCase) -> DMatrix<f64> {
        let n = case.n_buses();
        let s = case.slack();
        let mut phi = DMatrix::zeros(case.n_lines(), n);
        for bus in (0..n).filter(|&b| b != s) {
            let mut a = DMatrix::<f64>::zeros(n, n);
            let mut rhs = DVector::<f64>::zeros(n);
            for l in &case.lines {
                let (f, t, y) = (l.from_bus, l.to_bus, l.susceptance);
                a[(f, f)] += y;
                a[(t, t)] += y;
                a[(f, t)] -= y;
                a[(t, f)] -= y;
            }
            rhs[bus] = 1.0;
            // Pin the slack angle.
            for j in 0..n {
                a[(s, j)] = 0.0;
            }
            a[(s, s)] = 1.0;
            rhs[s] = 0.0;
            let theta = a.lu().solve(&rhs).unwrap();
            for l in &case.lines {
                phi[(l.id, bus)] = l.susceptance * (theta[l.from_bus] - theta[l.to_bus]);
            }
        }
        phi
    }

    #[test]
    fn incidence_single_line() {
        let (e, e_r) = build_incidence(&two_bus());
        assert_eq!(e, DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
        assert_eq!(e_r, DMatrix::from_row_slice(1, 1, &[-1.0]));
    }

    #[test]
    fn incidence_ring3() {
        let (e, e_r) = build_incidence(&ring3());
        let want = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 1.0, -1.0, 0.0, -1.0]);
        assert_eq!(e_r, want);
        assert!((e * DVector::from_element(3, 1.0)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ptdf_two_bus() {
        let nm = build_ptdf(&two_bus()).unwrap();
        assert_eq!(nm.ptdf.nrows(), 1);
        assert_eq!(nm.ptdf[(0, 0)], 0.0);
        assert!((nm.ptdf[(0, 1)] + 1.0).abs() < 1e-15);
        let flows = nm.base_flows(&DVector::from_vec(vec![-0.7, 0.7])).unwrap();
        assert!((flows[0] + 0.7).abs() < 1e-15);
    }

    #[test]
    fn ptdf_ring3_matches_angle_solve() {
        let case = ring3();
        let nm = build_ptdf(&case).unwrap();
        let oracle = angle_solve_ptdf(&case);
        assert!((&nm.ptdf - &oracle).amax() < 1e-10);
        assert!(nm.ptdf.column(case.slack()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slack_column_follows_bus_index() {
        let text = include_str!("../../../docs/cases/ring3.json")
            .replace(r#"{"id": 0, "slack": true}"#, r#"{"id": 0}"#)
            .replace(r#"{"id": 2}"#, r#"{"id": 2, "slack": true}"#);
        let case = parse_case(&text).unwrap();
        let nm = build_ptdf(&case).unwrap();
        assert!(nm.ptdf.column(2).iter().all(|&v| v == 0.0));
        assert!((&nm.ptdf - angle_solve_ptdf(&case)).amax() < 1e-10);
    }

    #[test]
    fn base_flows_zero_and_dimension() {
        let nm = build_ptdf(&ring3()).unwrap();
        assert_eq!(nm.base_flows(&DVector::zeros(3)).unwrap(), DVector::zeros(3));
        assert!(matches!(nm.base_flows(&DVector::zeros(2)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn ring3_kirchhoff_residual() {
        let nm = build_ptdf(&ring3()).unwrap();
        let p = DVector::from_vec(vec![0.3, 0.5, -0.8]);
        let flows = nm.base_flows(&p).unwrap();
        let residual = nm.incidence.tr_mul(&flows) - &p;
        assert!(residual.amax() < 1e-10);
        assert!((nm.imbalance_operator() * &p).amax() < 1e-10);
    }

    #[test]
    fn degenerate_susceptance_is_singular() {
        let text = include_str!("../../../docs/cases/two_bus.json").replace("\"susceptance\": 4.0", "\"susceptance\": 1e-300");
        let case = parse_case(&text).unwrap();
        // A 1x1 system is always well-conditioned relative to itself; use a
        // chain where one tiny line dominates the pivot ratio.
        assert!(build_ptdf(&case).is_ok());

        let chain = r#"{
          "buses": [{"id": 0, "slack": true}, {"id": 1}, {"id": 2}],
          "lines": [
            {"id": 0, "from": 0, "to": 1, "susceptance": 1e8, "limit_base": 1.0},
            {"id": 1, "from": 1, "to": 2, "susceptance": 1e-8, "limit_base": 1.0}
          ],
          "generators": [{"id": 0, "bus": 0, "p_min": 0.0, "p_max": 1.0, "cost": [[1.0, 1.0]]}],
          "tau": 1.0
        }"#;
        let case = parse_case(chain).unwrap();
        assert!(matches!(build_ptdf(&case), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn reduced_solve_is_symmetric() {
        let nm = build_ptdf(&ring3()).unwrap();
        let inv = nm.solve_reduced(&DMatrix::identity(2, 2)).unwrap();
        assert!((&inv - inv.transpose()).amax() < 1e-14);
    }
}
