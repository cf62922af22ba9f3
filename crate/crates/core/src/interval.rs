//! Interval vectors and sound propagation rules.
//!
//! Intervals are closed and carried as two dense vectors. Arithmetic is
//! ordinary `f64` (no directed rounding). Any operation that would produce
//! a non-finite endpoint fails with [`Error::NonFinite`] instead of
//! propagating it.


use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scalar closed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub const ZERO: Interval = Interval { lower: 0.0, upper: 0.0 };

    pub fn new(lower: f64, upper: f64) -> Self {
        debug_assert!(lower <= upper, "inverted interval [{lower}, {upper}]");
        Self { lower, upper }
    }

    pub fn point(x: f64) -> Self {
        Self { lower: x, upper: x }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Sign-aware scaling by a constant.
    pub fn scale(self, c: f64) -> Self {
        if c >= 0.0 {
            Self::new(c * self.lower, c * self.upper)
        } else {
            Self::new(c * self.upper, c * self.lower)
        }
    }
}

/// Element-wise bounds `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalVec {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl IntervalVec {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                context: "interval bounds",
                expected: lower.len(),
                actual: upper.len(),
            });
        }
        let iv = Self { lower, upper };
        iv.check("interval construction")?;
        for (index, (&lo, &hi)) in iv.lower.iter().zip(iv.upper.iter()).enumerate() {
            if lo > hi {
                return Err(Error::InvertedInterval { index, lower: lo, upper: hi });
            }
        }
        Ok(iv)
    }

    /// `[center - radius, center + radius]`.
    pub fn from_box(center: &DVector<f64>, radius: &DVector<f64>) -> Result<Self> {
        if center.len() != radius.len() {
            return Err(Error::Dimension {
                context: "box radius",
                expected: center.len(),
                actual: radius.len(),
            });
        }
        if let Some((index, &r)) = radius.iter().enumerate().find(|(_, r)| !(**r >= 0.0)) {
            return Err(Error::NegativeRadius { index, radius: r });
        }
        Self::new(center - radius, center + radius)
    }

    /// Zero-width interval at `x`.
    pub fn point(x: &DVector<f64>) -> Result<Self> {
        Self::new(x.clone(), x.clone())
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn get(&self, k: usize) -> Interval {
        Interval::new(self.lower[k], self.upper[k])
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.upper + &self.lower) * 0.5
    }

    pub fn radius(&self) -> DVector<f64> {
        (&self.upper - &self.lower) * 0.5
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.len()
            && x
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    /// True when `self` lies inside `other` element-wise.
    pub fn is_subset_of(&self, other: &IntervalVec) -> bool {
        self.len() == other.len()
            && (0..self.len()).all(|k| other.lower[k] <= self.lower[k] && self.upper[k] <= other.upper[k])
    }

    fn check(&self, context: &'static str) -> Result<()> {
        if self.lower.iter().chain(self.upper.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }

    fn same_len(&self, other: &IntervalVec, context: &'static str) -> Result<()> {
        if self.len() == other.len() {
            Ok(())
        } else {
            Err(Error::Dimension {
                context,
                expected: self.len(),
                actual: other.len(),
            })
        }
    }

    /// Applies a nondecreasing scalar map to both endpoints.
    fn map_monotone(&self, f: impl Fn(f64) -> f64, context: &'static str) -> Result<Self> {
        let out = Self {
            lower: self.lower.map(&f),
            upper: self.upper.map(&f),
        };
        out.check(context)?;
        Ok(out)
    }

    /// Exact image of `|x|`.
    pub fn abs(&self) -> Result<Self> {
        let mut lower = self.lower.clone();
        let mut upper = self.upper.clone();
        for k in 0..self.len() {
            let (lo, hi) = (self.lower[k], self.upper[k]);
            if lo >= 0.0 {
                // Already nonnegative.
            } else if hi <= 0.0 {
                lower[k] = -hi;
                upper[k] = -lo;
            } else {
                lower[k] = 0.0;
                upper[k] = hi.max(-lo);
            }
        }
        Ok(Self { lower, upper })
    }

    /// Exact image of `max(x, 0)`.
    pub fn relu(&self) -> Result<Self> {
        self.map_monotone(|v| v.max(0.0), "relu")
    }

    /// Exact image of `min(x, c)`.
    pub fn min_const(&self, c: f64) -> Result<Self> {
        self.map_monotone(|v| v.min(c), "min")
    }

    /// Exact image of `max(x, c)`.
    pub fn max_const(&self, c: f64) -> Result<Self> {
        self.map_monotone(|v| v.max(c), "max")
    }

    pub fn add(&self, other: &IntervalVec) -> Result<Self> {
        self.same_len(other, "interval add")?;
        let out = Self {
            lower: &self.lower + &other.lower,
            upper: &self.upper + &other.upper,
        };
        out.check("add")?;
        Ok(out)
    }

    pub fn sub(&self, other: &IntervalVec) -> Result<Self> {
        self.add(&other.neg())
    }

    /// Adds a constant vector.
    pub fn add_const(&self, c: &DVector<f64>) -> Result<Self> {
        if c.len() != self.len() {
            return Err(Error::Dimension {
                context: "interval add constant",
                expected: self.len(),
                actual: c.len(),
            });
        }
        let out = Self {
            lower: &self.lower + c,
            upper: &self.upper + c,
        };
        out.check("add constant")?;
        Ok(out)
    }

    pub fn neg(&self) -> Self {
        Self {
            lower: -&self.upper,
            upper: -&self.lower,
        }
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        let out = if c >= 0.0 {
            Self {
                lower: &self.lower * c,
                upper: &self.upper * c,
            }
        } else {
            Self {
                lower: &self.upper * c,
                upper: &self.lower * c,
            }
        };
        out.check("scale")?;
        Ok(out)
    }

    /// Sum of all elements: `[sum lower, sum upper]`.
    pub fn sum_all(&self) -> Interval {
        Interval::new(self.lower.sum(), self.upper.sum())
    }

    /// Element-wise product with constants, swapping endpoints where the
    /// constant is negative.
    pub fn hadamard_const(&self, c: &[f64]) -> Result<Self> {
        if c.len() != self.len() {
            return Err(Error::Dimension {
                context: "hadamard",
                expected: self.len(),
                actual: c.len(),
            });
        }
        let mut lower = self.lower.clone();
        let mut upper = self.upper.clone();
        for (k, &a) in c.iter().enumerate() {
            let (lo, hi) = (a * self.lower[k], a * self.upper[k]);
            lower[k] = lo.min(hi);
            upper[k] = lo.max(hi);
        }
        let out = Self { lower, upper };
        out.check("hadamard")?;
        Ok(out)
    }
}

/// Interval-valued matrix stored column-major, matching `nalgebra`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalMatrix {
    rows: usize,
    cols: usize,
    data: IntervalVec,
}

impl IntervalMatrix {
    pub fn new(lower: DMatrix<f64>, upper: DMatrix<f64>) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::Dimension {
                context: "interval matrix bounds",
                expected: lower.len(),
                actual: upper.len(),
            });
        }
        let (rows, cols) = lower.shape();
        let data = IntervalVec::new(
            DVector::from_column_slice(lower.as_slice()),
            DVector::from_column_slice(upper.as_slice()),
        )?;
        Ok(Self { rows, cols, data })
    }

    /// `1 v^T`: `v` replicated as each of `rows` rows.
    pub fn broadcast_rows(v: &IntervalVec, rows: usize) -> Self {
        let cols = v.len();
        let lower = DMatrix::from_fn(rows, cols, |_, c| v.lower[c]);
        let upper = DMatrix::from_fn(rows, cols, |_, c| v.upper[c]);
        Self::from_parts(lower, upper)
    }

    /// `v 1^T`: `v` replicated as each of `cols` columns.
    pub fn broadcast_cols(v: &IntervalVec, cols: usize) -> Self {
        let rows = v.len();
        let lower = DMatrix::from_fn(rows, cols, |r, _| v.lower[r]);
        let upper = DMatrix::from_fn(rows, cols, |r, _| v.upper[r]);
        Self::from_parts(lower, upper)
    }

    /// `mask ⊗ (1 f^T) - b ⊗ (v 1^T)` in one pass over the output.
    pub fn masked_shift(f: &IntervalVec, v: &IntervalVec, mask: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = (v.len(), f.len());
        if mask.shape() != (rows, cols) || b.shape() != (rows, cols) {
            return Err(Error::Dimension {
                context: "masked shift",
                expected: rows * cols,
                actual: mask.len().min(b.len()),
            });
        }
        let scaled = |c: f64, lo: f64, hi: f64| if c >= 0.0 { (c * lo, c * hi) } else { (c * hi, c * lo) };
        let mut lower = DVector::zeros(rows * cols);
        let mut upper = DVector::zeros(rows * cols);
        for c in 0..cols {
            let (f_lo, f_hi) = (f.lower[c], f.upper[c]);
            for r in 0..rows {
                let (a_lo, a_hi) = scaled(mask[(r, c)], f_lo, f_hi);
                let (s_lo, s_hi) = scaled(b[(r, c)], v.lower[r], v.upper[r]);
                let k = c * rows + r;
                lower[k] = a_lo - s_hi;
                upper[k] = a_hi - s_lo;
            }
        }
        let data = IntervalVec { lower, upper };
        data.check("masked shift")?;
        Ok(Self { rows, cols, data })
    }

    fn from_parts(lower: DMatrix<f64>, upper: DMatrix<f64>) -> Self {
        let (rows, cols) = lower.shape();
        Self {
            rows,
            cols,
            data: IntervalVec {
                lower: DVector::from_column_slice(lower.as_slice()),
                upper: DVector::from_column_slice(upper.as_slice()),
            },
        }
    }

    fn with_data(&self, data: IntervalVec) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> Interval {
        self.data.get(c * self.rows + r)
    }

    pub fn lower(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, self.cols, self.data.lower.as_slice())
    }

    pub fn upper(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, self.cols, self.data.upper.as_slice())
    }

    /// Flattened column-major view.
    pub fn as_vec(&self) -> &IntervalVec {
        &self.data
    }

    /// `A ⊗ X` for a constant `A`.
    pub fn hadamard_const(&self, a: &DMatrix<f64>) -> Result<Self> {
        if a.shape() != self.shape() {
            return Err(Error::Dimension {
                context: "hadamard matrix",
                expected: self.rows * self.cols,
                actual: a.len(),
            });
        }
        Ok(self.with_data(self.data.hadamard_const(a.as_slice())?))
    }

    pub fn sub(&self, other: &IntervalMatrix) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                context: "interval matrix sub",
                expected: self.rows * self.cols,
                actual: other.rows * other.cols,
            });
        }
        Ok(self.with_data(self.data.sub(&other.data)?))
    }

    pub fn abs(&self) -> Result<Self> {
        Ok(self.with_data(self.data.abs()?))
    }

    pub fn relu(&self) -> Result<Self> {
        Ok(self.with_data(self.data.relu()?))
    }

    /// Adds `c[col]` to every entry of column `col`.
    pub fn add_column_consts(&self, c: &DVector<f64>) -> Result<Self> {
        if c.len() != self.cols {
            return Err(Error::Dimension {
                context: "column constants",
                expected: self.cols,
                actual: c.len(),
            });
        }
        let mut data = self.data.clone();
        for (k, (lo, hi)) in data.lower.iter_mut().zip(data.upper.iter_mut()).enumerate() {
            let shift = c[k / self.rows];
            *lo += shift;
            *hi += shift;
        }
        data.check("add column constants")?;
        Ok(self.with_data(data))
    }

    pub fn sum_all(&self) -> Interval {
        self.data.sum_all()
    }
}

/// `sum relu(|mask ⊗ (1 f^T) - b ⊗ (v 1^T)| + 1 c^T)` in one pass, without
/// materializing the intermediate matrices.
pub fn masked_shift_excess_sum(
    f: &IntervalVec,
    v: &IntervalVec,
    mask: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DVector<f64>,
) -> Result<Interval> {
    let (rows, cols) = (v.len(), f.len());
    if mask.shape() != (rows, cols) || b.shape() != (rows, cols) || c.len() != cols {
        return Err(Error::Dimension {
            context: "masked shift excess",
            expected: rows * cols,
            actual: mask.len().min(b.len()),
        });
    }
    // Independent accumulator lanes let the inner loop vectorize.
    const LANES: usize = 8;
    let excess = |m: f64, b: f64, f_lo: f64, f_hi: f64, v_lo: f64, v_hi: f64, shift: f64| {
        let (a1, a2) = (m * f_lo, m * f_hi);
        let (s1, s2) = (b * v_lo, b * v_hi);
        let lo = a1.min(a2) - s1.max(s2);
        let hi = a1.max(a2) - s1.min(s2);
        let abs_lo = lo.max(-hi).max(0.0);
        let abs_hi = hi.max(-lo);
        ((abs_lo + shift).max(0.0), (abs_hi + shift).max(0.0))
    };
    let (v_lo, v_hi) = (v.lower.as_slice(), v.upper.as_slice());
    let mut lanes_lo = [0.0; LANES];
    let mut lanes_hi = [0.0; LANES];
    let (mut total_lo, mut total_hi) = (0.0, 0.0);
    let full = rows - rows % LANES;
    for col in 0..cols {
        let (f_lo, f_hi, shift) = (f.lower[col], f.upper[col], c[col]);
        let mask = &mask.as_slice()[col * rows..][..rows];
        let b = &b.as_slice()[col * rows..][..rows];
        for start in (0..full).step_by(LANES) {
            for j in 0..LANES {
                let r = start + j;
                let (lo, hi) = excess(mask[r], b[r], f_lo, f_hi, v_lo[r], v_hi[r], shift);
                lanes_lo[j] += lo;
                lanes_hi[j] += hi;
            }
        }
        for r in full..rows {
            let (lo, hi) = excess(mask[r], b[r], f_lo, f_hi, v_lo[r], v_hi[r], shift);
            total_lo += lo;
            total_hi += hi;
        }
    }
    total_lo += lanes_lo.iter().sum::<f64>();
    total_hi += lanes_hi.iter().sum::<f64>();
    if !(total_lo.is_finite() && total_hi.is_finite()) {
        return Err(Error::NonFinite("masked shift excess"));
    }
    Ok(Interval::new(total_lo, total_hi))
}

/// `y = W x + b`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

impl AffineMap {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Dimension {
                context: "affine bias",
                expected: weight.nrows(),
                actual: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn linear(weight: DMatrix<f64>) -> Self {
        let bias = DVector::zeros(weight.nrows());
        Self { weight, bias }
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len == self.in_dim() {
            Ok(())
        } else {
            Err(Error::Dimension {
                context: "affine input",
                expected: self.in_dim(),
                actual: len,
            })
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x.len())?;
        Ok(&self.weight * x + &self.bias)
    }

    /// Midpoint-radius propagation, `y_mu = W x_mu + b` and
    /// `y_sigma = |W| x_sigma`, in a single sweep over `W`.
    pub fn apply_interval(&self, x: &IntervalVec) -> Result<IntervalVec> {
        self.check_input(x.len())?;
        let (center, radius) = (x.center(), x.radius());
        let rows = self.out_dim();
        let mut mu = self.bias.clone();
        let mut sigma = DVector::zeros(rows);
        if rows > 0 {
            for (j, col) in self.weight.as_slice().chunks_exact(rows).enumerate() {
                let (m, r) = (center[j], radius[j]);
                if m == 0.0 && r == 0.0 {
                    continue;
                }
                for ((w, mu), sigma) in col.iter().zip(mu.as_mut_slice()).zip(sigma.as_mut_slice()) {
                    *mu += w * m;
                    *sigma += w.abs() * r;
                }
            }
        }
        let out = IntervalVec {
            lower: &mu - &sigma,
            upper: mu + sigma,
        };
        out.check("affine")?;
        Ok(out)
    }
}

/// One-shot affine propagation.
pub fn affine(weight: &DMatrix<f64>, bias: &DVector<f64>, x: &IntervalVec) -> Result<IntervalVec> {
    AffineMap::new(weight.clone(), bias.clone())?.apply_interval(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iv(lower: &[f64], upper: &[f64]) -> IntervalVec {
        IntervalVec::new(DVector::from_column_slice(lower), DVector::from_column_slice(upper)).unwrap()
    }

    fn bounds(x: &IntervalVec) -> (Vec<f64>, Vec<f64>) {
        (x.lower().iter().copied().collect(), x.upper().iter().copied().collect())
    }

    #[test]
    fn from_box_examples() {
        let x = IntervalVec::from_box(&DVector::from_vec(vec![1.0]), &DVector::from_vec(vec![0.0])).unwrap();
        assert_eq!(bounds(&x), (vec![1.0], vec![1.0]));
        let x = IntervalVec::from_box(&DVector::from_vec(vec![0.0, 2.0]), &DVector::from_vec(vec![1.0, 0.5])).unwrap();
        assert_eq!(bounds(&x), (vec![-1.0, 1.5], vec![1.0, 2.5]));
        assert!(matches!(
            IntervalVec::from_box(&DVector::from_vec(vec![0.0]), &DVector::from_vec(vec![-1.0])),
            Err(Error::NegativeRadius { index: 0, .. })
        ));
    }

    #[test]
    fn generator_box_roundtrip() {
        let (lo, hi) = (0.25, 1.75);
        let x = IntervalVec::from_box(
            &DVector::from_vec(vec![(lo + hi) / 2.0]),
            &DVector::from_vec(vec![(hi - lo) / 2.0]),
        )
        .unwrap();
        assert_eq!(bounds(&x), (vec![lo], vec![hi]));
    }

    #[test]
    fn rejects_nan_and_inverted() {
        assert!(matches!(
            IntervalVec::new(DVector::from_vec(vec![f64::NAN]), DVector::from_vec(vec![1.0])),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            IntervalVec::new(DVector::from_vec(vec![2.0]), DVector::from_vec(vec![1.0])),
            Err(Error::InvertedInterval { index: 0, .. })
        ));
        let x = iv(&[1e308], &[1e308]);
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn affine_examples() {
        let x = iv(&[0.0, 0.0], &[1.0, 1.0]);
        let y = affine(&DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), &DVector::zeros(1), &x).unwrap();
        assert_eq!(bounds(&y), (vec![-1.0], vec![1.0]));
        let y = affine(&DMatrix::identity(2, 2), &DVector::zeros(2), &x).unwrap();
        assert_eq!(y, x);
        assert!(matches!(
            affine(&DMatrix::identity(3, 3), &DVector::zeros(3), &x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn affine_monte_carlo_soundness() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
        let b = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let lo = DVector::from_fn(3, |_, _| rng.random_range(-1.0..0.0));
        let hi = &lo + DVector::from_fn(3, |_, _| rng.random_range(0.0..2.0));
        let x = IntervalVec::new(lo.clone(), hi.clone()).unwrap();
        let y = affine(&w, &b, &x).unwrap();
        for _ in 0..1000 {
            let p = DVector::from_fn(3, |k, _| rng.random_range(lo[k]..=hi[k]));
            assert!(y.contains(&(&w * p + &b)));
        }
    }

    #[test]
    fn masked_shift_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = iv(&[-1.0, 0.5, -2.0, 0.0], &[0.5, 1.5, -1.0, 0.0]);
        let v = iv(&[-0.3, 0.2, -1.0], &[0.4, 0.9, -0.5]);
        let mask = DMatrix::from_fn(3, 4, |r, c| if r == c { 0.0 } else { 1.0 });
        let b = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-3.0..3.0));
        let fused = IntervalMatrix::masked_shift(&f, &v, &mask, &b).unwrap();
        let kept = IntervalMatrix::broadcast_rows(&f, 3).hadamard_const(&mask).unwrap();
        let shift = IntervalMatrix::broadcast_cols(&v, 4).hadamard_const(&b).unwrap();
        assert_eq!(fused, kept.sub(&shift).unwrap());
        assert!(IntervalMatrix::masked_shift(&f, &v, &b.transpose(), &b).is_err());
    }

    #[test]
    fn fused_excess_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (rows, cols) = (6, 9);
        let lo: Vec<f64> = (0..cols).map(|_| rng.random_range(-2.0..1.0)).collect();
        let f = iv(&lo, &lo.iter().map(|x| x + rng.random_range(0.0..1.5)).collect::<Vec<_>>());
        let lo: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = iv(&lo, &lo.iter().map(|x| x + rng.random_range(0.0..0.5)).collect::<Vec<_>>());
        let mask = DMatrix::from_fn(rows, cols, |r, c| if r == c { 0.0 } else { 1.0 });
        let b = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(cols, |_, _| -rng.random_range(0.1..1.0));
        let fused = masked_shift_excess_sum(&f, &v, &mask, &b, &c).unwrap();
        let composed = IntervalMatrix::masked_shift(&f, &v, &mask, &b)
            .unwrap()
            .abs()
            .unwrap()
            .add_column_consts(&c)
            .unwrap()
            .relu()
            .unwrap()
            .sum_all();
        assert!((fused.lower - composed.lower).abs() < 1e-12);
        assert!((fused.upper - composed.upper).abs() < 1e-12);
        assert!(composed.upper > 0.0);
    }

    #[test]
    fn unary_examples() {
        assert_eq!(bounds(&iv(&[-2.0], &[1.0]).abs().unwrap()), (vec![0.0], vec![2.0]));
        assert_eq!(bounds(&iv(&[3.0], &[5.0]).abs().unwrap()), (vec![3.0], vec![5.0]));
        assert_eq!(bounds(&iv(&[-4.0], &[-1.0]).abs().unwrap()), (vec![1.0], vec![4.0]));
        assert_eq!(bounds(&iv(&[-1.0], &[2.0]).relu().unwrap()), (vec![0.0], vec![2.0]));
        assert_eq!(bounds(&iv(&[1.0], &[5.0]).min_const(3.0).unwrap()), (vec![1.0], vec![3.0]));
        assert_eq!(bounds(&iv(&[-2.0], &[-1.0]).max_const(0.0).unwrap()), (vec![0.0], vec![0.0]));
    }

    #[test]
    fn structural_examples() {
        let x = IntervalMatrix::new(DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 3.0)).unwrap();
        let y = x.hadamard_const(&DMatrix::from_element(1, 1, -1.0)).unwrap();
        assert_eq!(y.get(0, 0), Interval::new(-3.0, -2.0));

        let m = IntervalMatrix::new(
            DMatrix::from_row_slice(2, 1, &[0.0, 2.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 3.0]),
        )
        .unwrap();
        assert_eq!(m.sum_all(), Interval::new(2.0, 4.0));

        let z = iv(&[-1.0, 2.0], &[4.0, 3.0]).scale(0.0).unwrap();
        assert_eq!(bounds(&z), (vec![0.0, 0.0], vec![0.0, 0.0]));
        assert_eq!(bounds(&iv(&[-1.0], &[4.0]).neg()), (vec![-4.0], vec![1.0]));
        assert_eq!(bounds(&iv(&[-1.0], &[4.0]).scale(-2.0).unwrap()), (vec![-8.0], vec![2.0]));
    }

    #[test]
    fn broadcasts_place_entries() {
        let v = iv(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5]);
        let r = IntervalMatrix::broadcast_rows(&v, 2);
        assert_eq!(r.shape(), (2, 3));
        assert_eq!(r.get(1, 2), Interval::new(3.0, 3.5));
        let c = IntervalMatrix::broadcast_cols(&v, 4);
        assert_eq!(c.shape(), (3, 4));
        assert_eq!(c.get(2, 3), Interval::new(3.0, 3.5));
        let shifted = c.add_column_consts(&DVector::from_vec(vec![0.0, 0.0, 0.0, -1.0])).unwrap();
        assert_eq!(shifted.get(0, 3), Interval::new(0.0, 0.5));
    }

    #[test]
    fn single_sweep_matches_two_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = DMatrix::from_fn(7, 4, |_, _| rng.random_range(-2.0..2.0));
        let b = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        let x = iv(&[-1.0, 0.0, 0.3, 2.0], &[1.0, 0.0, 0.9, 2.5]);
        let y = AffineMap::new(w.clone(), b.clone()).unwrap().apply_interval(&x).unwrap();
        let mu = &w * x.center() + &b;
        let sigma = w.abs() * x.radius();
        for k in 0..7 {
            assert!((y.lower()[k] - (mu[k] - sigma[k])).abs() < 1e-12);
            assert!((y.upper()[k] - (mu[k] + sigma[k])).abs() < 1e-12);
        }
    }

    // Property tests: soundness, exactness, inclusion monotonicity and
    // degenerate collapse for each primitive.

    const N: usize = 4;

    fn interval_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        prop::collection::vec((-10.0f64..10.0, 0.0f64..5.0), N)
            .prop_map(|v| v.into_iter().map(|(lo, w)| (lo, lo + w)).unzip())
    }

    /// Applies primitive `op` to an interval and a concrete point.
    fn apply_op(op: usize, x: &IntervalVec) -> IntervalVec {
        let c = DVector::from_vec(vec![0.5, -1.0, 2.0, -3.0]);
        let w = DMatrix::from_fn(3, N, |r, k| ((r * N + k) as f64 * 0.7).sin());
        let b = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        match op {
            0 => x.abs().unwrap(),
            1 => x.relu().unwrap(),
            2 => x.min_const(1.0).unwrap(),
            3 => x.max_const(-1.0).unwrap(),
            4 => x.neg(),
            5 => x.scale(-2.5).unwrap(),
            6 => x.hadamard_const(c.as_slice()).unwrap(),
            7 => x.add_const(&c).unwrap(),
            8 => affine(&w, &b, x).unwrap(),
            _ => x.add(x).unwrap(),
        }
    }

    fn concrete(op: usize, p: &DVector<f64>) -> DVector<f64> {
        let c = DVector::from_vec(vec![0.5, -1.0, 2.0, -3.0]);
        let w = DMatrix::from_fn(3, N, |r, k| ((r * N + k) as f64 * 0.7).sin());
        let b = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        match op {
            0 => p.abs(),
            1 => p.map(|v| v.max(0.0)),
            2 => p.map(|v| v.min(1.0)),
            3 => p.map(|v| v.max(-1.0)),
            4 => -p,
            5 => p * -2.5,
            6 => p.component_mul(&c),
            7 => p + &c,
            8 => &w * p + &b,
            _ => p * 2.0,
        }
    }

    proptest! {
        #[test]
        fn primitives_are_sound((lo, hi) in interval_strategy(), op in 0usize..10, t in prop::collection::vec(0.0f64..=1.0, N)) {
            let x = iv(&lo, &hi);
            let p = DVector::from_fn(N, |k, _| lo[k] + t[k] * (hi[k] - lo[k]));
            let y = apply_op(op, &x);
            let v = concrete(op, &p);
            for k in 0..v.len() {
                let tol = 1e-12 * (1.0 + v[k].abs());
                prop_assert!(y.lower()[k] - tol <= v[k] && v[k] <= y.upper()[k] + tol,
                    "op {op}: {} not in [{}, {}]", v[k], y.lower()[k], y.upper()[k]);
            }
        }

        #[test]
        fn monotone_unary_ops_are_exact((lo, hi) in interval_strategy(), op in 0usize..4) {
            let x = iv(&lo, &hi);
            let y = apply_op(op, &x);
            // Endpoints and zero (where inside) attain the image bounds.
            let mut candidates = vec![DVector::from_vec(lo.clone()), DVector::from_vec(hi.clone())];
            candidates.push(DVector::from_fn(N, |k, _| 0.0f64.clamp(lo[k], hi[k])));
            for k in 0..N {
                let vals: Vec<f64> = candidates.iter().map(|p| concrete(op, p)[k]).collect();
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(y.lower()[k], min);
                prop_assert_eq!(y.upper()[k], max);
            }
        }

        #[test]
        fn inclusion_monotone((lo, hi) in interval_strategy(), shrink in prop::collection::vec((0.0f64..0.5, 0.0f64..0.5), N), op in 0usize..10) {
            let outer = iv(&lo, &hi);
            let (ilo, ihi): (Vec<f64>, Vec<f64>) = (0..N)
                .map(|k| {
                    let w = hi[k] - lo[k];
                    (lo[k] + shrink[k].0 * w, hi[k] - shrink[k].1 * w)
                })
                .unzip();
            let inner = iv(&ilo, &ihi);
            let (yo, yi) = (apply_op(op, &outer), apply_op(op, &inner));
            for k in 0..yo.len() {
                let tol = 1e-12 * (1.0 + yo.upper()[k].abs() + yo.lower()[k].abs());
                prop_assert!(yo.lower()[k] <= yi.lower()[k] + tol && yi.upper()[k] <= yo.upper()[k] + tol);
            }
        }

        #[test]
        fn degenerate_collapse(p in prop::collection::vec(-10.0f64..10.0, N), op in 0usize..10) {
            let p = DVector::from_vec(p);
            let y = apply_op(op, &IntervalVec::point(&p).unwrap());
            let v = concrete(op, &p);
            for k in 0..v.len() {
                let tol = 1e-9 * v[k].abs().max(1.0);
                prop_assert!((y.lower()[k] - v[k]).abs() <= tol && (y.upper()[k] - v[k]).abs() <= tol);
            }
        }
    }
}
