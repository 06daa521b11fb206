//! B-spline design matrices for time-course observations.
//!
//! Builds clamped knot vectors with interior knots at quantiles of the
//! distinct observation times, evaluates the basis by the Cox-de Boor
//! recursion, and fits per-gene least squares used for initialization.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Observation times, one entry per observation column (repeats allowed).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    obs_times: Vec<f64>,
}

impl TimeGrid {
    /// Sorts the times and validates finiteness.
    pub fn new(mut obs_times: Vec<f64>) -> Result<Self> {
        if obs_times.is_empty() {
            return Err(Error::InvalidInput("time grid is empty".into()));
        }
        if obs_times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("non-finite observation time".into()));
        }
        obs_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(TimeGrid { obs_times })
    }

    pub fn n_obs(&self) -> usize {
        self.obs_times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.obs_times
    }

    /// Distinct times in ascending order.
    pub fn distinct_times(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(self.obs_times.len());
        for &t in &self.obs_times {
            if out.last().map_or(true, |&last| t > last) {
                out.push(t);
            }
        }
        out
    }
}

/// B-spline design matrix together with the knots that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisMatrix {
    pub x: DMatrix<f64>,
    pub knots: Vec<f64>,
    pub degree: usize,
    pub df: usize,
}

impl BasisMatrix {
    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Clamped knot vector of length `df + degree + 1`: boundary knots repeated
/// `degree + 1` times, interior knots at quantiles of the distinct times.
pub fn build_knots(degree: usize, df: usize, grid: &TimeGrid) -> Result<Vec<f64>> {
    if df <= degree {
        return Err(Error::InvalidInput(format!(
            "df ({df}) must exceed degree ({degree})"
        )));
    }
    let distinct = grid.distinct_times();
    if distinct.len() < df {
        return Err(Error::InsufficientSupport(format!(
            "need at least {df} distinct times for df={df}, found {}",
            distinct.len()
        )));
    }
    let n_interior = df - degree - 1;
    let (t_min, t_max) = (distinct[0], *distinct.last().unwrap());
    if t_min == t_max {
        return Err(Error::InsufficientSupport(
            "all observation times equal".into(),
        ));
    }
    let mut knots = Vec::with_capacity(df + degree + 1);
    knots.extend(std::iter::repeat(t_min).take(degree + 1));
    for j in 1..=n_interior {
        knots.push(quantile(&distinct, j as f64 / (n_interior + 1) as f64));
    }
    knots.extend(std::iter::repeat(t_max).take(degree + 1));
    debug_assert_eq!(knots.len(), df + degree + 1);
    Ok(knots)
}

/// Index of the knot span containing `t`, half-open intervals with the last
/// interval closed on the right.
fn knot_span(knots: &[f64], degree: usize, df: usize, t: f64) -> Result<usize> {
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    if t < lo || t > hi {
        return Err(Error::OutsideKnotSpan { t, lo, hi });
    }
    if t == hi {
        // Last non-empty span.
        let mut i = df - 1;
        while knots[i] == knots[i + 1] {
            i -= 1;
        }
        return Ok(i);
    }
    let mut i = degree;
    while i < df - 1 && t >= knots[i + 1] {
        i += 1;
    }
    Ok(i)
}

/// Non-zero basis values at `t` by the Cox-de Boor recursion, returned with
/// the span index; values fill columns `span-degree ..= span`.
fn basis_values(knots: &[f64], degree: usize, df: usize, t: f64) -> Result<(usize, Vec<f64>)> {
    let span = knot_span(knots, degree, df, t)?;
    let mut vals = vec![0.0; degree + 1];
    vals[0] = 1.0;
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let tmp = if denom != 0.0 { vals[r] / denom } else { 0.0 };
            vals[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        vals[j] = saved;
    }
    Ok((span, vals))
}

/// Evaluate the clamped B-spline basis at every grid time.
pub fn basis_matrix(knots: &[f64], degree: usize, grid: &TimeGrid) -> Result<BasisMatrix> {
    if knots.len() <= degree + 1 {
        return Err(Error::InvalidInput("knot vector too short".into()));
    }
    let df = knots.len() - degree - 1;
    if knots.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("knots must be non-decreasing".into()));
    }
    let mut x = DMatrix::zeros(grid.n_obs(), df);
    for (row, &t) in grid.times().iter().enumerate() {
        let (span, vals) = basis_values(knots, degree, df, t)?;
        for (j, &v) in vals.iter().enumerate() {
            x[(row, span - degree + j)] = v;
        }
    }
    Ok(BasisMatrix {
        x,
        knots: knots.to_vec(),
        degree,
        df,
    })
}

/// Least-squares fit of one gene: `y ~ X coef + offset`.
///
/// The intercept is appended as an explicit column. Because a clamped
/// B-spline basis sums to one across each row, the augmented design has a
/// known one-dimensional null space; the minimum-norm solution is
/// re-centered so the returned coefficients have zero mean and the constant
/// component lives entirely in the offset. Rank loss beyond that aliasing
/// is reported as an error.
pub fn ls_fit(basis: &BasisMatrix, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let n = basis.n_obs();
    let df = basis.df;
    if y.len() != n {
        return Err(Error::InvalidInput(format!(
            "observation vector length {} does not match basis rows {n}",
            y.len()
        )));
    }
    if n < df + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least df+1 = {} observations, got {n}",
            df + 1
        )));
    }
    let mut aug = DMatrix::zeros(n, df + 1);
    aug.view_mut((0, 0), (n, df)).copy_from(&basis.x);
    aug.column_mut(df).fill(1.0);

    // Normal equations solved through a symmetric eigendecomposition. The
    // partition of unity aliases the intercept with the basis columns, so
    // one zero eigenvalue is expected; the pseudo-inverse zeroes it and a
    // rank below df is reported as a genuine deficiency.
    let gram = aug.transpose() * &aug;
    let rhs = aug.transpose() * y;
    let (evecs, evals) = crate::linalg::symmetric_eigen(&gram);
    let lmax = evals.max();
    let tol = lmax * 1e-12 * (df + 1) as f64;
    let rank = evals.iter().filter(|&&l| l > tol).count();
    if rank < df {
        let small: Vec<String> = evals
            .iter()
            .filter(|&&l| l <= tol)
            .map(|l| format!("{:.3e}", l.max(0.0).sqrt()))
            .collect();
        return Err(Error::RankDeficient(format!(
            "augmented design rank {rank} < {df}; near-zero singular values: [{}]",
            small.join(", ")
        )));
    }
    let pinv_apply = |r: &DVector<f64>| -> DVector<f64> {
        let proj = evecs.transpose() * r;
        let mut scaled = DVector::zeros(df + 1);
        for (i, &l) in evals.iter().enumerate() {
            if l > tol {
                scaled[i] = proj[i] / l;
            }
        }
        &evecs * scaled
    };
    let mut sol = pinv_apply(&rhs);
    // One refinement pass against the original system.
    let resid = &rhs - &gram * &sol;
    sol += pinv_apply(&resid);
    let mut coef = DVector::from_iterator(df, sol.iter().take(df).copied());
    let mut offset = sol[df];
    let shift = coef.mean();
    coef.add_scalar_mut(-shift);
    offset += shift;
    Ok((coef, offset))
}
