//! Truncated power spline bases.
//!
//! A basis of degree `q` with knots `κ_1 < … < κ_K` is
//! `B(u) = (1, u, …, u^q, (u-κ_1)_+^q, …, (u-κ_K)_+^q)`, of dimension
//! `q + K + 1`. The coefficients attached to the truncated columns are the
//! ones the roughness penalty acts on.

use nalgebra::DVector;

use crate::error::{FvicmError, Result};

/// Degree and knot vector of a truncated power basis.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BasisSpec {
    degree: usize,
    knots: Vec<f64>,
}

impl BasisSpec {
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        if !knots.is_empty() && degree == 0 {
            return Err(FvicmError::InvalidBasis(
                "degree 0 truncated power terms are not supported".into(),
            ));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(FvicmError::InvalidBasis("knots must be finite".into()));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FvicmError::InvalidBasis(
                "knots must be strictly increasing".into(),
            ));
        }
        Ok(Self { degree, knots })
    }

    /// Pure polynomial basis `(1, u, …, u^q)`.
    pub fn polynomial(degree: usize) -> Self {
        Self {
            degree,
            knots: Vec::new(),
        }
    }

    /// Basis whose `num_knots` knots are placed evenly inside the range of `values`.
    pub fn from_values(degree: usize, num_knots: usize, values: &[f64]) -> Result<Self> {
        Self::new(degree, place_knots(values, num_knots)?)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_knots(&self) -> usize {
        self.knots.len()
    }

    /// `q + K + 1`.
    pub fn dim(&self) -> usize {
        self.degree + self.knots.len() + 1
    }

    /// Number of leading polynomial columns, `q + 1`.
    pub fn poly_dim(&self) -> usize {
        self.degree + 1
    }

    pub fn eval(&self, u: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.eval_into(u, out.as_mut_slice());
        out
    }

    pub fn eval_into(&self, u: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let q = self.degree;
        let mut pow = 1.0;
        for slot in out.iter_mut().take(q + 1) {
            *slot = pow;
            pow *= u;
        }
        for (slot, &k) in out[q + 1..].iter_mut().zip(&self.knots) {
            *slot = if u > k { (u - k).powi(q as i32) } else { 0.0 };
        }
    }

    /// First derivative `B_d(u)`. The truncated term at `u = κ` takes the value 0.
    pub fn deriv(&self, u: f64) -> Result<DVector<f64>> {
        if self.degree == 0 {
            return Err(FvicmError::InvalidBasis(
                "derivative of a degree 0 basis".into(),
            ));
        }
        let mut out = DVector::zeros(self.dim());
        self.deriv_into(u, out.as_mut_slice());
        Ok(out)
    }

    pub fn deriv_into(&self, u: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let q = self.degree;
        out[0] = 0.0;
        let mut pow = 1.0;
        for (j, slot) in out.iter_mut().enumerate().take(q + 1).skip(1) {
            *slot = j as f64 * pow;
            pow *= u;
        }
        let qf = q as f64;
        for (slot, &k) in out[q + 1..].iter_mut().zip(&self.knots) {
            *slot = if u > k {
                qf * (u - k).powi(q as i32 - 1)
            } else {
                0.0
            };
        }
    }

    /// Second derivative, same knot convention as [`BasisSpec::deriv_into`].
    pub fn second_deriv_into(&self, u: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let q = self.degree;
        for slot in out.iter_mut().take(q.min(1) + 1) {
            *slot = 0.0;
        }
        let mut pow = 1.0;
        for (j, slot) in out.iter_mut().enumerate().take(q + 1).skip(2) {
            *slot = (j * (j - 1)) as f64 * pow;
            pow *= u;
        }
        let c = (q * q.saturating_sub(1)) as f64;
        for (slot, &k) in out[q + 1..].iter_mut().zip(&self.knots) {
            *slot = if q >= 2 && u > k {
                c * (u - k).powi(q as i32 - 2)
            } else {
                0.0
            };
        }
    }

    /// Penalty mask over the coefficients: 0 on the polynomial block, 1 on knot terms.
    pub fn penalty_mask(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.dim()).map(move |j| if j > self.degree { 1.0 } else { 0.0 })
    }
}

/// `K` knots evenly spaced strictly inside `[min(values), max(values)]`:
/// `κ_k = min + k (max - min) / (K + 1)`.
pub fn place_knots(values: &[f64], num_knots: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(FvicmError::InvalidData(
            "cannot place knots on an empty set of index values".into(),
        ));
    }
    if num_knots == 0 {
        return Ok(Vec::new());
    }
    let (lo, hi) = min_max(values);
    if !(hi > lo) {
        return Err(FvicmError::InvalidData(format!(
            "degenerate index range [{lo}, {hi}] for {num_knots} knots"
        )));
    }
    let step = (hi - lo) / (num_knots as f64 + 1.0);
    Ok((1..=num_knots).map(|k| lo + k as f64 * step).collect())
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}
