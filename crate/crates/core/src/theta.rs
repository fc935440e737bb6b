//! Parameter vectors and the unit-norm reparameterization of the index loadings.
//!
//! The full vector is `θ = (β₀, β₁, γ₀, γ₁)` with `‖β_l‖ = 1` and a positive
//! first entry. The free vector drops the first entry of each loading,
//! `θ* = (β₀,₋₁, β₁,₋₁, γ₀, γ₁)`, and recovers it as `sqrt(1 - ‖β_l,₋₁‖²)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{FvicmError, Result};

/// Block sizes shared by [`ThetaFull`] and [`ThetaFree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ThetaLayout {
    pub p: usize,
    pub dim0: usize,
    pub dim1: usize,
}

impl ThetaLayout {
    pub fn new(p: usize, dim0: usize, dim1: usize) -> Self {
        Self { p, dim0, dim1 }
    }

    /// `dim(θ) = 2p + dim0 + dim1`.
    pub fn full_dim(&self) -> usize {
        2 * self.p + self.dim0 + self.dim1
    }

    /// `dim(θ*) = 2(p-1) + dim0 + dim1`.
    pub fn free_dim(&self) -> usize {
        2 * (self.p - 1) + self.dim0 + self.dim1
    }

    pub fn tail_len(&self) -> usize {
        self.p - 1
    }

    /// Offsets of (β₀ tail, β₁ tail, γ₀, γ₁) in θ*.
    pub fn free_offsets(&self) -> [usize; 4] {
        let t = self.p - 1;
        [0, t, 2 * t, 2 * t + self.dim0]
    }

    /// Offsets of (β₀, β₁, γ₀, γ₁) in θ.
    pub fn full_offsets(&self) -> [usize; 4] {
        let p = self.p;
        [0, p, 2 * p, 2 * p + self.dim0]
    }

    /// Range of the γ coordinates (both functions) in θ*.
    pub fn free_gamma_range(&self) -> std::ops::Range<usize> {
        2 * (self.p - 1)..self.free_dim()
    }

    /// Range of the β tail coordinates (both loadings) in θ*.
    pub fn free_beta_range(&self) -> std::ops::Range<usize> {
        0..2 * (self.p - 1)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThetaFull {
    pub beta0: DVector<f64>,
    pub beta1: DVector<f64>,
    pub gamma0: DVector<f64>,
    pub gamma1: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaFree {
    pub beta0_tail: DVector<f64>,
    pub beta1_tail: DVector<f64>,
    pub gamma0: DVector<f64>,
    pub gamma1: DVector<f64>,
}

impl ThetaFull {
    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout::new(self.beta0.len(), self.gamma0.len(), self.gamma1.len())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        concat(&[&self.beta0, &self.beta1, &self.gamma0, &self.gamma1])
    }

    pub fn from_vector(layout: ThetaLayout, v: &DVector<f64>) -> Result<Self> {
        check_len(v.len(), layout.full_dim(), "θ")?;
        let o = layout.full_offsets();
        Ok(Self {
            beta0: v.rows(o[0], layout.p).into_owned(),
            beta1: v.rows(o[1], layout.p).into_owned(),
            gamma0: v.rows(o[2], layout.dim0).into_owned(),
            gamma1: v.rows(o[3], layout.dim1).into_owned(),
        })
    }

    /// Unit norm within `tol` and positive leading entry, for both loadings.
    pub fn satisfies_constraints(&self, tol: f64) -> bool {
        [&self.beta0, &self.beta1]
            .iter()
            .all(|b| (b.norm() - 1.0).abs() <= tol && b[0] > 0.0)
    }

    /// `β_l ← sign(β_l1) β_l / ‖β_l‖` for both loadings.
    pub fn normalized(mut self) -> Result<Self> {
        self.beta0 = normalize_loading(&self.beta0)?;
        self.beta1 = normalize_loading(&self.beta1)?;
        Ok(self)
    }

    pub fn to_free(&self) -> Result<ThetaFree> {
        if !self.satisfies_constraints(1e-8) {
            return Err(FvicmError::InvalidParameter(
                "index loadings must be unit vectors with positive first entry".into(),
            ));
        }
        let p = self.beta0.len();
        Ok(ThetaFree {
            beta0_tail: self.beta0.rows(1, p - 1).into_owned(),
            beta1_tail: self.beta1.rows(1, p - 1).into_owned(),
            gamma0: self.gamma0.clone(),
            gamma1: self.gamma1.clone(),
        })
    }
}

impl ThetaFree {
    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout::new(
            self.beta0_tail.len() + 1,
            self.gamma0.len(),
            self.gamma1.len(),
        )
    }

    pub fn to_vector(&self) -> DVector<f64> {
        concat(&[&self.beta0_tail, &self.beta1_tail, &self.gamma0, &self.gamma1])
    }

    pub fn from_vector(layout: ThetaLayout, v: &DVector<f64>) -> Result<Self> {
        check_len(v.len(), layout.free_dim(), "θ*")?;
        let o = layout.free_offsets();
        let t = layout.tail_len();
        Ok(Self {
            beta0_tail: v.rows(o[0], t).into_owned(),
            beta1_tail: v.rows(o[1], t).into_owned(),
            gamma0: v.rows(o[2], layout.dim0).into_owned(),
            gamma1: v.rows(o[3], layout.dim1).into_owned(),
        })
    }

    /// Both tails strictly inside the unit ball.
    pub fn is_feasible(&self) -> bool {
        self.beta0_tail.norm_squared() < 1.0 && self.beta1_tail.norm_squared() < 1.0
    }

    pub fn to_full(&self) -> Result<ThetaFull> {
        Ok(ThetaFull {
            beta0: loading_from_tail(&self.beta0_tail)?,
            beta1: loading_from_tail(&self.beta1_tail)?,
            gamma0: self.gamma0.clone(),
            gamma1: self.gamma1.clone(),
        })
    }

    /// Jacobian `J = ∂θ/∂θ*ᵀ = diag(J₀, J₁, I, I)`, of size `dim(θ) × dim(θ*)`.
    pub fn jacobian(&self) -> Result<DMatrix<f64>> {
        let layout = self.layout();
        let mut j = DMatrix::zeros(layout.full_dim(), layout.free_dim());
        let (p, t) = (layout.p, layout.tail_len());
        j.view_mut((0, 0), (p, t))
            .copy_from(&tail_jacobian(&self.beta0_tail)?);
        j.view_mut((p, t), (p, t))
            .copy_from(&tail_jacobian(&self.beta1_tail)?);
        let g = layout.dim0 + layout.dim1;
        j.view_mut((2 * p, 2 * t), (g, g))
            .fill_with_identity();
        Ok(j)
    }
}

/// `β = (sqrt(1 - ‖t‖²), t)`.
pub fn loading_from_tail(tail: &DVector<f64>) -> Result<DVector<f64>> {
    let s2 = 1.0 - tail.norm_squared();
    if !(s2 > 0.0) {
        return Err(FvicmError::InvalidParameter(format!(
            "loading tail has norm² {} ≥ 1",
            tail.norm_squared()
        )));
    }
    let mut b = DVector::zeros(tail.len() + 1);
    b[0] = s2.sqrt();
    b.rows_mut(1, tail.len()).copy_from(tail);
    Ok(b)
}

/// `J_l = ∂β_l/∂β_l,₋₁ᵀ = [ -tᵀ / sqrt(1 - ‖t‖²) ; I_{p-1} ]`.
pub fn tail_jacobian(tail: &DVector<f64>) -> Result<DMatrix<f64>> {
    let t = tail.len();
    let s2 = 1.0 - tail.norm_squared();
    if !(s2 > 0.0) {
        return Err(FvicmError::InvalidParameter(
            "loading tail outside the unit ball".into(),
        ));
    }
    let s = s2.sqrt();
    let mut j = DMatrix::zeros(t + 1, t);
    for c in 0..t {
        j[(0, c)] = -tail[c] / s;
        j[(c + 1, c)] = 1.0;
    }
    Ok(j)
}

fn normalize_loading(b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = b.norm();
    if !(n > 0.0) || !n.is_finite() || b[0] == 0.0 {
        return Err(FvicmError::InvalidParameter(
            "cannot normalize a loading with zero norm or zero first entry".into(),
        ));
    }
    Ok(b * (b[0].signum() / n))
}

fn concat(parts: &[&DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        parts.iter().map(|p| p.len()).sum(),
        parts.iter().flat_map(|p| p.iter().copied()),
    )
}

fn check_len(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(FvicmError::Dimension(format!(
            "{what} has length {got}, expected {want}"
        )));
    }
    Ok(())
}
