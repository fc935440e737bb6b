//! Quadratic inference function for the varying index coefficient mean
//!
//! `μ_ij = B(β₀ᵀx_ij)ᵀγ₀ + B(β₁ᵀx_ij)ᵀγ₁ G_i`.
//!
//! Each subject contributes the extended score
//! `g_i = [ μ̇ᵢᵀ A_i^{-1/2} M_j A_i^{-1/2} (y_i - μ_i) ]_{j=1..h}`, the
//! moments are averaged into `ḡ_N`, weighted by `C̄_N = N⁻¹ Σ g_i g_iᵀ`, and
//! `Q_N = N ḡ_Nᵀ C̄_N⁻¹ ḡ_N`.
//!
//! Scores are taken with respect to the free coordinates `θ*`, so the number
//! of moments is `r = h · dim(θ*)`. The marginal variance matrix is
//! `A_i = σ̂² I`; `Q_N` does not depend on `σ̂²`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::LongitudinalDataset;
use crate::error::{FvicmError, Result};
use crate::spline::BasisSpec;
use crate::theta::{ThetaFree, ThetaFull, ThetaLayout};

/// Family of basis matrices `M_1 … M_h` spanning the inverse working correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkingBasis {
    /// `M_2` has zero diagonal and ones elsewhere.
    #[default]
    Exchangeable,
    /// `M_2` has ones on the first sub- and super-diagonal.
    Ar1,
    /// `M_1 = I` only; the score reduces to the independence GEE.
    Independence,
}

impl WorkingBasis {
    pub fn h(&self) -> usize {
        match self {
            WorkingBasis::Independence => 1,
            _ => 2,
        }
    }

    /// Dense `M_1 … M_h` for a cluster of size `n`.
    pub fn matrices(&self, n: usize) -> Vec<DMatrix<f64>> {
        let mut out = vec![DMatrix::identity(n, n)];
        match self {
            WorkingBasis::Independence => {}
            WorkingBasis::Exchangeable => {
                out.push(DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }))
            }
            WorkingBasis::Ar1 => out.push(DMatrix::from_fn(n, n, |i, j| {
                if i.abs_diff(j) == 1 {
                    1.0
                } else {
                    0.0
                }
            })),
        }
        out
    }

    /// `M_m v`, `m` zero based.
    fn apply(&self, m: usize, v: &[f64], out: &mut [f64]) {
        if m == 0 {
            out.copy_from_slice(v);
            return;
        }
        match self {
            WorkingBasis::Exchangeable => {
                let s: f64 = v.iter().sum();
                for (o, x) in out.iter_mut().zip(v) {
                    *o = s - x;
                }
            }
            WorkingBasis::Ar1 => {
                let n = v.len();
                for j in 0..n {
                    let left = if j > 0 { v[j - 1] } else { 0.0 };
                    let right = if j + 1 < n { v[j + 1] } else { 0.0 };
                    out[j] = left + right;
                }
            }
            WorkingBasis::Independence => unreachable!("independence has a single matrix"),
        }
    }

    /// `Xᵀ M_m X` for an `n × k` matrix `X`, given `XᵀX`.
    fn quad_form(&self, m: usize, x: &DMatrix<f64>, xtx: &DMatrix<f64>) -> DMatrix<f64> {
        if m == 0 {
            return xtx.clone();
        }
        match self {
            WorkingBasis::Exchangeable => {
                let s = x.row_sum().transpose();
                &s * s.transpose() - xtx
            }
            WorkingBasis::Ar1 => {
                let n = x.nrows();
                if n < 2 {
                    return DMatrix::zeros(x.ncols(), x.ncols());
                }
                let upper = x.rows(0, n - 1);
                let lower = x.rows(1, n - 1);
                let c = upper.transpose() * lower;
                &c + c.transpose()
            }
            WorkingBasis::Independence => unreachable!("independence has a single matrix"),
        }
    }
}

/// Roughness penalty `λ θᵀDθ`, `D` = 1 on knot coefficients and 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    pub lambda: f64,
    /// Diagonal of `D` in free coordinates `θ*`.
    mask: DVector<f64>,
}

impl PenaltySpec {
    pub fn new(lambda: f64, p: usize, spec0: &BasisSpec, spec1: &BasisSpec) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(FvicmError::InvalidParameter(format!(
                "penalty must be a finite nonnegative number, got {lambda}"
            )));
        }
        let t = p.saturating_sub(1);
        let mask = DVector::from_iterator(
            2 * t + spec0.dim() + spec1.dim(),
            std::iter::repeat_n(0.0, 2 * t)
                .chain(spec0.penalty_mask())
                .chain(spec1.penalty_mask()),
        );
        Ok(Self { lambda, mask })
    }

    /// Diagonal of `D` over the free coordinates.
    pub fn free_mask(&self) -> &DVector<f64> {
        &self.mask
    }

    /// Diagonal of `D` in full `θ` order: `(0^{2p+q+1}, 1^K, 0^{q+1}, 1^K)`.
    pub fn full_mask(&self, p: usize) -> DVector<f64> {
        let t = p - 1;
        DVector::from_iterator(
            self.mask.len() + 2,
            std::iter::repeat_n(0.0, 2 * p).chain(self.mask.iter().skip(2 * t).copied()),
        )
    }

    pub fn value(&self, theta_free: &DVector<f64>) -> f64 {
        self.lambda
            * self
                .mask
                .iter()
                .zip(theta_free.iter())
                .map(|(d, v)| d * v * v)
                .sum::<f64>()
    }

    /// Number of unpenalized free coordinates.
    pub fn n_unpenalized(&self) -> usize {
        self.mask.iter().filter(|&&d| d == 0.0).count()
    }
}

/// Mean and full-coordinate Jacobian of one subject.
#[derive(Debug, Clone)]
pub struct SubjectMean {
    pub mu: DVector<f64>,
    /// `n_i × dim(θ)`, columns ordered (β₀, β₁, γ₀, γ₁).
    pub jacobian: DMatrix<f64>,
}

/// `μ_i` and `μ̇_i = ∂μ_i/∂θᵀ` for every subject, in full coordinates.
pub fn mean_and_jacobian(
    theta: &ThetaFull,
    data: &LongitudinalDataset,
    spec0: &BasisSpec,
    spec1: &BasisSpec,
) -> Result<Vec<SubjectMean>> {
    check_dims(theta.layout(), data.p(), spec0, spec1)?;
    let layout = theta.layout();
    let (p, d0, d1) = (layout.p, layout.dim0, layout.dim1);
    let mut b0 = vec![0.0; d0];
    let mut bd0 = vec![0.0; d0];
    let mut b1 = vec![0.0; d1];
    let mut bd1 = vec![0.0; d1];
    let mut out = Vec::with_capacity(data.n_subjects());
    for s in data.subjects() {
        let n = s.len();
        let g = s.genotype();
        let mut mu = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, layout.full_dim());
        for j in 0..n {
            let x = s.x.row(j);
            let u0 = x.dot(&theta.beta0.transpose());
            let u1 = x.dot(&theta.beta1.transpose());
            spec0.eval_into(u0, &mut b0);
            spec1.eval_into(u1, &mut b1);
            spec0.deriv_into(u0, &mut bd0);
            spec1.deriv_into(u1, &mut bd1);
            let m0: f64 = dot(&b0, theta.gamma0.as_slice());
            let m1: f64 = dot(&b1, theta.gamma1.as_slice());
            let dm0 = dot(&bd0, theta.gamma0.as_slice());
            let dm1 = dot(&bd1, theta.gamma1.as_slice());
            mu[j] = m0 + m1 * g;
            for c in 0..p {
                jac[(j, c)] = dm0 * x[c];
                jac[(j, p + c)] = dm1 * g * x[c];
            }
            for c in 0..d0 {
                jac[(j, 2 * p + c)] = b0[c];
            }
            for c in 0..d1 {
                jac[(j, 2 * p + d0 + c)] = b1[c] * g;
            }
        }
        out.push(SubjectMean { mu, jacobian: jac });
    }
    Ok(out)
}

/// Extended score `ḡ_N` and the per-subject `g_i`.
#[derive(Debug, Clone)]
pub struct Score {
    pub gbar: DVector<f64>,
    pub per_subject: Vec<DVector<f64>>,
}

/// `Q_N` with the weight matrix it was computed from.
#[derive(Debug, Clone)]
pub struct QifValue {
    pub q: f64,
    pub gbar: DVector<f64>,
    pub cbar: DMatrix<f64>,
    /// The ridge guard was applied to `C̄_N`.
    pub regularized: bool,
}

/// Full evaluation at one point: value, moments and the moment Jacobian.
#[derive(Debug, Clone)]
pub struct QifEval {
    pub q: f64,
    pub gbar: DVector<f64>,
    pub cbar: DMatrix<f64>,
    /// `(C̄_N + εI)⁻¹`, ε = 0 unless regularized.
    pub weight: DMatrix<f64>,
    pub regularized: bool,
    /// `Ġ = ∂ḡ_N/∂θ*ᵀ`, `r × dim(θ*)`.
    pub gdot: DMatrix<f64>,
    pub n_subjects: usize,
    /// Mean squared residual at this point.
    pub mean_sq_residual: f64,
}

impl QifEval {
    /// `ĠᵀC̄⁻¹Ġ`; half the Gauss–Newton Hessian of `N⁻¹Q_N`.
    pub fn information(&self) -> DMatrix<f64> {
        self.gdot.transpose() * &self.weight * &self.gdot
    }

    /// `2 ĠᵀC̄⁻¹ḡ`, the gradient of `N⁻¹Q_N` with `C̄` held fixed.
    pub fn gradient(&self) -> DVector<f64> {
        (self.gdot.transpose() * (&self.weight * &self.gbar)) * 2.0
    }
}

/// Penalized criterion `N⁻¹Q_N + λθ*ᵀDθ*` with its gradient and Gauss–Newton Hessian.
#[derive(Debug, Clone)]
pub struct PenalizedEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub eval: QifEval,
}

/// The QIF problem for a fixed dataset, basis pair and working basis.
#[derive(Debug, Clone)]
pub struct QifModel<'a> {
    data: &'a LongitudinalDataset,
    spec0: BasisSpec,
    spec1: BasisSpec,
    basis: WorkingBasis,
    variance_scale: f64,
}

struct Accum {
    gsum: DVector<f64>,
    csum: DMatrix<f64>,
    gdot: Option<DMatrix<f64>>,
    per_subject: Option<Vec<DVector<f64>>>,
    sq_residual: f64,
}

impl<'a> QifModel<'a> {
    pub fn new(
        data: &'a LongitudinalDataset,
        spec0: BasisSpec,
        spec1: BasisSpec,
        basis: WorkingBasis,
    ) -> Result<Self> {
        if spec0.degree() == 0 || spec1.degree() == 0 {
            return Err(FvicmError::InvalidBasis(
                "index functions need degree ≥ 1 for the loading derivatives".into(),
            ));
        }
        Ok(Self {
            data,
            spec0,
            spec1,
            basis,
            variance_scale: 1.0,
        })
    }

    pub fn data(&self) -> &'a LongitudinalDataset {
        self.data
    }

    pub fn spec0(&self) -> &BasisSpec {
        &self.spec0
    }

    pub fn spec1(&self) -> &BasisSpec {
        &self.spec1
    }

    pub fn basis(&self) -> WorkingBasis {
        self.basis
    }

    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout::new(self.data.p(), self.spec0.dim(), self.spec1.dim())
    }

    /// Number of moment conditions `r = h · dim(θ*)`.
    pub fn n_moments(&self) -> usize {
        self.basis.h() * self.layout().free_dim()
    }

    pub fn variance_scale(&self) -> f64 {
        self.variance_scale
    }

    /// Sets `σ̂²` in `A_i = σ̂² I`.
    pub fn set_variance_scale(&mut self, sigma2: f64) {
        if sigma2.is_finite() && sigma2 > 0.0 {
            self.variance_scale = sigma2;
        }
    }

    pub fn extended_score(&self, theta: &ThetaFree) -> Result<Score> {
        let acc = self.accumulate(theta, false, true)?;
        let n = self.data.n_subjects() as f64;
        Ok(Score {
            gbar: acc.gsum / n,
            per_subject: acc.per_subject.unwrap_or_default(),
        })
    }

    /// `ḡ_N` only; the cheapest evaluation.
    pub fn gbar(&self, theta: &ThetaFree) -> Result<DVector<f64>> {
        let acc = self.accumulate_light(theta)?;
        Ok(acc / self.data.n_subjects() as f64)
    }

    pub fn qif_value(&self, theta: &ThetaFree) -> Result<QifValue> {
        let acc = self.accumulate(theta, false, false)?;
        let n = self.data.n_subjects() as f64;
        let gbar = acc.gsum / n;
        let cbar = acc.csum / n;
        let (q, _, regularized) = quadratic_form(&gbar, &cbar, n)?;
        Ok(QifValue {
            q,
            gbar,
            cbar,
            regularized,
        })
    }

    pub fn evaluate(&self, theta: &ThetaFree) -> Result<QifEval> {
        let acc = self.accumulate(theta, true, false)?;
        let n = self.data.n_subjects() as f64;
        let gbar = acc.gsum / n;
        let cbar = acc.csum / n;
        let (q, weight, regularized) = quadratic_form(&gbar, &cbar, n)?;
        Ok(QifEval {
            q,
            gbar,
            cbar,
            weight,
            regularized,
            gdot: acc.gdot.expect("derivatives requested") / n,
            n_subjects: self.data.n_subjects(),
            mean_sq_residual: acc.sq_residual / self.data.n_obs() as f64,
        })
    }

    pub fn penalized_objective(
        &self,
        theta: &ThetaFree,
        penalty: &PenaltySpec,
    ) -> Result<PenalizedEval> {
        let eval = self.evaluate(theta)?;
        let v = theta.to_vector();
        let n = self.data.n_subjects() as f64;
        let d = penalty.free_mask();
        let value = eval.q / n + penalty.value(&v);
        let mut gradient = eval.gradient();
        let mut hessian = eval.information() * 2.0;
        for i in 0..v.len() {
            gradient[i] += 2.0 * penalty.lambda * d[i] * v[i];
            hessian[(i, i)] += 2.0 * penalty.lambda * d[i];
        }
        Ok(PenalizedEval {
            value,
            gradient,
            hessian,
            eval,
        })
    }

    /// `ḡ(θ)ᵀ W ḡ(θ) + λθ*ᵀDθ*` for a weight `W` held fixed.
    pub fn frozen_objective(
        &self,
        theta: &ThetaFree,
        weight: &DMatrix<f64>,
        penalty: &PenaltySpec,
    ) -> Result<f64> {
        let g = self.gbar(theta)?;
        Ok(g.dot(&(weight * &g)) + penalty.value(&theta.to_vector()))
    }

    fn check(&self, theta: &ThetaFree) -> Result<()> {
        let l = theta.layout();
        if l != self.layout() {
            return Err(FvicmError::Dimension(format!(
                "parameter layout {l:?} does not match model layout {:?}",
                self.layout()
            )));
        }
        if !theta.is_feasible() {
            return Err(FvicmError::InvalidParameter(
                "loading tail outside the unit ball".into(),
            ));
        }
        Ok(())
    }

    /// Per-observation quantities shared by all evaluation modes.
    fn observation(
        &self,
        ctx: &PointContext,
        x: nalgebra::MatrixView<'_, f64, nalgebra::U1, nalgebra::Dyn, nalgebra::U1, nalgebra::Dyn>,
        g: f64,
        bufs: &mut ObsBuffers,
        mudot_row: &mut [f64],
    ) -> f64 {
        let p = x.len();
        let t = p - 1;
        let u0 = dot_row(x, &ctx.beta0);
        let u1 = dot_row(x, &ctx.beta1);
        self.spec0.eval_into(u0, &mut bufs.b0);
        self.spec1.eval_into(u1, &mut bufs.b1);
        self.spec0.deriv_into(u0, &mut bufs.bd0);
        self.spec1.deriv_into(u1, &mut bufs.bd1);
        let mu = dot(&bufs.b0, &ctx.gamma0) + g * dot(&bufs.b1, &ctx.gamma1);
        bufs.dm0 = dot(&bufs.bd0, &ctx.gamma0);
        bufs.dm1 = dot(&bufs.bd1, &ctx.gamma1);
        for c in 0..t {
            bufs.a0[c] = x[c + 1] - x[0] * ctx.tail0[c] / ctx.s0;
            bufs.a1[c] = x[c + 1] - x[0] * ctx.tail1[c] / ctx.s1;
        }
        let (d0, d1) = (bufs.b0.len(), bufs.b1.len());
        for c in 0..t {
            mudot_row[c] = bufs.dm0 * bufs.a0[c];
            mudot_row[t + c] = g * bufs.dm1 * bufs.a1[c];
        }
        mudot_row[2 * t..2 * t + d0].copy_from_slice(&bufs.b0);
        for c in 0..d1 {
            mudot_row[2 * t + d0 + c] = g * bufs.b1[c];
        }
        mu
    }

    fn accumulate_light(&self, theta: &ThetaFree) -> Result<DVector<f64>> {
        self.check(theta)?;
        let ctx = PointContext::new(theta)?;
        let layout = self.layout();
        let k = layout.free_dim();
        let h = self.basis.h();
        let mut gsum = DVector::zeros(h * k);
        let mut bufs = ObsBuffers::new(&layout);
        let mut row = vec![0.0; k];
        let inv_s2 = 1.0 / self.variance_scale;
        for s in self.data.subjects() {
            let n = s.len();
            let g = s.genotype();
            let mut mudot = DMatrix::zeros(n, k);
            let mut res = vec![0.0; n];
            for j in 0..n {
                let mu = self.observation(&ctx, s.x.row(j), g, &mut bufs, &mut row);
                res[j] = (s.y[j] - mu) * inv_s2;
                for c in 0..k {
                    mudot[(j, c)] = row[c];
                }
            }
            let mut w = vec![0.0; n];
            for m in 0..h {
                self.basis.apply(m, &res, &mut w);
                let gm = mudot.tr_mul(&DVector::from_column_slice(&w));
                let mut seg = gsum.rows_mut(m * k, k);
                seg += &gm;
            }
        }
        Ok(gsum)
    }

    fn accumulate(&self, theta: &ThetaFree, derivs: bool, keep: bool) -> Result<Accum> {
        self.check(theta)?;
        let ctx = PointContext::new(theta)?;
        let layout = self.layout();
        let k = layout.free_dim();
        let t = layout.tail_len();
        let (d0, d1) = (layout.dim0, layout.dim1);
        let h = self.basis.h();
        let r = h * k;
        let inv_s2 = 1.0 / self.variance_scale;

        let mut gsum = DVector::zeros(r);
        let mut csum = DMatrix::zeros(r, r);
        let mut gdot = derivs.then(|| DMatrix::zeros(r, k));
        let mut per_subject = keep.then(Vec::new);
        let mut sq_residual = 0.0;

        let mut bufs = ObsBuffers::new(&layout);
        let mut row = vec![0.0; k];
        let mut gi = DVector::zeros(r);
        // ∂²u_l/∂t_l² = -x_1 (I/s + t tᵀ/s³)
        let curv0 = curvature(&ctx.tail0, ctx.s0);
        let curv1 = curvature(&ctx.tail1, ctx.s1);

        for s in self.data.subjects() {
            let n = s.len();
            let g = s.genotype();
            let mut mudot = DMatrix::zeros(n, k);
            let mut res = vec![0.0; n];
            // Per-observation second-derivative ingredients.
            let mut obs: Vec<ObsSecond> = Vec::with_capacity(if derivs { n } else { 0 });
            for j in 0..n {
                let x = s.x.row(j);
                let mu = self.observation(&ctx, x, g, &mut bufs, &mut row);
                let e = s.y[j] - mu;
                sq_residual += e * e;
                res[j] = e * inv_s2;
                for c in 0..k {
                    mudot[(j, c)] = row[c];
                }
                if derivs {
                    let u0 = dot_row(x, &ctx.beta0);
                    let u1 = dot_row(x, &ctx.beta1);
                    self.spec0.second_deriv_into(u0, &mut bufs.bdd0);
                    self.spec1.second_deriv_into(u1, &mut bufs.bdd1);
                    obs.push(ObsSecond {
                        a0: bufs.a0.clone(),
                        a1: bufs.a1.clone(),
                        bd0: bufs.bd0.clone(),
                        bd1: bufs.bd1.clone(),
                        dm0: bufs.dm0,
                        dm1: bufs.dm1,
                        ddm0: dot(&bufs.bdd0, &ctx.gamma0),
                        ddm1: dot(&bufs.bdd1, &ctx.gamma1),
                        x0: x[0],
                    });
                }
            }

            let mtm = derivs.then(|| mudot.tr_mul(&mudot));
            let mut w = vec![0.0; n];
            for m in 0..h {
                self.basis.apply(m, &res, &mut w);
                let gm = mudot.tr_mul(&DVector::from_column_slice(&w));
                gi.rows_mut(m * k, k).copy_from(&gm);

                if let Some(gd) = gdot.as_mut() {
                    let mut block = gd.view_mut((m * k, 0), (k, k));
                    // -μ̇ᵀ M_m μ̇ / σ²
                    let qf = self
                        .basis
                        .quad_form(m, &mudot, mtm.as_ref().expect("computed with derivs"));
                    block -= qf * inv_s2;
                    // Σ_j w_j ∂²μ_ij/∂θ*∂θ*ᵀ
                    for (o, &wj) in obs.iter().zip(&w) {
                        if wj == 0.0 {
                            continue;
                        }
                        add_second_derivative(
                            &mut block, o, wj, g, t, d0, d1, &curv0, &curv1,
                        );
                    }
                }
            }
            gsum += &gi;
            csum.ger(1.0, &gi, &gi, 1.0);
            if let Some(ps) = per_subject.as_mut() {
                ps.push(gi.clone());
            }
        }
        Ok(Accum {
            gsum,
            csum,
            gdot,
            per_subject,
            sq_residual,
        })
    }
}

struct PointContext {
    beta0: Vec<f64>,
    beta1: Vec<f64>,
    tail0: Vec<f64>,
    tail1: Vec<f64>,
    s0: f64,
    s1: f64,
    gamma0: Vec<f64>,
    gamma1: Vec<f64>,
}

impl PointContext {
    fn new(theta: &ThetaFree) -> Result<Self> {
        let full = theta.to_full()?;
        Ok(Self {
            s0: full.beta0[0],
            s1: full.beta1[0],
            beta0: full.beta0.as_slice().to_vec(),
            beta1: full.beta1.as_slice().to_vec(),
            tail0: theta.beta0_tail.as_slice().to_vec(),
            tail1: theta.beta1_tail.as_slice().to_vec(),
            gamma0: theta.gamma0.as_slice().to_vec(),
            gamma1: theta.gamma1.as_slice().to_vec(),
        })
    }
}

struct ObsBuffers {
    b0: Vec<f64>,
    b1: Vec<f64>,
    bd0: Vec<f64>,
    bd1: Vec<f64>,
    bdd0: Vec<f64>,
    bdd1: Vec<f64>,
    a0: Vec<f64>,
    a1: Vec<f64>,
    dm0: f64,
    dm1: f64,
}

impl ObsBuffers {
    fn new(layout: &ThetaLayout) -> Self {
        let t = layout.tail_len();
        Self {
            b0: vec![0.0; layout.dim0],
            b1: vec![0.0; layout.dim1],
            bd0: vec![0.0; layout.dim0],
            bd1: vec![0.0; layout.dim1],
            bdd0: vec![0.0; layout.dim0],
            bdd1: vec![0.0; layout.dim1],
            a0: vec![0.0; t],
            a1: vec![0.0; t],
            dm0: 0.0,
            dm1: 0.0,
        }
    }
}

struct ObsSecond {
    a0: Vec<f64>,
    a1: Vec<f64>,
    bd0: Vec<f64>,
    bd1: Vec<f64>,
    dm0: f64,
    dm1: f64,
    ddm0: f64,
    ddm1: f64,
    x0: f64,
}

fn curvature(tail: &[f64], s: f64) -> DMatrix<f64> {
    let t = tail.len();
    let s3 = s * s * s;
    DMatrix::from_fn(t, t, |i, j| {
        (if i == j { 1.0 / s } else { 0.0 }) + tail[i] * tail[j] / s3
    })
}

#[allow(clippy::too_many_arguments)]
fn add_second_derivative(
    block: &mut nalgebra::DMatrixViewMut<'_, f64>,
    o: &ObsSecond,
    w: f64,
    g: f64,
    t: usize,
    d0: usize,
    d1: usize,
    curv0: &DMatrix<f64>,
    curv1: &DMatrix<f64>,
) {
    // β₀ tail block.
    for i in 0..t {
        for j in 0..t {
            block[(i, j)] += w * (o.ddm0 * o.a0[i] * o.a0[j] - o.dm0 * o.x0 * curv0[(i, j)]);
        }
    }
    // β₀ tail × γ₀.
    let g0 = 2 * t;
    for i in 0..t {
        for c in 0..d0 {
            let v = w * o.a0[i] * o.bd0[c];
            block[(i, g0 + c)] += v;
            block[(g0 + c, i)] += v;
        }
    }
    if g == 0.0 {
        return;
    }
    let wg = w * g;
    for i in 0..t {
        for j in 0..t {
            block[(t + i, t + j)] +=
                wg * (o.ddm1 * o.a1[i] * o.a1[j] - o.dm1 * o.x0 * curv1[(i, j)]);
        }
    }
    let g1 = 2 * t + d0;
    for i in 0..t {
        for c in 0..d1 {
            let v = wg * o.a1[i] * o.bd1[c];
            block[(t + i, g1 + c)] += v;
            block[(g1 + c, t + i)] += v;
        }
    }
}

/// Relative eigenvalue floor below which the ridge guard engages.
pub const RIDGE_TRIGGER: f64 = 1e-10;
/// Ridge size relative to `trace(C̄)/dim`.
pub const RIDGE_SCALE: f64 = 1e-8;

/// Inverse of `C̄`, with the ridge guard. Returns `(inverse, regularized)`.
pub fn guarded_inverse(cbar: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let dim = cbar.nrows();
    if cbar.iter().any(|v| !v.is_finite()) {
        return Err(FvicmError::Conditioning("non-finite weight matrix".into()));
    }
    let eig = SymmetricEigen::new(cbar.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) {
        return Err(FvicmError::Conditioning(format!(
            "weight matrix has largest eigenvalue {max}"
        )));
    }
    let mut shift = 0.0;
    let mut regularized = false;
    if min < RIDGE_TRIGGER * max {
        shift = RIDGE_SCALE * cbar.trace() / dim as f64;
        regularized = true;
        if !(min + shift > 0.0) {
            return Err(FvicmError::Conditioning(format!(
                "weight matrix singular after ridge (min eigenvalue {min}, ridge {shift})"
            )));
        }
    }
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / (l + shift));
    let v = &eig.eigenvectors;
    let inv = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    Ok((inv, regularized))
}

fn quadratic_form(
    gbar: &DVector<f64>,
    cbar: &DMatrix<f64>,
    n: f64,
) -> Result<(f64, DMatrix<f64>, bool)> {
    if gbar.iter().all(|&v| v == 0.0) {
        // Zero moments: the quadratic form is zero whatever the weight.
        let dim = gbar.len();
        let weight = guarded_inverse(cbar).map(|(w, _)| w).unwrap_or_else(|_| DMatrix::identity(dim, dim));
        return Ok((0.0, weight, false));
    }
    let (weight, regularized) = guarded_inverse(cbar)?;
    let q = (n * gbar.dot(&(&weight * gbar))).max(0.0);
    Ok((q, weight, regularized))
}

fn check_dims(layout: ThetaLayout, p: usize, spec0: &BasisSpec, spec1: &BasisSpec) -> Result<()> {
    if layout.p != p || layout.dim0 != spec0.dim() || layout.dim1 != spec1.dim() {
        return Err(FvicmError::Dimension(format!(
            "θ layout {layout:?} incompatible with p = {p}, basis dims {} and {}",
            spec0.dim(),
            spec1.dim()
        )));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn dot_row(x: nalgebra::MatrixView<'_, f64, nalgebra::U1, nalgebra::Dyn, nalgebra::U1, nalgebra::Dyn>, b: &[f64]) -> f64 {
    x.iter().zip(b).map(|(x, y)| x * y).sum()
}
