//! Mixed-model representation of the fitted model and the pseudo likelihood
//! ratio test for linearity of the interaction curve.
//!
//! With the loadings frozen at their estimates, the truncated power terms of
//! both curves become random effects:
//!
//! `y_i = 1 a_i + W₀ᵢγ̃₀ + W₁ᵢγ̃₁ + Z₀ᵢb₀ + Z₁ᵢb₁ + ε_i`.
//!
//! Linearity of the interaction curve means the quadratic and higher
//! polynomial coefficients of `γ̃₁` vanish and `σ²_{b₁} = 0`. The nuisance
//! effects `b₀` and `a_i` are removed through their BLUPs, leaving a model
//! with one variance component whose LRT null distribution is simulated from
//! eigenvalues alone.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::LongitudinalDataset;
use crate::error::{FvicmError, Result};
use crate::fit::FitResult;
use crate::linalg::{column_basis, sym_pinv};
use crate::optim::golden_section;
use crate::sim::stream_rng;
use crate::spline::BasisSpec;

/// Design blocks of the mixed-model representation, stacked subject-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmDesign {
    /// `(1, u₀, …, u₀^q)` rows.
    pub w0: DMatrix<f64>,
    /// `(1, u₁, …, u₁^q)·G` rows.
    pub w1: DMatrix<f64>,
    /// `(u₀ − κ₀ₖ)₊^q` rows.
    pub z0: DMatrix<f64>,
    /// `(u₁ − κ₁ₖ)₊^q · G` rows.
    pub z1: DMatrix<f64>,
    /// Cluster sizes `n_i`, in subject order.
    pub cluster_sizes: Vec<usize>,
}

impl LmmDesign {
    pub fn n_obs(&self) -> usize {
        self.w0.nrows()
    }

    pub fn degree(&self) -> usize {
        self.w0.ncols() - 1
    }

    pub fn num_knots(&self) -> usize {
        self.z1.ncols()
    }

    /// Fixed-effect design `[W₀, W₁]` under the alternative.
    pub fn fixed(&self) -> DMatrix<f64> {
        hcat(&[&self.w0, &self.w1])
    }

    /// Fixed-effect design under linearity: `W₁` keeps only its first two columns.
    pub fn fixed_null(&self) -> DMatrix<f64> {
        let keep = self.w1.columns(0, 2.min(self.w1.ncols())).into_owned();
        hcat(&[&self.w0, &keep])
    }

    /// `U`: subject indicator columns for the random intercepts.
    pub fn intercept_carrier(&self) -> DMatrix<f64> {
        let mut u = DMatrix::zeros(self.n_obs(), self.cluster_sizes.len());
        let mut r = 0;
        for (i, &n) in self.cluster_sizes.iter().enumerate() {
            for _ in 0..n {
                u[(r, i)] = 1.0;
                r += 1;
            }
        }
        u
    }
}

/// Build the design from a fit, freezing the indices at the estimated loadings.
pub fn build_lmm(fit: &FitResult, data: &LongitudinalDataset) -> Result<LmmDesign> {
    build_lmm_at(data, &fit.theta_hat.beta0, &fit.theta_hat.beta1, &fit.spec0, &fit.spec1)
}

pub fn build_lmm_at(
    data: &LongitudinalDataset,
    beta0: &DVector<f64>,
    beta1: &DVector<f64>,
    spec0: &BasisSpec,
    spec1: &BasisSpec,
) -> Result<LmmDesign> {
    if spec0.degree() != spec1.degree() || spec0.num_knots() != spec1.num_knots() {
        return Err(FvicmError::InvalidBasis(
            "both curves must share the degree and knot count".into(),
        ));
    }
    if beta0.len() != data.p() || beta1.len() != data.p() {
        return Err(FvicmError::Dimension("loading length differs from covariate dimension".into()));
    }
    let n = data.n_obs();
    let q1 = spec0.poly_dim();
    let k = spec0.num_knots();
    let mut w0 = DMatrix::zeros(n, q1);
    let mut w1 = DMatrix::zeros(n, q1);
    let mut z0 = DMatrix::zeros(n, k);
    let mut z1 = DMatrix::zeros(n, k);
    let mut b0 = vec![0.0; spec0.dim()];
    let mut b1 = vec![0.0; spec1.dim()];
    let mut r = 0;
    for s in data.subjects() {
        let g = s.genotype();
        for row in s.x.row_iter() {
            spec0.eval_into(row.dot(&beta0.transpose()), &mut b0);
            spec1.eval_into(row.dot(&beta1.transpose()), &mut b1);
            for c in 0..q1 {
                w0[(r, c)] = b0[c];
                w1[(r, c)] = b1[c] * g;
            }
            for c in 0..k {
                z0[(r, c)] = b0[q1 + c];
                z1[(r, c)] = b1[q1 + c] * g;
            }
            r += 1;
        }
    }
    Ok(LmmDesign {
        w0,
        w1,
        z0,
        z1,
        cluster_sizes: data.subjects().iter().map(|s| s.len()).collect(),
    })
}

/// `(σ²_a, σ²_{b₀}, σ²_{b₁}, σ²_ε)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VarianceComponents {
    pub intercept: f64,
    pub b0: f64,
    pub b1: f64,
    pub error: f64,
}

impl VarianceComponents {
    fn ratios(&self) -> [f64; 3] {
        [self.intercept / self.error, self.b0 / self.error, self.b1 / self.error]
    }
}

/// Fixed effects and BLUPs at given variance components.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSolution {
    pub fixed: DVector<f64>,
    pub b0: DVector<f64>,
    pub b1: DVector<f64>,
    /// One random intercept per subject.
    pub intercepts: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemlFit {
    pub variances: VarianceComponents,
    pub solution: MixedSolution,
    /// `-2` times the profiled restricted log-likelihood, up to a constant.
    pub neg2_loglik: f64,
    /// Components estimated exactly at zero: intercept, b0, b1.
    pub at_boundary: [bool; 3],
}

/// Restricted likelihood evaluator built once per design and response.
struct RemlProblem {
    n: usize,
    p: usize,
    k: usize,
    /// Column blocks of `A = [X, Z₀, Z₁, y]`.
    cols: [std::ops::Range<usize>; 4],
    ata: DMatrix<f64>,
    /// Per-subject column sums of `A`, one row per subject.
    sums: DMatrix<f64>,
    sizes: Vec<f64>,
}

struct Reduced {
    neg2: f64,
    fixed: DVector<f64>,
    rss: f64,
}

impl RemlProblem {
    fn new(design: &LmmDesign, y: &DVector<f64>) -> Self {
        let x = design.fixed();
        let (n, p, k) = (design.n_obs(), x.ncols(), design.num_knots());
        let a = hcat(&[&x, &design.z0, &design.z1, &DMatrix::from_column_slice(n, 1, y.as_slice())]);
        let m = a.ncols();
        let mut sums = DMatrix::zeros(design.cluster_sizes.len(), m);
        let mut r = 0;
        for (i, &ni) in design.cluster_sizes.iter().enumerate() {
            for _ in 0..ni {
                for c in 0..m {
                    sums[(i, c)] += a[(r, c)];
                }
                r += 1;
            }
        }
        Self {
            n,
            p,
            k,
            cols: [0..p, p..p + k, p + k..p + 2 * k, p + 2 * k..p + 2 * k + 1],
            ata: a.tr_mul(&a),
            sums,
            sizes: design.cluster_sizes.iter().map(|&v| v as f64).collect(),
        }
    }

    /// `AᵀH⁻¹A` blocks for `H = I + ρ_a UUᵀ + ρ₀Z₀Z₀ᵀ + ρ₁Z₁Z₁ᵀ`, with `log|H|`.
    fn weighted(&self, rho: [f64; 3]) -> Option<(DMatrix<f64>, f64)> {
        // AᵀD⁻¹A with D = I + ρ_a UUᵀ, D⁻¹ = I − c_i 11ᵀ blockwise.
        let c = DVector::from_iterator(self.sizes.len(), self.sizes.iter().map(|&ni| rho[0] / (1.0 + ni * rho[0])));
        let mut g = self.ata.clone();
        let scaled = DMatrix::from_fn(self.sums.nrows(), self.sums.ncols(), |i, j| self.sums[(i, j)] * c[i]);
        g -= self.sums.tr_mul(&scaled);
        let mut logdet: f64 = self.sizes.iter().map(|&ni| (1.0 + ni * rho[0]).ln()).sum();
        if self.k == 0 {
            return Some((g, logdet));
        }
        // Woodbury on Zs = [√ρ₀Z₀, √ρ₁Z₁].
        let zr: Vec<usize> = self.cols[1].clone().chain(self.cols[2].clone()).collect();
        let scale: Vec<f64> = (0..2 * self.k)
            .map(|i| if i < self.k { rho[1].sqrt() } else { rho[2].sqrt() })
            .collect();
        let m = g.ncols();
        // ZsᵀD⁻¹A, 2K × m
        let zda = DMatrix::from_fn(2 * self.k, m, |i, j| scale[i] * g[(zr[i], j)]);
        let mut mm = DMatrix::from_fn(2 * self.k, 2 * self.k, |i, j| scale[j] * zda[(i, zr[j])]);
        for i in 0..2 * self.k {
            mm[(i, i)] += 1.0;
        }
        let chol = mm.cholesky()?;
        logdet += 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let solved = chol.solve(&zda);
        g -= zda.tr_mul(&solved);
        Some((g, logdet))
    }

    fn reduce(&self, rho: [f64; 3]) -> Option<Reduced> {
        let (g, logdet_h) = self.weighted(rho)?;
        let xr = self.cols[0].clone();
        let yc = self.cols[3].start;
        let xhx = g.view((xr.start, xr.start), (self.p, self.p)).into_owned();
        let xhy = g.view((xr.start, yc), (self.p, 1)).column(0).into_owned();
        let yhy = g[(yc, yc)];
        let eig = SymmetricEigen::new(xhx.clone());
        let max = eig.eigenvalues.max();
        let mut logdet_x = 0.0;
        let mut inv_vals = eig.eigenvalues.clone();
        let mut rank = 0;
        for v in inv_vals.iter_mut() {
            if *v > 1e-12 * max {
                logdet_x += v.ln();
                *v = 1.0 / *v;
                rank += 1;
            } else {
                *v = 0.0;
            }
        }
        let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
        let fixed = &inv * &xhy;
        let rss = (yhy - xhy.dot(&fixed)).max(f64::MIN_POSITIVE);
        let dof = (self.n - rank) as f64;
        Some(Reduced {
            neg2: dof * rss.ln() + logdet_h + logdet_x,
            fixed,
            rss,
        })
    }
}

struct RemlCost<'a>(&'a RemlProblem);

impl CostFunction for RemlCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, psi: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let rho = [psi[0] * psi[0], psi[1] * psi[1], psi[2] * psi[2]];
        Ok(self.0.reduce(rho).map_or(f64::INFINITY, |r| r.neg2))
    }
}

/// REML fit of the mixed model with nonnegative variance components, ratios
/// parametrized as squares and optimized by Nelder–Mead.
pub fn reml_fit(design: &LmmDesign, y: &DVector<f64>) -> Result<RemlFit> {
    if y.len() != design.n_obs() {
        return Err(FvicmError::Dimension(format!("{} responses for {} rows", y.len(), design.n_obs())));
    }
    let problem = RemlProblem::new(design, y);
    let k = design.num_knots();
    let cost = |psi: &[f64]| RemlCost(&problem).cost(&psi.to_vec()).unwrap_or(f64::INFINITY);

    let mut best = vec![0.5, if k > 0 { 0.5 } else { 0.0 }, if k > 0 { 0.5 } else { 0.0 }];
    let mut best_val = cost(&best);
    for restart in 0..2 {
        let simplex = simplex_around(&best, if restart == 0 { 0.5 } else { 0.1 });
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(1e-10)
            .map_err(|e| FvicmError::VarianceFit(e.to_string()))?;
        let res = Executor::new(RemlCost(&problem), solver)
            .configure(|s| s.max_iters(2000))
            .run()
            .map_err(|e| FvicmError::VarianceFit(e.to_string()))?;
        if let Some(p) = res.state.best_param {
            let v = cost(&p);
            if v <= best_val {
                best_val = v;
                best = p;
            }
        }
        // Boundary polish: a component that does not help is set to exactly zero.
        for j in 0..3 {
            let mut trial = best.clone();
            trial[j] = 0.0;
            let v = cost(&trial);
            if v <= best_val + 1e-9 * best_val.abs().max(1.0) {
                best = trial;
                best_val = v.min(best_val);
            }
        }
    }
    if k == 0 {
        best[1] = 0.0;
        best[2] = 0.0;
    }
    let rho = [best[0] * best[0], best[1] * best[1], best[2] * best[2]];
    let red = problem
        .reduce(rho)
        .ok_or_else(|| FvicmError::VarianceFit("restricted likelihood undefined at the optimum".into()))?;
    let rank = design.fixed().rank(1e-10 * design.fixed().amax().max(1.0));
    let error = red.rss / (problem.n - rank) as f64;
    let variances = VarianceComponents {
        intercept: rho[0] * error,
        b0: rho[1] * error,
        b1: rho[2] * error,
        error,
    };
    if !red.neg2.is_finite() {
        return Err(FvicmError::VarianceFit(format!("non-finite restricted likelihood at ρ = {rho:?}")));
    }
    let solution = blups(design, y, &red.fixed, rho);
    Ok(RemlFit {
        variances,
        solution,
        neg2_loglik: red.neg2,
        at_boundary: [rho[0] == 0.0, rho[1] == 0.0, rho[2] == 0.0],
    })
}

fn simplex_around(x: &[f64], step: f64) -> Vec<Vec<f64>> {
    let mut out = vec![x.to_vec()];
    for j in 0..x.len() {
        let mut v = x.to_vec();
        v[j] += step;
        out.push(v);
    }
    out
}

/// BLUPs `b̂ = ρ Zᵀ H⁻¹ r` and `â = ρ_a Uᵀ H⁻¹ r` with `r = y − Xβ̂`.
fn blups(design: &LmmDesign, y: &DVector<f64>, fixed: &DVector<f64>, rho: [f64; 3]) -> MixedSolution {
    let x = design.fixed();
    let r = y - &x * fixed;
    let hinv_r = apply_h_inverse(design, rho, &r);
    let mut intercepts = DVector::zeros(design.cluster_sizes.len());
    let mut off = 0;
    for (i, &ni) in design.cluster_sizes.iter().enumerate() {
        intercepts[i] = rho[0] * hinv_r.rows(off, ni).sum();
        off += ni;
    }
    MixedSolution {
        fixed: fixed.clone(),
        b0: design.z0.tr_mul(&hinv_r) * rho[1],
        b1: design.z1.tr_mul(&hinv_r) * rho[2],
        intercepts,
    }
}

/// `H⁻¹v` by Woodbury around the block-diagonal intercept part.
fn apply_h_inverse(design: &LmmDesign, rho: [f64; 3], v: &DVector<f64>) -> DVector<f64> {
    let d_inv = |w: &DVector<f64>| -> DVector<f64> {
        let mut out = w.clone();
        let mut off = 0;
        for &ni in &design.cluster_sizes {
            let c = rho[0] / (1.0 + ni as f64 * rho[0]);
            let s = w.rows(off, ni).sum();
            for t in 0..ni {
                out[off + t] -= c * s;
            }
            off += ni;
        }
        out
    };
    let k = design.num_knots();
    let dv = d_inv(v);
    if k == 0 {
        return dv;
    }
    let zs = hcat(&[&(&design.z0 * rho[1].sqrt()), &(&design.z1 * rho[2].sqrt())]);
    let dz = DMatrix::from_columns(&zs.column_iter().map(|c| d_inv(&c.into_owned())).collect::<Vec<_>>());
    let mut m = zs.tr_mul(&dz);
    for i in 0..2 * k {
        m[(i, i)] += 1.0;
    }
    let rhs = zs.tr_mul(&dv);
    let sol = match m.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => sym_pinv(&m, 1e-14).0 * rhs,
    };
    dv - dz * sol
}

/// Mixed-model solution at fixed variance components.
pub fn mixed_model_solution(design: &LmmDesign, y: &DVector<f64>, variances: &VarianceComponents) -> Result<MixedSolution> {
    if !(variances.error > 0.0) {
        return Err(FvicmError::InvalidParameter("error variance must be positive".into()));
    }
    let rho = variances.ratios();
    let problem = RemlProblem::new(design, y);
    let red = problem
        .reduce(rho)
        .ok_or_else(|| FvicmError::VarianceFit("marginal covariance is not positive definite".into()))?;
    Ok(blups(design, y, &red.fixed, rho))
}

/// `ỹ = y − Z₀b̂₀ − Uâ`.
pub fn pseudo_outcome(design: &LmmDesign, y: &DVector<f64>, solution: &MixedSolution) -> DVector<f64> {
    let mut out = y - &design.z0 * &solution.b0;
    let mut off = 0;
    for (i, &ni) in design.cluster_sizes.iter().enumerate() {
        for t in 0..ni {
            out[off + t] -= solution.intercepts[i];
        }
        off += ni;
    }
    out
}

/// Which eigenvalues enter the `log|V_λ|` term of the spectral null.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogDetEigen {
    /// Eigenvalues `ξ_s` of `ZᵀZ`; `log|V_λ| = Σ log(1 + λξ_s)` exactly.
    #[default]
    Xi,
    /// Eigenvalues `μ_s` of `ZᵀP₀Z`.
    Mu,
}

/// Form of the fixed-effect term of the spectral null.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadingTerm {
    /// `n log(1 + Σu²/Σw²)`.
    #[default]
    Log,
    /// `n (1 + Σu²/Σw²)`, without the logarithm.
    Literal,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrtConfig {
    pub n_null: usize,
    pub seed: u64,
    pub grid_points: usize,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    /// Upper end of the one-time widening when the supremum sits at `ratio_hi`.
    pub ratio_widened: f64,
    pub log_det: LogDetEigen,
    pub leading: LeadingTerm,
}

impl Default for LrtConfig {
    fn default() -> Self {
        Self {
            n_null: 5000,
            seed: 0,
            grid_points: 100,
            ratio_lo: 1e-6,
            ratio_hi: 1e6,
            ratio_widened: 1e12,
            log_det: LogDetEigen::Xi,
            leading: LeadingTerm::Log,
        }
    }
}

impl LrtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_null == 0 || self.grid_points < 2 {
            return Err(FvicmError::Config("need at least one null draw and two grid points".into()));
        }
        if !(self.ratio_lo > 0.0 && self.ratio_hi > self.ratio_lo && self.ratio_widened >= self.ratio_hi) {
            return Err(FvicmError::Config("signal-to-noise grid bounds must be positive and ordered".into()));
        }
        Ok(())
    }

    fn grid(&self, lo: f64, hi: f64) -> Vec<f64> {
        let (a, b) = (lo.ln(), hi.ln());
        let m = self.grid_points;
        (0..m).map(|i| (a + (b - a) * i as f64 / (m - 1) as f64).exp()).collect()
    }
}

/// Supremum over `λ ≥ 0` of a profile, by grid then golden refinement on `ln λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSup {
    pub value: f64,
    pub ratio: f64,
    /// The supremum still sat at the widened upper end.
    pub at_upper_boundary: bool,
}

fn sup_profile(cfg: &LrtConfig, f: impl Fn(f64) -> f64) -> ProfileSup {
    let search = |lo: f64, hi: f64, include_zero: bool| -> (f64, f64, usize, Vec<f64>) {
        let grid = cfg.grid(lo, hi);
        let mut best = (f64::NEG_INFINITY, 0.0, usize::MAX);
        if include_zero {
            best = (f(0.0), 0.0, usize::MAX);
        }
        for (i, &l) in grid.iter().enumerate() {
            let v = f(l);
            if v > best.0 {
                best = (v, l, i);
            }
        }
        (best.0, best.1, best.2, grid)
    };
    let (mut value, mut ratio, mut idx, mut grid) = search(cfg.ratio_lo, cfg.ratio_hi, true);
    let mut at_upper = false;
    if idx == grid.len() - 1 && cfg.ratio_widened > cfg.ratio_hi {
        let (v, l, i, g) = search(cfg.ratio_hi, cfg.ratio_widened, false);
        if v > value {
            value = v;
            ratio = l;
            idx = i;
            grid = g;
        }
        at_upper = idx == grid.len() - 1;
    }
    if idx != usize::MAX {
        let lo = grid[idx.saturating_sub(1)].ln();
        let hi = grid[(idx + 1).min(grid.len() - 1)].ln();
        if hi > lo {
            let r = golden_section(|t| -f(t.exp()), lo, hi, 1e-6, 60);
            if -r.fx > value {
                value = -r.fx;
                ratio = r.x.exp();
            }
        }
    }
    ProfileSup {
        value,
        ratio,
        at_upper_boundary: at_upper,
    }
}

/// Precomputed single-variance-component regression `y = Xβ + Zb + ε`
/// with null fixed design `X₀ ⊂ X`.
#[derive(Debug, Clone)]
pub struct LrtDesign {
    x: DMatrix<f64>,
    x0_basis: DMatrix<f64>,
    /// `EᵀZᵀ` rows, `E` the eigenvectors of `ZᵀZ`.
    ez: DMatrix<f64>,
    /// `EᵀZᵀX`.
    ezx: DMatrix<f64>,
    xi: DVector<f64>,
    mu: DVector<f64>,
    n: usize,
    rank_x: usize,
    rank_x0: usize,
}

impl LrtDesign {
    pub fn new(x: DMatrix<f64>, x0: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if x0.nrows() != n || z.nrows() != n {
            return Err(FvicmError::Dimension("design blocks have different row counts".into()));
        }
        let x_basis = column_basis(&x);
        let x0_basis = column_basis(&x0);
        let (rank_x, rank_x0) = (x_basis.ncols(), x0_basis.ncols());
        if rank_x < rank_x0 {
            return Err(FvicmError::Dimension("null design is not nested in the alternative".into()));
        }
        let l = z.ncols();
        let (xi, ez, mu) = if l == 0 {
            (DVector::zeros(0), DMatrix::zeros(0, n), DVector::zeros(0))
        } else {
            let eig = SymmetricEigen::new(z.tr_mul(&z));
            let xi = eig.eigenvalues.map(|v| v.max(0.0));
            let ez = eig.eigenvectors.transpose() * z.transpose();
            // ZᵀP₀Z with P₀ the projector onto the orthogonal complement of X.
            let qz = x_basis.tr_mul(&z);
            let zpz = z.tr_mul(&z) - qz.tr_mul(&qz);
            let mu_raw = SymmetricEigen::new((&zpz + zpz.transpose()) * 0.5).eigenvalues;
            let floor = -1e-10 * mu_raw.amax().max(1.0);
            if mu_raw.iter().any(|&v| v < floor) {
                warn!("projected eigenvalues below tolerance: {mu_raw}");
            }
            (xi, ez, mu_raw.map(|v| v.max(0.0)))
        };
        let ezx = &ez * &x;
        Ok(Self {
            x,
            x0_basis,
            ez,
            ezx,
            xi,
            mu,
            n,
            rank_x,
            rank_x0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `p = rank X`.
    pub fn p(&self) -> usize {
        self.rank_x
    }

    /// `p'`, the number of fixed effects set to zero under the null.
    pub fn p_prime(&self) -> usize {
        self.rank_x - self.rank_x0
    }

    pub fn num_random(&self) -> usize {
        self.xi.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn xi(&self) -> &DVector<f64> {
        &self.xi
    }

    /// `yᵀS₀y`, the residual sum of squares under the null fixed design.
    pub fn rss_null(&self, y: &DVector<f64>) -> f64 {
        let c = self.x0_basis.tr_mul(y);
        (y.norm_squared() - c.norm_squared()).max(0.0)
    }

    /// `yᵀP_λᵀV_λ⁻¹P_λy` with `V_λ = I + λZZᵀ`.
    pub fn rss_alt(&self, y: &DVector<f64>, ratio: f64) -> f64 {
        let ey = &self.ez * y;
        self.rss_alt_with(y.norm_squared(), &self.x.tr_mul(y), &ey, ratio)
    }

    fn rss_alt_with(&self, yty: f64, xty: &DVector<f64>, ey: &DVector<f64>, ratio: f64) -> f64 {
        let w = self.xi.map(|v| ratio / (1.0 + ratio * v));
        let xtx = self.x.tr_mul(&self.x);
        let wx = DMatrix::from_fn(self.ezx.nrows(), self.ezx.ncols(), |i, j| w[i] * self.ezx[(i, j)]);
        let xvx = xtx - self.ezx.tr_mul(&wx);
        let wy = ey.component_mul(&w);
        let xvy = xty - self.ezx.tr_mul(&wy);
        let yvy = yty - ey.dot(&wy);
        let (inv, _) = sym_pinv(&xvx, 1e-12);
        (yvy - xvy.dot(&(inv * &xvy))).max(f64::MIN_POSITIVE)
    }

    /// `n log(yᵀS₀y) − n log(yᵀP_λᵀV_λ⁻¹P_λy) − log|V_λ|`.
    pub fn profile(&self, y: &DVector<f64>, ratio: f64) -> f64 {
        let n = self.n as f64;
        let logdet: f64 = self.xi.iter().map(|&v| (1.0 + ratio * v).ln()).sum();
        n * self.rss_null(y).ln() - n * self.rss_alt(y, ratio).ln() - logdet
    }

    /// The LRT statistic: supremum of the profile over `λ ≥ 0`.
    pub fn statistic(&self, y: &DVector<f64>, cfg: &LrtConfig) -> ProfileSup {
        let n = self.n as f64;
        let yty = y.norm_squared();
        let xty = self.x.tr_mul(y);
        let ey = &self.ez * y;
        let log_rss0 = self.rss_null(y).ln();
        let mut sup = sup_profile(cfg, |ratio| {
            let logdet: f64 = self.xi.iter().map(|&v| (1.0 + ratio * v).ln()).sum();
            n * log_rss0 - n * self.rss_alt_with(yty, &xty, &ey, ratio).ln() - logdet
        });
        sup.value = sup.value.max(0.0);
        sup
    }

    /// One draw from the spectral null representation using `rng`.
    pub fn null_draw(&self, cfg: &LrtConfig, rng: &mut impl Rng) -> f64 {
        let n = self.n as f64;
        let l = self.num_random();
        let pp = self.p_prime();
        let tail_df = self.n as i64 - self.rank_x as i64 - l as i64;
        let u2: f64 = (0..pp).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum();
        let w2: Vec<f64> = (0..l).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).collect();
        let tail = if tail_df > 0 {
            ChiSquared::new(tail_df as f64).expect("positive degrees of freedom").sample(rng)
        } else {
            0.0
        };
        let total_w2 = w2.iter().sum::<f64>() + tail;
        let ratio_term = if total_w2 > 0.0 { u2 / total_w2 } else { 0.0 };
        let leading = match cfg.leading {
            LeadingTerm::Log => n * ratio_term.ln_1p(),
            LeadingTerm::Literal => n * (1.0 + ratio_term),
        };
        if l == 0 || self.mu.iter().all(|&m| m == 0.0) {
            return leading;
        }
        let logdet_eig = match cfg.log_det {
            LogDetEigen::Xi => &self.xi,
            LogDetEigen::Mu => &self.mu,
        };
        let f = |ratio: f64| -> f64 {
            let mut num = 0.0;
            let mut den = tail;
            let mut logdet = 0.0;
            for s in 0..l {
                let lm = ratio * self.mu[s];
                num += lm / (1.0 + lm) * w2[s];
                den += w2[s] / (1.0 + lm);
                logdet += (ratio * logdet_eig[s]).ln_1p();
            }
            n * (num / den).ln_1p() - logdet
        };
        leading + sup_profile(cfg, f).value.max(0.0)
    }

    /// `n_samples` spectral null draws, draw `j` using stream `j` of the root seed.
    pub fn simulate_null(&self, cfg: &LrtConfig, n_samples: usize) -> Vec<f64> {
        (0..n_samples)
            .into_par_iter()
            .map(|j| self.null_draw(cfg, &mut stream_rng(cfg.seed, j as u64)))
            .collect()
    }
}

/// `(1 + #{null ≥ observed}) / (1 + n_null)`.
pub fn monte_carlo_p_value(observed: f64, null: &[f64]) -> f64 {
    let exceed = null.iter().filter(|&&v| v >= observed).count();
    (1 + exceed) as f64 / (1 + null.len()) as f64
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrtResult {
    pub lrt_obs: f64,
    pub p_value: f64,
    pub null_samples: Vec<f64>,
    pub variances: VarianceComponents,
    /// Signal-to-noise ratio attaining the supremum.
    pub ratio_hat: f64,
    pub at_upper_boundary: bool,
    pub n_obs: usize,
    pub p: usize,
    pub p_prime: usize,
    pub num_random: usize,
    pub blup_b0_norm: f64,
    pub blup_intercept_sd: f64,
    pub variance_at_boundary: [bool; 3],
}

/// Pseudo-LRT of `H₀`: interaction curve linear.
pub fn linearity_test(fit: &FitResult, data: &LongitudinalDataset, cfg: &LrtConfig) -> Result<LrtResult> {
    let design = build_lmm(fit, data)?;
    linearity_test_design(&design, &data.stacked_y(), cfg)
}

pub fn linearity_test_design(design: &LmmDesign, y: &DVector<f64>, cfg: &LrtConfig) -> Result<LrtResult> {
    cfg.validate()?;
    if design.degree() < 2 && design.num_knots() == 0 {
        return Err(FvicmError::NothingToTest(
            "a linear basis without knots already is the null model".into(),
        ));
    }
    if design.w1.iter().all(|&v| v == 0.0) {
        return Err(FvicmError::NothingToTest("no subject carries the minor allele".into()));
    }
    let reml = reml_fit(design, y)?;
    let y_tilde = pseudo_outcome(design, y, &reml.solution);
    let lrt = LrtDesign::new(design.fixed(), design.fixed_null(), design.z1.clone())?;
    let sup = lrt.statistic(&y_tilde, cfg);
    if sup.at_upper_boundary {
        warn!("LRT supremum at the widened upper end of the signal-to-noise range");
    }
    let null_samples = lrt.simulate_null(cfg, cfg.n_null);
    let p_value = monte_carlo_p_value(sup.value, &null_samples);
    let a = &reml.solution.intercepts;
    Ok(LrtResult {
        lrt_obs: sup.value,
        p_value,
        null_samples,
        variances: reml.variances,
        ratio_hat: sup.ratio,
        at_upper_boundary: sup.at_upper_boundary,
        n_obs: lrt.n(),
        p: lrt.p(),
        p_prime: lrt.p_prime(),
        num_random: lrt.num_random(),
        blup_b0_norm: reml.solution.b0.norm(),
        blup_intercept_sd: crate::stats::sample_sd(a.as_slice()),
        variance_at_boundary: reml.at_boundary,
    })
}

fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let m = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, m);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (n, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}
