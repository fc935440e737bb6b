//! Spline complexity and penalty selection: BIC over `(q, K)`, the
//! over-identification goodness-of-fit test, and GCV over `λ`.

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::LongitudinalDataset;
use crate::error::{FvicmError, Result};
use crate::fit::{fit, fit_from, FitConfig, FitResult};
use crate::linalg::sym_pinv;
use crate::optim::golden_section;
use crate::qif::PenaltySpec;
use crate::stats::chi2_sf;

/// `Q + (h−1)·k·ln N`, i.e. `Q + (r−k) ln N` with `r = hk`.
pub fn bic(q: f64, k: usize, n: f64, h: usize) -> f64 {
    q + (h.saturating_sub(1) * k) as f64 * n.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gof {
    PValue(f64),
    /// As many moments as parameters; the test has no degrees of freedom.
    Saturated,
}

impl Gof {
    pub fn p_value(&self) -> Option<f64> {
        match self {
            Gof::PValue(p) => Some(*p),
            Gof::Saturated => None,
        }
    }
}

/// `P(χ²_{r−k} > Q)`.
pub fn gof_test(q: f64, r: usize, k: usize) -> Gof {
    if r <= k {
        Gof::Saturated
    } else {
        Gof::PValue(chi2_sf(q, (r - k) as f64))
    }
}

/// `tr[(M + λD)⁻¹ M]` for the information `M = ĠᵀC̄⁻¹Ġ` and penalty mask `D`.
pub fn effective_df(information: &DMatrix<f64>, penalty: &PenaltySpec) -> f64 {
    let mut a = information.clone();
    let d = penalty.free_mask();
    for i in 0..a.nrows() {
        a[(i, i)] += penalty.lambda * d[i];
    }
    let inv = match a.clone().cholesky() {
        Some(c) => c.inverse(),
        None => sym_pinv(&a, 1e-14).0,
    };
    (inv * information).trace()
}

/// `(Q/N) / (1 − df/N)²`.
pub fn gcv(q: f64, df: f64, n: usize) -> f64 {
    let n = n as f64;
    let denom = (1.0 - df / n).powi(2);
    (q / n) / denom
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionGrid {
    pub degrees: Vec<usize>,
    pub knot_counts: Vec<usize>,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub golden_max_iter: usize,
    /// Absolute tolerance on `ln λ`.
    pub golden_tol: f64,
}

impl Default for SelectionGrid {
    fn default() -> Self {
        Self {
            degrees: vec![1, 2, 3],
            knot_counts: (0..=5).collect(),
            lambda_lo: 1e-8,
            lambda_hi: 1e2,
            golden_max_iter: 40,
            golden_tol: 1e-3,
        }
    }
}

impl SelectionGrid {
    pub fn validate(&self) -> Result<()> {
        if self.degrees.is_empty() || self.knot_counts.is_empty() {
            return Err(FvicmError::Config("selection grid needs at least one degree and one knot count".into()));
        }
        if self.degrees.contains(&0) {
            return Err(FvicmError::Config("spline degrees must be at least 1".into()));
        }
        if !(self.lambda_lo > 0.0 && self.lambda_hi > self.lambda_lo && self.lambda_hi.is_finite()) {
            return Err(FvicmError::Config(format!(
                "penalty bracket [{}, {}] must be positive and ordered",
                self.lambda_lo, self.lambda_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GcvPoint {
    pub lambda: f64,
    pub gcv: f64,
    pub df: f64,
    pub q: f64,
}

#[derive(Debug, Clone)]
pub struct GcvSelection {
    pub lambda: f64,
    pub gcv: f64,
    /// Every probed penalty, in probe order.
    pub curve: Vec<GcvPoint>,
    pub fit: FitResult,
}

/// GCV value and effective df of a fit.
pub fn gcv_of(fit: &FitResult) -> Result<GcvPoint> {
    let penalty = PenaltySpec::new(fit.config.lambda, fit.layout().p, &fit.spec0, &fit.spec1)?;
    let df = effective_df(&fit.information, &penalty);
    Ok(GcvPoint {
        lambda: fit.config.lambda,
        gcv: gcv(fit.q_value, df, fit.n_subjects),
        df,
        q: fit.q_value,
    })
}

/// Golden-section search for the GCV-minimizing penalty on `ln λ`, refitting
/// at every probe from the previous probe's estimate.
pub fn gcv_select(data: &LongitudinalDataset, config: &FitConfig, grid: &SelectionGrid) -> Result<GcvSelection> {
    grid.validate()?;
    let mut base = config.clone();
    base.lambda = grid.lambda_lo;
    let first = fit(data, &base)?;
    let mut warm = first.clone();
    let mut fits: Vec<FitResult> = Vec::new();
    let mut curve = Vec::new();
    let mut objective = |log_lambda: f64| -> f64 {
        let mut cfg = config.clone();
        cfg.lambda = log_lambda.exp();
        match fit_from(data, &cfg, warm.spec0.clone(), warm.spec1.clone(), warm.theta_hat.clone())
            .and_then(|f| gcv_of(&f).map(|p| (f, p)))
        {
            Ok((f, p)) => {
                curve.push(p);
                warm = f.clone();
                fits.push(f);
                p.gcv
            }
            Err(e) => {
                warn!("fit at λ = {:.3e} failed: {e}", cfg.lambda);
                f64::INFINITY
            }
        }
    };
    let res = golden_section(&mut objective, grid.lambda_lo.ln(), grid.lambda_hi.ln(), grid.golden_tol, grid.golden_max_iter);
    if !res.fx.is_finite() {
        return Err(FvicmError::Study("every fit probed by the penalty search failed".into()));
    }
    let best = curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.gcv.total_cmp(&b.1.gcv))
        .map(|(i, _)| i)
        .expect("a finite probe exists");
    Ok(GcvSelection {
        lambda: curve[best].lambda,
        gcv: curve[best].gcv,
        fit: fits.swap_remove(best),
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Candidate {
    pub degree: usize,
    pub num_knots: usize,
    pub lambda: f64,
    pub q: f64,
    pub k: usize,
    pub r: usize,
    pub bic: f64,
    pub gof: Gof,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub candidates: Vec<Candidate>,
    pub chosen: usize,
    pub fit: FitResult,
}

impl SelectionReport {
    pub fn chosen(&self) -> &Candidate {
        &self.candidates[self.chosen]
    }
}

/// Index of the minimum-BIC candidate, ties broken by smaller `k`, then smaller `q`.
pub fn choose(candidates: &[Candidate]) -> Option<usize> {
    (0..candidates.len()).min_by(|&a, &b| {
        let (x, y) = (&candidates[a], &candidates[b]);
        x.bic
            .total_cmp(&y.bic)
            .then(x.k.cmp(&y.k))
            .then(x.degree.cmp(&y.degree))
    })
}

/// For every `(q, K)` choose `λ` by GCV, score by BIC, return the minimum-BIC model.
pub fn select_model(data: &LongitudinalDataset, config: &FitConfig, grid: &SelectionGrid) -> Result<SelectionReport> {
    grid.validate()?;
    let pairs: Vec<(usize, usize)> = grid
        .degrees
        .iter()
        .flat_map(|&q| grid.knot_counts.iter().map(move |&k| (q, k)))
        .collect();
    let outcomes: Vec<Option<(Candidate, FitResult)>> = pairs
        .par_iter()
        .map(|&(degree, num_knots)| {
            let cfg = FitConfig {
                degree,
                num_knots,
                ..config.clone()
            };
            match gcv_select(data, &cfg, grid) {
                Ok(sel) => Some((candidate(&sel.fit, degree, num_knots, data.n_subjects()), sel.fit)),
                Err(e) => {
                    warn!("candidate (q = {degree}, K = {num_knots}) failed: {e}");
                    None
                }
            }
        })
        .collect();
    let (candidates, mut fits): (Vec<_>, Vec<_>) = outcomes.into_iter().flatten().unzip();
    let chosen = choose(&candidates).ok_or_else(|| FvicmError::Study("every selection candidate failed".into()))?;
    Ok(SelectionReport {
        fit: fits.swap_remove(chosen),
        candidates,
        chosen,
    })
}

/// Selection record for a fitted candidate.
pub fn candidate(fit: &FitResult, degree: usize, num_knots: usize, n: usize) -> Candidate {
    let k = fit.k();
    let r = fit.n_moments;
    let h = r / k;
    Candidate {
        degree,
        num_knots,
        lambda: fit.config.lambda,
        q: fit.q_value,
        k,
        r,
        bic: bic(fit.q_value, k, n as f64, h),
        gof: gof_test(fit.q_value, r, k),
        converged: fit.converged,
    }
}
