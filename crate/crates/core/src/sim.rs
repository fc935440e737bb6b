//! Simulated gene-environment designs and Monte Carlo studies.
//!
//! Covariates are iid `U(0,1)³`, genotypes follow Hardy–Weinberg proportions
//! for minor allele frequency `p_A`, and errors are exchangeable normal with
//! variance `σ²` and correlation `ρ`.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{LongitudinalDataset, Subject};
use crate::error::{FvicmError, Result};
use crate::fit::{fit, linspace, FitConfig, FitResult, CURVE_POINTS, Z_95};
use crate::lmm::{linearity_test, LrtConfig};
use crate::select::{select_model, SelectionGrid};
use crate::spline::BasisSpec;
use crate::stats::{mean, proportion_se, sample_sd};
use crate::theta::ThetaFull;

/// One data-generating configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimDesign {
    pub n_subjects: usize,
    pub n_times: usize,
    pub maf: f64,
    pub rho: f64,
    pub error_scale: f64,
    /// Nonlinearity of the interaction curve: 0 gives the null line, 1 the full sine.
    pub tau: f64,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            n_times: 10,
            maf: 0.3,
            rho: 0.5,
            error_scale: 0.1,
            tau: 1.0,
        }
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        if !(self.maf > 0.0 && self.maf <= 0.5) {
            return Err(FvicmError::Config(format!("minor allele frequency {} outside (0, 0.5]", self.maf)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(FvicmError::Config(format!("correlation {} outside [0, 1)", self.rho)));
        }
        if !(self.error_scale > 0.0) {
            return Err(FvicmError::Config("error scale must be positive".into()));
        }
        if self.n_subjects == 0 || self.n_times == 0 {
            return Err(FvicmError::Config("need at least one subject and one time point".into()));
        }
        if !self.tau.is_finite() {
            return Err(FvicmError::Config("tau must be finite".into()));
        }
        Ok(())
    }

    /// `(P(G=2), P(G=1), P(G=0))`.
    pub fn genotype_probs(&self) -> [f64; 3] {
        hwe_probs(self.maf)
    }
}

pub fn hwe_probs(p: f64) -> [f64; 3] {
    [p * p, 2.0 * p * (1.0 - p), (1.0 - p) * (1.0 - p)]
}

/// Generating loadings and curves.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub beta0: DVector<f64>,
    pub beta1: DVector<f64>,
    /// Interval `[A, B]` on which the interaction sine completes half a period.
    pub a: f64,
    pub b: f64,
    /// Intercept and slope of the null line for the interaction curve.
    pub delta0: f64,
    pub delta1: f64,
}

impl Default for Truth {
    fn default() -> Self {
        Self::standard()
    }
}

impl Truth {
    pub fn standard() -> Self {
        let mid = 3f64.sqrt() / 2.0;
        let half = 1.645 / 12f64.sqrt();
        let (a, b) = (mid - half, mid + half);
        Self {
            beta0: DVector::from_vec(vec![5f64.sqrt(), 2.0, 2.0]) / 13f64.sqrt(),
            beta1: DVector::from_element(3, 1.0 / 3f64.sqrt()),
            a,
            b,
            delta0: -a / (b - a),
            delta1: 1.0 / (b - a),
        }
    }

    pub fn m0(&self, u: f64) -> f64 {
        (std::f64::consts::PI * u).cos()
    }

    pub fn m1(&self, u: f64) -> f64 {
        (std::f64::consts::PI * (u - self.a) / (self.b - self.a)).sin()
    }

    pub fn m1_null(&self, u: f64) -> f64 {
        self.delta0 + self.delta1 * u
    }

    /// `m₁⁰ + τ(m₁ − m₁⁰)`.
    pub fn m1_tau(&self, u: f64, tau: f64) -> f64 {
        let l = self.m1_null(u);
        l + tau * (self.m1(u) - l)
    }

    pub fn beta_vector(&self) -> Vec<f64> {
        self.beta0.iter().chain(self.beta1.iter()).copied().collect()
    }

    /// Loadings as a parameter vector with empty coefficient blocks.
    pub fn loadings(&self) -> ThetaFull {
        ThetaFull {
            beta0: self.beta0.clone(),
            beta1: self.beta1.clone(),
            gamma0: DVector::zeros(0),
            gamma1: DVector::zeros(0),
        }
    }
}

/// Generator for replicate `stream` under root seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_dataset(design: &SimDesign, seed: u64) -> Result<LongitudinalDataset> {
    generate_with(design, &Truth::standard(), &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn generate_with(design: &SimDesign, truth: &Truth, rng: &mut impl Rng) -> Result<LongitudinalDataset> {
    design.validate()?;
    let [p2, p1, _] = design.genotype_probs();
    let t = design.n_times;
    let scale = design.error_scale.sqrt();
    let (w_shared, w_own) = (design.rho.sqrt(), (1.0 - design.rho).sqrt());
    let mut subjects = Vec::with_capacity(design.n_subjects);
    for i in 0..design.n_subjects {
        let x = DMatrix::from_fn(t, 3, |_, _| rng.random::<f64>());
        let draw: f64 = rng.random();
        let g: u8 = if draw < p2 {
            2
        } else if draw < p2 + p1 {
            1
        } else {
            0
        };
        let shared: f64 = rng.sample(StandardNormal);
        let y = (0..t)
            .map(|j| {
                let own: f64 = rng.sample(StandardNormal);
                let row = x.row(j);
                let u0 = row.dot(&truth.beta0.transpose());
                let u1 = row.dot(&truth.beta1.transpose());
                truth.m0(u0) + truth.m1_tau(u1, design.tau) * g as f64 + scale * (w_shared * shared + w_own * own)
            })
            .collect();
        subjects.push(Subject::new(format!("s{i}"), y, x, g));
    }
    LongitudinalDataset::new(subjects)
}

/// How `(q, K, λ)` are chosen in each replication.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    Pinned { degree: usize, num_knots: usize, lambda: f64 },
    /// BIC over the grid with GCV for `λ`, redone for every replicate.
    PerReplication(SelectionGrid),
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy::PerReplication(SelectionGrid::default())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub design: SimDesign,
    pub reps: usize,
    pub seed: u64,
    pub policy: SelectionPolicy,
    /// Iteration and tolerance settings; degree, knots and penalty come from `policy`.
    pub fit: FitConfig,
    /// Largest tolerated share of failed replications.
    pub max_failure_rate: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            design: SimDesign::default(),
            reps: 200,
            seed: 1,
            policy: SelectionPolicy::default(),
            fit: FitConfig::default(),
            max_failure_rate: 0.02,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        self.fit.validate()?;
        if self.reps == 0 {
            return Err(FvicmError::Config("reps must be at least 1".into()));
        }
        if let SelectionPolicy::PerReplication(g) = &self.policy {
            g.validate()?;
        }
        Ok(())
    }

    fn fit_one(&self, data: &LongitudinalDataset) -> Result<FitResult> {
        match &self.policy {
            SelectionPolicy::Pinned { degree, num_knots, lambda } => {
                let cfg = FitConfig {
                    degree: *degree,
                    num_knots: *num_knots,
                    lambda: *lambda,
                    ..self.fit.clone()
                };
                fit(data, &cfg)
            }
            SelectionPolicy::PerReplication(grid) => Ok(select_model(data, &self.fit, grid)?.fit),
        }
    }

    fn data_for(&self, rep: usize, tau: f64) -> Result<LongitudinalDataset> {
        let design = SimDesign { tau, ..self.design.clone() };
        generate_with(&design, &Truth::standard(), &mut stream_rng(self.seed, rep as u64))
    }
}

/// Run `f` for every replicate, dropping failures up to the configured share.
fn replicate<T: Send>(cfg: &StudyConfig, f: impl Fn(usize) -> Result<T> + Sync) -> Result<(Vec<(usize, T)>, usize)> {
    let outcomes: Vec<(usize, Result<T>)> = (0..cfg.reps).into_par_iter().map(|r| (r, f(r))).collect();
    let mut ok = Vec::with_capacity(outcomes.len());
    let mut failed = 0;
    for (r, o) in outcomes {
        match o {
            Ok(v) => ok.push((r, v)),
            Err(e) => {
                warn!("replicate {r} failed: {e}");
                failed += 1;
            }
        }
    }
    if failed as f64 > cfg.max_failure_rate * cfg.reps as f64 {
        return Err(FvicmError::Study(format!("{failed} of {} replications failed", cfg.reps)));
    }
    Ok((ok, failed))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamSummary {
    pub param: String,
    pub truth: f64,
    pub bias: f64,
    pub sd: f64,
    /// Mean estimated standard error.
    pub se: f64,
    /// Share of Wald 95% intervals covering the truth.
    pub cp: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReplicateEstimate {
    pub rep: usize,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub q_value: f64,
    pub k: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EstimationStudy {
    pub rows: Vec<ParamSummary>,
    pub replicates: Vec<ReplicateEstimate>,
    pub failed: usize,
}

pub fn estimation_study(cfg: &StudyConfig) -> Result<EstimationStudy> {
    Ok(simulation_study(cfg)?.0)
}

pub fn summarize_loadings(replicates: &[ReplicateEstimate]) -> Vec<ParamSummary> {
    let truth = Truth::standard().beta_vector();
    let p = truth.len() / 2;
    truth
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let est: Vec<f64> = replicates.iter().map(|r| r.beta[j]).collect();
            let se: Vec<f64> = replicates.iter().map(|r| r.se[j]).collect();
            let covered = replicates
                .iter()
                .filter(|r| (r.beta[j] - t).abs() <= Z_95 * r.se[j])
                .count();
            ParamSummary {
                param: format!("beta{}{}", j / p, j % p + 1),
                truth: t,
                bias: mean(&est) - t,
                sd: sample_sd(&est),
                se: mean(&se),
                cp: covered as f64 / replicates.len().max(1) as f64,
            }
        })
        .collect()
}

/// Pointwise summary of one curve across replicates on a common grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CurveSummary {
    pub u: Vec<f64>,
    pub truth: Vec<f64>,
    pub mean_estimate: Vec<f64>,
    /// Empirical 2.5% and 97.5% quantiles of the estimates.
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CurveStudy {
    pub mise0: f64,
    pub mise1: f64,
    /// Per-replicate integrated squared errors `(m̂₀, m̂₁)`.
    pub ise: Vec<(f64, f64)>,
    pub curve0: CurveSummary,
    pub curve1: CurveSummary,
    pub failed: usize,
}

pub fn curve_recovery_study(cfg: &StudyConfig) -> Result<CurveStudy> {
    Ok(simulation_study(cfg)?.1)
}

/// Estimation and curve recovery summaries from one shared set of replicate fits.
pub fn simulation_study(cfg: &StudyConfig) -> Result<(EstimationStudy, CurveStudy)> {
    cfg.validate()?;
    let truth = Truth::standard();
    let tau = cfg.design.tau;
    let (ok, failed) = replicate(cfg, |r| {
        let data = cfg.data_for(r, tau)?;
        cfg.fit_one(&data)
    })?;
    let fits: Vec<(usize, FitResult)> = ok;
    let replicates: Vec<ReplicateEstimate> = fits
        .iter()
        .map(|(r, f)| {
            let (s0, s1) = f.loading_se();
            ReplicateEstimate {
                rep: *r,
                beta: f.theta_hat.beta0.iter().chain(f.theta_hat.beta1.iter()).copied().collect(),
                se: s0.iter().chain(s1.iter()).copied().collect(),
                q_value: f.q_value,
                k: f.k(),
                converged: f.converged,
            }
        })
        .collect();
    let ise: Vec<(f64, f64)> = fits
        .iter()
        .map(|(_, f)| {
            let (c0, c1) = f.curves(CURVE_POINTS);
            (
                ise(&c0.u, &c0.estimate, |u| truth.m0(u)),
                ise(&c1.u, &c1.estimate, |u| truth.m1_tau(u, tau)),
            )
        })
        .collect();
    let common = |range: fn(&FitResult) -> (f64, f64)| {
        let lo = fits.iter().map(|(_, f)| range(f).0).fold(f64::NEG_INFINITY, f64::max);
        let hi = fits.iter().map(|(_, f)| range(f).1).fold(f64::INFINITY, f64::min);
        linspace(lo, hi, CURVE_POINTS)
    };
    let u0 = common(|f| f.index_range0);
    let u1 = common(|f| f.index_range1);
    let curve0 = summarize_curve(&u0, |u| truth.m0(u), fits.iter().map(|(_, f)| (&f.spec0, &f.theta_hat.gamma0)));
    let curve1 = summarize_curve(&u1, |u| truth.m1_tau(u, tau), fits.iter().map(|(_, f)| (&f.spec1, &f.theta_hat.gamma1)));
    let estimation = EstimationStudy {
        rows: summarize_loadings(&replicates),
        replicates,
        failed,
    };
    let curves = CurveStudy {
        mise0: mean(&ise.iter().map(|v| v.0).collect::<Vec<_>>()),
        mise1: mean(&ise.iter().map(|v| v.1).collect::<Vec<_>>()),
        ise,
        curve0,
        curve1,
        failed,
    };
    Ok((estimation, curves))
}

/// Trapezoidal `∫ (m̂ − m)²` over the grid.
fn ise(u: &[f64], est: &[f64], truth: impl Fn(f64) -> f64) -> f64 {
    let sq: Vec<f64> = u.iter().zip(est).map(|(&x, &m)| (m - truth(x)).powi(2)).collect();
    u.windows(2).zip(sq.windows(2)).map(|(x, e)| 0.5 * (x[1] - x[0]) * (e[0] + e[1])).sum()
}

fn summarize_curve<'a>(
    u: &[f64],
    truth: impl Fn(f64) -> f64,
    fits: impl Iterator<Item = (&'a BasisSpec, &'a DVector<f64>)>,
) -> CurveSummary {
    let columns: Vec<Vec<f64>> = fits
        .map(|(spec, gamma)| u.iter().map(|&x| spec.eval(x).dot(gamma)).collect())
        .collect();
    let mut out = CurveSummary {
        u: u.to_vec(),
        truth: u.iter().map(|&x| truth(x)).collect(),
        mean_estimate: Vec::with_capacity(u.len()),
        band_lo: Vec::with_capacity(u.len()),
        band_hi: Vec::with_capacity(u.len()),
    };
    for i in 0..u.len() {
        let mut v: Vec<f64> = columns.iter().map(|c| c[i]).collect();
        v.sort_by(f64::total_cmp);
        out.mean_estimate.push(mean(&v));
        out.band_lo.push(quantile_sorted(&v, 0.025));
        out.band_hi.push(quantile_sorted(&v, 0.975));
    }
    out
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * p;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PowerRow {
    pub tau: f64,
    pub rejection_rate: f64,
    pub mc_se: f64,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PowerStudy {
    pub rows: Vec<PowerRow>,
    /// Test p-values per `τ`, in replicate order.
    pub p_values: Vec<Vec<f64>>,
}

/// Seed for the null draws of replicate `rep`.
pub fn null_seed(seed: u64, rep: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ rep as u64
}

/// Rejection rates of the linearity test at `level` along `taus`. Replicate `r`
/// reuses the same covariates, genotypes and errors for every `τ`.
pub fn power_study(cfg: &StudyConfig, taus: &[f64], level: f64, lrt: &LrtConfig) -> Result<PowerStudy> {
    cfg.validate()?;
    lrt.validate()?;
    if taus.is_empty() {
        return Err(FvicmError::Config("power study needs at least one tau".into()));
    }
    let mut rows = Vec::with_capacity(taus.len());
    let mut p_values = Vec::with_capacity(taus.len());
    for &tau in taus {
        let (ok, failed) = replicate(cfg, |r| {
            let data = cfg.data_for(r, tau)?;
            let f = cfg.fit_one(&data)?;
            let lcfg = LrtConfig {
                seed: null_seed(lrt.seed, r),
                ..lrt.clone()
            };
            Ok(linearity_test(&f, &data, &lcfg)?.p_value)
        })?;
        let ps: Vec<f64> = ok.into_iter().map(|(_, p)| p).collect();
        let rate = ps.iter().filter(|&&p| p <= level).count() as f64 / ps.len() as f64;
        rows.push(PowerRow {
            tau,
            rejection_rate: rate,
            mc_se: proportion_se(rate, ps.len()),
            completed: ps.len(),
            failed,
        });
        p_values.push(ps);
    }
    Ok(PowerStudy { rows, p_values })
}

pub fn write_estimation_tsv(w: &mut impl Write, study: &EstimationStudy) -> Result<()> {
    writeln!(w, "Param\tTrue\tBias\tSD\tSE\tCP")?;
    for r in &study.rows {
        writeln!(w, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}", r.param, r.truth, r.bias, r.sd, r.se, r.cp)?;
    }
    Ok(())
}

pub fn write_curve_tsv(w: &mut impl Write, c: &CurveSummary) -> Result<()> {
    writeln!(w, "u\ttruth\tmean_estimate\tband_lo\tband_hi")?;
    for i in 0..c.u.len() {
        writeln!(
            w,
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            c.u[i], c.truth[i], c.mean_estimate[i], c.band_lo[i], c.band_hi[i]
        )?;
    }
    Ok(())
}

pub fn write_power_tsv(w: &mut impl Write, study: &PowerStudy) -> Result<()> {
    writeln!(w, "tau\trejection_rate\tmc_se")?;
    for r in &study.rows {
        writeln!(w, "{:.4}\t{:.6}\t{:.6}", r.tau, r.rejection_rate, r.mc_se)?;
    }
    Ok(())
}
