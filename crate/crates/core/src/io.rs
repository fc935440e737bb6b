//! Delimited-text ingestion, run configuration, and analysis reports.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::DMatrix;

use crate::data::{LongitudinalDataset, Subject};
use crate::error::{FvicmError, Result};
use crate::fit::{fit, CurveGrid, FitConfig, FitResult};
use crate::lmm::{linearity_test, LrtConfig};
use crate::qif::WorkingBasis;
use crate::select::{candidate, choose, select_model, Candidate, SelectionGrid};
use crate::stats::normal_two_sided_p;

/// Affine maps `x ↦ (x − min) / (max − min)` applied to each covariate column.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardization {
    pub columns: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Standardization {
    fn fit(columns: Vec<String>, rows: &[Vec<f64>]) -> Self {
        let p = columns.len();
        let mut min = vec![f64::INFINITY; p];
        let mut max = vec![f64::NEG_INFINITY; p];
        for r in rows {
            for j in 0..p {
                min[j] = min[j].min(r[j]);
                max[j] = max[j].max(r[j]);
            }
        }
        Self { columns, min, max }
    }

    fn scale(&self, j: usize) -> f64 {
        let s = self.max[j] - self.min[j];
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn apply(&self, j: usize, x: f64) -> f64 {
        (x - self.min[j]) / self.scale(j)
    }

    pub fn invert(&self, j: usize, z: f64) -> f64 {
        self.min[j] + z * self.scale(j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub dataset: LongitudinalDataset,
    pub covariates: Vec<String>,
    /// Present when covariates were standardized.
    pub standardization: Option<Standardization>,
}

/// Read a delimited table with columns `subject_id`, `y`, `g`, `x1…xp` and an
/// optional `time`. Tab-separated when the extension is `.tsv`, comma otherwise.
pub fn ingest(path: &Path, standardize: bool) -> Result<Ingested> {
    let file = File::open(path)?;
    ingest_reader(file, delimiter_for(path), standardize)
}

/// `\t` for `.tsv` paths, `,` otherwise.
pub fn delimiter_for(path: &Path) -> u8 {
    if path.extension().is_some_and(|e| e == "tsv") {
        b'\t'
    } else {
        b','
    }
}

pub fn ingest_reader(reader: impl std::io::Read, delimiter: u8, standardize: bool) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| {
        find(name).ok_or_else(|| FvicmError::Parse {
            row: 1,
            column: name.into(),
            message: "required column is missing".into(),
        })
    };
    let (id_col, y_col, g_col) = (need("subject_id")?, need("y")?, need("g")?);
    let time_col = find("time");
    let mut xcols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()).map(|n| (n, i)))
        .collect();
    xcols.sort_unstable();
    if xcols.len() < 2 {
        return Err(FvicmError::Parse {
            row: 1,
            column: "x1".into(),
            message: format!("need at least two covariate columns x1, x2, …; found {}", xcols.len()),
        });
    }
    for (want, &(n, _)) in xcols.iter().enumerate() {
        if n != want + 1 {
            return Err(FvicmError::Parse {
                row: 1,
                column: format!("x{}", want + 1),
                message: "covariate columns must be numbered consecutively from x1".into(),
            });
        }
    }
    let covariates: Vec<String> = xcols.iter().map(|(n, _)| format!("x{n}")).collect();

    struct Row {
        line: usize,
        time: f64,
        y: f64,
        g: u8,
        x: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let cell = |col: usize| -> Result<&str> {
            match rec.get(col) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(FvicmError::Parse {
                    row: line,
                    column: headers[col].to_string(),
                    message: "missing value".into(),
                }),
            }
        };
        let real = |col: usize| -> Result<f64> {
            let v = cell(col)?;
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| FvicmError::Parse {
                    row: line,
                    column: headers[col].to_string(),
                    message: format!("`{v}` is not a finite number"),
                })
        };
        let id = cell(id_col)?.to_string();
        let g = match cell(g_col)? {
            "0" => 0,
            "1" => 1,
            "2" => 2,
            other => {
                return Err(FvicmError::Parse {
                    row: line,
                    column: "g".into(),
                    message: format!("genotype `{other}` is not 0, 1 or 2"),
                })
            }
        };
        let row = Row {
            line,
            time: match time_col {
                Some(c) => real(c)?,
                None => 0.0,
            },
            y: real(y_col)?,
            g,
            x: xcols.iter().map(|&(_, c)| real(c)).collect::<Result<_>>()?,
        };
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id.clone());
                Vec::new()
            })
            .push(row);
    }
    if order.is_empty() {
        return Err(FvicmError::InvalidData("input table has no data rows".into()));
    }

    let all_x: Vec<Vec<f64>> = order.iter().flat_map(|id| groups[id].iter().map(|r| r.x.clone())).collect();
    let standardization = standardize.then(|| Standardization::fit(covariates.clone(), &all_x));
    let p = covariates.len();
    let mut subjects = Vec::with_capacity(order.len());
    for id in &order {
        let mut rows = groups.remove(id).expect("grouped id");
        // Stable, so ties keep file order.
        rows.sort_by(|a, b| a.time.total_cmp(&b.time));
        let g = rows[0].g;
        if let Some(bad) = rows.iter().find(|r| r.g != g) {
            return Err(FvicmError::InvalidData(format!(
                "subject `{id}` has genotype {g} and {} (row {})",
                bad.g, bad.line
            )));
        }
        let x = DMatrix::from_fn(rows.len(), p, |i, j| {
            let v = rows[i].x[j];
            standardization.as_ref().map_or(v, |s| s.apply(j, v))
        });
        subjects.push(Subject::new(id.clone(), rows.iter().map(|r| r.y).collect(), x, g));
    }
    Ok(Ingested {
        dataset: LongitudinalDataset::new(subjects)?,
        covariates,
        standardization,
    })
}

/// Write a dataset in the ingestion format, with a `time` column from the row order.
pub fn write_dataset(w: impl Write, data: &LongitudinalDataset, delimiter: u8) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().delimiter(delimiter).from_writer(w);
    let mut header = vec!["subject_id".to_string(), "time".into(), "y".into(), "g".into()];
    header.extend((1..=data.p()).map(|j| format!("x{j}")));
    wtr.write_record(&header)?;
    for s in data.subjects() {
        for t in 0..s.len() {
            let mut rec = vec![s.id.clone(), t.to_string(), format!("{}", s.y[t]), s.g.to_string()];
            rec.extend(s.x.row(t).iter().map(|v| format!("{v}")));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// How the roughness penalty is set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyChoice {
    Gcv,
    Fixed(f64),
}

/// Settings for one analysis, read from TOML.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub standardize: bool,
    pub basis: WorkingBasis,
    pub degrees: Vec<usize>,
    pub knot_counts: Vec<usize>,
    pub penalty: PenaltyChoice,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub test_linearity: bool,
    pub n_null: usize,
    pub max_outer_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grid = SelectionGrid::default();
        Self {
            output_dir: PathBuf::from("fvicm_out"),
            seed: 0,
            standardize: true,
            basis: WorkingBasis::default(),
            degrees: grid.degrees,
            knot_counts: grid.knot_counts,
            penalty: PenaltyChoice::Gcv,
            lambda_lo: grid.lambda_lo,
            lambda_hi: grid.lambda_hi,
            test_linearity: true,
            n_null: 2000,
            max_outer_iters: FitConfig::default().max_outer_iters,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| FvicmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid().validate()?;
        self.fit_config().validate()?;
        if let PenaltyChoice::Fixed(l) = self.penalty {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(FvicmError::Config(format!("penalty {l} must be finite and nonnegative")));
            }
        }
        if self.test_linearity {
            self.lrt_config().validate()?;
        }
        Ok(())
    }

    pub fn grid(&self) -> SelectionGrid {
        SelectionGrid {
            degrees: self.degrees.clone(),
            knot_counts: self.knot_counts.clone(),
            lambda_lo: self.lambda_lo,
            lambda_hi: self.lambda_hi,
            ..SelectionGrid::default()
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            basis_kind: self.basis,
            max_outer_iters: self.max_outer_iters,
            seed: self.seed,
            ..FitConfig::default()
        }
    }

    pub fn lrt_config(&self) -> LrtConfig {
        LrtConfig {
            n_null: self.n_null,
            seed: self.seed,
            ..LrtConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParameterRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    /// Two-sided Wald p-value for a zero value.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TestSummary {
    pub lrt_obs: f64,
    pub p_value: f64,
    pub n_null: usize,
    pub ratio_hat: f64,
    pub p_prime: usize,
    pub num_random: usize,
}

/// Everything an analysis produced, as written to `summary.json`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnalysisReport {
    pub config: RunConfig,
    pub covariates: Vec<String>,
    pub standardization: Option<Standardization>,
    pub n_subjects: usize,
    pub n_obs: usize,
    pub candidates: Vec<Candidate>,
    pub degree: usize,
    pub num_knots: usize,
    pub lambda: f64,
    pub knots0: Vec<f64>,
    pub knots1: Vec<f64>,
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub parameters: Vec<ParameterRow>,
    pub q_value: f64,
    pub mse: f64,
    pub converged: bool,
    pub iterations: usize,
    pub linearity: Option<TestSummary>,
    pub curve0: CurveGrid,
    pub curve1: CurveGrid,
}

pub const FIT_SUMMARY: &str = "fit_summary.tsv";
pub const LINEARITY_TEST: &str = "linearity_test.tsv";
pub const CURVES_M0: &str = "curves_m0.tsv";
pub const CURVES_M1: &str = "curves_m1.tsv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Select, fit, optionally test, and return the report without touching disk.
pub fn analyze(ingested: &Ingested, cfg: &RunConfig) -> Result<AnalysisReport> {
    cfg.validate()?;
    let data = &ingested.dataset;
    let (candidates, fitted) = select(data, cfg)?;
    let linearity = if cfg.test_linearity {
        match linearity_test(&fitted, data, &cfg.lrt_config()) {
            Ok(t) => Some(TestSummary {
                lrt_obs: t.lrt_obs,
                p_value: t.p_value,
                n_null: t.null_samples.len(),
                ratio_hat: t.ratio_hat,
                p_prime: t.p_prime,
                num_random: t.num_random,
            }),
            Err(FvicmError::NothingToTest(m)) => {
                warn!("linearity test skipped: {m}");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(report(ingested, cfg, candidates, &fitted, linearity))
}

fn select(data: &LongitudinalDataset, cfg: &RunConfig) -> Result<(Vec<Candidate>, FitResult)> {
    let base = cfg.fit_config();
    match cfg.penalty {
        PenaltyChoice::Gcv => {
            let rep = select_model(data, &base, &cfg.grid())?;
            Ok((rep.candidates, rep.fit))
        }
        PenaltyChoice::Fixed(lambda) => {
            let mut cands = Vec::new();
            let mut fits = Vec::new();
            for &degree in &cfg.degrees {
                for &num_knots in &cfg.knot_counts {
                    let fc = FitConfig {
                        degree,
                        num_knots,
                        lambda,
                        ..base.clone()
                    };
                    match fit(data, &fc) {
                        Ok(f) => {
                            cands.push(candidate(&f, degree, num_knots, data.n_subjects()));
                            fits.push(f);
                        }
                        Err(e) => warn!("candidate (q = {degree}, K = {num_knots}) failed: {e}"),
                    }
                }
            }
            let best = choose(&cands).ok_or_else(|| FvicmError::Study("every selection candidate failed".into()))?;
            Ok((cands, fits.swap_remove(best)))
        }
    }
}

fn report(
    ingested: &Ingested,
    cfg: &RunConfig,
    candidates: Vec<Candidate>,
    f: &FitResult,
    linearity: Option<TestSummary>,
) -> AnalysisReport {
    let p = ingested.dataset.p();
    let th = &f.theta_hat;
    let estimates: Vec<f64> = th.to_vector().iter().copied().collect();
    let mut names = Vec::with_capacity(estimates.len());
    for l in 0..2 {
        names.extend((1..=p).map(|j| format!("beta{l}{j}")));
    }
    names.extend((0..th.gamma0.len()).map(|j| format!("gamma0{}", j + 1)));
    names.extend((0..th.gamma1.len()).map(|j| format!("gamma1{}", j + 1)));
    let parameters = names
        .into_iter()
        .zip(estimates.iter().zip(f.se.iter()))
        .map(|(name, (&estimate, &se))| ParameterRow {
            name,
            estimate,
            se,
            p_value: if se > 0.0 { normal_two_sided_p(estimate / se) } else { f64::NAN },
        })
        .collect();
    AnalysisReport {
        config: cfg.clone(),
        covariates: ingested.covariates.clone(),
        standardization: ingested.standardization.clone(),
        n_subjects: ingested.dataset.n_subjects(),
        n_obs: ingested.dataset.n_obs(),
        candidates,
        degree: f.config.degree,
        num_knots: f.config.num_knots,
        lambda: f.config.lambda,
        knots0: f.spec0.knots().to_vec(),
        knots1: f.spec1.knots().to_vec(),
        beta0: th.beta0.iter().copied().collect(),
        beta1: th.beta1.iter().copied().collect(),
        gamma0: th.gamma0.iter().copied().collect(),
        gamma1: th.gamma1.iter().copied().collect(),
        parameters,
        q_value: f.q_value,
        mse: f.mse,
        converged: f.converged,
        iterations: f.iterations,
        linearity,
        curve0: f.curve0.clone(),
        curve1: f.curve1.clone(),
    }
}

/// Run the analysis and write the report files into `cfg.output_dir`.
pub fn run_analysis(ingested: &Ingested, cfg: &RunConfig) -> Result<AnalysisReport> {
    let rep = analyze(ingested, cfg)?;
    write_report(&rep, &cfg.output_dir)?;
    Ok(rep)
}

pub fn write_report(rep: &AnalysisReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let create = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };

    let mut w = create(FIT_SUMMARY)?;
    writeln!(w, "parameter\testimate\tse\tp_value")?;
    for r in &rep.parameters {
        writeln!(w, "{}\t{}\t{}\t{}", r.name, r.estimate, r.se, r.p_value)?;
    }
    writeln!(w, "mse\t{}\t\t", rep.mse)?;
    writeln!(w, "qif\t{}\t\t", rep.q_value)?;
    w.flush()?;

    let mut w = create(LINEARITY_TEST)?;
    writeln!(w, "lrt_obs\tp_value\tn_null\tratio_hat")?;
    if let Some(t) = &rep.linearity {
        writeln!(w, "{}\t{}\t{}\t{}", t.lrt_obs, t.p_value, t.n_null, t.ratio_hat)?;
    }
    w.flush()?;

    for (name, c) in [(CURVES_M0, &rep.curve0), (CURVES_M1, &rep.curve1)] {
        let mut w = create(name)?;
        writeln!(w, "u\testimate\tlower\tupper")?;
        for i in 0..c.u.len() {
            writeln!(w, "{}\t{}\t{}\t{}", c.u[i], c.estimate[i], c.lower[i], c.upper[i])?;
        }
        w.flush()?;
    }

    let mut w = create(SUMMARY_JSON)?;
    serde_json::to_writer_pretty(&mut w, rep)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<AnalysisReport> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_JSON))?)?)
}
