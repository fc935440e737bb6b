//! Longitudinal gene-environment data: repeated responses and environmental
//! covariates per subject, plus one time-invariant genotype.

use nalgebra::{DMatrix, DVector};

use crate::error::{FvicmError, Result};

/// Default cap on the number of repeated measures per subject.
pub const DEFAULT_MAX_CLUSTER: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Responses `y_i1 … y_in_i`.
    pub y: DVector<f64>,
    /// Covariates, one row per time point (`n_i × p`).
    pub x: DMatrix<f64>,
    /// Genotype coded 0/1/2 (minor allele count).
    pub g: u8,
}

impl Subject {
    pub fn new(id: impl Into<String>, y: Vec<f64>, x: DMatrix<f64>, g: u8) -> Self {
        Self {
            id: id.into(),
            y: DVector::from_vec(y),
            x,
            g,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn genotype(&self) -> f64 {
        self.g as f64
    }
}

/// A validated collection of subjects sharing the covariate dimension `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<Subject>,
    p: usize,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        Self::with_cluster_cap(subjects, DEFAULT_MAX_CLUSTER)
    }

    pub fn with_cluster_cap(subjects: Vec<Subject>, max_cluster: usize) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| FvicmError::InvalidData("dataset has no subjects".into()))?;
        let p = first.x.ncols();
        if p == 0 {
            return Err(FvicmError::InvalidData("covariate dimension is zero".into()));
        }
        for s in &subjects {
            if s.is_empty() {
                return Err(FvicmError::InvalidData(format!(
                    "subject `{}` has no observations",
                    s.id
                )));
            }
            if s.len() > max_cluster {
                return Err(FvicmError::InvalidData(format!(
                    "subject `{}` has {} observations, above the cap of {max_cluster}",
                    s.id,
                    s.len()
                )));
            }
            if s.x.nrows() != s.len() || s.x.ncols() != p {
                return Err(FvicmError::Dimension(format!(
                    "subject `{}`: covariates are {}x{}, expected {}x{p}",
                    s.id,
                    s.x.nrows(),
                    s.x.ncols(),
                    s.len()
                )));
            }
            if s.g > 2 {
                return Err(FvicmError::InvalidData(format!(
                    "subject `{}`: genotype {} outside {{0,1,2}}",
                    s.id, s.g
                )));
            }
            if s.y.iter().chain(s.x.iter()).any(|v| !v.is_finite()) {
                return Err(FvicmError::InvalidData(format!(
                    "subject `{}` has non-finite values",
                    s.id
                )));
            }
        }
        Ok(Self { subjects, p })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    /// Number of subjects `N`.
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Covariate dimension `p`.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Total number of observations `Σ n_i`.
    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.subjects.iter().map(Subject::len).max().unwrap_or(0)
    }

    /// Index values `βᵀx_ij` over all observations, subject-major.
    pub fn index_values(&self, beta: &DVector<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_obs());
        for s in &self.subjects {
            for row in s.x.row_iter() {
                out.push(row.dot(&beta.transpose()));
            }
        }
        out
    }

    /// All responses stacked subject-major.
    pub fn stacked_y(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_obs(),
            self.subjects.iter().flat_map(|s| s.y.iter().copied()),
        )
    }

    /// Same dataset with responses replaced (subject-major stacking).
    pub fn with_responses(&self, y: &DVector<f64>) -> Result<Self> {
        if y.len() != self.n_obs() {
            return Err(FvicmError::Dimension(format!(
                "{} responses for {} observations",
                y.len(),
                self.n_obs()
            )));
        }
        let mut offset = 0;
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let n = s.len();
                let mut t = s.clone();
                t.y = y.rows(offset, n).into_owned();
                offset += n;
                t
            })
            .collect();
        Ok(Self {
            subjects,
            p: self.p,
        })
    }
}
