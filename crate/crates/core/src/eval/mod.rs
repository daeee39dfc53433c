//! Distribution metrics (FID, KID), compositional accuracy and PartEval.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::exec::Exec;
use crate::world::{ConditionSet, Embedding, WorldSpec};

pub mod parteval;
pub mod report;

pub use parteval::{
    parteval_extract, parteval_grade, parteval_questions, parteval_score, AttributeKind, EvalQuestion, GradeRecord,
    GradeSubject, Grader, OracleGrader, PartFeature, RemoteGrader, RemoteGraderConfig, UNSPECIFIED,
};
pub use report::{cmd_report, EvalReport, ReportOutput, SampleScore};

/// Eigenvalues above this negative bound are treated as round-off and clamped.
pub const EIGEN_CLAMP: f64 = -1e-8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("eigendecomposition did not converge")]
    NonConvergent,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grader unavailable: {0}")]
    GraderUnavailable(String),
    #[error("malformed verdict: {0}")]
    MalformedVerdict(String),
    #[error("records use different scales ({0} and {1} questions)")]
    MixedScale(usize, usize),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Mean, unbiased covariance and sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn gaussian_stats(samples: &[Embedding]) -> Result<GaussianStats, EvalError> {
    if samples.len() < 2 {
        return Err(EvalError::TooFewSamples { need: 2, got: samples.len() });
    }
    let d = samples[0].dim();
    if let Some(bad) = samples.iter().find(|s| s.dim() != d) {
        return Err(EvalError::DimensionMismatch(d, bad.dim()));
    }
    let n = samples.len();
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(&s.0);
    }
    mean /= n as f64;
    let mut centered = DMatrix::zeros(d, n);
    for (j, s) in samples.iter().enumerate() {
        for i in 0..d {
            centered[(i, j)] = s.0[i] - mean[i];
        }
    }
    let mut cov = &centered * centered.transpose() / (n - 1) as f64;
    symmetrize(&mut cov);
    Ok(GaussianStats { mean, cov, n })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, EvalError> {
    SymmetricEigen::try_new(m, f64::EPSILON, 10_000).ok_or(EvalError::NonConvergent)
}

/// Square root of a symmetric positive semi-definite matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, EvalError> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = eigen(s)?;
    let roots = eig.eigenvalues.map(|l| if l > EIGEN_CLAMP { l.max(0.0).sqrt() } else { f64::NAN });
    if roots.iter().any(|r| r.is_nan()) {
        return Err(EvalError::InvalidArgument("matrix is not positive semi-definite".into()));
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// `Tr((Σ_a Σ_b)^½)` through the symmetric form `Σ_a^½ Σ_b Σ_a^½`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, EvalError> {
    let sa = sqrtm_psd(a)?;
    let mut m = &sa * b * &sa;
    symmetrize(&mut m);
    let eig = eigen(m)?;
    let mut tr = 0.0;
    for l in eig.eigenvalues.iter() {
        if *l < EIGEN_CLAMP {
            return Err(EvalError::InvalidArgument(format!("negative eigenvalue {l} in covariance product")));
        }
        tr += l.max(0.0).sqrt();
    }
    Ok(tr)
}

/// Fréchet distance between two Gaussian fits.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::DimensionMismatch(a.dim(), b.dim()));
    }
    let dmu = (&a.mean - &b.mean).norm_squared();
    let tr = a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(&a.cov, &b.cov)?;
    Ok(dmu + tr)
}

fn poly_kernel(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / u.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² with the cubic polynomial kernel; within-set diagonal terms
/// are excluded.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let within = |s: &[&[f64]]| -> f64 {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += poly_kernel(s[i], s[j]);
                }
            }
        }
        acc
    };
    let mut cross = 0.0;
    for u in x {
        for v in y {
            cross += poly_kernel(u, v);
        }
    }
    within(x) / (m * (m - 1.0)) + within(y) / (n * (n - 1.0)) - 2.0 * cross / (m * n)
}

/// Kernel inception distance: MMD² over `n_subsets` random subset pairs of
/// `subset_size`, returned as (mean, population std).
pub fn kid<R: Rng + ?Sized>(
    x: &[Embedding],
    y: &[Embedding],
    subset_size: usize,
    n_subsets: usize,
    rng: &mut R,
    exec: Exec,
) -> Result<(f64, f64), EvalError> {
    let need = subset_size.max(2);
    let got = x.len().min(y.len());
    if subset_size < 2 || subset_size > got {
        return Err(EvalError::TooFewSamples { need, got });
    }
    if n_subsets < 2 {
        return Err(EvalError::TooFewSamples { need: 2, got: n_subsets });
    }
    if x[0].dim() != y[0].dim() {
        return Err(EvalError::DimensionMismatch(x[0].dim(), y[0].dim()));
    }
    // draw every subset up front so the result does not depend on `exec`
    let picks: Vec<(Vec<usize>, Vec<usize>)> = (0..n_subsets)
        .map(|_| (sample(rng, x.len(), subset_size).into_vec(), sample(rng, y.len(), subset_size).into_vec()))
        .collect();
    let values = exec.map_slice(&picks, |(ix, iy)| {
        let xs: Vec<&[f64]> = ix.iter().map(|&i| x[i].as_slice()).collect();
        let ys: Vec<&[f64]> = iy.iter().map(|&i| y[i].as_slice()).collect();
        mmd2_unbiased(&xs, &ys)
    });
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Fraction of slots of one sample whose decoded atom equals the conditioning atom.
pub fn slot_match_rate(generated: &Embedding, cond: &ConditionSet, world: &WorldSpec) -> f64 {
    let decoded = world.decode_parts(generated, cond.k());
    let hits = decoded.iter().zip(&cond.slots).filter(|(d, (a, _))| *d == a).count();
    hits as f64 / cond.k() as f64
}

/// Mean slot match rate over samples.
pub fn compositional_accuracy(
    samples: &[(Embedding, ConditionSet)],
    world: &WorldSpec,
    exec: Exec,
) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::TooFewSamples { need: 1, got: 0 });
    }
    let rates = exec.map_slice(samples, |(e, c)| slot_match_rate(e, c, world));
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}
