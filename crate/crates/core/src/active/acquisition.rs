use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::softmax;
use crate::probcosine::entropy;
use crate::rng::stream_rng;
use crate::sampling::ProjectionSampler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    Random,
    TargetedRandom,
    Entropy,
    TargetedEntropy,
    Bald,
    TargetedBald,
    Epig,
}

impl AcquisitionKind {
    pub const ALL: [AcquisitionKind; 7] = [
        AcquisitionKind::Random,
        AcquisitionKind::TargetedRandom,
        AcquisitionKind::Entropy,
        AcquisitionKind::TargetedEntropy,
        AcquisitionKind::Bald,
        AcquisitionKind::TargetedBald,
        AcquisitionKind::Epig,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AcquisitionKind::Random => "random",
            AcquisitionKind::TargetedRandom => "targeted_random",
            AcquisitionKind::Entropy => "entropy",
            AcquisitionKind::TargetedEntropy => "targeted_entropy",
            AcquisitionKind::Bald => "bald",
            AcquisitionKind::TargetedBald => "targeted_bald",
            AcquisitionKind::Epig => "epig",
        }
    }

    pub fn is_targeted(self) -> bool {
        matches!(
            self,
            AcquisitionKind::TargetedRandom
                | AcquisitionKind::TargetedEntropy
                | AcquisitionKind::TargetedBald
        )
    }
}

impl std::fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AcquisitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Arg(format!("unknown acquisition strategy {s:?}")))
    }
}

/// Distance used to match test points to pool candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnMetric {
    ExpectedCosine,
    Wasserstein2Diag,
}

impl std::str::FromStr for KnnMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected_cosine" => Ok(KnnMetric::ExpectedCosine),
            "wasserstein2_diag" => Ok(KnnMetric::Wasserstein2Diag),
            other => Err(Error::Arg(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub kind: AcquisitionKind,
    pub n_theta_samples: usize,
    pub n_target_samples: usize,
    pub metric: KnnMetric,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            kind: AcquisitionKind::Random,
            n_theta_samples: 64,
            n_target_samples: 32,
            metric: KnnMetric::Wasserstein2Diag,
            seed: 0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_theta_samples == 0 || self.n_target_samples == 0 {
            return Err(Error::Arg("sample counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Unit-norm class prototypes stacked as rows.
pub fn class_matrix(class_means: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let first = class_means
        .first()
        .ok_or_else(|| Error::Arg("no class embeddings".into()))?;
    let d = first.len();
    let mut m = DMatrix::zeros(class_means.len(), d);
    for (c, h) in class_means.iter().enumerate() {
        if h.len() != d {
            return Err(Error::Arg("class embeddings differ in length".into()));
        }
        let norm = h.norm();
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateInput(format!("class {c} embedding is zero")));
        }
        m.row_mut(c).copy_from(&(h / norm).transpose());
    }
    Ok(m)
}

/// `softmax(t · cos(P φ_i, h_c))` for every row of `features`.
pub fn predictions(
    projection: &DMatrix<f64>,
    features: &DMatrix<f64>,
    classes: &DMatrix<f64>,
    temperature: f64,
) -> DMatrix<f64> {
    let g = features * projection.transpose();
    let scores = &g * classes.transpose();
    let mut out = DMatrix::zeros(features.nrows(), classes.nrows());
    for i in 0..features.nrows() {
        let norm = g.row(i).norm();
        let logits: Vec<f64> = scores.row(i).iter().map(|s| temperature * s / norm).collect();
        for (c, p) in softmax(&logits).into_iter().enumerate() {
            out[(i, c)] = p;
        }
    }
    out
}

/// Per-point `S × C` matrices of sample predictions.
pub fn sample_predictions(
    projections: &[DMatrix<f64>],
    features: &DMatrix<f64>,
    classes: &DMatrix<f64>,
    temperature: f64,
) -> Vec<DMatrix<f64>> {
    let per_sample: Vec<DMatrix<f64>> = projections
        .iter()
        .map(|p| predictions(p, features, classes, temperature))
        .collect();
    let (s, c) = (projections.len(), classes.nrows());
    (0..features.nrows())
        .map(|i| DMatrix::from_fn(s, c, |k, j| per_sample[k][(i, j)]))
        .collect()
}

fn all_rows_identical(m: &DMatrix<f64>) -> bool {
    (1..m.nrows()).all(|k| m.row(k) == m.row(0))
}

fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    let s = m.nrows() as f64;
    m.column_iter().map(|c| c.sum() / s).collect()
}

/// `H[mean_s p_s] − mean_s H[p_s]` over sample rows, clamped at 0.
pub fn mutual_information(samples: &DMatrix<f64>) -> f64 {
    if samples.nrows() == 0 || all_rows_identical(samples) {
        return 0.0;
    }
    let marginal = column_means(samples);
    let expected: f64 = samples
        .row_iter()
        .map(|r| entropy(&r.iter().copied().collect::<Vec<_>>()))
        .sum::<f64>()
        / samples.nrows() as f64;
    (entropy(&marginal) - expected).max(0.0)
}

/// Mean over targets of `KL(p(y, y*) ‖ p(y) p(y*))` with the joint formed
/// from paired sample rows, clamped at 0.
pub fn epig_from_samples(pool: &DMatrix<f64>, targets: &[DMatrix<f64>]) -> f64 {
    if targets.is_empty() || all_rows_identical(pool) {
        return 0.0;
    }
    let s = pool.nrows() as f64;
    let p = column_means(pool);
    let mut total = 0.0;
    for target in targets {
        let q = column_means(target);
        let joint = pool.transpose() * target / s;
        let mut kl = 0.0;
        for (i, pi) in p.iter().enumerate() {
            for (j, qj) in q.iter().enumerate() {
                let pij = joint[(i, j)];
                if pij > 0.0 {
                    kl += pij * (pij / (pi * qj)).ln();
                }
            }
        }
        total += kl;
    }
    (total / targets.len() as f64).max(0.0)
}

/// BALD for one candidate under `n_theta` posterior draws.
pub fn bald_score<S: ProjectionSampler + ?Sized>(
    feature: &DVector<f64>,
    posterior: &S,
    class_means: &[DVector<f64>],
    n_theta: usize,
    temperature: f64,
    seed: u64,
) -> Result<f64> {
    if n_theta < 2 {
        return Err(Error::Arg("BALD needs at least two parameter samples".into()));
    }
    let classes = class_matrix(class_means)?;
    let mut rng = stream_rng(seed, "acquire.theta", 0);
    let draws = posterior.draw(n_theta, &mut rng)?;
    let x = DMatrix::from_row_slice(1, feature.len(), feature.as_slice());
    let preds = sample_predictions(&draws, &x, &classes, temperature);
    Ok(mutual_information(&preds[0]))
}

/// Draws `n` target rows uniformly with replacement.
pub fn draw_targets(target_features: &DMatrix<f64>, n: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    if target_features.nrows() == 0 {
        return Err(Error::Arg("no target features".into()));
    }
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..target_features.nrows())).collect();
    Ok(target_features.select_rows(&idx))
}

/// EPIG for one candidate with targets drawn from `target_features`.
pub fn epig_score<S: ProjectionSampler + ?Sized>(
    feature: &DVector<f64>,
    target_features: &DMatrix<f64>,
    posterior: &S,
    class_means: &[DVector<f64>],
    cfg: &AcquisitionConfig,
    temperature: f64,
) -> Result<f64> {
    cfg.validate()?;
    let classes = class_matrix(class_means)?;
    let mut rng = stream_rng(cfg.seed, "acquire.theta", 0);
    let draws = posterior.draw(cfg.n_theta_samples, &mut rng)?;
    let mut target_rng = stream_rng(cfg.seed, "acquire.targets", 0);
    let targets = draw_targets(target_features, cfg.n_target_samples, &mut target_rng)?;
    let x = DMatrix::from_row_slice(1, feature.len(), feature.as_slice());
    let pool = sample_predictions(&draws, &x, &classes, temperature);
    let target_preds = sample_predictions(&draws, &targets, &classes, temperature);
    Ok(epig_from_samples(&pool[0], &target_preds))
}
