//! Seeded synthetic dual-encoder problems.
//!
//! Features are Gaussian blobs around distinct class means. The image and
//! text projections have i.i.d. `N(0, 1/d_in)` entries (unit expected row
//! norm), and class text features are chosen so that their text embeddings
//! land near the projected class means, which makes the zero-shot classifier
//! informative by construction.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::active::ActiveProblem;
use crate::error::{Error, Result};
use crate::io::{EmbeddingMatrix, ModelBundle};
use crate::laplace::{
    accumulate_factors, assemble_tuned, log_likelihood, KfacPosterior, LossContext, LossKind,
};
use crate::probcosine::GaussianEmbedding;
use crate::rng::stream_rng;

pub const SYNTHETIC_TEMPERATURE: f64 = 10.0;
const TEXT_NOISE: f64 = 0.05;

fn gaussian(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

/// Class means, projections and class text features shared by generators.
#[derive(Debug, Clone)]
struct World {
    class_means: DMatrix<f64>,
    proj_image: DMatrix<f64>,
    proj_text: DMatrix<f64>,
    class_text: DMatrix<f64>,
}

impl World {
    fn new(d_in: usize, d_out: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, "synth.world", 0);
        let sd = 1.0 / (d_in as f64).sqrt();
        let class_means = gaussian(n_classes, d_in, 1.0, &mut rng);
        let proj_image = gaussian(d_out, d_in, sd, &mut rng);
        let proj_text = gaussian(d_out, d_in, sd, &mut rng);
        let pinv = proj_text
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Numerical(format!("pseudo-inverse failed: {e}")))?;
        let targets = &class_means * proj_image.transpose();
        let class_text = &targets * pinv.transpose() + gaussian(n_classes, d_in, TEXT_NOISE, &mut rng);
        Ok(Self {
            class_means,
            proj_image,
            proj_text,
            class_text,
        })
    }

    fn bundle(&self) -> Result<ModelBundle> {
        Ok(ModelBundle {
            proj_image: EmbeddingMatrix::from_dmatrix(&self.proj_image)?,
            proj_text: EmbeddingMatrix::from_dmatrix(&self.proj_text)?,
            temperature: SYNTHETIC_TEMPERATURE,
            bias: 0.0,
            loss: LossKind::InfoNce,
        })
    }

    /// Rows `μ_y + offset + ε`.
    fn sample(&self, labels: &[usize], offset: Option<&DVector<f64>>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let d_in = self.class_means.ncols();
        let mut x = gaussian(labels.len(), d_in, 1.0, rng);
        for (i, &y) in labels.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += self.class_means.row(y);
            if let Some(o) = offset {
                row += o.transpose();
            }
        }
        x
    }

    fn paired_text(&self, labels: &[usize], rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut t = gaussian(labels.len(), self.class_text.ncols(), TEXT_NOISE, rng);
        for (i, &y) in labels.iter().enumerate() {
            let mut row = t.row_mut(i);
            row += self.class_text.row(y);
        }
        t
    }

    /// Unit text embeddings of the class prompts.
    fn class_embeddings(&self) -> Vec<GaussianEmbedding> {
        (0..self.class_text.nrows())
            .map(|c| {
                let h = &self.proj_text * self.class_text.row(c).transpose();
                let n = h.norm();
                GaussianEmbedding::deterministic(h / n)
            })
            .collect()
    }
}

fn balanced_labels(n: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    labels.shuffle(rng);
    labels
}

#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    /// Image features, `n × d_in`.
    pub features: EmbeddingMatrix,
    /// Paired text features, `n × d_in`.
    pub text_features: EmbeddingMatrix,
    pub labels: Vec<usize>,
    pub bundle: ModelBundle,
    /// One text feature row per class.
    pub class_text_features: EmbeddingMatrix,
}

/// A labelled image/text problem with `n_classes` balanced classes.
pub fn generate_synthetic(
    d_in: usize,
    d_out: usize,
    n: usize,
    n_classes: usize,
    seed: u64,
) -> Result<SyntheticProblem> {
    if d_in == 0 || d_out == 0 || n == 0 || n_classes == 0 {
        return Err(Error::Arg("all synthetic sizes must be at least 1".into()));
    }
    if n_classes > n {
        return Err(Error::Arg(format!("{n_classes} classes cannot fit in {n} samples")));
    }
    let world = World::new(d_in, d_out, n_classes, seed)?;
    let mut rng = stream_rng(seed, "synth.samples", 0);
    let labels = balanced_labels(n, n_classes, &mut rng);
    let features = world.sample(&labels, None, &mut rng);
    let text = world.paired_text(&labels, &mut rng);
    Ok(SyntheticProblem {
        features: EmbeddingMatrix::from_dmatrix(&features)?,
        text_features: EmbeddingMatrix::from_dmatrix(&text)?,
        labels,
        bundle: world.bundle()?,
        class_text_features: EmbeddingMatrix::from_dmatrix(&world.class_text)?,
    })
}

/// Settings of the domain-shift active-learning benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainShiftConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub n_classes: usize,
    /// Source-domain pairs used to fit the posterior.
    pub n_fit: usize,
    pub n_pool: usize,
    pub n_test: usize,
    /// Number of domains in the pool; domain 0 is the test domain.
    pub n_domains: usize,
    /// Per-coordinate scale of the domain offsets.
    pub shift: f64,
    pub seed: u64,
}

impl Default for DomainShiftConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_out: 16,
            n_classes: 10,
            n_fit: 1000,
            n_pool: 2000,
            n_test: 500,
            n_domains: 4,
            shift: 1.0,
            seed: 0,
        }
    }
}

/// Source-domain fit data plus a mixed-domain pool and a target-domain test set.
#[derive(Debug, Clone)]
pub struct DomainShiftProblem {
    pub fit_features: DMatrix<f64>,
    pub fit_text_features: DMatrix<f64>,
    pub problem: ActiveProblem,
    pub pool_domains: Vec<usize>,
    pub bundle: ModelBundle,
    proj_image: DMatrix<f64>,
    proj_text: DMatrix<f64>,
}

pub fn generate_domain_shift(cfg: &DomainShiftConfig) -> Result<DomainShiftProblem> {
    if cfg.n_domains == 0 || cfg.n_classes == 0 || cfg.n_fit < cfg.n_classes || cfg.n_test == 0 {
        return Err(Error::Arg("domain-shift sizes are inconsistent".into()));
    }
    let world = World::new(cfg.d_in, cfg.d_out, cfg.n_classes, cfg.seed)?;
    let mut rng = stream_rng(cfg.seed, "synth.domains", 0);
    let offsets: Vec<DVector<f64>> = (0..cfg.n_domains)
        .map(|_| DVector::from_fn(cfg.d_in, |_, _| cfg.shift * rng.sample::<f64, _>(StandardNormal)))
        .collect();

    let fit_labels = balanced_labels(cfg.n_fit, cfg.n_classes, &mut rng);
    let fit_features = world.sample(&fit_labels, None, &mut rng);
    let fit_text_features = world.paired_text(&fit_labels, &mut rng);

    let pool_labels: Vec<usize> = (0..cfg.n_pool).map(|_| rng.random_range(0..cfg.n_classes)).collect();
    let pool_domains: Vec<usize> = (0..cfg.n_pool).map(|i| i % cfg.n_domains).collect();
    let mut pool_features = DMatrix::zeros(cfg.n_pool, cfg.d_in);
    for i in 0..cfg.n_pool {
        let row = world.sample(&pool_labels[i..=i], Some(&offsets[pool_domains[i]]), &mut rng);
        pool_features.row_mut(i).copy_from(&row.row(0));
    }
    let test_labels = balanced_labels(cfg.n_test, cfg.n_classes, &mut rng);
    let test_features = world.sample(&test_labels, Some(&offsets[0]), &mut rng);

    Ok(DomainShiftProblem {
        fit_features,
        fit_text_features,
        problem: ActiveProblem {
            pool_features,
            pool_labels,
            test_features,
            test_labels,
            class_embeddings: world.class_embeddings(),
            temperature: SYNTHETIC_TEMPERATURE,
        },
        pool_domains,
        bundle: world.bundle()?,
        proj_image: world.proj_image,
        proj_text: world.proj_text,
    })
}

impl DomainShiftProblem {
    /// Image posterior fitted on the source pairs, with λ tuned by the
    /// evidence at pseudo-count `tau`.
    pub fn fit_posterior(&self, tau: f64) -> Result<KfacPosterior> {
        let text = &self.fit_text_features * self.proj_text.transpose();
        let ctx = LossContext::from_embeddings(&text, SYNTHETIC_TEMPERATURE, 0.0, LossKind::InfoNce)?;
        let factors = accumulate_factors(&self.fit_features, &ctx, &self.proj_image)?;
        let loglik = log_likelihood(&self.fit_features, &ctx, &self.proj_image)?;
        let (post, _) = assemble_tuned(self.proj_image.clone(), factors, loglik, tau, 1.0)?;
        Ok(post)
    }
}
