//! Analytic propagation of Gaussian embeddings through cosine similarity.
//!
//! Given independent diagonal Gaussians `g ~ N(μ_g, diag σ²_g)` and
//! `h ~ N(μ_h, diag σ²_h)`, the cosine similarity is summarised by
//!
//! ```text
//! E[cos]   ≈ Σ μ_g μ_h / (√Σ(μ_g² + σ_g²) · √Σ(μ_h² + σ_h²))
//! Var[cos] ≈ Σ σ_g²(σ_h² + μ_h²) + σ_h² μ_g²  /  (Σ(μ_g² + σ_g²) · Σ(μ_h² + σ_h²))
//! ```
//!
//! and class probabilities follow from the probit approximation
//! `softmax(t·E / √(1 + π/8 · t² · Var))`. Monte-Carlo estimators of both
//! quantities are provided as oracles.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::softmax;
use crate::rng::stream_rng;
use crate::sampling::ProjectionSampler;

const MIN_NORM: f64 = 1e-12;
const MAX_REJECTIONS: usize = 1_000_000;
const MC_CHUNK: usize = 1024;

/// Mean and diagonal variance of a random embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmbedding {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

impl GaussianEmbedding {
    pub fn new(mean: DVector<f64>, var: DVector<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Arg(format!(
                "mean has {} entries but variance has {}",
                mean.len(),
                var.len()
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Value("embedding mean is not finite".into()));
        }
        if var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Value(
                "embedding variance must be finite and non-negative".into(),
            ));
        }
        Ok(Self { mean, var })
    }

    /// Point mass at `mean`.
    pub fn deterministic(mean: DVector<f64>) -> Self {
        let var = DVector::zeros(mean.len());
        Self { mean, var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Σ μ_i² + σ_i²`, i.e. `E‖x‖²`.
    pub fn second_moment(&self) -> f64 {
        self.mean
            .iter()
            .zip(self.var.iter())
            .map(|(m, v)| m * m + v)
            .sum()
    }
}

/// Gaussian summary of one cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineDistribution {
    pub mean: f64,
    pub var: f64,
}

/// Class probabilities for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    probs: Vec<f64>,
}

impl Predictive {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Arg("predictive needs at least one class".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Value("probabilities must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Value(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

impl AsRef<[f64]> for Predictive {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Plain cosine similarity of two vectors.
pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    dot / (na.sqrt() * nb.sqrt())
}

/// Analytic mean and variance of `cos(g, h)` for independent diagonal Gaussians.
pub fn probcosine_moments(
    g: &GaussianEmbedding,
    h: &GaussianEmbedding,
) -> Result<CosineDistribution> {
    if g.dim() != h.dim() {
        return Err(Error::Arg(format!(
            "embedding dimensions differ: {} vs {}",
            g.dim(),
            h.dim()
        )));
    }
    let g2 = g.second_moment();
    let h2 = h.second_moment();
    if g2 < MIN_NORM * MIN_NORM || h2 < MIN_NORM * MIN_NORM {
        return Err(Error::DegenerateInput(
            "cosine of an embedding with zero mean and zero variance".into(),
        ));
    }
    let mut dot = 0.0;
    let mut spread = 0.0;
    for i in 0..g.dim() {
        let (mg, vg) = (g.mean[i], g.var[i]);
        let (mh, vh) = (h.mean[i], h.var[i]);
        dot += mg * mh;
        // grouped so that swapping g and h is exact
        spread += vg * vh + (vg * mh * mh + vh * mg * mg);
    }
    Ok(CosineDistribution {
        mean: dot / (g2.sqrt() * h2.sqrt()),
        var: spread / (g2 * h2),
    })
}

/// Monte-Carlo estimate of the cosine-similarity distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McCosine {
    pub mean: f64,
    pub var: f64,
    /// Standard error of `mean`.
    pub se_mean: f64,
}

fn draw_diag(
    e: &GaussianEmbedding,
    sd: &[f64],
    rng: &mut impl Rng,
    rejections: &mut usize,
) -> Result<DVector<f64>> {
    loop {
        let x = DVector::from_iterator(
            e.dim(),
            e.mean.iter().zip(sd).map(|(m, s)| {
                let z: f64 = rng.sample(StandardNormal);
                m + s * z
            }),
        );
        if x.norm() >= MIN_NORM {
            *rejections = 0;
            return Ok(x);
        }
        *rejections += 1;
        if *rejections > MAX_REJECTIONS {
            return Err(Error::DegenerateInput(
                "sampled vectors keep collapsing to zero norm".into(),
            ));
        }
    }
}

/// Samples `g` and `h` independently and summarises `cos(g, h)`.
pub fn mc_cosine_oracle(
    g: &GaussianEmbedding,
    h: &GaussianEmbedding,
    n_samples: usize,
    seed: u64,
) -> Result<McCosine> {
    if n_samples < 2 {
        return Err(Error::Arg("need at least two samples".into()));
    }
    if g.dim() != h.dim() {
        return Err(Error::Arg("embedding dimensions differ".into()));
    }
    let sd_g: Vec<f64> = g.var.iter().map(|v| v.sqrt()).collect();
    let sd_h: Vec<f64> = h.var.iter().map(|v| v.sqrt()).collect();
    let mut rng = stream_rng(seed, "oracle.cosine", 0);
    let mut rejections = 0;
    // Welford: identical samples leave the running mean bit-exact.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 1..=n_samples {
        let gs = draw_diag(g, &sd_g, &mut rng, &mut rejections)?;
        let hs = draw_diag(h, &sd_h, &mut rng, &mut rejections)?;
        let c = cosine(&gs, &hs);
        let delta = c - mean;
        mean += delta / k as f64;
        m2 += delta * (c - mean);
    }
    let var = m2 / (n_samples - 1) as f64;
    Ok(McCosine {
        mean,
        var,
        se_mean: (var / n_samples as f64).sqrt(),
    })
}

/// `softmax(t·E_c / √(1 + π/8 · t² · V_c))`.
pub fn probit_predictive(cos_means: &[f64], cos_vars: &[f64], temperature: f64) -> Result<Predictive> {
    if cos_means.len() != cos_vars.len() {
        return Err(Error::Arg("means and variances differ in length".into()));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Value(format!("temperature must be positive, got {temperature}")));
    }
    if cos_means.iter().any(|m| !m.is_finite()) {
        return Err(Error::Value("non-finite cosine mean".into()));
    }
    if cos_vars.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Value("cosine variance must be finite and >= 0".into()));
    }
    let t2 = temperature * temperature;
    let z: Vec<f64> = cos_means
        .iter()
        .zip(cos_vars)
        .map(|(m, v)| temperature * m / (1.0 + PI / 8.0 * t2 * v).sqrt())
        .collect();
    Ok(Predictive { probs: softmax(&z) })
}

/// Predictive entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
}

/// Full analytic chain for one input: class cosine moments, then probit.
pub fn probit_for_embedding(
    image: &GaussianEmbedding,
    classes: &[GaussianEmbedding],
    temperature: f64,
) -> Result<Predictive> {
    let mut means = Vec::with_capacity(classes.len());
    let mut vars = Vec::with_capacity(classes.len());
    for c in classes {
        let d = probcosine_moments(image, c)?;
        means.push(d.mean);
        vars.push(d.var);
    }
    probit_predictive(&means, &vars, temperature)
}

/// `softmax(t · cos(P φ, h_c))` for fixed projection and class vectors.
pub fn deterministic_predictive(
    projection: &DMatrix<f64>,
    feature: &DVector<f64>,
    class_means: &[DVector<f64>],
    temperature: f64,
) -> Vec<f64> {
    let g = projection * feature;
    let logits: Vec<f64> = class_means.iter().map(|h| temperature * cosine(&g, h)).collect();
    softmax(&logits)
}

/// Monte-Carlo predictive: draws projections from `posterior` and class
/// embeddings from their Gaussians, and averages `softmax(t·cos)`.
pub fn mc_predictive_oracle<S: ProjectionSampler + ?Sized>(
    posterior: &S,
    feature: &DVector<f64>,
    classes: &[GaussianEmbedding],
    n_samples: usize,
    seed: u64,
    temperature: f64,
) -> Result<Predictive> {
    if n_samples < 2 {
        return Err(Error::Arg("need at least two samples".into()));
    }
    if classes.is_empty() {
        return Err(Error::Arg("no classes".into()));
    }
    let mut rng = stream_rng(seed, "oracle.predictive", 0);
    let sds: Vec<Vec<f64>> = classes
        .iter()
        .map(|c| c.var.iter().map(|v| v.sqrt()).collect())
        .collect();
    let mut mean = vec![0.0; classes.len()];
    let mut rejections = 0;
    let mut k = 0usize;
    while k < n_samples {
        let chunk = (n_samples - k).min(MC_CHUNK);
        for projection in posterior.draw(chunk, &mut rng)? {
            k += 1;
            let g = &projection * feature;
            let mut logits = Vec::with_capacity(classes.len());
            for (c, sd) in classes.iter().zip(&sds) {
                let h = draw_diag(c, sd, &mut rng, &mut rejections)?;
                logits.push(temperature * cosine(&g, &h));
            }
            let p = softmax(&logits);
            for (m, q) in mean.iter_mut().zip(&p) {
                *m += (q - *m) / k as f64;
            }
        }
    }
    Predictive::new(mean)
}

/// Total-variation distance between two distributions over the same classes.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
