use nalgebra::DMatrix;

use super::{assemble_posterior, KfacPosterior, KroneckerFactors};
use crate::error::{Error, Result};
use crate::linalg::{log_det_spd, symmetric_eigenvalues};
use crate::metrics::nlpd;
use crate::probcosine::{probit_for_embedding, GaussianEmbedding};

const MAX_ITERS: usize = 500;
const GRAD_TOL: f64 = 1e-6;

/// Laplace evidence `log p(D | θ*) − ½(λ‖θ*‖² − D log λ − log det Σ)` with
/// `log det Σ = −(d_out log det Ã + d_in log det B̃)`.
pub fn marginal_log_likelihood(post: &KfacPosterior, loglik_at_map: f64) -> Result<f64> {
    let (d_in, d_out) = (post.d_in() as f64, post.d_out() as f64);
    let lam = post.lam();
    let log_det_sigma = -(d_out * log_det_spd(&post.a_tilde())? + d_in * log_det_spd(&post.b_tilde())?);
    let norm2 = post.projection().norm_squared();
    Ok(loglik_at_map - 0.5 * (lam * norm2 - d_in * d_out * lam.ln() - log_det_sigma))
}

/// Derivative of [`marginal_log_likelihood`] with respect to `log λ`.
pub fn marginal_log_likelihood_gradient(post: &KfacPosterior) -> f64 {
    let (d_in, d_out) = (post.d_in() as f64, post.d_out() as f64);
    let lam = post.lam();
    let half_root = 0.5 * lam.sqrt();
    let norm2 = post.projection().norm_squared();
    -0.5 * lam * norm2 + 0.5 * d_in * d_out
        - 0.5
            * (d_out * half_root * post.a_tilde_inv().trace()
                + d_in * half_root * post.b_tilde_inv().trace())
}

/// The evidence as a function of `u = log λ`, evaluated through the factor
/// eigenvalues so that each step costs `O(d_in + d_out)`.
#[derive(Debug, Clone)]
pub struct PriorObjective {
    a_eigs: Vec<f64>,
    b_eigs: Vec<f64>,
    sqrt_tau: f64,
    norm2: f64,
    loglik: f64,
}

impl PriorObjective {
    pub fn new(factors: &KroneckerFactors, map: &DMatrix<f64>, tau: f64, loglik_at_map: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Value(format!("tau must be positive, got {tau}")));
        }
        if map.nrows() != factors.d_out() || map.ncols() != factors.d_in() {
            return Err(Error::Arg("projection does not match factors".into()));
        }
        let clamp = |v: nalgebra::DVector<f64>| v.iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        Ok(Self {
            a_eigs: clamp(symmetric_eigenvalues(&factors.a)),
            b_eigs: clamp(symmetric_eigenvalues(&factors.b)),
            sqrt_tau: tau.sqrt(),
            norm2: map.norm_squared(),
            loglik: loglik_at_map,
        })
    }

    fn dims(&self) -> (f64, f64) {
        (self.a_eigs.len() as f64, self.b_eigs.len() as f64)
    }

    pub fn value(&self, log_lam: f64) -> f64 {
        let (d_in, d_out) = self.dims();
        let lam = log_lam.exp();
        let root = lam.sqrt();
        let log_det = |eigs: &[f64]| eigs.iter().map(|e| (self.sqrt_tau * e + root).ln()).sum::<f64>();
        let log_det_prec = d_out * log_det(&self.a_eigs) + d_in * log_det(&self.b_eigs);
        self.loglik - 0.5 * (lam * self.norm2 - d_in * d_out * log_lam + log_det_prec)
    }

    pub fn gradient(&self, log_lam: f64) -> f64 {
        let (d_in, d_out) = self.dims();
        let lam = log_lam.exp();
        let root = lam.sqrt();
        let trace = |eigs: &[f64]| eigs.iter().map(|e| 1.0 / (self.sqrt_tau * e + root)).sum::<f64>();
        let half_root = 0.5 * root;
        -0.5 * lam * self.norm2 + 0.5 * d_in * d_out
            - 0.5 * (d_out * half_root * trace(&self.a_eigs) + d_in * half_root * trace(&self.b_eigs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorPrecisionFit {
    pub lam: f64,
    pub objective: f64,
    pub gradient: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Gradient ascent on `log λ` with a secant step size and step halving.
pub fn tune_prior_precision(
    factors: &KroneckerFactors,
    map: &DMatrix<f64>,
    loglik_at_map: f64,
    tau: f64,
    init_lam: f64,
) -> Result<PriorPrecisionFit> {
    if !(init_lam.is_finite() && init_lam > 0.0) {
        return Err(Error::Value(format!("initial lambda must be positive, got {init_lam}")));
    }
    let obj = PriorObjective::new(factors, map, tau, loglik_at_map)?;
    let mut u = init_lam.ln();
    let mut f = obj.value(u);
    let mut g = obj.gradient(u);
    if !(f.is_finite() && g.is_finite()) {
        return Err(Error::Numerical("evidence is not finite at the initial lambda".into()));
    }
    let mut step = 1.0 / g.abs().max(1.0);
    let mut iterations = 0;
    while iterations < MAX_ITERS && g.abs() > GRAD_TOL {
        iterations += 1;
        let mut accepted = None;
        let mut s = step;
        for _ in 0..64 {
            let u_new = u + s * g;
            let f_new = obj.value(u_new);
            if f_new.is_finite() && f_new >= f {
                accepted = Some((u_new, f_new));
                break;
            }
            s *= 0.5;
        }
        let Some((u_new, f_new)) = accepted else {
            break;
        };
        let g_new = obj.gradient(u_new);
        let (du, dg) = (u_new - u, g_new - g);
        step = if du * dg < 0.0 { (du / dg).abs() } else { 2.0 * s };
        u = u_new;
        f = f_new;
        g = g_new;
    }
    let converged = g.abs() <= GRAD_TOL;
    if !converged {
        log::warn!(
            "prior precision search stopped after {iterations} iterations with gradient {g:e}"
        );
    }
    Ok(PriorPrecisionFit {
        lam: u.exp(),
        objective: f,
        gradient: g,
        iterations,
        converged,
    })
}

/// `1, 5, 10, 15, …, 200`.
pub fn default_tau_grid() -> Vec<f64> {
    std::iter::once(1.0).chain((1..=40).map(|k| 5.0 * k as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoCountSearch {
    pub tau: f64,
    /// `(τ, validation NLPD)` in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Mean validation NLPD of the probit predictive.
pub fn validation_nlpd(
    post: &KfacPosterior,
    features: &DMatrix<f64>,
    labels: &[usize],
    classes: &[GaussianEmbedding],
    temperature: f64,
) -> Result<f64> {
    let preds = post
        .embed_all(features)?
        .iter()
        .map(|e| probit_for_embedding(e, classes, temperature))
        .collect::<Result<Vec<_>>>()?;
    Ok(nlpd(&preds, labels)?.value)
}

/// Grid search over τ minimising validation NLPD; ties go to the smaller τ.
///
/// `build` returns the image posterior and the class embeddings for a given τ.
pub fn tune_pseudo_count<F>(
    build: F,
    val_features: &DMatrix<f64>,
    val_labels: &[usize],
    temperature: f64,
    grid: &[f64],
) -> Result<PseudoCountSearch>
where
    F: Fn(f64) -> Result<(KfacPosterior, Vec<GaussianEmbedding>)>,
{
    if grid.is_empty() {
        return Err(Error::Arg("empty tau grid".into()));
    }
    if let Some(bad) = grid.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Arg(format!("tau grid values must be positive, got {bad}")));
    }
    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &tau in grid {
        let (post, classes) = build(tau)?;
        let value = validation_nlpd(&post, val_features, val_labels, &classes, temperature)?;
        log::info!("tau {tau}: validation nlpd {value:.6}");
        curve.push((tau, value));
        best = match best {
            Some((bt, bv)) if bv < value || (bv == value && bt <= tau) => Some((bt, bv)),
            _ => Some((tau, value)),
        };
    }
    Ok(PseudoCountSearch {
        tau: best.map(|b| b.0).unwrap_or(grid[0]),
        curve,
    })
}

/// Convenience: assemble at `tau` with λ tuned by the evidence.
pub fn assemble_tuned(
    map: DMatrix<f64>,
    factors: KroneckerFactors,
    loglik_at_map: f64,
    tau: f64,
    init_lam: f64,
) -> Result<(KfacPosterior, PriorPrecisionFit)> {
    let fit = tune_prior_precision(&factors, &map, loglik_at_map, tau, init_lam)?;
    Ok((assemble_posterior(map, factors, tau, fit.lam)?, fit))
}
