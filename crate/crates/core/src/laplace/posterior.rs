use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use super::KroneckerFactors;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, spd_inverse};
use crate::probcosine::GaussianEmbedding;
use crate::sampling::{draw_matrix_normal, ProjectionSampler};

const INVERSE_TOL: f64 = 1e-6;

/// Matrix-normal posterior over one projection matrix.
#[derive(Debug, Clone)]
pub struct KfacPosterior {
    map: DMatrix<f64>,
    factors: KroneckerFactors,
    tau: f64,
    lam: f64,
    a_tilde_inv: DMatrix<f64>,
    b_tilde_inv: DMatrix<f64>,
    a_chol: DMatrix<f64>,
    b_chol: DMatrix<f64>,
}

fn tilde(factor: &DMatrix<f64>, tau: f64, lam: f64) -> DMatrix<f64> {
    let n = factor.nrows();
    factor * tau.sqrt() + DMatrix::identity(n, n) * lam.sqrt()
}

fn checked_inverse(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let inv = spd_inverse(m)?;
    let n = m.nrows();
    let dev = (m * &inv - DMatrix::<f64>::identity(n, n)).amax();
    if !(dev <= INVERSE_TOL) {
        return Err(Error::Numerical(format!(
            "{name} inverse check failed: max deviation from identity {dev:e}"
        )));
    }
    Ok(inv)
}

/// Forms `Ã = √τ A + √λ I`, `B̃ = √τ B + √λ I` and their inverses.
pub fn assemble_posterior(
    map: DMatrix<f64>,
    factors: KroneckerFactors,
    tau: f64,
    lam: f64,
) -> Result<KfacPosterior> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Value(format!("tau must be positive, got {tau}")));
    }
    if !(lam.is_finite() && lam > 0.0) {
        return Err(Error::Value(format!("lambda must be positive, got {lam}")));
    }
    if factors.a.nrows() != factors.a.ncols() || factors.b.nrows() != factors.b.ncols() {
        return Err(Error::Arg("factors must be square".into()));
    }
    if map.nrows() != factors.d_out() || map.ncols() != factors.d_in() {
        return Err(Error::Arg(format!(
            "projection is {}x{} but factors imply {}x{}",
            map.nrows(),
            map.ncols(),
            factors.d_out(),
            factors.d_in()
        )));
    }
    if !crate::linalg::is_finite(&map) {
        return Err(Error::Value("projection has non-finite entries".into()));
    }
    let a_tilde_inv = checked_inverse(&tilde(&factors.a, tau, lam), "input-side")?;
    let b_tilde_inv = checked_inverse(&tilde(&factors.b, tau, lam), "output-side")?;
    let a_chol = cholesky_lower(&a_tilde_inv)?;
    let b_chol = cholesky_lower(&b_tilde_inv)?;
    Ok(KfacPosterior {
        map,
        factors,
        tau,
        lam,
        a_tilde_inv,
        b_tilde_inv,
        a_chol,
        b_chol,
    })
}

impl KfacPosterior {
    pub fn projection(&self) -> &DMatrix<f64> {
        &self.map
    }

    pub fn factors(&self) -> &KroneckerFactors {
        &self.factors
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lam(&self) -> f64 {
        self.lam
    }

    pub fn a_tilde_inv(&self) -> &DMatrix<f64> {
        &self.a_tilde_inv
    }

    pub fn b_tilde_inv(&self) -> &DMatrix<f64> {
        &self.b_tilde_inv
    }

    pub fn a_tilde(&self) -> DMatrix<f64> {
        tilde(&self.factors.a, self.tau, self.lam)
    }

    pub fn b_tilde(&self) -> DMatrix<f64> {
        tilde(&self.factors.b, self.tau, self.lam)
    }

    pub fn d_in(&self) -> usize {
        self.map.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.map.nrows()
    }

    /// Same MAP and factors, new hyperparameters.
    pub fn with_hyperparameters(&self, tau: f64, lam: f64) -> Result<Self> {
        assemble_posterior(self.map.clone(), self.factors.clone(), tau, lam)
    }

    /// Same hyperparameters, new MAP and factors.
    pub fn with_state(&self, map: DMatrix<f64>, factors: KroneckerFactors) -> Result<Self> {
        assemble_posterior(map, factors, self.tau, self.lam)
    }

    /// `φᵀ Ã⁻¹ φ`.
    pub fn input_scale(&self, feature: &DVector<f64>) -> f64 {
        let s = (feature.transpose() * &self.a_tilde_inv * feature)[(0, 0)];
        s.max(0.0)
    }

    /// Embedding distribution `N(P φ, (φᵀÃ⁻¹φ) · diag(B̃⁻¹))`.
    pub fn embed_gaussian(&self, feature: &DVector<f64>) -> Result<GaussianEmbedding> {
        if feature.len() != self.d_in() {
            return Err(Error::Arg(format!(
                "feature has {} entries, posterior expects {}",
                feature.len(),
                self.d_in()
            )));
        }
        let mean = &self.map * feature;
        let s = self.input_scale(feature);
        let var = self.b_tilde_inv.diagonal() * s;
        GaussianEmbedding::new(mean, var)
    }

    /// One embedding per row of `features`.
    pub fn embed_all(&self, features: &DMatrix<f64>) -> Result<Vec<GaussianEmbedding>> {
        if features.ncols() != self.d_in() {
            return Err(Error::Arg(format!(
                "features have {} columns, posterior expects {}",
                features.ncols(),
                self.d_in()
            )));
        }
        let means = features * self.map.transpose();
        let projected = features * &self.a_tilde_inv;
        let diag = self.b_tilde_inv.diagonal();
        (0..features.nrows())
            .map(|i| {
                let s = features.row(i).dot(&projected.row(i)).max(0.0);
                GaussianEmbedding::new(means.row(i).transpose(), &diag * s)
            })
            .collect()
    }
}

impl ProjectionSampler for KfacPosterior {
    fn map(&self) -> &DMatrix<f64> {
        &self.map
    }

    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<DMatrix<f64>>> {
        Ok((0..n)
            .map(|_| draw_matrix_normal(&self.map, &self.b_chol, &self.a_chol, rng))
            .collect())
    }
}
