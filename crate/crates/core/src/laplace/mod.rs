//! Kronecker-factored Laplace posteriors over the linear projection layers.
//!
//! For the image side, with `g = P φ`, `ĝ = g / ‖g‖` and unit-norm text
//! embeddings `Ĥ` of the batch, the curvature of the per-sample loss is
//! approximated as `A ⊗ B` with `A = n^{-1/2} Σ φφᵀ` and
//! `B = n^{-1/2} Σ JᵀΛJ`. The posterior covariance of `vec(P)` (column-major)
//! is `(√τ A + √λ I)⁻¹ ⊗ (√τ B + √λ I)⁻¹`, i.e. `P` is matrix normal with
//! row covariance `B̃⁻¹` and column covariance `Ã⁻¹`. The text side uses the
//! same code with the roles of the two modalities swapped.

mod curvature;
mod evidence;
mod jacobian;
mod posterior;
mod store;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use curvature::{
    accumulate_factors, fit_factors, ggn_block, log_likelihood, loss_hessian_infonce, loss_hessian_siglip,
    FactorAccumulator, KroneckerFactors,
};
pub use evidence::{
    assemble_tuned, default_tau_grid, marginal_log_likelihood, marginal_log_likelihood_gradient,
    tune_prior_precision, tune_pseudo_count, validation_nlpd, PriorObjective, PriorPrecisionFit,
    PseudoCountSearch,
};
pub use jacobian::{jacobian_infonce, jacobian_siglip, normalization_jacobian};
pub use posterior::{assemble_posterior, KfacPosterior};
pub use store::{load_posterior, save_posterior, PosteriorMeta};

/// Contrastive objective the encoder was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "infonce")]
    InfoNce,
    #[serde(rename = "siglip")]
    SigLip,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::InfoNce => "infonce",
            LossKind::SigLip => "siglip",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(LossKind::InfoNce),
            "siglip" => Ok(LossKind::SigLip),
            other => Err(Error::Arg(format!("unknown loss {other:?}"))),
        }
    }
}

const MIN_NORM: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-6;

/// Divides every row by its L2 norm.
pub fn normalize_rows(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        let norm = m.row(i).norm();
        if !(norm >= MIN_NORM) {
            return Err(Error::DegenerateInput(format!("row {i} has norm {norm}")));
        }
        out.row_mut(i).unscale_mut(norm);
    }
    Ok(out)
}

/// The other modality's unit-norm batch embeddings plus scoring constants.
#[derive(Debug, Clone)]
pub struct LossContext {
    batch: DMatrix<f64>,
    temperature: f64,
    bias: f64,
    kind: LossKind,
}

impl LossContext {
    /// `batch` must have unit-norm rows (to within 1e-6).
    pub fn new(batch: DMatrix<f64>, temperature: f64, bias: f64, kind: LossKind) -> Result<Self> {
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(Error::Value(format!("bad temperature {temperature}")));
        }
        if !bias.is_finite() {
            return Err(Error::Value("bias must be finite".into()));
        }
        for i in 0..batch.nrows() {
            let norm = batch.row(i).norm();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::Arg(format!(
                    "batch row {i} has norm {norm}, expected unit length"
                )));
            }
        }
        Ok(Self {
            batch,
            temperature,
            bias,
            kind,
        })
    }

    /// Normalises `raw` rows first.
    pub fn from_embeddings(
        raw: &DMatrix<f64>,
        temperature: f64,
        bias: f64,
        kind: LossKind,
    ) -> Result<Self> {
        Self::new(normalize_rows(raw)?, temperature, bias, kind)
    }

    pub fn batch(&self) -> &DMatrix<f64> {
        &self.batch
    }

    pub fn batch_size(&self) -> usize {
        self.batch.nrows()
    }

    pub fn dim(&self) -> usize {
        self.batch.ncols()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_three_four_five() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 1.0, 0.0]);
        let n = normalize_rows(&m).unwrap();
        assert!((n[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((n[(0, 1)] - 0.8).abs() < 1e-15);
        assert_eq!(n[(1, 0)], 1.0);
        assert_eq!(n[(1, 1)], 0.0);
    }

    #[test]
    fn normalize_zero_row_fails() {
        let m = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(matches!(normalize_rows(&m), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn context_requires_unit_rows() {
        let m = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert!(LossContext::new(m.clone(), 1.0, 0.0, LossKind::InfoNce).is_err());
        assert!(LossContext::from_embeddings(&m, 1.0, 0.0, LossKind::InfoNce).is_ok());
    }

    #[test]
    fn loss_kind_names() {
        assert_eq!("siglip".parse::<LossKind>().unwrap(), LossKind::SigLip);
        assert_eq!(LossKind::InfoNce.to_string(), "infonce");
        assert_eq!(serde_json::to_string(&LossKind::InfoNce).unwrap(), "\"infonce\"");
    }
}
