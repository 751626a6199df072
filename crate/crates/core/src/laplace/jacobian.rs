use nalgebra::{DMatrix, DVector};

use super::{LossContext, MIN_NORM};
use crate::error::{Error, Result};

/// Jacobian of `g ↦ g / ‖g‖`: `I/‖g‖ − g gᵀ/‖g‖³`. Symmetric, with `g` in
/// its null space.
pub fn normalization_jacobian(g: &DVector<f64>) -> Result<DMatrix<f64>> {
    let norm = g.norm();
    if !(norm >= MIN_NORM) {
        return Err(Error::DegenerateInput(format!(
            "cannot normalise a vector of norm {norm}"
        )));
    }
    let d = g.len();
    let inv = 1.0 / norm;
    let inv3 = inv * inv * inv;
    Ok(DMatrix::from_fn(d, d, |i, j| {
        let diag = if i == j { inv } else { 0.0 };
        diag - g[i] * g[j] * inv3
    }))
}

/// Jacobian of the batch logits `Ĥ ĝ` with respect to `g`.
pub fn jacobian_infonce(g: &DVector<f64>, ctx: &LossContext) -> Result<DMatrix<f64>> {
    if g.len() != ctx.dim() {
        return Err(Error::Arg(format!(
            "embedding has {} entries, batch has {} columns",
            g.len(),
            ctx.dim()
        )));
    }
    Ok(ctx.batch() * normalization_jacobian(g)?)
}

/// Jacobian of `ĝ` with respect to `g`.
pub fn jacobian_siglip(g: &DVector<f64>) -> Result<DMatrix<f64>> {
    normalization_jacobian(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplace::LossKind;

    #[test]
    fn unit_e1_kills_first_coordinate() {
        let ctx = LossContext::new(DMatrix::identity(2, 2), 1.0, 0.0, LossKind::InfoNce).unwrap();
        let j = jacobian_infonce(&DVector::from_row_slice(&[1.0, 0.0]), &ctx).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn siglip_hand_case() {
        let j = jacobian_siglip(&DVector::from_row_slice(&[2.0, 0.0])).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.5]));
        let j = jacobian_siglip(&DVector::from_row_slice(&[0.0, 1.0])).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn zero_vector_is_degenerate() {
        assert!(matches!(
            jacobian_siglip(&DVector::zeros(3)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let ctx = LossContext::new(DMatrix::identity(2, 2), 1.0, 0.0, LossKind::InfoNce).unwrap();
        assert!(matches!(
            jacobian_infonce(&DVector::from_row_slice(&[1.0, 0.0, 0.0]), &ctx),
            Err(Error::Arg(_))
        ));
    }
}
