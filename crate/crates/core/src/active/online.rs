use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::laplace::{ggn_block, normalization_jacobian, KfacPosterior, KroneckerFactors, LossContext};
use crate::linalg::softmax;

pub const DEFAULT_GAMMA: f64 = 1e-4;
pub const DEFAULT_BETA: f64 = 10.0;

/// Posterior that absorbs one labelled point at a time.
#[derive(Debug, Clone)]
pub struct OnlineLaplaceState {
    pub posterior: KfacPosterior,
    pub t_step: usize,
    pub gamma: f64,
    pub beta: f64,
}

impl OnlineLaplaceState {
    pub fn new(posterior: KfacPosterior, gamma: f64, beta: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0 && beta.is_finite() && beta >= 0.0) {
            return Err(Error::Value(format!(
                "online step sizes must be finite and nonnegative (gamma {gamma}, beta {beta})"
            )));
        }
        Ok(Self {
            posterior,
            t_step: 0,
            gamma,
            beta,
        })
    }
}

/// Cross-entropy of `softmax(t · Ĥ ĝ)` at `label` and its gradient with
/// respect to the projection, for `g = P φ`.
pub fn classification_loss_and_gradient(
    projection: &DMatrix<f64>,
    feature: &DVector<f64>,
    label: usize,
    ctx: &LossContext,
) -> Result<(f64, DMatrix<f64>)> {
    if label >= ctx.batch_size() {
        return Err(Error::Arg(format!(
            "label {label} out of range for {} classes",
            ctx.batch_size()
        )));
    }
    let g = projection * feature;
    let m = normalization_jacobian(&g)?;
    let g_hat = &g / g.norm();
    let t = ctx.temperature();
    let logits: Vec<f64> = (ctx.batch() * &g_hat).iter().map(|s| t * s).collect();
    let p = softmax(&logits);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut residual = DVector::from_vec(p);
    residual[label] -= 1.0;
    let d_ghat = ctx.batch().transpose() * residual * t;
    let d_g = m * d_ghat;
    Ok((loss, d_g * feature.transpose()))
}

/// One online step: gradient step on the MAP, then
/// `X ← (√(n+t) X + β X_new) / √(n+t+1)` for both factors.
pub fn online_update(
    state: &OnlineLaplaceState,
    feature: &DVector<f64>,
    label: usize,
    ctx: &LossContext,
) -> Result<OnlineLaplaceState> {
    let post = &state.posterior;
    if feature.len() != post.d_in() || ctx.dim() != post.d_out() {
        return Err(Error::Arg("feature or class context does not match the posterior".into()));
    }
    let map = post.projection();
    let factors = post.factors();
    let n = factors.n_effective + state.t_step;
    let keep = (n as f64).sqrt();
    let norm = ((n + 1) as f64).sqrt();

    let new_map = if state.gamma > 0.0 {
        let (_, grad) = classification_loss_and_gradient(map, feature, label, ctx)?;
        if !crate::linalg::is_finite(&grad) {
            return Err(Error::Numerical("online gradient is not finite".into()));
        }
        map - grad * state.gamma
    } else {
        map.clone()
    };

    let (a_new, b_new) = if state.beta > 0.0 {
        let a_x = feature * feature.transpose();
        let g = map * feature;
        let b_x = ggn_block(&g, ctx, label)?;
        (
            (&factors.a * keep + a_x * state.beta) / norm,
            (&factors.b * keep + b_x * state.beta) / norm,
        )
    } else {
        (&factors.a * keep / norm, &factors.b * keep / norm)
    };
    let posterior = post.with_state(
        new_map,
        KroneckerFactors {
            a: a_new,
            b: b_new,
            n_effective: factors.n_effective,
        },
    )?;
    Ok(OnlineLaplaceState {
        posterior,
        t_step: state.t_step + 1,
        gamma: state.gamma,
        beta: state.beta,
    })
}
