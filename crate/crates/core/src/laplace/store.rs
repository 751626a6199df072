use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{assemble_posterior, KfacPosterior, KroneckerFactors, LossKind};
use crate::error::{Error, Result};
use crate::io::{load_matrix, read_json, save_matrix, write_json, EmbeddingMatrix};

pub const MANIFEST: &str = "manifest.json";
pub const MAP_FILE: &str = "map.bvm";
pub const A_FILE: &str = "a_factor.bvm";
pub const B_FILE: &str = "b_factor.bvm";

/// Scoring settings stored next to a posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorMeta {
    pub loss: LossKind,
    pub temperature: f64,
    pub bias: f64,
    /// Log-likelihood of the fitting batch at the MAP.
    pub loglik: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tau: f64,
    lam: f64,
    n_effective: usize,
    loss: LossKind,
    temperature: f64,
    bias: f64,
    #[serde(default)]
    loglik: f64,
}

/// Writes `manifest.json`, `map.bvm`, `a_factor.bvm` and `b_factor.bvm`
/// into `dir`, creating it if needed. Matrices are stored as f32.
pub fn save_posterior(post: &KfacPosterior, meta: &PosteriorMeta, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_matrix(&EmbeddingMatrix::from_dmatrix(post.projection())?, dir.join(MAP_FILE))?;
    save_matrix(&EmbeddingMatrix::from_dmatrix(&post.factors().a)?, dir.join(A_FILE))?;
    save_matrix(&EmbeddingMatrix::from_dmatrix(&post.factors().b)?, dir.join(B_FILE))?;
    let manifest = Manifest {
        tau: post.tau(),
        lam: post.lam(),
        n_effective: post.factors().n_effective,
        loss: meta.loss,
        temperature: meta.temperature,
        bias: meta.bias,
        loglik: meta.loglik,
    };
    write_json(&manifest, &dir.join(MANIFEST))
}

/// Reads a posterior directory and re-assembles (and re-verifies) the
/// tilde inverses.
pub fn load_posterior(dir: impl AsRef<Path>) -> Result<(KfacPosterior, PosteriorMeta)> {
    let dir = dir.as_ref();
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let map = load_matrix(dir.join(MAP_FILE))?.to_dmatrix();
    let a = load_matrix(dir.join(A_FILE))?.to_dmatrix();
    let b = load_matrix(dir.join(B_FILE))?.to_dmatrix();
    if a.nrows() != map.ncols() || b.nrows() != map.nrows() {
        return Err(Error::Arg(format!(
            "{}: factor shapes {}x{} / {}x{} do not match map {}x{}",
            dir.display(),
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            map.nrows(),
            map.ncols()
        )));
    }
    if !(manifest.temperature.is_finite() && manifest.temperature > 0.0) {
        return Err(Error::Value(format!(
            "{}: temperature must be positive",
            dir.join(MANIFEST).display()
        )));
    }
    let factors = KroneckerFactors {
        a,
        b,
        n_effective: manifest.n_effective,
    };
    factors.validate()?;
    let post = assemble_posterior(map, factors, manifest.tau, manifest.lam)?;
    Ok((
        post,
        PosteriorMeta {
            loss: manifest.loss,
            temperature: manifest.temperature,
            bias: manifest.bias,
            loglik: manifest.loglik,
        },
    ))
}
