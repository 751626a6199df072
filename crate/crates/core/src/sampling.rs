//! Sources of projection-matrix samples.
//!
//! Acquisition scores and Monte-Carlo oracles only need "a way to draw
//! projection matrices". The Laplace posterior draws from its matrix-normal
//! distribution; [`PointMass`] and [`Atoms`] stand in for degenerate or
//! hand-built posteriors.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub trait ProjectionSampler {
    /// The MAP (or central) projection, `d_out × d_in`.
    fn map(&self) -> &DMatrix<f64>;

    /// `n` independent projection draws.
    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<DMatrix<f64>>>;
}

/// Draws `M + L_row · E · L_colᵀ` with `E` standard normal, i.e. a matrix
/// normal with row covariance `L_row L_rowᵀ` and column covariance
/// `L_col L_colᵀ`.
pub fn draw_matrix_normal(
    mean: &DMatrix<f64>,
    row_chol: &DMatrix<f64>,
    col_chol: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let e = DMatrix::from_fn(mean.nrows(), mean.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + row_chol * e * col_chol.transpose()
}

/// A posterior with all mass on one projection.
#[derive(Debug, Clone)]
pub struct PointMass {
    projection: DMatrix<f64>,
}

impl PointMass {
    pub fn new(projection: DMatrix<f64>) -> Self {
        Self { projection }
    }
}

impl ProjectionSampler for PointMass {
    fn map(&self) -> &DMatrix<f64> {
        &self.projection
    }

    fn draw(&self, n: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<DMatrix<f64>>> {
        Ok(vec![self.projection.clone(); n])
    }
}

/// Equally weighted atoms; each call to `draw` cycles through them starting
/// with the first, so `n` divisible by the atom count gives an exact average.
#[derive(Debug, Clone)]
pub struct Atoms {
    atoms: Vec<DMatrix<f64>>,
}

impl Atoms {
    pub fn new(atoms: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| Error::Arg("need at least one atom".into()))?;
        if atoms.iter().any(|a| a.shape() != first.shape()) {
            return Err(Error::Arg("atoms differ in shape".into()));
        }
        Ok(Self { atoms })
    }
}

impl ProjectionSampler for Atoms {
    fn map(&self) -> &DMatrix<f64> {
        &self.atoms[0]
    }

    fn draw(&self, n: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<DMatrix<f64>>> {
        Ok((0..n).map(|i| self.atoms[i % self.atoms.len()].clone()).collect())
    }
}
