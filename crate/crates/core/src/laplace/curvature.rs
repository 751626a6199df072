use nalgebra::{DMatrix, DVector};

use super::jacobian::normalization_jacobian;
use super::{LossContext, LossKind, MIN_NORM};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, pairwise_sum, softmax, symmetrize};

/// Input-side and output-side Kronecker factors of the GGN.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFactors {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub n_effective: usize,
}

impl KroneckerFactors {
    /// Checks squareness, symmetry (1e-6 relative) and positive
    /// semi-definiteness (min eigenvalue ≥ −1e-8 · trace / dim).
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("A", &self.a), ("B", &self.b)] {
            if m.nrows() != m.ncols() {
                return Err(Error::Arg(format!("factor {name} is not square")));
            }
            if !crate::linalg::is_finite(m) {
                return Err(Error::Numerical(format!("factor {name} has non-finite entries")));
            }
            let scale = m.amax().max(f64::MIN_POSITIVE);
            let asym = (m - m.transpose()).amax();
            if asym > 1e-6 * scale {
                return Err(Error::Value(format!("factor {name} is not symmetric ({asym:e})")));
            }
            let n = m.nrows();
            if n > 0 {
                let floor = -1e-8 * m.trace().abs() / n as f64;
                let mut sym = m.clone();
                symmetrize(&mut sym);
                let min = min_eigenvalue(&sym);
                if min < floor {
                    return Err(Error::Value(format!(
                        "factor {name} is not positive semidefinite (min eigenvalue {min:e})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }
}

/// `diag(π) − ππᵀ` with `π = softmax(t · logits)`.
pub fn loss_hessian_infonce(logits: &[f64], temperature: f64) -> Result<DMatrix<f64>> {
    if logits.iter().any(|l| !l.is_finite()) || !temperature.is_finite() {
        return Err(Error::Value("non-finite logits".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| temperature * l).collect();
    let p = softmax(&scaled);
    let n = p.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j { p[i] } else { 0.0 };
        diag - p[i] * p[j]
    }))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-text-row curvature weights `σ(a_j)(1 − σ(a_j))` of the sigmoid loss.
fn siglip_weights(g_hat: &DVector<f64>, ctx: &LossContext, pair_index: usize) -> Vec<f64> {
    let scores = ctx.batch() * g_hat;
    scores
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let sign = if j == pair_index { 1.0 } else { -1.0 };
            let sig = sigmoid(sign * (ctx.temperature() * s + ctx.bias()));
            sig * (1.0 - sig)
        })
        .collect()
}

/// `(t²/n) Σ_j σ(a_j)(1 − σ(a_j)) ĥ_j ĥ_jᵀ` with `a_j = z_j (t ĝᵀĥ_j + b)`,
/// `z_j = +1` only for the matching pair.
pub fn loss_hessian_siglip(
    g_hat: &DVector<f64>,
    ctx: &LossContext,
    pair_index: usize,
) -> Result<DMatrix<f64>> {
    let n = ctx.batch_size();
    if pair_index >= n {
        return Err(Error::Arg(format!("pair index {pair_index} out of range for batch of {n}")));
    }
    if g_hat.len() != ctx.dim() {
        return Err(Error::Arg("embedding and batch dimensions differ".into()));
    }
    if g_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Value("non-finite embedding".into()));
    }
    let w = siglip_weights(g_hat, ctx, pair_index);
    let t = ctx.temperature();
    let scale = t * t / n as f64;
    let h = ctx.batch();
    let weighted = DMatrix::from_fn(n, h.ncols(), |j, k| w[j] * h[(j, k)]);
    let mut out = h.transpose() * weighted * scale;
    symmetrize(&mut out);
    Ok(out)
}

/// Per-sample output-side block `JᵀΛJ` for projected embedding `g`.
///
/// `pair_index` names the matching row of the batch; only the sigmoid loss
/// uses it.
pub fn ggn_block(g: &DVector<f64>, ctx: &LossContext, pair_index: usize) -> Result<DMatrix<f64>> {
    if g.len() != ctx.dim() {
        return Err(Error::Arg(format!(
            "embedding has {} entries, batch has {} columns",
            g.len(),
            ctx.dim()
        )));
    }
    let m = normalization_jacobian(g)?;
    let g_hat = g / g.norm();
    let inner = match ctx.kind() {
        LossKind::InfoNce => {
            let h = ctx.batch();
            let logits: Vec<f64> = (h * &g_hat).iter().map(|s| ctx.temperature() * s).collect();
            let p = softmax(&logits);
            let weighted = DMatrix::from_fn(h.nrows(), h.ncols(), |j, k| p[j] * h[(j, k)]);
            let hp = h.transpose() * DVector::from_vec(p);
            let mut inner = h.transpose() * weighted - &hp * hp.transpose();
            symmetrize(&mut inner);
            inner
        }
        LossKind::SigLip => loss_hessian_siglip(&g_hat, ctx, pair_index)?,
    };
    let mut block = &m * inner * &m;
    symmetrize(&mut block);
    Ok(block)
}

/// Streaming sums of the factor numerators over one or more batches.
#[derive(Debug, Clone)]
pub struct FactorAccumulator {
    a_sum: DMatrix<f64>,
    b_sum: DMatrix<f64>,
    n: usize,
    skipped: usize,
}

impl FactorAccumulator {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        Self {
            a_sum: DMatrix::zeros(d_in, d_in),
            b_sum: DMatrix::zeros(d_out, d_out),
            n: 0,
            skipped: 0,
        }
    }

    /// Adds one batch. `features` is `n × d_in`, `map` is `d_out × d_in`.
    /// With the sigmoid loss row `i` of `features` pairs with row `i` of the
    /// context batch.
    pub fn add_batch(
        &mut self,
        features: &DMatrix<f64>,
        ctx: &LossContext,
        map: &DMatrix<f64>,
    ) -> Result<()> {
        let (d_in, d_out) = (self.a_sum.nrows(), self.b_sum.nrows());
        if features.ncols() != d_in || map.ncols() != d_in {
            return Err(Error::Arg(format!(
                "feature width {} / projection width {} do not match d_in = {d_in}",
                features.ncols(),
                map.ncols()
            )));
        }
        if map.nrows() != d_out || ctx.dim() != d_out {
            return Err(Error::Arg(format!(
                "projection height {} / batch width {} do not match d_out = {d_out}",
                map.nrows(),
                ctx.dim()
            )));
        }
        if ctx.kind() == LossKind::SigLip && features.nrows() != ctx.batch_size() {
            return Err(Error::Arg(format!(
                "sigmoid loss pairs rows: {} features vs {} batch rows",
                features.nrows(),
                ctx.batch_size()
            )));
        }
        let n = features.nrows();
        let a = pairwise_sum(n, d_in, d_in, &|i| {
            let phi = features.row(i).transpose();
            &phi * phi.transpose()
        });
        let embeddings = features * map.transpose();
        let blocks: Vec<Option<DMatrix<f64>>> = (0..n)
            .map(|i| {
                let g = embeddings.row(i).transpose();
                if g.norm() < MIN_NORM {
                    Ok(None)
                } else {
                    ggn_block(&g, ctx, i).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        let skipped = blocks.iter().filter(|b| b.is_none()).count();
        let b = pairwise_sum(n, d_out, d_out, &|i| match &blocks[i] {
            Some(block) => block.clone(),
            None => DMatrix::zeros(d_out, d_out),
        });
        if skipped > 0 {
            log::warn!("{skipped} samples project to zero and add no output-side curvature");
        }
        self.a_sum += a;
        self.b_sum += b;
        self.n += n;
        self.skipped += skipped;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Applies the `1/√n` scaling and symmetrises.
    pub fn finish(self) -> Result<KroneckerFactors> {
        if self.n == 0 {
            return Err(Error::Arg("no samples accumulated".into()));
        }
        let scale = 1.0 / (self.n as f64).sqrt();
        let mut a = self.a_sum * scale;
        let mut b = self.b_sum * scale;
        symmetrize(&mut a);
        symmetrize(&mut b);
        let factors = KroneckerFactors {
            a,
            b,
            n_effective: self.n,
        };
        if !crate::linalg::is_finite(&factors.a) || !crate::linalg::is_finite(&factors.b) {
            return Err(Error::Numerical("accumulated factors are not finite".into()));
        }
        Ok(factors)
    }
}

/// Single-batch factor estimate.
pub fn accumulate_factors(
    features: &DMatrix<f64>,
    ctx: &LossContext,
    map: &DMatrix<f64>,
) -> Result<KroneckerFactors> {
    let mut acc = FactorAccumulator::new(map.ncols(), map.nrows());
    acc.add_batch(features, ctx, map)?;
    acc.finish()
}

/// Factors and log-likelihood for one modality over consecutive batches of
/// `batch_size` pairs. `other` holds the paired raw embeddings of the
/// opposite modality (normalised per batch).
pub fn fit_factors(
    features: &DMatrix<f64>,
    other: &DMatrix<f64>,
    map: &DMatrix<f64>,
    temperature: f64,
    bias: f64,
    kind: LossKind,
    batch_size: usize,
) -> Result<(KroneckerFactors, f64)> {
    if features.nrows() != other.nrows() {
        return Err(Error::Arg(format!(
            "{} feature rows but {} paired embeddings",
            features.nrows(),
            other.nrows()
        )));
    }
    if batch_size == 0 {
        return Err(Error::Arg("batch size must be at least 1".into()));
    }
    let mut acc = FactorAccumulator::new(map.ncols(), map.nrows());
    let mut loglik = 0.0;
    let n = features.nrows();
    let mut start = 0;
    while start < n {
        let len = batch_size.min(n - start);
        let x = features.rows(start, len).into_owned();
        let ctx = LossContext::from_embeddings(&other.rows(start, len).into_owned(), temperature, bias, kind)?;
        acc.add_batch(&x, &ctx, map)?;
        loglik += log_likelihood(&x, &ctx, map)?;
        start += len;
    }
    Ok((acc.finish()?, loglik))
}

/// Log-likelihood of the paired batch at `map`: row `i` of `features` is the
/// positive for row `i` of the context batch.
pub fn log_likelihood(features: &DMatrix<f64>, ctx: &LossContext, map: &DMatrix<f64>) -> Result<f64> {
    let n = features.nrows();
    if n != ctx.batch_size() {
        return Err(Error::Arg(format!(
            "log-likelihood needs paired rows: {n} features vs {} batch rows",
            ctx.batch_size()
        )));
    }
    if map.ncols() != features.ncols() || map.nrows() != ctx.dim() {
        return Err(Error::Arg("projection does not match features and batch".into()));
    }
    let t = ctx.temperature();
    let embeddings = features * map.transpose();
    let mut total = 0.0;
    for i in 0..n {
        let g = embeddings.row(i).transpose();
        let norm = g.norm();
        if norm < MIN_NORM {
            return Err(Error::DegenerateInput(format!("sample {i} projects to zero")));
        }
        let scores = ctx.batch() * (g / norm);
        match ctx.kind() {
            LossKind::InfoNce => {
                let z: Vec<f64> = scores.iter().map(|s| t * s).collect();
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += z[i] - lse;
            }
            LossKind::SigLip => {
                for (j, s) in scores.iter().enumerate() {
                    let sign = if j == i { 1.0 } else { -1.0 };
                    let a = sign * (t * s + ctx.bias());
                    // log σ(a) = −softplus(−a)
                    total -= (-a).max(0.0) + (-(a.abs())).exp().ln_1p();
                }
            }
        }
    }
    Ok(total)
}
