use std::cmp::Ordering;

use super::KnnMetric;
use crate::error::{Error, Result};
use crate::probcosine::{probcosine_moments, GaussianEmbedding};

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// `‖μ₁ − μ₂‖² + ‖σ₁ − σ₂‖²`.
pub fn wasserstein2_diag(g1: &GaussianEmbedding, g2: &GaussianEmbedding) -> f64 {
    let mut total = 0.0;
    for i in 0..g1.dim().min(g2.dim()) {
        let dm = g1.mean[i] - g2.mean[i];
        let ds = g1.var[i].sqrt() - g2.var[i].sqrt();
        total += dm * dm + ds * ds;
    }
    total
}

/// Distance under `metric`; expected cosine is negated so smaller is nearer.
pub fn knn_distance(a: &GaussianEmbedding, b: &GaussianEmbedding, metric: KnnMetric) -> Result<f64> {
    match metric {
        KnnMetric::Wasserstein2Diag => Ok(wasserstein2_diag(a, b)),
        KnnMetric::ExpectedCosine => Ok(-probcosine_moments(a, b)?.mean),
    }
}

/// Ranks test points by score (descending, ties by ascending test index)
/// and lets each claim its nearest unclaimed train point, cycling through
/// the ranking until `k_total` distinct train indices are chosen.
pub fn targeted_knn_select(
    scored_test: &[(usize, f64)],
    k_total: usize,
    train: &[GaussianEmbedding],
    test: &[GaussianEmbedding],
    metric: KnnMetric,
) -> Result<Vec<usize>> {
    if k_total > train.len() {
        return Err(Error::Arg(format!(
            "asked for {k_total} neighbours but only {} candidates exist",
            train.len()
        )));
    }
    if k_total == 0 {
        return Ok(Vec::new());
    }
    if scored_test.is_empty() {
        return Err(Error::Arg("no scored test points".into()));
    }
    if let Some((i, _)) = scored_test.iter().find(|(i, _)| *i >= test.len()) {
        return Err(Error::Arg(format!("test index {i} out of range")));
    }
    let mut ranked: Vec<(usize, f64)> = scored_test.to_vec();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });

    // neighbour lists are computed lazily, only for test points that get a turn
    let mut orders: Vec<Option<(Vec<usize>, usize)>> = vec![None; ranked.len()];
    let mut claimed = vec![false; train.len()];
    let mut chosen = Vec::with_capacity(k_total);
    'outer: loop {
        for (slot, (test_idx, _)) in ranked.iter().enumerate() {
            if chosen.len() == k_total {
                break 'outer;
            }
            if orders[slot].is_none() {
                let query = &test[*test_idx];
                let dist = train
                    .iter()
                    .map(|t| knn_distance(query, t, metric))
                    .collect::<Result<Vec<f64>>>()?;
                let mut order: Vec<usize> = (0..train.len()).collect();
                order.sort_by(|&a, &b| {
                    dist[a]
                        .partial_cmp(&dist[b])
                        .unwrap_or(Ordering::Equal)
                        .then(a.cmp(&b))
                });
                orders[slot] = Some((order, 0));
            }
            let (order, cursor) = orders[slot].as_mut().expect("initialised above");
            while *cursor < order.len() && claimed[order[*cursor]] {
                *cursor += 1;
            }
            if *cursor == order.len() {
                return Err(Error::Arg("train candidates exhausted".into()));
            }
            let pick = order[*cursor];
            claimed[pick] = true;
            chosen.push(pick);
        }
    }
    Ok(chosen)
}
