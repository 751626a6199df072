//! Accuracy, NLPD, calibration error and temperature scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::softmax;
use crate::probcosine::argmax;

pub const DEFAULT_BINS: usize = 15;
const NLPD_FLOOR: f64 = 1e-12;
const LOG_T_RANGE: (f64, f64) = (-5.0, 5.0);
const LOG_T_TOL: f64 = 1e-6;

/// A mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

fn check<P: AsRef<[f64]>>(probs: &[P], labels: &[usize]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::Arg(format!(
            "{} predictions but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Arg("no predictions".into()));
    }
    for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
        if y >= p.as_ref().len() {
            return Err(Error::Arg(format!(
                "label {y} of row {i} exceeds the {} predicted classes",
                p.as_ref().len()
            )));
        }
    }
    Ok(())
}

/// Top-1 accuracy (ties go to the lowest index) with binomial standard error.
pub fn accuracy<P: AsRef<[f64]>>(probs: &[P], labels: &[usize]) -> Result<Estimate> {
    check(probs, labels)?;
    let n = probs.len() as f64;
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| argmax(p.as_ref()) == y)
        .count() as f64;
    let p = hits / n;
    Ok(Estimate {
        value: p,
        se: (p * (1.0 - p) / n).sqrt(),
    })
}

/// Mean per-class recall over the classes that occur in `labels`.
pub fn weighted_accuracy<P: AsRef<[f64]>>(probs: &[P], labels: &[usize]) -> Result<f64> {
    check(probs, labels)?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = vec![0usize; n_classes];
    let mut hits = vec![0usize; n_classes];
    for (p, &y) in probs.iter().zip(labels) {
        total[y] += 1;
        if argmax(p.as_ref()) == y {
            hits[y] += 1;
        }
    }
    let (sum, count) = total
        .iter()
        .zip(&hits)
        .filter(|(t, _)| **t > 0)
        .fold((0.0, 0usize), |(s, c), (t, h)| (s + *h as f64 / *t as f64, c + 1));
    Ok(sum / count as f64)
}

/// Mean of `−log max(p_true, 1e-12)` in nats, with standard error.
pub fn nlpd<P: AsRef<[f64]>>(probs: &[P], labels: &[usize]) -> Result<Estimate> {
    check(probs, labels)?;
    let losses: Vec<f64> = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p.as_ref()[y].max(NLPD_FLOOR).ln())
        .collect();
    Ok(mean_with_se(&losses))
}

pub(crate) fn mean_with_se(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let se = if xs.len() > 1 {
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Estimate { value: mean, se }
}

/// One row of a reliability diagram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Accuracy within the bin (0 for empty bins).
    pub acc: f64,
    /// Mean confidence within the bin (0 for empty bins).
    pub conf: f64,
}

/// Index of the right-closed bin `(k/n, (k+1)/n]` holding `c`; 0 lands in
/// the first bin.
fn bin_index(c: f64, n_bins: usize) -> usize {
    let nb = n_bins as f64;
    let mut k = ((c * nb).ceil() as isize - 1).clamp(0, n_bins as isize - 1) as usize;
    if k > 0 && c <= k as f64 / nb {
        k -= 1;
    } else if k + 1 < n_bins && c > (k + 1) as f64 / nb {
        k += 1;
    }
    k
}

/// Top-label expected calibration error over equal-width bins.
pub fn ece<P: AsRef<[f64]>>(
    probs: &[P],
    labels: &[usize],
    n_bins: usize,
) -> Result<(f64, Vec<ReliabilityBin>)> {
    if n_bins == 0 {
        return Err(Error::Arg("need at least one bin".into()));
    }
    check(probs, labels)?;
    let mut count = vec![0usize; n_bins];
    let mut hit = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for (p, &y) in probs.iter().zip(labels) {
        let p = p.as_ref();
        let top = argmax(p);
        let conf = p[top];
        let k = bin_index(conf, n_bins);
        count[k] += 1;
        conf_sum[k] += conf;
        if top == y {
            hit[k] += 1;
        }
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let table = (0..n_bins)
        .map(|k| {
            let (acc, conf) = if count[k] > 0 {
                (hit[k] as f64 / count[k] as f64, conf_sum[k] / count[k] as f64)
            } else {
                (0.0, 0.0)
            };
            total += count[k] as f64 / n * (acc - conf).abs();
            ReliabilityBin {
                lo: k as f64 / n_bins as f64,
                hi: (k + 1) as f64 / n_bins as f64,
                count: count[k],
                acc,
                conf,
            }
        })
        .collect();
    Ok((total.clamp(0.0, 1.0), table))
}

/// NLPD of `softmax(t · logits)`.
pub fn scaled_nlpd(logits: &[Vec<f64>], labels: &[usize], temperature: f64) -> Result<f64> {
    let probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|z| softmax(&z.iter().map(|v| temperature * v).collect::<Vec<_>>()))
        .collect();
    Ok(nlpd(&probs, labels)?.value)
}

/// Temperature minimising NLPD of `softmax(t · logits)`, by golden-section
/// search on `log t ∈ [−5, 5]`.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check(logits, labels)?;
    let f = |u: f64| scaled_nlpd(logits, labels, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = LOG_T_RANGE;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while hi - lo > LOG_T_TOL {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2)?;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Summary written by the `eval` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub acc_se: f64,
    pub weighted_acc: f64,
    pub nlpd: f64,
    pub nlpd_se: f64,
    pub ece: f64,
    pub n: usize,
    pub bins: usize,
}

pub fn evaluate<P: AsRef<[f64]>>(
    probs: &[P],
    labels: &[usize],
    n_bins: usize,
) -> Result<(EvalReport, Vec<ReliabilityBin>)> {
    let acc = accuracy(probs, labels)?;
    let nl = nlpd(probs, labels)?;
    let (e, table) = ece(probs, labels, n_bins)?;
    Ok((
        EvalReport {
            acc: acc.value,
            acc_se: acc.se,
            weighted_acc: weighted_accuracy(probs, labels)?,
            nlpd: nl.value,
            nlpd_se: nl.se,
            ece: e,
            n: probs.len(),
            bins: n_bins,
        },
        table,
    ))
}
