use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::acquisition::{
    class_matrix, draw_targets, epig_from_samples, mutual_information, predictions, sample_predictions,
};
use super::knn::targeted_knn_select;
use super::online::{online_update, OnlineLaplaceState, DEFAULT_BETA, DEFAULT_GAMMA};
use super::{AcquisitionConfig, AcquisitionKind};
use crate::error::{Error, Result};
use crate::laplace::{KfacPosterior, LossContext, LossKind};
use crate::metrics::{nlpd, weighted_accuracy};
use crate::probcosine::{argmax, entropy, probit_for_embedding, GaussianEmbedding, Predictive};
use crate::rng::stream_rng;
use crate::sampling::ProjectionSampler;

/// Pool, test set and fixed class prototypes of one active-learning run.
#[derive(Debug, Clone)]
pub struct ActiveProblem {
    pub pool_features: DMatrix<f64>,
    pub pool_labels: Vec<usize>,
    pub test_features: DMatrix<f64>,
    pub test_labels: Vec<usize>,
    /// Class text embeddings in the joint space. Their means act as fixed
    /// prototypes for acquisition and updates; evaluation uses the full
    /// Gaussians.
    pub class_embeddings: Vec<GaussianEmbedding>,
    pub temperature: f64,
}

impl ActiveProblem {
    pub fn validate(&self, d_in: usize, d_out: usize) -> Result<()> {
        if self.pool_features.nrows() != self.pool_labels.len() {
            return Err(Error::Arg("pool features and labels differ in length".into()));
        }
        if self.test_features.nrows() != self.test_labels.len() || self.test_labels.is_empty() {
            return Err(Error::Arg("test features and labels differ in length or are empty".into()));
        }
        if self.pool_features.ncols() != d_in || self.test_features.ncols() != d_in {
            return Err(Error::Arg(format!("features must have {d_in} columns")));
        }
        let c = self.class_embeddings.len();
        if self.class_embeddings.iter().any(|h| h.dim() != d_out) {
            return Err(Error::Arg(format!("class embeddings must have {d_out} entries")));
        }
        if let Some(y) = self.pool_labels.iter().chain(&self.test_labels).find(|y| **y >= c) {
            return Err(Error::Value(format!("label {y} out of range for {c} classes")));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Value("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveConfig {
    #[serde(flatten)]
    pub acquisition: AcquisitionConfig,
    pub budgets: Vec<usize>,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            acquisition: AcquisitionConfig::default(),
            budgets: vec![0, 10, 25, 50, 75, 100, 150, 200],
            gamma: DEFAULT_GAMMA,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: usize,
    pub weighted_acc: f64,
    pub nlpd: f64,
}

#[derive(Debug, Clone)]
pub struct ActiveRun {
    pub curve: Vec<CurvePoint>,
    /// `(pool index, label)` in acquisition order.
    pub support: Vec<(usize, usize)>,
    pub final_state: OnlineLaplaceState,
}

/// Probit predictive for every test row under `post`.
pub fn predict_all(
    post: &KfacPosterior,
    features: &DMatrix<f64>,
    classes: &[GaussianEmbedding],
    temperature: f64,
) -> Result<Vec<Predictive>> {
    post.embed_all(features)?
        .iter()
        .map(|e| probit_for_embedding(e, classes, temperature))
        .collect()
}

fn evaluate(
    post: &KfacPosterior,
    problem: &ActiveProblem,
    classes: &[GaussianEmbedding],
    budget: usize,
) -> Result<CurvePoint> {
    let preds = predict_all(post, &problem.test_features, classes, problem.temperature)?;
    Ok(CurvePoint {
        budget,
        weighted_acc: weighted_accuracy(&preds, &problem.test_labels)?,
        nlpd: nlpd(&preds, &problem.test_labels)?.value,
    })
}

fn entropies(preds: &DMatrix<f64>) -> Vec<f64> {
    preds
        .row_iter()
        .map(|r| entropy(&r.iter().copied().collect::<Vec<_>>()))
        .collect()
}

struct Selector<'a> {
    problem: &'a ActiveProblem,
    cfg: &'a AcquisitionConfig,
    classes: DMatrix<f64>,
    consumed: Vec<bool>,
}

impl Selector<'_> {
    fn stream(&self, name: &str, step: usize) -> rand_chacha::ChaCha8Rng {
        stream_rng(self.cfg.seed, &format!("active.{}.{name}", self.cfg.kind), step as u64)
    }

    fn theta_predictions(&self, post: &KfacPosterior, features: &DMatrix<f64>, step: usize) -> Result<Vec<DMatrix<f64>>> {
        let mut rng = self.stream("theta", step);
        let draws = post.draw(self.cfg.n_theta_samples, &mut rng)?;
        Ok(sample_predictions(&draws, features, &self.classes, self.problem.temperature))
    }

    /// Returns a position in `cands`.
    fn select(&mut self, post: &KfacPosterior, cands: &[usize], step: usize) -> Result<usize> {
        let p = self.problem;
        let t = p.temperature;
        let pool = p.pool_features.select_rows(cands);
        let kind = self.cfg.kind;
        if kind.is_targeted() {
            let open: Vec<usize> = (0..self.consumed.len()).filter(|&i| !self.consumed[i]).collect();
            let open_features = p.test_features.select_rows(&open);
            let scores: Vec<f64> = match kind {
                AcquisitionKind::TargetedRandom => {
                    let mut rng = self.stream("score", step);
                    open.iter().map(|_| rng.random::<f64>()).collect()
                }
                AcquisitionKind::TargetedEntropy => {
                    entropies(&predictions(post.projection(), &open_features, &self.classes, t))
                }
                _ => self
                    .theta_predictions(post, &open_features, step)?
                    .iter()
                    .map(mutual_information)
                    .collect(),
            };
            let top = argmax(&scores);
            let test_idx = open[top];
            self.consumed[test_idx] = true;
            if self.consumed.iter().all(|c| *c) {
                self.consumed.iter_mut().for_each(|c| *c = false);
            }
            let train = post.embed_all(&pool)?;
            let query = post.embed_all(&p.test_features.select_rows(&[test_idx]))?;
            let picked = targeted_knn_select(&[(0, scores[top])], 1, &train, &query, self.cfg.metric)?;
            return Ok(picked[0]);
        }
        let scores: Vec<f64> = match kind {
            AcquisitionKind::Random => {
                let mut rng = self.stream("pick", step);
                return Ok(rng.random_range(0..cands.len()));
            }
            AcquisitionKind::Entropy => entropies(&predictions(post.projection(), &pool, &self.classes, t)),
            AcquisitionKind::Bald => self
                .theta_predictions(post, &pool, step)?
                .par_iter()
                .map(mutual_information)
                .collect(),
            AcquisitionKind::Epig => {
                let mut rng = self.stream("theta", step);
                let draws = post.draw(self.cfg.n_theta_samples, &mut rng)?;
                let mut target_rng = self.stream("targets", step);
                let targets = draw_targets(&p.test_features, self.cfg.n_target_samples, &mut target_rng)?;
                let target_preds = sample_predictions(&draws, &targets, &self.classes, t);
                sample_predictions(&draws, &pool, &self.classes, t)
                    .par_iter()
                    .map(|x| epig_from_samples(x, &target_preds))
                    .collect()
            }
            _ => unreachable!("targeted strategies handled above"),
        };
        Ok(argmax(&scores))
    }
}

/// Greedy acquisition loop with an online posterior update after every
/// label, evaluated on the test set at each budget.
pub fn run_active_learning(problem: &ActiveProblem, posterior: KfacPosterior, cfg: &ActiveConfig) -> Result<ActiveRun> {
    cfg.acquisition.validate()?;
    problem.validate(posterior.d_in(), posterior.d_out())?;
    if cfg.budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Arg("budgets must be ascending".into()));
    }
    let max_budget = cfg.budgets.last().copied().unwrap_or(0);
    if max_budget > problem.pool_features.nrows() {
        return Err(Error::Arg(format!(
            "budget {max_budget} exceeds the pool of {}",
            problem.pool_features.nrows()
        )));
    }
    let means: Vec<DVector<f64>> = problem.class_embeddings.iter().map(|h| h.mean.clone()).collect();
    let class_units = class_matrix(&means)?;
    let classes = &problem.class_embeddings;
    let ctx = LossContext::new(class_units.clone(), problem.temperature, 0.0, LossKind::InfoNce)?;
    let mut state = OnlineLaplaceState::new(posterior, cfg.gamma, cfg.beta)?;
    let mut selector = Selector {
        problem,
        cfg: &cfg.acquisition,
        classes: class_units,
        consumed: vec![false; problem.test_features.nrows()],
    };
    let mut available = vec![true; problem.pool_features.nrows()];
    let mut support = Vec::with_capacity(max_budget);
    let mut curve = Vec::with_capacity(cfg.budgets.len());
    for &budget in &cfg.budgets {
        while support.len() < budget {
            let step = support.len();
            let cands: Vec<usize> = (0..available.len()).filter(|&i| available[i]).collect();
            let pos = selector.select(&state.posterior, &cands, step)?;
            let idx = cands[pos];
            let label = problem.pool_labels[idx];
            let feature = problem.pool_features.row(idx).transpose();
            state = online_update(&state, &feature, label, &ctx)?;
            available[idx] = false;
            support.push((idx, label));
        }
        let point = evaluate(&state.posterior, problem, classes, budget)?;
        log::debug!(
            "{} budget {budget}: weighted acc {:.4}, nlpd {:.4}",
            cfg.acquisition.kind,
            point.weighted_acc,
            point.nlpd
        );
        curve.push(point);
    }
    Ok(ActiveRun {
        curve,
        support,
        final_state: state,
    })
}

/// Trapezoidal area under the weighted-accuracy curve, divided by the
/// budget range (a single point returns its own value).
pub fn curve_auc(curve: &[CurvePoint]) -> f64 {
    match curve {
        [] => 0.0,
        [only] => only.weighted_acc,
        _ => {
            let span = (curve[curve.len() - 1].budget - curve[0].budget) as f64;
            if span == 0.0 {
                return curve.iter().map(|c| c.weighted_acc).sum::<f64>() / curve.len() as f64;
            }
            curve
                .windows(2)
                .map(|w| 0.5 * (w[0].weighted_acc + w[1].weighted_acc) * (w[1].budget - w[0].budget) as f64)
                .sum::<f64>()
                / span
        }
    }
}
