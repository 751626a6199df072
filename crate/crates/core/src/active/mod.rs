//! Acquisition scores, targeted support-set selection, online posterior
//! updates and the simulated active-learning loop.

mod acquisition;
mod knn;
mod online;
mod run;

pub use acquisition::{
    bald_score, class_matrix, draw_targets, epig_from_samples, epig_score, mutual_information,
    predictions, sample_predictions, AcquisitionConfig, AcquisitionKind, KnnMetric,
};
pub use knn::{knn_distance, targeted_knn_select, wasserstein2_diag};
pub use online::{
    classification_loss_and_gradient, online_update, OnlineLaplaceState, DEFAULT_BETA, DEFAULT_GAMMA,
};
pub use run::{curve_auc, predict_all, run_active_learning, ActiveConfig, ActiveProblem, ActiveRun, CurvePoint};
