//! Fully enumerable discrete denoising chains. Every trajectory
//! probability, the partition function, and the reward-tilted optimum are
//! exact, so optimality statements can be checked numerically.

mod enumerate;
mod model;
mod train;
mod verify;

pub use enumerate::{
    enumerate_distribution, kl_divergence, kl_marginal, kl_trajectory, log_partition_function,
    optimal_distribution, optimal_policy, partition_function, reference_distribution,
    rlhf_objective, TrajectoryDistribution,
};
pub use model::{
    decode_trajectory, encode_trajectory, RandomInstance, TabularDiffusion, TabularPolicy,
    ENUMERATION_BUDGET, MIN_PROBABILITY,
};
pub use train::{exact_rdp_loss, train_tabular_rdp, TabularTrainConfig, TabularTrainResult};
pub use verify::{
    calibrate_reverse, check_kl_lower_bound, check_optimality_condition,
    check_optimum_maximizes_objective, check_partition_function, optimality_residual,
    residual_tv_bound, run_lemma_suite, verify_optimality_condition, CalibrationPoint, LemmaCheck,
    OptimalityReport, ReverseCalibration, VerifyConfig, VerifyReport,
};
