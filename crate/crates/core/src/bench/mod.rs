//! Baselines, metrics and experiment orchestration.

mod baseline;
mod metrics;
mod pipeline;

pub use baseline::{
    domain_map_baseline, domain_map_with_pair, source_only_baseline, BaselineConfig, BaselineKind,
    BaselineModel, CLASSIFIER,
};
pub use metrics::{
    evaluate, evaluate_against, purity_matrix, tv_distance, MetricsReport, OraclePredictor,
    Predictor, PurityMonitor,
};
pub use pipeline::{
    ablate_k, generate_world, root_stream, run_experiment, streams, train_tcm, AblationRow,
    AblationTable, BenchConfig, ExperimentResult, TcmPredictor, TcmTraining,
};
