//! Fixtures shared by the benchmarks.

use tcm_core::bench::generate_world;
use tcm_core::dcm::{init_dcms, DcmConfig, DcmTrainerState, DomainDiscriminators, MechanismPair};
use tcm_core::numerics::{Matrix, RngStream};
use tcm_core::proxy::{train_stage2, ProxyConfig, ProxyModel};
use tcm_core::scm::{Dataset, ScmSpec};
use tcm_core::ExperimentConfig;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    RngStream::new(seed, 0).normal_matrix(rows, cols, 1.0)
}

/// The default benchmark world at seed 0.
pub struct World {
    pub cfg: ExperimentConfig,
    pub spec: ScmSpec,
    pub source: Dataset,
    pub target: Dataset,
}

pub fn world() -> World {
    let cfg = ExperimentConfig::default();
    let (spec, source, target) = generate_world(&cfg, 0).expect("default world");
    World {
        cfg,
        spec,
        source,
        target,
    }
}

/// Freshly initialized stage-1 state.
pub fn dcm_state(
    k: usize,
    n: usize,
) -> (DcmTrainerState, Vec<MechanismPair>, DomainDiscriminators) {
    let cfg = DcmConfig {
        k_mechanisms: k,
        warmup: 0,
        ..DcmConfig::default()
    };
    let (pairs, disc) = init_dcms(&cfg, n, &RngStream::new(1, 0)).expect("init");
    (DcmTrainerState::new(&cfg), pairs, disc)
}

/// A briefly trained proxy model with a fitted prior.
pub fn proxy_model(w: &World, k: usize) -> ProxyModel {
    let (_, pairs, _) = dcm_state(k, w.cfg.scm.n);
    let cfg = ProxyConfig {
        iterations: 50,
        ..ProxyConfig::default()
    };
    train_stage2(
        &cfg,
        w.cfg.scm.c,
        &pairs,
        &w.source,
        &w.target.learner_view(),
        &RngStream::new(2, 0),
    )
    .expect("stage 2")
    .model
}
