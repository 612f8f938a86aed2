//! Competitive discovery of cross-domain mechanism pairs.

mod loss;
mod pair;
mod train;

pub use loss::{
    cyclegan_loss, discriminator_loss, record_cyclegan, record_discriminator_loss, CycleGanLoss,
    CycleGanVars, LossWeights,
};
pub use pair::{
    apply_dcms, apply_dcms_batch, DomainDiscriminators, MechanismClass, MechanismPair, PairView,
    DISC_SOURCE, DISC_TARGET, FORWARD, PROB_CLAMP, REVERSE,
};
pub(crate) use train::validate_optimizer;
pub use train::{
    competitive_step, init_dcms, select_winner, train_dcms, DcmConfig, DcmLogEntry, DcmMonitor,
    DcmRun, DcmTrainerState, StepOutcome, WinnerMode,
};
