//! The synthetic linear-Gaussian world: SCM specs, datasets, the transport
//! oracle and ground-truth mechanisms.

mod dataset;
mod discrete;
mod io;
mod mechanism;
mod oracle;
mod spec;

pub use dataset::{
    sample_dataset, CountingSource, DataSource, Dataset, Domain, HiddenColumns, LabeledSample,
};
pub use discrete::DiscreteScm;
pub use io::{read_dataset_csv, write_dataset_csv, CsvData, DatasetMeta};
pub use mechanism::{
    candidate_mismatch, disentanglement_score, latent_displacement, lift_latent_map,
    true_mechanism, AffineMap, Direction, DisentanglementScore, VectorMap,
};
pub use oracle::{
    interventional_posterior, oracle_batch, transport_oracle, OracleEstimate, OracleTable,
    MIN_MC_SAMPLES,
};
pub use spec::{label_posterior, ScmConfig, ScmSpec, MIN_GENERATOR_SINGULAR_VALUE};
