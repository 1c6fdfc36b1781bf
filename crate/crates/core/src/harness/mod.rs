//! Synthetic streams, the end-to-end runner, the retention experiment and the CLI.

pub mod cli;
pub mod config;
pub mod gradcheck;
pub mod retention;
pub mod runner;
pub mod scene;

pub use cli::{cli_main, run_cli};
pub use config::{Dims, RunConfig, Seeds, SEED_ENV};
pub use gradcheck::gradcheck_suite;
pub use retention::{expected_sq_retention, retention_experiment, RetentionConfig, RetentionCurve, ZetaMode};
pub use runner::{run_engine, run_stream, FrameRecord, RunOutcome, RunReport, RunSummary};
pub use scene::{generate_scene, FeaturizeConfig, Featurizer, SyntheticScene, TrajKind};
