//! Multi-account distillation experiments: transcripts under each regime,
//! student training, generalization gaps and effective sample sizes.

pub mod align;
pub mod config;
pub mod sweep;
pub mod train;
pub mod transcript;
pub mod world;

pub use align::{alignment_fluctuation, hoeffding_radius, simulate_alignment, AlignmentReport};
pub use config::{ExperimentConfig, Regime, TeacherKind, MIN_HOLDOUT};
pub use sweep::{
    prop1_preset, run_sweep, write_csv, write_csv_file, Axis, Grid, GridPoint, PointSummary, RatioAssertion,
    SlopeAssertion, SlopeReport, SweepConfig, SweepResult, SweepSummary,
};
pub use train::{
    empirical_gap, measure_gap, run_repetition, train_student, GapMeasurement, OptimizerSettings, RepOutcome,
    Student,
};
pub use transcript::{
    build_transcript, effective_sample_size, Record, RepetitionKeys, Response, Transcript, WeightProfile,
};
pub use world::{query_from_gaussian, Holdout, PopulationLoss, Probe, TaskTeacher, World};
