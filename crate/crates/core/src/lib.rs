//! Regression calibration combined with generalized propensity scores for
//! causal effects of a categorical exposure measured with error.
//!
//! The analysis runs in two stages. A linear calibration model fitted on a
//! validation study replaces the error-prone exposure with its prediction;
//! the prediction is categorized, a multinomial-logit GPS is fitted on the
//! confounders, and potential-outcome means are estimated by
//! subclassification, inverse probability weighting or matching.
//! [`pipeline::run_pipeline`] chains the steps; [`outcome::bootstrap_ate`]
//! adds whole-pipeline bootstrap intervals.

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod calibration;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod gps;
pub mod linalg;
pub mod outcome;
pub mod pipeline;
pub mod rng;
pub mod simulation;
pub mod stats;
pub mod tabular;

pub use calibration::{fit_rc, fit_rc_columns, perturb_gamma1, predict_xhat, RcModel};
pub use diagnostics::{asb, balance_report, overlap_summary, BalanceDesign, BalanceReport, OverlapSummary, SdDenominator};
pub use error::{Error, Result};
pub use estimators::{
    estimate, estimate_iptw, estimate_matching, estimate_subclassification, EstimatorOptions, EstimatorOutput,
    IptwOptions, MatchAssignment, Method, MethodDesign, PotentialOutcomeEstimates, SubclassOptions,
};
pub use gps::{fit_multinomial, predict_gps, trim_indices, trim_overlap, GpsMatrix, GpsModel, GpsOptions, TrimStrategy};
pub use outcome::{ate_contrasts, bootstrap_ate, AteRow, AteTable, BootstrapConfig, BootstrapMode, Link, OutcomeSpec, Scale};
pub use pipeline::{run_pipeline, run_pipeline_with_rc, ExposureSource, PipelineConfig, PipelineInputs, PipelineOutput};
pub use simulation::{generate_scenario, oracle_ate, run_replicates, OracleAte, ReplicateSummary, ScenarioConfig, StudyConfig};
pub use tabular::{categorize, read_csv, write_csv, CutoffSpec, GridRegionMap, Role, RoleMap, TabularDataset};
