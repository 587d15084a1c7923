//! Data-adaptive discovery of exposure regions with cross-estimated,
//! targeted estimates of the average regional effect (ARE).
//!
//! The pipeline: split the data into folds; on each fold's complement,
//! backfit an additive exposure/covariate model whose exposure side is a
//! lasso-selected rule ensemble, and pick the strongest rule per variable
//! set; then estimate each rule's ARE on the held-out fold with TMLE, and
//! pool across folds.

pub mod backfit;
pub mod cross;
pub mod data;
pub mod error;
pub mod folds;
pub mod learners;
pub mod par;
pub mod region;
pub mod rng;
pub mod rules;
pub mod scale;
pub mod sim;
pub mod tmle;

pub use cross::{run_analysis, AnalysisOptions, CvReport};
pub use data::{ColumnRoles, Dataset};
pub use error::{Error, Result};
pub use folds::{kfold_split, FoldSpec};
pub use par::Parallelism;
pub use region::{Clause, RectRegion};
pub use scale::OutcomeScale;
pub use tmle::TmleResult;

/// Library version, echoed into run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

