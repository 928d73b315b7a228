//! Causal machine learning for agricultural land suitability.
//!
//! The crate turns gridded crop records into agricultural-practice treatments
//! (crop rotation, landscape crop diversity), estimates their heterogeneous
//! effect on an outcome such as net primary productivity with cross-fitted
//! double machine learning, and exports per-cell suitability scores together
//! with heterogeneity diagnostics.
//!
//! The pieces, bottom-up:
//!
//! - [`data_model`]: panel ingestion, cropland filter, temporal aggregation.
//! - [`practices`]: crop abundances from parcel polygons, Shannon diversity,
//!   crop rotation, median binarization.
//! - [`learners`]: trees, forests, boosting, lasso, logistic regression,
//!   scaling, cross-validation and grid search.
//! - [`overlap`]: out-of-fold propensity scores and trimming.
//! - [`dml`]: cross-fitted residualization and the final-stage effect model.
//! - [`causal_forest`]: honest causal forest and the interpretation tree.
//! - [`synthetic`]: partially linear data generators with a known CATE.
//! - [`analysis`]: Spearman tables, histograms, map export, climate shifts.
//! - [`pipeline`] and [`cli`]: end-to-end orchestration.
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

pub mod analysis;
pub mod causal_forest;
pub mod cli;
pub mod data_model;
pub mod dml;
pub mod learners;
mod linalg;
pub mod overlap;
pub mod pipeline;
pub mod practices;
pub mod synthetic;

pub use causal_forest::{CausalForest, CausalForestSpec, InterpretationTree};
pub use data_model::{CrossSection, CrossSectionTable, GridCell, PanelDataset, PanelRecord};
pub use dml::{CateModel, FinalStage, NuisanceSpec, ResidualizedData};
pub use synthetic::{SyntheticSpec, ThetaSpec};
