//! Propensity trimming, DML fit, interpretation tree and exports chained
//! on one cross-section table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisError, RunSummary, SuitabilityMap};
use crate::causal_forest::{interpret_tree, CausalForestError, InterpretationTree};
use crate::data_model::{CrossSectionTable, DataError};
use crate::dml::{fit_dml_table, DmlConfig, DmlError, DmlFit};
use crate::overlap::{estimate_propensity, trim_with_estimator, OverlapError, PropensityReport, PropensitySpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("overlap: {0}")]
    Overlap(#[from] OverlapError),
    #[error("estimation: {0}")]
    Dml(#[from] DmlError),
    #[error("interpretation: {0}")]
    Interpret(#[from] CausalForestError),
    #[error("analysis: {0}")]
    Analysis(#[from] AnalysisError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub propensity: PropensitySpec,
    pub trim_low: f64,
    pub trim_high: f64,
    pub dml: DmlConfig,
    pub interpret_depth: usize,
    pub interpret_min_leaf: usize,
    pub histogram_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            propensity: PropensitySpec::default(),
            trim_low: crate::overlap::DEFAULT_LOW,
            trim_high: crate::overlap::DEFAULT_HIGH,
            dml: DmlConfig::default(),
            interpret_depth: 2,
            interpret_min_leaf: 1,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub propensity: PropensityReport,
    /// Rows that survived trimming.
    pub estimation: CrossSectionTable,
    pub fit: DmlFit,
    pub tree: InterpretationTree,
    pub map: SuitabilityMap,
    pub summary: RunSummary,
}

/// Propensity scores on all rows, then trimming to the overlap region.
pub fn trim_table(
    table: &CrossSectionTable,
    spec: &PropensitySpec,
    low: f64,
    high: f64,
) -> Result<(CrossSectionTable, PropensityReport), PipelineError> {
    let x = table.feature_matrix();
    let t = table.treatments()?;
    let scores = estimate_propensity(x.view(), t.as_slice().expect("contiguous"), spec)?;
    let (kept, report) = trim_with_estimator(&scores, low, high, spec.describe())?;
    Ok((table.select(&kept), report))
}

pub fn run_pipeline(table: &CrossSectionTable, treatment: &str, config: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    let (estimation, propensity) = trim_table(table, &config.propensity, config.trim_low, config.trim_high)?;
    let fit = fit_dml_table(&estimation, &config.dml)?;
    let x = estimation.feature_matrix();
    let tree = interpret_tree(
        x.view(),
        &estimation.feature_names,
        &fit.cates,
        config.interpret_depth,
        config.interpret_min_leaf,
    )?;
    let map = SuitabilityMap::build(&estimation, &fit.cates)?;
    let summary = RunSummary::build(treatment, &fit.model, x.view(), &fit.cates, config.histogram_bins)?;
    Ok(PipelineRun {
        propensity,
        estimation,
        fit,
        tree,
        map,
        summary,
    })
}
