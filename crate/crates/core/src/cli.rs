//! Command-line front end: one subcommand per pipeline stage, each reading
//! the artifacts of earlier stages from the output directory and writing a
//! manifest next to its own outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{counterfactual_shift, export_map, write_feature_pairs, AnalysisError, RunSummary, ShiftSpec, SuitabilityMap};
use crate::causal_forest::{interpret_tree, CausalForestError};
use crate::data_model::{
    filter_cropland, load_panel, read_panel, write_panel, CrossSectionTable, DataError, Schema, ABUNDANCE_SUM_TOLERANCE,
    DEFAULT_CELL_SIZE_M,
};
use crate::dml::{fit_dml_table, CateModel, DmlConfig, DmlError, FinalStage, ModelChoice, NuisanceSpec, DEFAULT_MIN_UNITS};
use crate::learners::LearnerSpec;
use crate::overlap::{OverlapError, PropensitySpec};
use crate::pipeline::{trim_table, PipelineError};
use crate::practices::{apply_abundances, build_cross_section, grid_abundances, load_grid, load_parcels_geojson, PracticeError, TreatmentKind};
use crate::synthetic::{generate_plm, SyntheticError, SyntheticSpec};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_ESTIMATION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("missing artifact {}: run `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("estimation: {0}")]
    Estimation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) | CliError::MissingArtifact { .. } => EXIT_DATA,
            CliError::Estimation(_) => EXIT_ESTIMATION,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let mut msg = e.to_string();
        for d in e.diagnostics() {
            msg.push_str(&format!("\n  row {}: {} {}", d.row, d.code.as_str(), d.detail));
        }
        CliError::Data(msg)
    }
}

impl From<PracticeError> for CliError {
    fn from(e: PracticeError) -> Self {
        match e {
            PracticeError::Data(d) => d.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DmlError> for CliError {
    fn from(e: DmlError) -> Self {
        match e {
            DmlError::InvalidSpec(m) => CliError::Config(m),
            DmlError::Data(d) => d.into(),
            other => CliError::Estimation(other.to_string()),
        }
    }
}

impl From<OverlapError> for CliError {
    fn from(e: OverlapError) -> Self {
        match e {
            OverlapError::InvalidBounds { .. } | OverlapError::InvalidArgument(_) => CliError::Config(e.to_string()),
            OverlapError::Io(io) => io.into(),
            other => CliError::Estimation(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Data(d) => d.into(),
            PipelineError::Overlap(o) => o.into(),
            PipelineError::Dml(d) => d.into(),
            PipelineError::Interpret(f) => f.into(),
            PipelineError::Analysis(a) => a.into(),
        }
    }
}

impl From<CausalForestError> for CliError {
    fn from(e: CausalForestError) -> Self {
        match e {
            CausalForestError::InvalidSpec(m) => CliError::Config(m),
            other => CliError::Estimation(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io(io) => io.into(),
            AnalysisError::Csv(c) => CliError::Data(c.to_string()),
            AnalysisError::UnknownFeature(_) => CliError::Config(e.to_string()),
            AnalysisError::Model(m) => m.into(),
            other => CliError::Estimation(other.to_string()),
        }
    }
}

impl From<SyntheticError> for CliError {
    fn from(e: SyntheticError) -> Self {
        match e {
            SyntheticError::Data(d) => d.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "agrocausal", version, about = "Heterogeneous effects of agricultural practices from gridded crop data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory shared by all stages.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Practice under study: `cr` or `lcd`.
    #[arg(long, global = true)]
    pub treatment: Option<TreatmentKind>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Validate the panel, grid the parcels and apply the cropland filter.
    Ingest,
    /// Practice metrics, temporal aggregation and median binarization.
    Practices,
    /// Propensity trimming and the DML fit.
    Fit,
    /// Depth-limited interpretation tree over the fitted CATEs.
    Interpret,
    /// Suitability map, run summary, feature pairs and climate shift.
    Report,
    /// Synthetic cross-section with a known effect function.
    Simulate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Practices => "practices",
            Command::Fit => "fit",
            Command::Interpret => "interpret",
            Command::Report => "report",
            Command::Simulate => "simulate",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Panel CSV; the canonical layout unless `schema` is given.
    pub panel: Option<PathBuf>,
    pub schema: Option<Schema>,
    /// Parcel GeoJSON; requires `grid`.
    pub parcels: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    /// Cross-section CSV that replaces the output of `practices`.
    pub cross_section: Option<PathBuf>,
}

impl InputConfig {
    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 4] {
        [&mut self.panel, &mut self.parcels, &mut self.grid, &mut self.cross_section]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub period: Option<(i32, i32)>,
    pub cropland_threshold: f64,
    /// Crops with a lower median abundance are left out of the controls.
    pub major_crop_min_median: f64,
    pub default_cell_size_m: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            period: None,
            cropland_threshold: 0.8,
            major_crop_min_median: 0.02,
            default_cell_size_m: DEFAULT_CELL_SIZE_M,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlapConfig {
    pub low: f64,
    pub high: f64,
    pub model: LearnerSpec,
    pub k_folds: usize,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        let p = PropensitySpec::default();
        Self {
            low: crate::overlap::DEFAULT_LOW,
            high: crate::overlap::DEFAULT_HIGH,
            model: p.model,
            k_folds: p.k_folds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    pub depth: usize,
    pub min_leaf: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self { depth: 2, min_leaf: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub histogram_bins: usize,
    pub shift: Option<ShiftSpec>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            histogram_bins: 20,
            shift: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub treatment: TreatmentKind,
    pub threads: Option<usize>,
    pub input: InputConfig,
    pub study: StudyConfig,
    pub overlap: OverlapConfig,
    pub nuisance: NuisanceSpec,
    pub final_stage: FinalStage,
    pub min_units: usize,
    pub interpret: InterpretConfig,
    pub report: ReportConfig,
    pub simulate: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: None,
            treatment: TreatmentKind::CropRotation,
            threads: None,
            input: InputConfig::default(),
            study: StudyConfig::default(),
            overlap: OverlapConfig::default(),
            nuisance: NuisanceSpec::default(),
            final_stage: FinalStage::default(),
            min_units: DEFAULT_MIN_UNITS,
            interpret: InterpretConfig::default(),
            report: ReportConfig::default(),
            simulate: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `path`; relative input paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.input.paths_mut().into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = &mut cfg.out {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    /// Applies flags on top of file values.
    pub fn merge(mut self, args: &CommonArgs) -> Self {
        if args.seed.is_some() {
            self.seed = args.seed;
        }
        if args.out.is_some() {
            self.out = args.out.clone();
        }
        if let Some(t) = args.treatment {
            self.treatment = t;
        }
        if args.threads.is_some() {
            self.threads = args.threads;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seed.is_none() {
            return Err(CliError::Config("a seed is required (config `seed` or --seed)".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        for p in [&self.input.panel, &self.input.parcels, &self.input.grid, &self.input.cross_section]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(CliError::Config(format!("input {} does not exist", p.display())));
            }
        }
        if self.input.parcels.is_some() != self.input.grid.is_some() {
            return Err(CliError::Config("`parcels` and `grid` must be given together".into()));
        }
        let o = &self.overlap;
        if !(0.0 <= o.low && o.low < o.high && o.high <= 1.0) {
            return Err(CliError::Config(format!("trim bounds ({}, {}) are invalid", o.low, o.high)));
        }
        if o.k_folds < 2 {
            return Err(CliError::Config("overlap k_folds must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.study.cropland_threshold) {
            return Err(CliError::Config("cropland_threshold must lie in [0, 1]".into()));
        }
        if self.interpret.depth == 0 {
            return Err(CliError::Config("interpretation depth must be at least 1".into()));
        }
        if self.report.histogram_bins == 0 {
            return Err(CliError::Config("histogram_bins must be at least 1".into()));
        }
        self.nuisance.validate()?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("agrocausal-out"))
    }

    /// Digest of the settings that influence results; paths, the output
    /// directory and the thread count are left out.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.threads = None;
        for p in c.input.paths_mut() {
            *p = None;
        }
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Nuisance spec with every search seeded from the run seed.
    fn seeded_nuisance(&self) -> NuisanceSpec {
        let mut n = self.nuisance.clone();
        for choice in [&mut n.outcome_model, &mut n.treatment_model] {
            if let ModelChoice::Search(searches) = choice {
                for s in searches {
                    s.seed = self.seed();
                }
            }
        }
        n
    }

    pub fn dml_config(&self) -> DmlConfig {
        DmlConfig {
            nuisance: self.seeded_nuisance(),
            final_stage: self.final_stage.clone(),
            seed: self.seed(),
            min_units: self.min_units,
        }
    }

    pub fn propensity_spec(&self) -> PropensitySpec {
        PropensitySpec {
            model: self.overlap.model.clone(),
            k_folds: self.overlap.k_folds,
            seed: self.seed(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Provenance record of one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub stage: String,
    pub treatment: Option<String>,
    pub seed: u64,
    pub config_digest: String,
    /// File name to SHA-256 of every input read.
    pub inputs: BTreeMap<String, String>,
    /// File name to SHA-256 of every output written.
    pub outputs: BTreeMap<String, String>,
}

/// What a stage run produced.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

struct Stage<'a> {
    cfg: &'a RunConfig,
    command: Command,
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

impl<'a> Stage<'a> {
    fn new(cfg: &'a RunConfig, command: Command) -> Result<Self, CliError> {
        let out = cfg.out_dir();
        fs::create_dir_all(&out)?;
        Ok(Self {
            cfg,
            command,
            out,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    fn t(&self) -> &'static str {
        self.cfg.treatment.short_name()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Records an external or upstream input.
    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(file_name(path), file_digest(path)?);
        Ok(())
    }

    /// Upstream artifact that must already exist.
    fn artifact(&mut self, name: &str, stage: &'static str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(CliError::MissingArtifact { path, stage });
        }
        self.input(&path)?;
        Ok(path)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, bytes)?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn written(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn finish(self) -> Result<StageOutcome, CliError> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(file_name(p), file_digest(p)?);
        }
        let stage = self.command.name();
        let treatment = (self.command != Command::Ingest).then(|| self.t().to_string());
        let manifest = Manifest {
            format: "agrocausal-manifest".into(),
            version: 1,
            stage: stage.into(),
            treatment: treatment.clone(),
            seed: self.cfg.seed(),
            config_digest: self.cfg.digest(),
            inputs: self.inputs,
            outputs,
        };
        let name = match &treatment {
            Some(t) => format!("manifest_{stage}_{t}.json"),
            None => format!("manifest_{stage}.json"),
        };
        let manifest_path = self.out.join(name);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&manifest_path, text)?;
        Ok(StageOutcome { manifest_path, manifest })
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), CliError>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn cmd_ingest(cfg: &RunConfig) -> Result<StageOutcome, CliError> {
    let mut st = Stage::new(cfg, Command::Ingest)?;
    let panel_path = cfg
        .input
        .panel
        .clone()
        .ok_or_else(|| CliError::Config("ingest needs `input.panel`".into()))?;
    st.input(&panel_path)?;
    let mut schema = match &cfg.input.schema {
        Some(s) => s.clone(),
        None => {
            let mut rdr = csv::Reader::from_path(&panel_path).map_err(|e| CliError::Data(e.to_string()))?;
            let header: Vec<String> = rdr
                .headers()
                .map_err(|e| CliError::Data(e.to_string()))?
                .iter()
                .map(str::to_string)
                .collect();
            Schema::canonical_from_header(&header)
        }
    };
    if cfg.study.period.is_some() {
        schema.study_period = cfg.study.period;
    }
    let mut panel = load_panel(&panel_path, &schema)?;

    if let (Some(parcels_path), Some(grid_path)) = (&cfg.input.parcels, &cfg.input.grid) {
        st.input(parcels_path)?;
        st.input(grid_path)?;
        let parcels = load_parcels_geojson(parcels_path)?;
        let grid = load_grid(grid_path, cfg.study.default_cell_size_m)?;
        let mut by_year = BTreeMap::new();
        for &year in &panel.study_years {
            by_year.insert(year, grid_abundances(&parcels, &grid, year)?);
        }
        apply_abundances(&mut panel, &by_year);
        if let Some(r) = panel.records.iter().find(|r| r.total_abundance() > 1.0 + ABUNDANCE_SUM_TOLERANCE) {
            return Err(CliError::Data(format!(
                "cell {} year {}: gridded abundances sum above 1",
                r.cell_id, r.year
            )));
        }
        let bytes = csv_bytes(|buf| {
            let mut w = csv::Writer::from_writer(buf);
            let io = |e: csv::Error| CliError::Data(e.to_string());
            w.write_record(["year", "cell_id", "crop", "abundance"]).map_err(io)?;
            for (year, cells) in &by_year {
                for (cell, crops) in cells {
                    for (crop, a) in crops {
                        w.write_record([year.to_string(), cell.clone(), crop.clone(), a.to_string()])
                            .map_err(io)?;
                    }
                }
            }
            w.flush()?;
            Ok(())
        })?;
        st.write("abundances.csv", bytes)?;
    }

    let filtered = filter_cropland(&panel, cfg.study.cropland_threshold)?;
    let bytes = csv_bytes(|buf| Ok(write_panel(&filtered, buf)?))?;
    st.write("panel.csv", bytes)?;
    eprintln!(
        "ingest: {} of {} cells pass the cropland filter",
        filtered.cells.len(),
        panel.cells.len()
    );
    st.finish()
}

fn cmd_practices(cfg: &RunConfig) -> Result<StageOutcome, CliError> {
    let mut st = Stage::new(cfg, Command::Practices)?;
    let panel_path = st.artifact("panel.csv", "ingest")?;
    let panel = read_panel(fs::File::open(&panel_path)?, &{
        let mut rdr = csv::Reader::from_path(&panel_path).map_err(|e| CliError::Data(e.to_string()))?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::Data(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        Schema::canonical_from_header(&header)
    })?;
    let majors = panel.major_crops(cfg.study.major_crop_min_median);
    let (table, records, dropped) = build_cross_section(&panel, cfg.treatment, &majors)?;
    for d in &dropped {
        eprintln!("practices: {}", d.detail);
    }
    let bytes = csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        let io = |e: csv::Error| CliError::Data(e.to_string());
        w.write_record(["cell_id", "year", "shannon_h", "rotation_delta"]).map_err(io)?;
        for r in &records {
            w.write_record([
                r.cell_id.clone(),
                r.year.to_string(),
                r.shannon_h.to_string(),
                r.rotation_delta.map(|d| d.to_string()).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    })?;
    st.write(&format!("practices_{}.csv", st.t()), bytes)?;
    let bytes = csv_bytes(|buf| Ok(table.write_csv(buf, &[])?))?;
    st.write(&format!("cross_section_{}.csv", st.t()), bytes)?;
    st.finish()
}

fn cmd_simulate(cfg: &RunConfig) -> Result<StageOutcome, CliError> {
    let mut st = Stage::new(cfg, Command::Simulate)?;
    let spec = SyntheticSpec {
        seed: cfg.seed(),
        ..cfg.simulate.clone()
    };
    let data = generate_plm(&spec)?;
    let bytes = csv_bytes(|buf| Ok(data.write_csv(buf)?))?;
    st.write(&format!("cross_section_{}.csv", st.t()), bytes)?;
    let oracle = serde_json::json!({
        "spec": spec,
        "ate": data.true_cate.iter().sum::<f64>() / data.true_cate.len() as f64,
    });
    st.write(
        &format!("oracle_{}.json", st.t()),
        serde_json::to_string_pretty(&oracle).expect("oracle serializes") + "\n",
    )?;
    st.finish()
}

/// Cross-section of the chosen practice: explicit input, else the
/// `practices` or `simulate` output.
fn cross_section_input(st: &mut Stage) -> Result<CrossSectionTable, CliError> {
    let path = match &st.cfg.input.cross_section {
        Some(p) => {
            st.input(p)?;
            p.clone()
        }
        None => {
            let name = format!("cross_section_{}.csv", st.t());
            st.artifact(&name, "practices")?
        }
    };
    Ok(CrossSectionTable::load(&path)?)
}

fn cmd_fit(cfg: &RunConfig) -> Result<StageOutcome, CliError> {
    let mut st = Stage::new(cfg, Command::Fit)?;
    let t = st.t();
    let table = cross_section_input(&mut st)?;
    table.validate()?;
    let (estimation, propensity) = trim_table(&table, &cfg.propensity_spec(), cfg.overlap.low, cfg.overlap.high)?;
    eprintln!("fit: {} of {} units kept after trimming", estimation.len(), table.len());
    let ids: Vec<String> = table.rows.iter().map(|r| r.cell_id.clone()).collect();
    let bytes = csv_bytes(|buf| Ok(propensity.write_csv(&ids, buf)?))?;
    st.write(&format!("propensity_{t}.csv"), bytes)?;

    let fit = fit_dml_table(&estimation, &cfg.dml_config())?;
    let cates = fit.cates.clone();
    let bytes = csv_bytes(|buf| Ok(estimation.write_csv(buf, &[])?))?;
    st.write(&format!("estimation_{t}.csv"), bytes)?;
    let bytes = csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        let io = |e: csv::Error| CliError::Data(e.to_string());
        w.write_record(["cell_id", "cate"]).map_err(io)?;
        for (row, c) in estimation.rows.iter().zip(&cates) {
            w.write_record([row.cell_id.clone(), c.to_string()]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    })?;
    st.write(&format!("cates_{t}.csv"), bytes)?;
    st.write(&format!("model_{t}.json"), fit.model.to_json()? + "\n")?;
    if let Some(report) = &fit.model.first_stage {
        st.write(
            &format!("first_stage_{t}.json"),
            serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        )?;
    }
    eprintln!(
        "fit: ATE {:.4} (95% CI {:.4} to {:.4})",
        fit.model.ate, fit.model.ate_ci.0, fit.model.ate_ci.1
    );
    st.finish()
}

fn fitted(st: &mut Stage) -> Result<(CateModel, CrossSectionTable, Vec<f64>), CliError> {
    let t = st.t();
    let model_path = st.artifact(&format!("model_{t}.json"), "fit")?;
    let est_path = st.artifact(&format!("estimation_{t}.csv"), "fit")?;
    let cates_path = st.artifact(&format!("cates_{t}.csv"), "fit")?;
    let model = CateModel::from_json(&fs::read_to_string(model_path)?)?;
    let table = CrossSectionTable::load(&est_path)?;
    let mut rdr = csv::Reader::from_path(&cates_path).map_err(|e| CliError::Data(e.to_string()))?;
    let mut cates = Vec::with_capacity(table.len());
    for (k, rec) in rdr.deserialize::<(String, f64)>().enumerate() {
        let (id, cate) = rec.map_err(|e| CliError::Data(format!("{}: {e}", cates_path.display())))?;
        if table.rows.get(k).map(|r| &r.cell_id) != Some(&id) {
            return Err(CliError::Data(format!("{} does not match the estimation table", cates_path.display())));
        }
        cates.push(cate);
    }
    if cates.len() != table.len() {
        return Err(CliError::Data(format!("{} does not match the estimation table", cates_path.display())));
    }
    Ok((model, table, cates))
}

fn cmd_interpret(cfg: &RunConfig) -> Result<StageOutcome, CliError> {
    let mut st = Stage::new(cfg, Command::Interpret)?;
    let t = st.t();
    let (_, table, cates) = fitted(&mut st)?;
    let x = table.feature_matrix();
    let tree = interpret_tree(
        x.view(),
        &table.feature_names,
        &cates,
        cfg.interpret.depth,
        cfg.interpret.min_leaf,
    )?;
    st.write(&format!("tree_{t}.txt"), tree.render_text())?;
    st.write(&format!("tree_{t}.json"), tree.to_json() + "\n")?;
    st.finish()
}

fn cmd_report(cfg: &RunConfig) -> Result<StageOutcome, CliError> {
    let mut st = Stage::new(cfg, Command::Report)?;
    let t = st.t();
    let (model, table, cates) = fitted(&mut st)?;
    let x = table.feature_matrix();
    let map = SuitabilityMap::build(&table, &cates)?;
    for p in export_map(&map, &st.out.clone(), &format!("suitability_map_{t}"))? {
        st.written(p);
    }
    let summary = RunSummary::build(t, &model, x.view(), &cates, cfg.report.histogram_bins)?;
    st.write(&format!("summary_{t}.json"), summary.to_json() + "\n")?;
    let bytes = csv_bytes(|buf| Ok(write_feature_pairs(buf, x.view(), &table.feature_names, &cates)?))?;
    st.write(&format!("feature_pairs_{t}.csv"), bytes)?;
    if let Some(shift) = &cfg.report.shift {
        let report = counterfactual_shift(&model, x.view(), shift)?;
        st.write(
            &format!("shift_{t}.json"),
            serde_json::to_string_pretty(&report).expect("shift serializes") + "\n",
        )?;
        if report.extrapolating {
            eprintln!(
                "report: {:.1}% of shifted units leave the observed feature range",
                100.0 * report.flagged_fraction
            );
        }
    }
    st.finish()
}

/// Runs one stage with an already merged configuration.
pub fn run_stage(command: Command, cfg: &RunConfig) -> Result<StageOutcome, CliError> {
    cfg.validate()?;
    match command {
        Command::Ingest => cmd_ingest(cfg),
        Command::Practices => cmd_practices(cfg),
        Command::Fit => cmd_fit(cfg),
        Command::Interpret => cmd_interpret(cfg),
        Command::Report => cmd_report(cfg),
        Command::Simulate => cmd_simulate(cfg),
    }
}

pub fn execute(cli: &Cli) -> Result<StageOutcome, CliError> {
    let cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    }
    .merge(&cli.common);
    if let Some(n) = cfg.threads {
        // fails only if a pool exists already, which is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    run_stage(cli.command, &cfg)
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            println!("{}", outcome.manifest_path.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
