//! Gridded panel data model: ingestion, cropland filter, temporal aggregation.
//!
//! A panel holds one record per `(cell, year)`. Estimation works on a
//! [`CrossSectionTable`], one row per cell, obtained by averaging the panel
//! over the study period.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default side length of a grid cell, in meters.
pub const DEFAULT_CELL_SIZE_M: f64 = 500.0;

/// Tolerance on the per-record abundance sum.
pub const ABUNDANCE_SUM_TOLERANCE: f64 = 1e-9;

/// Prefix used for crop abundance columns in the canonical panel format.
pub const ABUNDANCE_PREFIX: &str = "abundance:";
/// Prefix used for environment columns in the canonical panel format.
pub const ENVIRONMENT_PREFIX: &str = "env:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub cell_id: String,
    pub centroid_lon: f64,
    pub centroid_lat: f64,
    pub cell_size_m: f64,
}

impl GridCell {
    pub fn new(cell_id: impl Into<String>, lon: f64, lat: f64, cell_size_m: f64) -> Self {
        Self {
            cell_id: cell_id.into(),
            centroid_lon: lon,
            centroid_lat: lat,
            cell_size_m,
        }
    }

    /// Axis-aligned bounds `(xmin, ymin, xmax, ymax)` in the planar CRS of the centroid.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let h = self.cell_size_m / 2.0;
        (
            self.centroid_lon - h,
            self.centroid_lat - h,
            self.centroid_lon + h,
            self.centroid_lat + h,
        )
    }

    pub fn area(&self) -> f64 {
        self.cell_size_m * self.cell_size_m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub cell_id: String,
    pub year: i32,
    /// Crop name to fraction of the cell area.
    pub abundances: BTreeMap<String, f64>,
    pub environment: BTreeMap<String, f64>,
    pub outcome: Option<f64>,
}

impl PanelRecord {
    pub fn total_abundance(&self) -> f64 {
        self.abundances.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PanelDataset {
    pub cells: Vec<GridCell>,
    pub records: Vec<PanelRecord>,
    pub study_years: Vec<i32>,
}

/// One row of the estimation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSection {
    pub cell_id: String,
    pub features: Vec<f64>,
    pub treatment_raw: f64,
    /// Binary treatment; `None` until the raw treatment is binarized.
    pub treatment: Option<u8>,
    pub outcome: f64,
}

/// Rows sharing one feature layout. `cells[i]` locates `rows[i]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CrossSectionTable {
    pub feature_names: Vec<String>,
    pub rows: Vec<CrossSection>,
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiagnosticCode {
    MissingColumn,
    MalformedNumber,
    DuplicateRecord,
    YearOutOfRange,
    UnknownCell,
    MissingOutcome,
    InconsistentCell,
}

impl DiagnosticCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DiagnosticCode::MissingColumn => "MISSING_COLUMN",
            DiagnosticCode::MalformedNumber => "MALFORMED_NUMBER",
            DiagnosticCode::DuplicateRecord => "DUPLICATE_RECORD",
            DiagnosticCode::YearOutOfRange => "YEAR_OUT_OF_RANGE",
            DiagnosticCode::UnknownCell => "UNKNOWN_CELL",
            DiagnosticCode::MissingOutcome => "MISSING_OUTCOME",
            DiagnosticCode::InconsistentCell => "INCONSISTENT_CELL",
        }
    }
}

/// Row-level finding. `row` is the 1-based data row (the header is row 0);
/// cell-level findings that are not tied to a row use row 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub row: usize,
    pub code: DiagnosticCode,
    pub detail: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row={} code={} detail={}", self.row, self.code.as_str(), self.detail)
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("{} row(s) rejected; first: {}", .0.len(), .0[0])]
    Rejected(Vec<Diagnostic>),
    #[error("duplicate record for cell `{cell}` year {year}")]
    DuplicateRecord { cell: String, year: i32 },
    #[error("record references unknown cell `{0}`")]
    UnknownCell(String),
    #[error("no cell survives the filter")]
    EmptyResult,
    #[error("cell `{cell}` has {years} year(s) of data; at least 2 are required")]
    InconsistentYears { cell: String, years: usize },
    #[error("treatment series missing for cell `{0}`")]
    MissingTreatment(String),
    #[error("treatment of row `{0}` has not been binarized")]
    UnsetTreatment(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    /// Diagnostics carried by this error, for reporting on standard error.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        match self {
            DataError::Rejected(d) => d.clone(),
            DataError::MissingColumn(c) => vec![Diagnostic {
                row: 0,
                code: DiagnosticCode::MissingColumn,
                detail: c.clone(),
            }],
            _ => Vec::new(),
        }
    }
}

/// Explicit mapping from logical fields to column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub cell_id: String,
    pub year: String,
    pub outcome: String,
    pub lon: String,
    pub lat: String,
    /// Optional per-row cell size column; `default_cell_size_m` applies otherwise.
    #[serde(default)]
    pub cell_size: Option<String>,
    #[serde(default = "default_cell_size")]
    pub default_cell_size_m: f64,
    /// Crop name to column.
    pub abundance_columns: BTreeMap<String, String>,
    /// Environment feature name to column.
    pub environment_columns: BTreeMap<String, String>,
    /// Inclusive `(first, last)` year bounds.
    #[serde(default)]
    pub study_period: Option<(i32, i32)>,
}

fn default_cell_size() -> f64 {
    DEFAULT_CELL_SIZE_M
}

impl Schema {
    /// Schema of the canonical panel format written by [`write_panel`]:
    /// fixed key columns plus `abundance:<crop>` and `env:<feature>` columns.
    pub fn canonical_from_header(header: &[String]) -> Self {
        let mut abundance_columns = BTreeMap::new();
        let mut environment_columns = BTreeMap::new();
        for col in header {
            if let Some(crop) = col.strip_prefix(ABUNDANCE_PREFIX) {
                abundance_columns.insert(crop.to_string(), col.clone());
            } else if let Some(feat) = col.strip_prefix(ENVIRONMENT_PREFIX) {
                environment_columns.insert(feat.to_string(), col.clone());
            }
        }
        Self {
            cell_id: "cell_id".into(),
            year: "year".into(),
            outcome: "outcome".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            cell_size: Some("cell_size_m".into()),
            default_cell_size_m: DEFAULT_CELL_SIZE_M,
            abundance_columns,
            environment_columns,
            study_period: None,
        }
    }
}

/// Reads a delimited panel file.
pub fn load_panel(path: impl AsRef<Path>, schema: &Schema) -> Result<PanelDataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_panel(file, schema)
}

/// Reads the canonical panel format, inferring abundance and environment
/// columns from their prefixes.
pub fn load_canonical_panel(path: impl AsRef<Path>) -> Result<PanelDataset, DataError> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    drop(rdr);
    let schema = Schema::canonical_from_header(&header);
    load_panel(path, &schema)
}

fn column_index(header: &csv::StringRecord, name: &str) -> Result<usize, DataError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError::MissingColumn(name.to_string()))
}

fn parse_number(raw: &str) -> Option<f64> {
    raw.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn read_panel<R: Read>(reader: R, schema: &Schema) -> Result<PanelDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();

    let cell_col = column_index(&header, &schema.cell_id)?;
    let year_col = column_index(&header, &schema.year)?;
    let outcome_col = column_index(&header, &schema.outcome)?;
    let lon_col = column_index(&header, &schema.lon)?;
    let lat_col = column_index(&header, &schema.lat)?;
    let size_col = match &schema.cell_size {
        Some(c) => Some(column_index(&header, c)?),
        None => None,
    };
    let abundance_cols = schema
        .abundance_columns
        .iter()
        .map(|(crop, col)| Ok((crop.clone(), column_index(&header, col)?)))
        .collect::<Result<Vec<_>, DataError>>()?;
    let environment_cols = schema
        .environment_columns
        .iter()
        .map(|(feat, col)| Ok((feat.clone(), column_index(&header, col)?)))
        .collect::<Result<Vec<_>, DataError>>()?;

    let mut diagnostics = Vec::new();
    let mut records = Vec::new();
    let mut cells: BTreeMap<String, GridCell> = BTreeMap::new();
    let mut seen: BTreeMap<(String, i32), usize> = BTreeMap::new();

    for (i, result) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = result?;
        let field = |idx: usize| rec.get(idx).unwrap_or("");
        let mut bad = |code, detail: String| {
            diagnostics.push(Diagnostic { row, code, detail });
        };

        let cell_id = field(cell_col).to_string();
        if cell_id.is_empty() {
            bad(DiagnosticCode::MalformedNumber, "empty cell_id".into());
            continue;
        }
        let year = match field(year_col).parse::<i32>() {
            Ok(y) => y,
            Err(_) => {
                bad(
                    DiagnosticCode::MalformedNumber,
                    format!("year `{}` is not an integer", field(year_col)),
                );
                continue;
            }
        };
        if let Some((first, last)) = schema.study_period {
            if year < first || year > last {
                bad(
                    DiagnosticCode::YearOutOfRange,
                    format!("year {year} outside study period {first}..={last}"),
                );
                continue;
            }
        }

        let mut row_ok = true;
        let number_failed = std::cell::Cell::new(false);
        let number = |col: usize, what: &str, bad: &mut dyn FnMut(DiagnosticCode, String)| {
            match parse_number(field(col)) {
                Some(v) => Some(v),
                None => {
                    bad(
                        DiagnosticCode::MalformedNumber,
                        format!("{what} `{}` is not a finite number", field(col)),
                    );
                    number_failed.set(true);
                    None
                }
            }
        };

        let lon = number(lon_col, "lon", &mut bad);
        let lat = number(lat_col, "lat", &mut bad);
        let size = match size_col {
            Some(c) => number(c, "cell_size_m", &mut bad),
            None => Some(schema.default_cell_size_m),
        };

        let mut abundances = BTreeMap::new();
        for (crop, col) in &abundance_cols {
            if let Some(v) = number(*col, &format!("abundance {crop}"), &mut bad) {
                if !(0.0..=1.0).contains(&v) {
                    bad(
                        DiagnosticCode::MalformedNumber,
                        format!("abundance {crop} = {v} outside [0, 1]"),
                    );
                    row_ok = false;
                }
                abundances.insert(crop.clone(), v);
            }
        }
        let total: f64 = abundances.values().sum();
        if row_ok && total > 1.0 + ABUNDANCE_SUM_TOLERANCE {
            bad(
                DiagnosticCode::MalformedNumber,
                format!("abundances sum to {total} > 1"),
            );
            row_ok = false;
        }

        let mut environment = BTreeMap::new();
        for (feat, col) in &environment_cols {
            if let Some(v) = number(*col, &format!("environment {feat}"), &mut bad) {
                environment.insert(feat.clone(), v);
            }
        }

        let outcome_raw = field(outcome_col);
        let outcome = if outcome_raw.is_empty() {
            None
        } else {
            match parse_number(outcome_raw) {
                Some(v) => Some(v),
                None => {
                    bad(
                        DiagnosticCode::MalformedNumber,
                        format!("outcome `{outcome_raw}` is not a finite number"),
                    );
                    row_ok = false;
                    None
                }
            }
        };

        if let Some(size) = size {
            if size <= 0.0 {
                bad(
                    DiagnosticCode::MalformedNumber,
                    format!("cell_size_m = {size} must be positive"),
                );
                row_ok = false;
            }
        }
        if !row_ok || number_failed.get() {
            continue;
        }
        let (lon, lat, size) = (lon.unwrap(), lat.unwrap(), size.unwrap());

        if let Some(first_row) = seen.insert((cell_id.clone(), year), row) {
            bad(
                DiagnosticCode::DuplicateRecord,
                format!("cell {cell_id} year {year} already given on row {first_row}"),
            );
            continue;
        }

        let cell = GridCell::new(cell_id.clone(), lon, lat, size);
        match cells.get(&cell_id) {
            Some(existing) if *existing != cell => {
                bad(
                    DiagnosticCode::InconsistentCell,
                    format!("cell {cell_id} geometry differs from an earlier row"),
                );
                continue;
            }
            Some(_) => {}
            None => {
                cells.insert(cell_id.clone(), cell);
            }
        }

        records.push(PanelRecord {
            cell_id,
            year,
            abundances,
            environment,
            outcome,
        });
    }

    if !diagnostics.is_empty() {
        return Err(DataError::Rejected(diagnostics));
    }
    PanelDataset::new(cells.into_values().collect(), records)
}

impl PanelDataset {
    /// Validates the dataset invariants and derives the study years.
    pub fn new(cells: Vec<GridCell>, mut records: Vec<PanelRecord>) -> Result<Self, DataError> {
        let mut ids = BTreeSet::new();
        for c in &cells {
            if !ids.insert(c.cell_id.as_str()) {
                return Err(DataError::InvalidArgument(format!(
                    "duplicate cell id `{}`",
                    c.cell_id
                )));
            }
            if !(c.cell_size_m > 0.0) {
                return Err(DataError::InvalidArgument(format!(
                    "cell `{}` has non-positive size",
                    c.cell_id
                )));
            }
        }
        let mut keys = BTreeSet::new();
        for r in &records {
            if !ids.contains(r.cell_id.as_str()) {
                return Err(DataError::UnknownCell(r.cell_id.clone()));
            }
            if !keys.insert((r.cell_id.as_str(), r.year)) {
                return Err(DataError::DuplicateRecord {
                    cell: r.cell_id.clone(),
                    year: r.year,
                });
            }
        }
        records.sort_by(|a, b| a.cell_id.cmp(&b.cell_id).then(a.year.cmp(&b.year)));
        let study_years: BTreeSet<i32> = records.iter().map(|r| r.year).collect();
        let mut cells = cells;
        cells.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
        Ok(Self {
            cells,
            records,
            study_years: study_years.into_iter().collect(),
        })
    }

    /// Records of one cell, ordered by year.
    pub fn cell_records<'a>(&'a self, cell_id: &'a str) -> impl Iterator<Item = &'a PanelRecord> + 'a {
        self.records.iter().filter(move |r| r.cell_id == cell_id)
    }

    /// Records grouped by cell, each group ordered by year.
    pub fn by_cell(&self) -> BTreeMap<&str, Vec<&PanelRecord>> {
        let mut out: BTreeMap<&str, Vec<&PanelRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.cell_id.as_str()).or_default().push(r);
        }
        out
    }

    pub fn cell(&self, cell_id: &str) -> Option<&GridCell> {
        self.cells
            .binary_search_by(|c| c.cell_id.as_str().cmp(cell_id))
            .ok()
            .map(|i| &self.cells[i])
    }

    /// Union of crop names across records.
    pub fn crops(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().flat_map(|r| r.abundances.keys()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn environment_features(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().flat_map(|r| r.environment.keys()).collect();
        set.into_iter().cloned().collect()
    }

    /// Cell-ids with their period-mean total abundance.
    pub fn mean_total_abundance(&self) -> BTreeMap<String, f64> {
        self.by_cell()
            .into_iter()
            .map(|(id, recs)| {
                let mean = recs.iter().map(|r| r.total_abundance()).sum::<f64>() / recs.len() as f64;
                (id.to_string(), mean)
            })
            .collect()
    }

    /// Crops whose median abundance over all cell-years is at least `min_median`.
    pub fn major_crops(&self, min_median: f64) -> Vec<String> {
        self.crops()
            .into_iter()
            .filter(|crop| {
                let mut v: Vec<f64> = self
                    .records
                    .iter()
                    .map(|r| r.abundances.get(crop).copied().unwrap_or(0.0))
                    .collect();
                median(&mut v).is_some_and(|m| m >= min_median)
            })
            .collect()
    }
}

/// Median with the mean of the two central order statistics for even lengths.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Keeps cells whose period-mean total abundance is at least `threshold`.
pub fn filter_cropland(panel: &PanelDataset, threshold: f64) -> Result<PanelDataset, DataError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(DataError::InvalidArgument(format!(
            "cropland threshold {threshold} outside [0, 1]"
        )));
    }
    let keep: BTreeSet<String> = panel
        .mean_total_abundance()
        .into_iter()
        .filter(|(_, mean)| *mean >= threshold)
        .map(|(id, _)| id)
        .collect();
    if keep.is_empty() {
        return Err(DataError::EmptyResult);
    }
    let cells = panel
        .cells
        .iter()
        .filter(|c| keep.contains(&c.cell_id))
        .cloned()
        .collect();
    let records = panel
        .records
        .iter()
        .filter(|r| keep.contains(&r.cell_id))
        .cloned()
        .collect();
    PanelDataset::new(cells, records)
}

/// How a per-year treatment series collapses to one value per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub table: CrossSectionTable,
    /// Cells left out because a year lacked an outcome.
    pub dropped: Vec<Diagnostic>,
}

/// Feature name of a crop-abundance control.
pub fn abundance_feature(crop: &str) -> String {
    format!("{ABUNDANCE_PREFIX}{crop}")
}

/// Averages each cell over the study period.
///
/// Features are the environment means (sorted by name) followed by the mean
/// abundance of each crop in `major_crops`. The raw treatment is the sum or
/// mean of the cell's entry in `treatment_series`.
pub fn aggregate_temporal(
    panel: &PanelDataset,
    treatment_series: &BTreeMap<String, Vec<f64>>,
    kind: AggregationKind,
    major_crops: &[String],
) -> Result<Aggregation, DataError> {
    let env_names = panel.environment_features();
    let mut feature_names: Vec<String> = env_names.clone();
    feature_names.extend(major_crops.iter().map(|c| abundance_feature(c)));

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut dropped = Vec::new();

    for (cell_id, recs) in panel.by_cell() {
        if recs.len() < 2 {
            return Err(DataError::InconsistentYears {
                cell: cell_id.to_string(),
                years: recs.len(),
            });
        }
        let series = treatment_series
            .get(cell_id)
            .ok_or_else(|| DataError::MissingTreatment(cell_id.to_string()))?;
        if series.is_empty() {
            return Err(DataError::MissingTreatment(cell_id.to_string()));
        }
        if let Some(missing) = recs.iter().find(|r| r.outcome.is_none()) {
            dropped.push(Diagnostic {
                row: 0,
                code: DiagnosticCode::MissingOutcome,
                detail: format!("cell {cell_id} dropped: no outcome in {}", missing.year),
            });
            continue;
        }

        let n = recs.len() as f64;
        let mut features = Vec::with_capacity(feature_names.len());
        for name in &env_names {
            let mut sum = 0.0;
            for r in &recs {
                match r.environment.get(name) {
                    Some(v) => sum += v,
                    None => {
                        return Err(DataError::Malformed(format!(
                            "cell {cell_id} year {} lacks environment feature {name}",
                            r.year
                        )))
                    }
                }
            }
            features.push(sum / n);
        }
        for crop in major_crops {
            let sum: f64 = recs
                .iter()
                .map(|r| r.abundances.get(crop).copied().unwrap_or(0.0))
                .sum();
            features.push(sum / n);
        }
        let outcome = recs.iter().map(|r| r.outcome.unwrap()).sum::<f64>() / n;
        let treatment_raw = match kind {
            AggregationKind::Sum => series.iter().sum(),
            AggregationKind::Mean => series.iter().sum::<f64>() / series.len() as f64,
        };

        let cell = panel
            .cell(cell_id)
            .ok_or_else(|| DataError::UnknownCell(cell_id.to_string()))?
            .clone();
        rows.push(CrossSection {
            cell_id: cell_id.to_string(),
            features,
            treatment_raw,
            treatment: None,
            outcome,
        });
        cells.push(cell);
    }

    if rows.is_empty() {
        return Err(DataError::EmptyResult);
    }
    Ok(Aggregation {
        table: CrossSectionTable {
            feature_names,
            rows,
            cells,
        },
        dropped,
    })
}

/// Writes a panel in the canonical format read by [`load_canonical_panel`].
pub fn write_panel<W: Write>(panel: &PanelDataset, writer: W) -> Result<(), DataError> {
    let crops = panel.crops();
    let envs = panel.environment_features();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "cell_id".to_string(),
        "lon".into(),
        "lat".into(),
        "cell_size_m".into(),
        "year".into(),
        "outcome".into(),
    ];
    header.extend(envs.iter().map(|e| format!("{ENVIRONMENT_PREFIX}{e}")));
    header.extend(crops.iter().map(|c| format!("{ABUNDANCE_PREFIX}{c}")));
    w.write_record(&header)?;
    for r in &panel.records {
        let cell = panel
            .cell(&r.cell_id)
            .ok_or_else(|| DataError::UnknownCell(r.cell_id.clone()))?;
        let mut rec = vec![
            r.cell_id.clone(),
            cell.centroid_lon.to_string(),
            cell.centroid_lat.to_string(),
            cell.cell_size_m.to_string(),
            r.year.to_string(),
            r.outcome.map(|v| v.to_string()).unwrap_or_default(),
        ];
        for e in &envs {
            rec.push(r.environment.get(e).map(|v| v.to_string()).unwrap_or_default());
        }
        for c in &crops {
            rec.push(r.abundances.get(c).copied().unwrap_or(0.0).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

const RESERVED_COLUMNS: [&str; 7] = [
    "cell_id",
    "lon",
    "lat",
    "cell_size_m",
    "outcome",
    "treatment_raw",
    "treatment",
];

/// Oracle column emitted by the synthetic generators; never read as a feature.
pub const TRUE_CATE_COLUMN: &str = "true_cate";

impl CrossSectionTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    pub fn feature_matrix(&self) -> Array2<f64> {
        let d = self.n_features();
        let mut x = Array2::zeros((self.rows.len(), d));
        for (i, row) in self.rows.iter().enumerate() {
            for (j, v) in row.features.iter().enumerate() {
                x[[i, j]] = *v;
            }
        }
        x
    }

    pub fn outcomes(&self) -> Array1<f64> {
        self.rows.iter().map(|r| r.outcome).collect()
    }

    pub fn raw_treatments(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.treatment_raw).collect()
    }

    /// Binary treatments as reals; errors if any row is not binarized.
    pub fn treatments(&self) -> Result<Array1<f64>, DataError> {
        self.rows
            .iter()
            .map(|r| {
                r.treatment
                    .map(f64::from)
                    .ok_or_else(|| DataError::UnsetTreatment(r.cell_id.clone()))
            })
            .collect()
    }

    /// Sub-table with the given row indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            cells: indices.iter().map(|&i| self.cells[i].clone()).collect(),
        }
    }

    /// Checks the table invariants: layout, finiteness, unique cells.
    pub fn validate(&self) -> Result<(), DataError> {
        let names: BTreeSet<&String> = self.feature_names.iter().collect();
        if names.len() != self.feature_names.len() {
            return Err(DataError::Malformed("duplicate feature names".into()));
        }
        if self.cells.len() != self.rows.len() {
            return Err(DataError::Malformed("cells and rows differ in length".into()));
        }
        let mut ids = BTreeSet::new();
        for row in &self.rows {
            if !ids.insert(row.cell_id.as_str()) {
                return Err(DataError::Malformed(format!("duplicate cell `{}`", row.cell_id)));
            }
            if row.features.len() != self.feature_names.len() {
                return Err(DataError::Malformed(format!(
                    "row `{}` has {} features, expected {}",
                    row.cell_id,
                    row.features.len(),
                    self.feature_names.len()
                )));
            }
            if !row.features.iter().all(|v| v.is_finite())
                || !row.outcome.is_finite()
                || !row.treatment_raw.is_finite()
            {
                return Err(DataError::Malformed(format!(
                    "row `{}` has a non-finite value",
                    row.cell_id
                )));
            }
        }
        Ok(())
    }

    /// Writes the delimited cross-section format. `extra` columns (such as
    /// the synthetic `true_cate`) are appended after the features.
    pub fn write_csv<W: Write>(
        &self,
        writer: W,
        extra: &[(&str, &[f64])],
    ) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = RESERVED_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(self.feature_names.iter().cloned());
        header.extend(extra.iter().map(|(name, _)| name.to_string()));
        w.write_record(&header)?;
        for (i, (row, cell)) in self.rows.iter().zip(&self.cells).enumerate() {
            let mut rec = vec![
                row.cell_id.clone(),
                cell.centroid_lon.to_string(),
                cell.centroid_lat.to_string(),
                cell.cell_size_m.to_string(),
                row.outcome.to_string(),
                row.treatment_raw.to_string(),
                row.treatment.map(|t| t.to_string()).unwrap_or_default(),
            ];
            rec.extend(row.features.iter().map(|v| v.to_string()));
            rec.extend(extra.iter().map(|(_, vals)| vals[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let idx: Vec<usize> = RESERVED_COLUMNS
            .iter()
            .map(|c| column_index(&header, c))
            .collect::<Result<_, _>>()?;
        let feature_cols: Vec<(usize, String)> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| !RESERVED_COLUMNS.contains(h) && *h != TRUE_CATE_COLUMN)
            .map(|(i, h)| (i, h.to_string()))
            .collect();

        let mut table = CrossSectionTable {
            feature_names: feature_cols.iter().map(|(_, n)| n.clone()).collect(),
            ..Default::default()
        };
        let mut diagnostics = Vec::new();
        for (i, result) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = result?;
            let get = |j: usize| rec.get(j).unwrap_or("");
            let mut num = |j: usize, what: &str| -> Option<f64> {
                let v = parse_number(get(j));
                if v.is_none() {
                    diagnostics.push(Diagnostic {
                        row,
                        code: DiagnosticCode::MalformedNumber,
                        detail: format!("{what} `{}` is not a finite number", get(j)),
                    });
                }
                v
            };
            let lon = num(idx[1], "lon");
            let lat = num(idx[2], "lat");
            let size = num(idx[3], "cell_size_m");
            let outcome = num(idx[4], "outcome");
            let treatment_raw = num(idx[5], "treatment_raw");
            let features: Vec<Option<f64>> =
                feature_cols.iter().map(|(j, name)| num(*j, name)).collect();
            let treatment = match get(idx[6]) {
                "" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => {
                    diagnostics.push(Diagnostic {
                        row,
                        code: DiagnosticCode::MalformedNumber,
                        detail: format!("treatment `{other}` is not 0 or 1"),
                    });
                    None
                }
            };
            let (Some(lon), Some(lat), Some(size), Some(outcome), Some(treatment_raw)) =
                (lon, lat, size, outcome, treatment_raw)
            else {
                continue;
            };
            let Some(features) = features.into_iter().collect::<Option<Vec<f64>>>() else {
                continue;
            };
            let cell_id = get(idx[0]).to_string();
            table.cells.push(GridCell::new(cell_id.clone(), lon, lat, size));
            table.rows.push(CrossSection {
                cell_id,
                features,
                treatment_raw,
                treatment,
                outcome,
            });
        }
        if !diagnostics.is_empty() {
            return Err(DataError::Rejected(diagnostics));
        }
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Reads an optional numeric column that is not a feature, such as `true_cate`.
    pub fn read_extra_column<R: Read>(reader: R, column: &str) -> Result<Vec<f64>, DataError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let j = column_index(&header, column)?;
        rdr.records()
            .enumerate()
            .map(|(i, r)| {
                let r = r?;
                parse_number(r.get(j).unwrap_or("")).ok_or_else(|| {
                    DataError::Rejected(vec![Diagnostic {
                        row: i + 1,
                        code: DiagnosticCode::MalformedNumber,
                        detail: format!("{column} is not a finite number"),
                    }])
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema {
            cell_id: "cell".into(),
            year: "year".into(),
            outcome: "npp".into(),
            lon: "x".into(),
            lat: "y".into(),
            cell_size: None,
            default_cell_size_m: 500.0,
            abundance_columns: [("maize".to_string(), "maize".to_string())].into(),
            environment_columns: [("tmax".to_string(), "tmax".to_string())].into(),
            study_period: Some((2010, 2020)),
        }
    }

    const HEADER: &str = "cell,x,y,year,npp,maize,tmax\n";

    #[test]
    fn three_valid_rows_load() {
        let text = format!("{HEADER}A,0,0,2010,600,0.5,14\nB,500,0,2010,610,0.9,15\nA,0,0,2011,700,0.6,14.5\n");
        let panel = read_panel(text.as_bytes(), &schema()).unwrap();
        assert_eq!(panel.records.len(), 3);
        assert_eq!(panel.cells.len(), 2);
        assert_eq!(panel.study_years, vec![2010, 2011]);
    }

    #[test]
    fn abundance_above_one_is_rejected_with_row() {
        let text = format!("{HEADER}A,0,0,2010,600,0.5,14\nB,500,0,2010,610,1.2,15\n");
        let err = read_panel(text.as_bytes(), &schema()).unwrap_err();
        let diags = err.diagnostics();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].row, 2);
        assert_eq!(diags[0].code, DiagnosticCode::MalformedNumber);
        assert!(diags[0].to_string().starts_with("row=2 code=MALFORMED_NUMBER detail="));
    }

    #[test]
    fn duplicate_cell_year_is_rejected() {
        let text = format!("{HEADER}A,0,0,2010,600,0.5,14\nA,0,0,2010,610,0.5,15\n");
        let err = read_panel(text.as_bytes(), &schema()).unwrap_err();
        let diags = err.diagnostics();
        assert_eq!(diags[0].code, DiagnosticCode::DuplicateRecord);
        assert_eq!(diags[0].row, 2);
    }

    #[test]
    fn missing_column_is_reported() {
        let text = "cell,x,y,year,npp,tmax\nA,0,0,2010,600,14\n";
        match read_panel(text.as_bytes(), &schema()) {
            Err(DataError::MissingColumn(c)) => assert_eq!(c, "maize"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn year_outside_period_is_rejected() {
        let text = format!("{HEADER}A,0,0,2009,600,0.5,14\n");
        let err = read_panel(text.as_bytes(), &schema()).unwrap_err();
        assert_eq!(err.diagnostics()[0].code, DiagnosticCode::YearOutOfRange);
    }

    fn record(cell: &str, year: i32, maize: f64, npp: Option<f64>) -> PanelRecord {
        PanelRecord {
            cell_id: cell.into(),
            year,
            abundances: [("maize".to_string(), maize)].into(),
            environment: [("tmax".to_string(), 14.0)].into(),
            outcome: npp,
        }
    }

    fn panel_with_means(means: &[(&str, f64)]) -> PanelDataset {
        let cells = means
            .iter()
            .enumerate()
            .map(|(i, (id, _))| GridCell::new(*id, i as f64 * 500.0, 0.0, 500.0))
            .collect();
        let records = means
            .iter()
            .flat_map(|(id, m)| {
                vec![
                    record(id, 2010, *m, Some(600.0)),
                    record(id, 2011, *m, Some(700.0)),
                ]
            })
            .collect();
        PanelDataset::new(cells, records).unwrap()
    }

    #[test]
    fn cropland_filter_boundary_is_inclusive() {
        let panel = panel_with_means(&[("a", 0.79), ("b", 0.80), ("c", 0.81), ("d", 0.85)]);
        let kept = filter_cropland(&panel, 0.8).unwrap();
        let ids: Vec<&str> = kept.cells.iter().map(|c| c.cell_id.as_str()).collect();
        assert_eq!(ids, vec!["b", "c", "d"]);
        assert_eq!(kept.records.len(), 6);
    }

    #[test]
    fn cropland_filter_drops_empty_cells_and_errors_when_nothing_left() {
        let cells = vec![GridCell::new("z", 0.0, 0.0, 500.0)];
        let records = vec![record("z", 2010, 0.0, Some(1.0)), record("z", 2011, 0.0, Some(1.0))];
        let panel = PanelDataset::new(cells, records).unwrap();
        assert!(matches!(filter_cropland(&panel, 0.8), Err(DataError::EmptyResult)));
    }

    #[test]
    fn cropland_filter_is_idempotent() {
        let panel = panel_with_means(&[("a", 0.5), ("b", 0.9), ("c", 0.95)]);
        let once = filter_cropland(&panel, 0.8).unwrap();
        let twice = filter_cropland(&once, 0.8).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn aggregation_means_and_treatment_kinds() {
        let panel = panel_with_means(&[("a", 0.9)]);
        let series: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![0.6, 0.4])].into();
        let agg = aggregate_temporal(&panel, &series, AggregationKind::Sum, &["maize".into()]).unwrap();
        let row = &agg.table.rows[0];
        assert_eq!(row.outcome, 650.0);
        assert_eq!(row.treatment_raw, 1.0);
        assert_eq!(agg.table.feature_names, vec!["tmax", "abundance:maize"]);
        assert_eq!(row.features[0], 14.0);

        let series: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![0.5, 0.7])].into();
        let agg = aggregate_temporal(&panel, &series, AggregationKind::Mean, &[]).unwrap();
        assert!((agg.table.rows[0].treatment_raw - 0.6).abs() < 1e-15);
    }

    #[test]
    fn aggregation_requires_two_years() {
        let cells = vec![GridCell::new("a", 0.0, 0.0, 500.0)];
        let panel = PanelDataset::new(cells, vec![record("a", 2010, 0.9, Some(1.0))]).unwrap();
        let series: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![1.0])].into();
        assert!(matches!(
            aggregate_temporal(&panel, &series, AggregationKind::Mean, &[]),
            Err(DataError::InconsistentYears { years: 1, .. })
        ));
    }

    #[test]
    fn aggregation_drops_cells_missing_an_outcome() {
        let cells = vec![GridCell::new("a", 0.0, 0.0, 500.0), GridCell::new("b", 1.0, 0.0, 500.0)];
        let records = vec![
            record("a", 2010, 0.9, Some(1.0)),
            record("a", 2011, 0.9, None),
            record("b", 2010, 0.9, Some(1.0)),
            record("b", 2011, 0.9, Some(3.0)),
        ];
        let panel = PanelDataset::new(cells, records).unwrap();
        let series: BTreeMap<String, Vec<f64>> =
            [("a".to_string(), vec![1.0]), ("b".to_string(), vec![2.0])].into();
        let agg = aggregate_temporal(&panel, &series, AggregationKind::Mean, &[]).unwrap();
        assert_eq!(agg.table.len(), 1);
        assert_eq!(agg.table.rows[0].cell_id, "b");
        assert_eq!(agg.dropped.len(), 1);
        assert_eq!(agg.dropped[0].code, DiagnosticCode::MissingOutcome);
    }

    #[test]
    fn identical_years_aggregate_to_the_record_values() {
        let cells = vec![GridCell::new("a", 0.0, 0.0, 500.0)];
        let r = PanelRecord {
            cell_id: "a".into(),
            year: 2010,
            abundances: [("maize".to_string(), 0.3), ("wheat".to_string(), 0.6)].into(),
            environment: [("tmax".to_string(), 0.1), ("prec".to_string(), 731.7)].into(),
            outcome: Some(0.7),
        };
        let records: Vec<PanelRecord> = (2010..2013)
            .map(|y| PanelRecord { year: y, ..r.clone() })
            .collect();
        let panel = PanelDataset::new(cells, records).unwrap();
        let series: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![0.0, 0.0])].into();
        let agg = aggregate_temporal(
            &panel,
            &series,
            AggregationKind::Sum,
            &["maize".into(), "wheat".into()],
        )
        .unwrap();
        // (v + v + v) / 3 is not always v in floating point, so compare bitwise only where exact
        let row = &agg.table.rows[0];
        let expected = [731.7, 0.1, 0.3, 0.6];
        for (got, want) in row.features.iter().zip(expected) {
            assert!((got - want).abs() <= 4.0 * f64::EPSILON * want.abs());
        }
    }

    #[test]
    fn canonical_panel_round_trip() {
        let panel = panel_with_means(&[("a", 0.9), ("b", 0.85)]);
        let mut buf = Vec::new();
        write_panel(&panel, &mut buf).unwrap();
        let header: Vec<String> = String::from_utf8(buf.clone())
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .split(',')
            .map(str::to_string)
            .collect();
        let back = read_panel(buf.as_slice(), &Schema::canonical_from_header(&header)).unwrap();
        assert_eq!(back, panel);
    }

    #[test]
    fn cross_section_csv_round_trip_ignores_oracle_column() {
        let table = CrossSectionTable {
            feature_names: vec!["tmax".into(), "abundance:maize".into()],
            rows: vec![CrossSection {
                cell_id: "a".into(),
                features: vec![14.25, 0.4],
                treatment_raw: 1.5,
                treatment: Some(1),
                outcome: 650.0,
            }],
            cells: vec![GridCell::new("a", 10.0, 20.0, 500.0)],
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf, &[(TRUE_CATE_COLUMN, &[2.0])]).unwrap();
        let back = CrossSectionTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, table);
        let oracle = CrossSectionTable::read_extra_column(buf.as_slice(), TRUE_CATE_COLUMN).unwrap();
        assert_eq!(oracle, vec![2.0]);
    }
}
