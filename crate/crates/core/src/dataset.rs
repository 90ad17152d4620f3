//! Mixed-feature tabular data: CSV ingestion, cleaning, and one-hot encoding.
//!
//! The pipeline is `load_csv -> preprocess -> encode`, producing an
//! [`EncodedDataset`] whose categorical features are stored as category
//! indices into a [`DatasetSchema`]. The one-hot matrix `Z` is derived from
//! those indices on demand, so every row satisfies the one-hot block property
//! by construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Category name given to missing categorical cells.
pub const MISSING_CATEGORY: &str = "<missing>";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("label column not found: {0}")]
    LabelColumnNotFound(String),
    #[error("column {0:?} has no declared kind (declare it or add it to the drop list)")]
    UndeclaredColumn(String),
    #[error("declared column {0:?} is not present in the header")]
    MissingDeclaredColumn(String),
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("numeric column {0:?} has no non-missing values")]
    AllMissing(String),
    #[error("label column has a single class")]
    SingleClass,
    #[error("table has {0} rows, at least 2 are required")]
    TooFewRows(usize),
    #[error("label column contains missing values at row {0}")]
    MissingLabel(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid one-hot row: {0}")]
    InvalidOneHot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numerical,
    Categorical,
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Num(f64),
    Text(String),
    Missing,
}

impl Cell {
    fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    fn text(&self) -> String {
        match self {
            Cell::Num(v) => format_number(*v),
            Cell::Text(s) => s.clone(),
            Cell::Missing => MISSING_CATEGORY.to_string(),
        }
    }
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub cells: Vec<Cell>,
}

/// How labels were binarized. The majority class maps to -1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct LabelMap {
    pub negative: String,
    pub positive: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTable {
    pub columns: Vec<Column>,
    pub label_map: Option<LabelMap>,
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub missing_tokens: Vec<String>,
    pub drop_columns: Vec<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { delimiter: b',', missing_tokens: vec![String::new(), "?".to_string()], drop_columns: Vec::new() }
    }
}

impl RawTable {
    pub fn num_rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.cells.len())
    }

    pub fn label_column(&self) -> Option<&Column> {
        self.columns.iter().find(|c| c.kind == ColumnKind::Label)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }
}

/// Reads a delimited file with a header row.
///
/// Every header column must either be the label column, appear in
/// `column_kinds`, or be listed in `options.drop_columns`.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    column_kinds: &HashMap<String, ColumnKind>,
    options: &CsvOptions,
) -> Result<RawTable, DatasetError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, label_column, column_kinds, options)
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    label_column: &str,
    column_kinds: &HashMap<String, ColumnKind>,
    options: &CsvOptions,
) -> Result<RawTable, DatasetError> {
    let mut rdr =
        csv::ReaderBuilder::new().delimiter(options.delimiter).has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if !header.iter().any(|h| h == label_column) {
        return Err(DatasetError::LabelColumnNotFound(label_column.to_string()));
    }
    for name in column_kinds.keys() {
        if !header.iter().any(|h| h == name) && !options.drop_columns.contains(name) {
            return Err(DatasetError::MissingDeclaredColumn(name.clone()));
        }
    }

    // (header position, column) for kept columns
    let mut kept: Vec<(usize, Column)> = Vec::new();
    for (pos, name) in header.iter().enumerate() {
        if options.drop_columns.contains(name) {
            continue;
        }
        let kind = if name == label_column {
            ColumnKind::Label
        } else {
            *column_kinds.get(name).ok_or_else(|| DatasetError::UndeclaredColumn(name.clone()))?
        };
        kept.push((pos, Column { name: name.clone(), kind, cells: Vec::new() }));
    }

    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        // header is line 1, so data row i sits on line i + 2
        let line = row_idx + 2;
        if record.len() != header.len() {
            return Err(DatasetError::Parse {
                row: line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (pos, col) in kept.iter_mut() {
            let raw = record.get(*pos).unwrap_or("").trim();
            let cell = if options.missing_tokens.iter().any(|t| t == raw) {
                Cell::Missing
            } else {
                match col.kind {
                    ColumnKind::Numerical => match raw.parse::<f64>() {
                        Ok(v) if v.is_finite() => Cell::Num(v),
                        _ => Cell::Missing,
                    },
                    _ => Cell::Text(raw.to_string()),
                }
            };
            col.cells.push(cell);
        }
    }

    Ok(RawTable { columns: kept.into_iter().map(|(_, c)| c).collect(), label_map: None })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Cleans a raw table: median imputation for numbers, an explicit missing
/// category and lowercasing for categoricals, removal of constant columns, and
/// majority-vs-rest label binarization (majority is -1).
pub fn preprocess(table: &RawTable) -> Result<RawTable, DatasetError> {
    let rows = table.num_rows();
    if rows < 2 {
        return Err(DatasetError::TooFewRows(rows));
    }
    let mut columns = Vec::with_capacity(table.columns.len());
    let mut label_map = None;
    for col in &table.columns {
        match col.kind {
            ColumnKind::Numerical => {
                let mut present: Vec<f64> = col
                    .cells
                    .iter()
                    .filter_map(|c| match c {
                        Cell::Num(v) => Some(*v),
                        _ => None,
                    })
                    .collect();
                if present.is_empty() {
                    return Err(DatasetError::AllMissing(col.name.clone()));
                }
                let fill = median(&mut present);
                let cells: Vec<Cell> = col
                    .cells
                    .iter()
                    .map(|c| match c {
                        Cell::Num(v) => Cell::Num(*v),
                        _ => Cell::Num(fill),
                    })
                    .collect();
                let first = match cells[0] {
                    Cell::Num(v) => v,
                    _ => unreachable!(),
                };
                if cells.iter().all(|c| matches!(c, Cell::Num(v) if *v == first)) {
                    continue;
                }
                columns.push(Column { name: col.name.clone(), kind: col.kind, cells });
            }
            ColumnKind::Categorical => {
                let cells: Vec<Cell> = col
                    .cells
                    .iter()
                    .map(|c| match c {
                        Cell::Missing => Cell::Text(MISSING_CATEGORY.to_string()),
                        other => Cell::Text(other.text().to_lowercase()),
                    })
                    .collect();
                let distinct: BTreeSet<String> = cells.iter().map(Cell::text).collect();
                if distinct.len() < 2 {
                    continue;
                }
                columns.push(Column { name: col.name.clone(), kind: col.kind, cells });
            }
            ColumnKind::Label => {
                if let Some(row) = col.cells.iter().position(Cell::is_missing) {
                    return Err(DatasetError::MissingLabel(row));
                }
                let texts: Vec<String> = col.cells.iter().map(Cell::text).collect();
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for t in &texts {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
                if counts.len() < 2 {
                    return Err(DatasetError::SingleClass);
                }
                // BTreeMap iteration is sorted, so ties go to the smallest label.
                let mut majority = "";
                let mut best = 0;
                for (label, &count) in &counts {
                    if count > best {
                        best = count;
                        majority = label;
                    }
                }
                let cells =
                    texts.iter().map(|t| Cell::Text(if t == majority { "-1".into() } else { "1".into() })).collect();
                let map = match &table.label_map {
                    Some(existing) if majority == "-1" => existing.clone(),
                    _ => LabelMap {
                        negative: majority.to_string(),
                        positive: counts.keys().filter(|k| **k != majority).map(|k| k.to_string()).collect(),
                    },
                };
                label_map = Some(map);
                columns.push(Column { name: col.name.clone(), kind: col.kind, cells });
            }
        }
    }
    Ok(RawTable { columns, label_map })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct CategoricalFeature {
    pub name: String,
    /// Sorted category names; the last one is the all-zeros reference.
    pub categories: Vec<String>,
}

impl CategoricalFeature {
    pub fn cardinality(&self) -> usize {
        self.categories.len()
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.categories.binary_search_by(|c| c.as_str().cmp(value)).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct DatasetSchema {
    pub numerical: Vec<String>,
    pub categorical: Vec<CategoricalFeature>,
    pub label: String,
    pub label_map: Option<LabelMap>,
}

impl DatasetSchema {
    /// Builds a schema with generated feature names, mostly for synthetic data.
    pub fn synthetic(n: usize, cardinalities: &[usize]) -> Self {
        Self {
            numerical: (0..n).map(|j| format!("x{j}")).collect(),
            categorical: cardinalities
                .iter()
                .enumerate()
                .map(|(l, &card)| CategoricalFeature {
                    name: format!("z{l}"),
                    categories: (0..card).map(|c| format!("c{c:03}")).collect(),
                })
                .collect(),
            label: "y".to_string(),
            label_map: None,
        }
    }

    pub fn n(&self) -> usize {
        self.numerical.len()
    }

    pub fn m(&self) -> usize {
        self.categorical.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.categorical.iter().map(CategoricalFeature::cardinality).collect()
    }

    /// Width of the one-hot encoding, sum of (cardinality - 1).
    pub fn encoded_width(&self) -> usize {
        self.categorical.iter().map(|f| f.cardinality() - 1).sum()
    }

    /// Column offset of each categorical block inside `Z`.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.m());
        let mut acc = 0;
        for f in &self.categorical {
            offsets.push(acc);
            acc += f.cardinality() - 1;
        }
        offsets
    }

    /// Number of joint categorical assignments, saturating at `u64::MAX`.
    pub fn assignment_count(&self) -> u64 {
        self.categorical.iter().fold(1u64, |acc, f| acc.saturating_mul(f.cardinality() as u64))
    }

    /// Stable hex digest identifying the feature layout.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for name in &self.numerical {
            hasher.update(b"num:");
            hasher.update(name.as_bytes());
            hasher.update([0]);
        }
        for f in &self.categorical {
            hasher.update(b"cat:");
            hasher.update(f.name.as_bytes());
            for c in &f.categories {
                hasher.update([1]);
                hasher.update(c.as_bytes());
            }
            hasher.update([0]);
        }
        let digest = hasher.finalize();
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    /// One-hot encodes category indices into a length-`c` binary row.
    pub fn encode_categories(&self, indices: &[usize]) -> Vec<f64> {
        let mut row = vec![0.0; self.encoded_width()];
        for ((f, off), &k) in self.categorical.iter().zip(self.block_offsets()).zip(indices) {
            if k + 1 < f.cardinality() {
                row[off + k] = 1.0;
            }
        }
        row
    }

    /// Inverse of [`encode_categories`](Self::encode_categories).
    pub fn decode_categories(&self, row: &[f64]) -> Result<Vec<usize>, DatasetError> {
        if row.len() != self.encoded_width() {
            return Err(DatasetError::Dimension(format!(
                "encoded row has {} columns, schema expects {}",
                row.len(),
                self.encoded_width()
            )));
        }
        let mut out = Vec::with_capacity(self.m());
        for (f, off) in self.categorical.iter().zip(self.block_offsets()) {
            let block = &row[off..off + f.cardinality() - 1];
            let mut hot = None;
            for (k, &v) in block.iter().enumerate() {
                if v == 1.0 {
                    if hot.is_some() {
                        return Err(DatasetError::InvalidOneHot(format!(
                            "feature {} has several active columns",
                            f.name
                        )));
                    }
                    hot = Some(k);
                } else if v != 0.0 {
                    return Err(DatasetError::InvalidOneHot(format!("feature {} has non-binary entry {v}", f.name)));
                }
            }
            out.push(hot.unwrap_or(f.cardinality() - 1));
        }
        Ok(out)
    }
}

/// Encoded data. Categorical features are kept as category indices; use
/// [`EncodedDataset::z_row`] / [`EncodedDataset::z_matrix`] for the one-hot view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedDataset {
    pub schema: DatasetSchema,
    /// Row-major `N x n`.
    x: Vec<f64>,
    /// Row-major `N x m` category indices.
    categories: Vec<usize>,
    y: Vec<f64>,
}

impl EncodedDataset {
    pub fn new(schema: DatasetSchema, x: Vec<f64>, categories: Vec<usize>, y: Vec<f64>) -> Result<Self, DatasetError> {
        let rows = y.len();
        if x.len() != rows * schema.n() {
            return Err(DatasetError::Dimension(format!(
                "x has {} entries, expected {rows} x {}",
                x.len(),
                schema.n()
            )));
        }
        if categories.len() != rows * schema.m() {
            return Err(DatasetError::Dimension(format!(
                "categories have {} entries, expected {rows} x {}",
                categories.len(),
                schema.m()
            )));
        }
        if let Some(bad) = y.iter().position(|&v| v != 1.0 && v != -1.0) {
            return Err(DatasetError::Dimension(format!("label at row {bad} is not +-1")));
        }
        let cards = schema.cardinalities();
        for (idx, &k) in categories.iter().enumerate() {
            let l = idx % schema.m().max(1);
            if k >= cards[l] {
                return Err(DatasetError::InvalidOneHot(format!(
                    "row {} feature {l}: category index {k} out of range",
                    idx / schema.m()
                )));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Dimension("non-finite numerical value".into()));
        }
        Ok(Self { schema, x, categories, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let n = self.schema.n();
        &self.x[i * n..(i + 1) * n]
    }

    pub fn categories_row(&self, i: usize) -> &[usize] {
        let m = self.schema.m();
        &self.categories[i * m..(i + 1) * m]
    }

    pub fn z_row(&self, i: usize) -> Vec<f64> {
        self.schema.encode_categories(self.categories_row(i))
    }

    pub fn z_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.z_row(i)).collect()
    }

    pub fn label(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }

    pub fn categories_flat(&self) -> &[usize] {
        &self.categories
    }

    /// Population standard deviation of each numerical column.
    pub fn numerical_stddev(&self) -> Vec<f64> {
        let n = self.schema.n();
        let rows = self.len() as f64;
        (0..n)
            .map(|j| {
                let mean = (0..self.len()).map(|i| self.x_row(i)[j]).sum::<f64>() / rows;
                let var = (0..self.len()).map(|i| (self.x_row(i)[j] - mean).powi(2)).sum::<f64>() / rows;
                var.sqrt()
            })
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut x = Vec::with_capacity(rows.len() * self.schema.n());
        let mut categories = Vec::with_capacity(rows.len() * self.schema.m());
        let mut y = Vec::with_capacity(rows.len());
        for &i in rows {
            x.extend_from_slice(self.x_row(i));
            categories.extend_from_slice(self.categories_row(i));
            y.push(self.y[i]);
        }
        Self { schema: self.schema.clone(), x, categories, y }
    }

    /// Same schema and labels with replaced features. Used by perturbation.
    pub(crate) fn with_features(&self, x: Vec<f64>, categories: Vec<usize>) -> Self {
        debug_assert_eq!(x.len(), self.x.len());
        debug_assert_eq!(categories.len(), self.categories.len());
        Self { schema: self.schema.clone(), x, categories, y: self.y.clone() }
    }

    /// Writes the dataset as CSV with decoded category names.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = self.schema.numerical.clone();
        header.extend(self.schema.categorical.iter().map(|f| f.name.clone()));
        header.push(self.schema.label.clone());
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x_row(i).iter().map(|v| format!("{v}")).collect();
            for (f, &k) in self.schema.categorical.iter().zip(self.categories_row(i)) {
                rec.push(f.categories[k].clone());
            }
            rec.push(format_number(self.y[i]));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl fmt::Display for EncodedDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "EncodedDataset(N={}, n={}, m={}, c={})",
            self.len(),
            self.schema.n(),
            self.schema.m(),
            self.schema.encoded_width()
        )
    }
}

/// Encodes a preprocessed table. Category dictionaries are sorted and the
/// last category of each feature is the all-zeros reference.
pub fn encode(table: &RawTable) -> Result<EncodedDataset, DatasetError> {
    let label_col = table.label_column().ok_or_else(|| DatasetError::LabelColumnNotFound("<label>".into()))?;
    let rows = table.num_rows();

    let numeric: Vec<&Column> = table.columns.iter().filter(|c| c.kind == ColumnKind::Numerical).collect();
    let categorical: Vec<&Column> = table.columns.iter().filter(|c| c.kind == ColumnKind::Categorical).collect();

    let mut features = Vec::with_capacity(categorical.len());
    for col in &categorical {
        let set: BTreeSet<String> = col.cells.iter().map(Cell::text).collect();
        features.push(CategoricalFeature { name: col.name.clone(), categories: set.into_iter().collect() });
    }

    let mut x = Vec::with_capacity(rows * numeric.len());
    let mut cats = Vec::with_capacity(rows * categorical.len());
    let mut y = Vec::with_capacity(rows);
    for i in 0..rows {
        for col in &numeric {
            match &col.cells[i] {
                Cell::Num(v) => x.push(*v),
                _ => {
                    return Err(DatasetError::Parse {
                        row: i,
                        message: format!("column {} not preprocessed (missing value)", col.name),
                    })
                }
            }
        }
        for (col, feat) in categorical.iter().zip(&features) {
            let key = col.cells[i].text();
            cats.push(feat.index_of(&key).expect("dictionary built from the same column"));
        }
        let label = label_col.cells[i].text();
        y.push(match label.as_str() {
            "-1" => -1.0,
            "1" | "+1" => 1.0,
            other => {
                return Err(DatasetError::Parse {
                    row: i,
                    message: format!("label {other:?} is not binarized; run preprocess first"),
                })
            }
        });
    }

    let schema = DatasetSchema {
        numerical: numeric.iter().map(|c| c.name.clone()).collect(),
        categorical: features,
        label: label_col.name.clone(),
        label_map: table.label_map.clone(),
    };
    EncodedDataset::new(schema, x, cats, y)
}

/// Shuffled train/test split. The test side gets `floor(N * test_fraction)` rows.
pub fn split(
    ds: &EncodedDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(EncodedDataset, EncodedDataset), DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::InvalidSplit(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let rows = ds.len();
    if rows < 2 {
        return Err(DatasetError::TooFewRows(rows));
    }
    let test_len = (rows as f64 * test_fraction).floor() as usize;
    if test_len == 0 || test_len == rows {
        return Err(DatasetError::InvalidSplit(format!(
            "fraction {test_fraction} of {rows} rows leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_idx, train_idx) = order.split_at(test_len);
    Ok((ds.subset(train_idx), ds.subset(test_idx)))
}
