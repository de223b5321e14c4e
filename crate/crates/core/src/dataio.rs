//! CSV ingestion, preprocessing and splitting.
//!
//! Categorical features are one-hot encoded with categories ordered by first
//! appearance in the fitting table; unseen categories encode as all zeros.
//! Numeric features are standardized with statistics of the fitting table
//! only, so fit on the training split and reuse the [`Preprocessor`] for
//! validation and test data.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{Column, SampleBatch};
use crate::error::{Error, Result};
use crate::matrix::SampleMatrix;

const MISSING: [&str; 4] = ["", "?", "NA", "NaN"];

fn is_missing(cell: &str) -> bool {
    MISSING.contains(&cell.trim())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    #[default]
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(default)]
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Drop,
    MeanImpute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    #[default]
    Categorical,
    Numeric,
}

fn yes() -> bool {
    true
}

/// Column roles for a CSV file; stored as JSON next to the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    /// Feature columns; when absent every column other than target and
    /// sensitive is a numeric feature.
    #[serde(default)]
    pub features: Option<Vec<FeatureSpec>>,
    pub target: String,
    pub sensitive: String,
    #[serde(default)]
    pub target_kind: LabelKind,
    #[serde(default)]
    pub sensitive_kind: LabelKind,
    #[serde(default)]
    pub missing: MissingPolicy,
    #[serde(default = "yes")]
    pub standardize: bool,
}

impl DatasetSchema {
    pub fn new(target: impl Into<String>, sensitive: impl Into<String>) -> Self {
        Self {
            features: None,
            target: target.into(),
            sensitive: sensitive.into(),
            target_kind: LabelKind::Categorical,
            sensitive_kind: LabelKind::Categorical,
            missing: MissingPolicy::Drop,
            standardize: true,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::load_json(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::save_json(path, self)
    }

    fn resolve_features(&self, header: &[String]) -> Result<Vec<FeatureSpec>> {
        if self.target == self.sensitive {
            return Err(Error::invalid("target and sensitive columns must differ"));
        }
        for c in [&self.target, &self.sensitive] {
            if !header.contains(c) {
                return Err(Error::UnknownColumn(c.clone()));
            }
        }
        let feats = match &self.features {
            Some(f) => f.clone(),
            None => header
                .iter()
                .filter(|h| **h != self.target && **h != self.sensitive)
                .map(|h| FeatureSpec {
                    name: h.clone(),
                    kind: FeatureKind::Numeric,
                })
                .collect(),
        };
        for f in &feats {
            if f.name == self.target || f.name == self.sensitive {
                return Err(Error::invalid(format!("feature {} overlaps target/sensitive", f.name)));
            }
            if !header.contains(&f.name) {
                return Err(Error::UnknownColumn(f.name.clone()));
            }
        }
        if feats.is_empty() {
            return Err(Error::invalid("schema selects no feature columns"));
        }
        Ok(feats)
    }
}

/// Raw string cells of a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// 1-based line of each row in the source file, for diagnostics.
    pub lines: Vec<usize>,
}

impl Table {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            lines.push(rec.position().map_or(0, |p| p.line() as usize));
            rows.push(rec.iter().map(str::to_owned).collect());
        }
        Ok(Self { header, rows, lines })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            header: self.header.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            lines: idx.iter().map(|&i| self.lines[i]).collect(),
        }
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureEncoding {
    Numeric { name: String, mean: f64, sd: f64 },
    Categorical { name: String, categories: Vec<String> },
}

impl FeatureEncoding {
    pub fn width(&self) -> usize {
        match self {
            FeatureEncoding::Numeric { .. } => 1,
            FeatureEncoding::Categorical { categories, .. } => categories.len(),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            FeatureEncoding::Numeric { name, .. } | FeatureEncoding::Categorical { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelEncoding {
    /// Cells are non-negative integers used directly as class ids.
    Integer {
        num_classes: usize,
    },
    /// Class ids by first appearance.
    Named {
        names: Vec<String>,
    },
    Real,
}

impl LabelEncoding {
    fn fit(values: &[&str], kind: LabelKind) -> Self {
        if kind == LabelKind::Numeric {
            return LabelEncoding::Real;
        }
        let ints: Option<Vec<usize>> = values.iter().map(|v| v.parse::<usize>().ok()).collect();
        match ints {
            Some(ints) if !ints.is_empty() => LabelEncoding::Integer {
                num_classes: ints.iter().max().unwrap() + 1,
            },
            _ => {
                let mut names: Vec<String> = Vec::new();
                for v in values {
                    if !names.iter().any(|n| n == v) {
                        names.push((*v).to_owned());
                    }
                }
                LabelEncoding::Named { names }
            }
        }
    }

    fn encode(&self, cells: &[&str], column: &str, lines: &[usize]) -> Result<Column> {
        let bad = |i: usize, msg: &str| Error::Csv {
            row: lines[i],
            col: column.to_owned(),
            msg: msg.to_owned(),
        };
        match self {
            LabelEncoding::Real => {
                let vals = cells
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c.parse::<f64>().map_err(|_| bad(i, "not a number")))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Column::Real(SampleMatrix::column(vals)?))
            }
            LabelEncoding::Integer { num_classes } => {
                let ids = cells
                    .iter()
                    .enumerate()
                    .map(|(i, c)| match c.parse::<usize>() {
                        Ok(v) if v < *num_classes => Ok(v),
                        _ => Err(bad(i, "label outside fitted classes")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Column::Classes {
                    ids,
                    num_classes: *num_classes,
                })
            }
            LabelEncoding::Named { names } => {
                let ids = cells
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        names
                            .iter()
                            .position(|n| n == c)
                            .ok_or_else(|| bad(i, "label outside fitted classes"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Column::Classes {
                    ids,
                    num_classes: names.len(),
                })
            }
        }
    }
}

/// Fitted feature and label encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub schema: DatasetSchema,
    pub features: Vec<FeatureEncoding>,
    pub target: LabelEncoding,
    pub sensitive: LabelEncoding,
}

/// Result of encoding a table.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub batch: SampleBatch,
    /// Rows dropped for missing values.
    pub dropped: usize,
}

impl Preprocessor {
    pub fn fit(table: &Table, schema: &DatasetSchema) -> Result<Self> {
        let feats = schema.resolve_features(&table.header)?;
        let keep = usable_rows(table, schema, &feats)?;
        if keep.is_empty() {
            return Err(Error::invalid("no usable rows to fit preprocessing on"));
        }
        let mut features = Vec::with_capacity(feats.len());
        for f in &feats {
            let c = table.col(&f.name)?;
            match f.kind {
                FeatureKind::Categorical => {
                    let mut categories: Vec<String> = Vec::new();
                    for &i in &keep {
                        let v = &table.rows[i][c];
                        if !categories.contains(v) {
                            categories.push(v.clone());
                        }
                    }
                    features.push(FeatureEncoding::Categorical {
                        name: f.name.clone(),
                        categories,
                    });
                }
                FeatureKind::Numeric => {
                    let vals: Vec<f64> = keep
                        .iter()
                        .filter(|&&i| !is_missing(&table.rows[i][c]))
                        .map(|&i| parse_num(table, i, c))
                        .collect::<Result<_>>()?;
                    let n = vals.len().max(1) as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                    features.push(FeatureEncoding::Numeric {
                        name: f.name.clone(),
                        mean,
                        sd,
                    });
                }
            }
        }
        let tc = table.col(&schema.target)?;
        let sc = table.col(&schema.sensitive)?;
        let tv: Vec<&str> = keep.iter().map(|&i| table.rows[i][tc].as_str()).collect();
        let sv: Vec<&str> = keep.iter().map(|&i| table.rows[i][sc].as_str()).collect();
        Ok(Self {
            schema: schema.clone(),
            features,
            target: LabelEncoding::fit(&tv, schema.target_kind),
            sensitive: LabelEncoding::fit(&sv, schema.sensitive_kind),
        })
    }

    pub fn width(&self) -> usize {
        self.features.iter().map(FeatureEncoding::width).sum()
    }

    /// Encoded column names (`name=category` for one-hot columns).
    pub fn column_names(&self) -> Vec<String> {
        self.features
            .iter()
            .flat_map(|f| match f {
                FeatureEncoding::Numeric { name, .. } => vec![name.clone()],
                FeatureEncoding::Categorical { name, categories } => {
                    categories.iter().map(|c| format!("{name}={c}")).collect()
                }
            })
            .collect()
    }

    /// Category of feature `feature` from its one-hot block.
    pub fn decode_category(&self, feature: usize, block: &[f64]) -> Option<&str> {
        match &self.features[feature] {
            FeatureEncoding::Categorical { categories, .. } => {
                let hot: Vec<usize> = block
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == 1.0)
                    .map(|(i, _)| i)
                    .collect();
                match hot.as_slice() {
                    [i] if block.iter().filter(|&&v| v != 0.0).count() == 1 => categories.get(*i).map(String::as_str),
                    _ => None,
                }
            }
            FeatureEncoding::Numeric { .. } => None,
        }
    }

    pub fn transform(&self, table: &Table) -> Result<Encoded> {
        let feats = self.schema.resolve_features(&table.header)?;
        let keep = usable_rows(table, &self.schema, &feats)?;
        if keep.is_empty() {
            return Err(Error::invalid("no usable rows after dropping missing values"));
        }
        let cols: Vec<usize> = self
            .features
            .iter()
            .map(|f| table.col(f.name()))
            .collect::<Result<_>>()?;
        let width = self.width();
        let mut data = Vec::with_capacity(keep.len() * width);
        for &i in &keep {
            for (f, &c) in self.features.iter().zip(&cols) {
                let cell = &table.rows[i][c];
                match f {
                    FeatureEncoding::Numeric { mean, sd, .. } => {
                        let raw = if is_missing(cell) {
                            *mean
                        } else {
                            parse_num(table, i, c)?
                        };
                        data.push(if self.schema.standardize {
                            (raw - mean) / sd
                        } else {
                            raw
                        });
                    }
                    FeatureEncoding::Categorical { categories, .. } => {
                        data.extend(categories.iter().map(|k| if k == cell { 1.0 } else { 0.0 }));
                    }
                }
            }
        }
        let x = SampleMatrix::new(keep.len(), width, data)?;
        let lines: Vec<usize> = keep.iter().map(|&i| table.lines[i]).collect();
        let tc = table.col(&self.schema.target)?;
        let sc = table.col(&self.schema.sensitive)?;
        let tv: Vec<&str> = keep.iter().map(|&i| table.rows[i][tc].as_str()).collect();
        let sv: Vec<&str> = keep.iter().map(|&i| table.rows[i][sc].as_str()).collect();
        let y = self.target.encode(&tv, &self.schema.target, &lines)?;
        let a = self.sensitive.encode(&sv, &self.schema.sensitive, &lines)?;
        Ok(Encoded {
            batch: SampleBatch::new(x, y, a, "csv")?,
            dropped: table.len() - keep.len(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::save_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::load_json(path)
    }
}

fn parse_num(table: &Table, row: usize, col: usize) -> Result<f64> {
    let cell = &table.rows[row][col];
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Csv {
            row: table.lines[row],
            col: table.header[col].clone(),
            msg: format!("unparseable number {cell:?}"),
        })
}

/// Rows with target and sensitive present and, under the drop policy, every
/// numeric feature present.
fn usable_rows(table: &Table, schema: &DatasetSchema, feats: &[FeatureSpec]) -> Result<Vec<usize>> {
    let tc = table.col(&schema.target)?;
    let sc = table.col(&schema.sensitive)?;
    let numeric: Vec<usize> = feats
        .iter()
        .filter(|f| f.kind == FeatureKind::Numeric)
        .map(|f| table.col(&f.name))
        .collect::<Result<_>>()?;
    Ok((0..table.len())
        .filter(|&i| {
            let r = &table.rows[i];
            if is_missing(&r[tc]) || is_missing(&r[sc]) {
                return false;
            }
            schema.missing == MissingPolicy::MeanImpute || numeric.iter().all(|&c| !is_missing(&r[c]))
        })
        .collect())
}

/// A file encoded with a preprocessor fitted on itself.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub batch: SampleBatch,
    pub preprocessor: Preprocessor,
    pub dropped: usize,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Loaded> {
    let path = path.as_ref();
    let table = Table::read(path)?;
    let preprocessor = Preprocessor::fit(&table, schema)?;
    let Encoded { mut batch, dropped } = preprocessor.transform(&table)?;
    batch.provenance = path.display().to_string();
    Ok(Loaded {
        batch,
        preprocessor,
        dropped,
    })
}

/// Shuffled index partition with sizes `floor(r_k n)`, the remainder going
/// to the first part.
pub fn split_indices(n: usize, ratios: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if ratios.is_empty() || ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::invalid("split ratios must be positive"));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios sum to {total}, not 1")));
    }
    let mut sizes: Vec<usize> = ratios.iter().map(|r| (r * n as f64 + 1e-9).floor() as usize).collect();
    sizes[0] += n - sizes.iter().sum::<usize>();
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::invalid(format!("split part {k} is empty at n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        out.push(order[start..start + s].to_vec());
        start += s;
    }
    Ok(out)
}

pub fn split(
    batch: &SampleBatch,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(SampleBatch, SampleBatch, SampleBatch)> {
    let parts = split_indices(batch.len(), &[ratios.0, ratios.1, ratios.2], seed)?;
    Ok((
        batch.select(&parts[0]),
        batch.select(&parts[1]),
        batch.select(&parts[2]),
    ))
}

fn label_header(name: &str, col: &Column) -> Result<Vec<String>> {
    match col {
        Column::Classes { .. } => Ok(vec![name.to_owned()]),
        Column::Real(m) if m.cols() == 1 => Ok(vec![name.to_owned()]),
        Column::Real(_) => Err(Error::invalid("CSV export supports single-column targets")),
    }
}

fn label_cell(col: &Column, i: usize) -> String {
    match col {
        Column::Classes { ids, .. } => ids[i].to_string(),
        Column::Real(m) => m.get(i, 0).to_string(),
    }
}

/// Writes `x1..xp,y,a` with a leading `# provenance` comment. Values use
/// the shortest representation that parses back to the same `f64`.
pub fn export_csv(batch: &SampleBatch, path: impl AsRef<Path>) -> Result<()> {
    let mut file = File::create(path)?;
    writeln!(file, "# {}", batch.provenance.replace('\n', " "))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<String> = (1..=batch.dim()).map(|j| format!("x{j}")).collect();
    header.extend(label_header("y", &batch.y)?);
    header.extend(label_header("a", &batch.a)?);
    w.write_record(&header)?;
    for i in 0..batch.len() {
        let mut rec: Vec<String> = batch.x.row(i).iter().map(f64::to_string).collect();
        rec.push(label_cell(&batch.y, i));
        rec.push(label_cell(&batch.a, i));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Schema matching [`export_csv`] output.
pub fn export_schema(batch: &SampleBatch) -> DatasetSchema {
    let kind = |c: &Column| match c {
        Column::Classes { .. } => LabelKind::Categorical,
        Column::Real(_) => LabelKind::Numeric,
    };
    DatasetSchema {
        features: Some(
            (1..=batch.dim())
                .map(|j| FeatureSpec {
                    name: format!("x{j}"),
                    kind: FeatureKind::Numeric,
                })
                .collect(),
        ),
        target: "y".into(),
        sensitive: "a".into(),
        target_kind: kind(&batch.y),
        sensitive_kind: kind(&batch.a),
        missing: MissingPolicy::Drop,
        standardize: false,
    }
}

/// Category counts per categorical feature, in encoding order.
pub fn category_counts(p: &Preprocessor) -> HashMap<String, usize> {
    p.features
        .iter()
        .filter_map(|f| match f {
            FeatureEncoding::Categorical { name, categories } => Some((name.clone(), categories.len())),
            _ => None,
        })
        .collect()
}
