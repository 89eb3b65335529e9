//! Tabular ingestion: schemas, CSV parsing, one-hot encoding, scaling and
//! the synthetic bond generator.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, StudentT};
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file, Decoder, Encoder};
use crate::error::{QcmlError, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnRole {
    Feature,
    Target,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default = "feature_role")]
    pub role: ColumnRole,
}

fn feature_role() -> ColumnRole {
    ColumnRole::Feature
}

impl ColumnSpec {
    pub fn new(name: &str, kind: ColumnKind, role: ColumnRole) -> Self {
        Self {
            name: name.to_string(),
            kind,
            role,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub columns: Vec<ColumnSpec>,
}

impl FeatureSchema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let s = Self { columns };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(QcmlError::schema(format!("duplicate column `{}`", c.name)));
            }
        }
        let targets: Vec<_> = self
            .columns
            .iter()
            .filter(|c| c.role == ColumnRole::Target)
            .collect();
        if targets.len() != 1 {
            return Err(QcmlError::schema(format!(
                "schema needs exactly one target column, found {}",
                targets.len()
            )));
        }
        if targets[0].kind != ColumnKind::Numeric {
            return Err(QcmlError::schema(format!(
                "target column `{}` must be numeric",
                targets[0].name
            )));
        }
        if !self.columns.iter().any(|c| c.role == ColumnRole::Feature) {
            return Err(QcmlError::schema("schema has no feature columns"));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)
            .map_err(|e| QcmlError::schema(format!("invalid schema JSON: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Self =
            toml::from_str(text).map_err(|e| QcmlError::schema(format!("invalid schema TOML: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    /// Reads a `.json` or `.toml` sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QcmlError::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text),
            _ => Self::from_json_str(&text),
        }
    }

    pub fn target(&self) -> &ColumnSpec {
        self.columns
            .iter()
            .find(|c| c.role == ColumnRole::Target)
            .expect("validated schema has a target")
    }

    pub fn features(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| c.role == ColumnRole::Feature)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Cat(String),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Cat(s) => f.write_str(s),
        }
    }
}

/// Where an encoded column comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnSource {
    Numeric { feature: usize },
    Dummy { feature: usize, level: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedColumn {
    pub name: String,
    pub source: ColumnSource,
}

impl EncodedColumn {
    pub fn is_dummy(&self) -> bool {
        matches!(self.source, ColumnSource::Dummy { .. })
    }
}

/// Category-to-column map fitted on one dataset and reusable on another.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    /// Levels per feature column (empty for numeric features), sorted.
    levels: Vec<Vec<String>>,
    columns: Vec<EncodedColumn>,
}

impl Encoding {
    fn fit(features: &[ColumnSpec], raw: &[Vec<Cell>]) -> Self {
        let mut levels = vec![Vec::new(); features.len()];
        let mut columns = Vec::new();
        for (f, spec) in features.iter().enumerate() {
            if spec.kind == ColumnKind::Numeric {
                columns.push(EncodedColumn {
                    name: spec.name.clone(),
                    source: ColumnSource::Numeric { feature: f },
                });
            }
        }
        for (f, spec) in features.iter().enumerate() {
            if spec.kind == ColumnKind::Categorical {
                let set: BTreeSet<&str> = raw
                    .iter()
                    .filter_map(|r| match &r[f] {
                        Cell::Cat(s) => Some(s.as_str()),
                        Cell::Num(_) => None,
                    })
                    .collect();
                levels[f] = set.into_iter().map(str::to_string).collect();
                for level in &levels[f] {
                    columns.push(EncodedColumn {
                        name: format!("{}={}", spec.name, level),
                        source: ColumnSource::Dummy {
                            feature: f,
                            level: level.clone(),
                        },
                    });
                }
            }
        }
        Self { levels, columns }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[EncodedColumn] {
        &self.columns
    }

    pub fn levels(&self, feature: usize) -> &[String] {
        &self.levels[feature]
    }

    /// Encodes one row; returns the indices of categorical features whose
    /// value was not seen at fit time (their block stays all-zero).
    fn encode_row(&self, row: &[Cell]) -> (Vec<f64>, Vec<usize>) {
        let mut out = Vec::with_capacity(self.columns.len());
        let mut unseen = Vec::new();
        for c in &self.columns {
            match &c.source {
                ColumnSource::Numeric { feature } => match &row[*feature] {
                    Cell::Num(v) => out.push(*v),
                    Cell::Cat(_) => unreachable!("numeric feature holds a category"),
                },
                ColumnSource::Dummy { feature, level } => {
                    let hit = matches!(&row[*feature], Cell::Cat(s) if s == level);
                    out.push(if hit { 1.0 } else { 0.0 });
                }
            }
        }
        for (f, lv) in self.levels.iter().enumerate() {
            if let Cell::Cat(s) = &row[f] {
                if lv.binary_search(s).is_err() {
                    unseen.push(f);
                }
            }
        }
        (out, unseen)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnseenCategory {
    pub row: usize,
    pub column: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    /// 1-based line number in the source file, header included.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: FeatureSchema,
    feature_specs: Vec<ColumnSpec>,
    raw: Vec<Vec<Cell>>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    encoding: Encoding,
    unseen: Vec<UnseenCategory>,
    pub rejected: Vec<RejectedRow>,
}

impl Dataset {
    /// Builds a dataset from typed feature cells (feature columns in schema
    /// order) and targets, fitting a fresh encoding.
    pub fn from_cells(schema: FeatureSchema, raw: Vec<Vec<Cell>>, y: Vec<f64>) -> Result<Self> {
        schema.validate()?;
        let feature_specs: Vec<ColumnSpec> = schema.features().cloned().collect();
        if raw.len() != y.len() {
            return Err(QcmlError::schema("row count differs from target count"));
        }
        for (r, row) in raw.iter().enumerate() {
            if row.len() != feature_specs.len() {
                return Err(QcmlError::schema(format!("row {r} has {} cells", row.len())));
            }
            for (cell, spec) in row.iter().zip(&feature_specs) {
                let ok = match (cell, spec.kind) {
                    (Cell::Num(v), ColumnKind::Numeric) => v.is_finite(),
                    (Cell::Cat(_), ColumnKind::Categorical) => true,
                    _ => false,
                };
                if !ok {
                    return Err(QcmlError::schema(format!(
                        "row {r}: cell `{cell}` does not fit column `{}`",
                        spec.name
                    )));
                }
            }
        }
        let encoding = Encoding::fit(&feature_specs, &raw);
        Ok(Self::encode(schema, feature_specs, raw, y, encoding))
    }

    fn encode(
        schema: FeatureSchema,
        feature_specs: Vec<ColumnSpec>,
        raw: Vec<Vec<Cell>>,
        y: Vec<f64>,
        encoding: Encoding,
    ) -> Self {
        let mut x = Vec::with_capacity(raw.len());
        let mut unseen = Vec::new();
        for (r, row) in raw.iter().enumerate() {
            let (enc, miss) = encoding.encode_row(row);
            x.push(enc);
            for f in miss {
                unseen.push(UnseenCategory {
                    row: r,
                    column: feature_specs[f].name.clone(),
                    value: row[f].to_string(),
                });
            }
        }
        Self {
            schema,
            feature_specs,
            raw,
            x,
            y,
            encoding,
            unseen,
            rejected: Vec::new(),
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.encoding.width()
    }

    pub fn x(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn raw(&self) -> &[Vec<Cell>] {
        &self.raw
    }

    pub fn encoding(&self) -> &Encoding {
        &self.encoding
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.encoding.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Test-set categories that fell outside the fitted encoding.
    pub fn unseen(&self) -> &[UnseenCategory] {
        &self.unseen
    }

    /// Rows `indices`, keeping the current encoding.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            feature_specs: self.feature_specs.clone(),
            raw: indices.iter().map(|&i| self.raw[i].clone()).collect(),
            x: indices.iter().map(|&i| self.x[i].clone()).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            encoding: self.encoding.clone(),
            unseen: Vec::new(),
            rejected: Vec::new(),
        }
    }

    /// Re-fits the encoding on this dataset's own categories.
    pub fn refit_encoding(&self) -> Self {
        let encoding = Encoding::fit(&self.feature_specs, &self.raw);
        self.reencode(&encoding)
    }

    /// Encodes this dataset with an encoding fitted elsewhere.
    pub fn reencode(&self, encoding: &Encoding) -> Self {
        Self::encode(
            self.schema.clone(),
            self.feature_specs.clone(),
            self.raw.clone(),
            self.y.clone(),
            encoding.clone(),
        )
    }

    /// Category of categorical feature `feature_name` read back from row `r`'s one-hot block.
    pub fn decode_category(&self, r: usize, feature_name: &str) -> Option<&str> {
        self.encoding
            .columns
            .iter()
            .zip(&self.x[r])
            .find_map(|(c, &v)| match &c.source {
                ColumnSource::Dummy { feature, level }
                    if self.feature_specs[*feature].name == feature_name && v == 1.0 =>
                {
                    Some(level.as_str())
                }
                _ => None,
            })
    }

    /// Writes the raw cells and target as CSV in schema column order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = self.feature_specs.iter().map(|c| c.name.as_str()).collect();
        header.push(&self.schema.target().name);
        wtr.write_record(&header).map_err(csv_err)?;
        for (row, y) in self.raw.iter().zip(&self.y) {
            let mut rec: Vec<String> = row.iter().map(Cell::to_string).collect();
            rec.push(y.to_string());
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = wtr.into_inner().map_err(|e| QcmlError::data(e.to_string()))?;
        write_file(path, &bytes)
    }

    /// Versioned binary cache of the encoded matrix, target and column names.
    pub fn encoded_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.magic(ENCODED_MAGIC);
        enc.u64(self.len() as u64);
        enc.u64(self.width() as u64);
        for c in &self.encoding.columns {
            enc.str(&c.name);
        }
        for row in &self.x {
            for &v in row {
                enc.f64(v);
            }
        }
        enc.f64s(&self.y);
        enc.finish()
    }

    pub fn save_encoded(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encoded_bytes())
    }
}

const ENCODED_MAGIC: &[u8] = b"QDAT1";

/// Encoded matrix read back from the binary cache.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTable {
    pub names: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl EncodedTable {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        dec.expect_magic(ENCODED_MAGIC)?;
        let n = dec.len()?;
        let k = dec.len()?;
        let names = (0..k).map(|_| dec.str()).collect::<Result<Vec<_>>>()?;
        let x = (0..n)
            .map(|_| (0..k).map(|_| dec.f64()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let y = dec.f64s()?;
        dec.finish()?;
        if y.len() != n {
            return Err(QcmlError::Format("target length mismatch".into()));
        }
        Ok(Self { names, x, y })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn csv_err(e: csv::Error) -> QcmlError {
    QcmlError::data(format!("csv: {e}"))
}

pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<Dataset> {
    let bytes = read_file(path)?;
    parse_csv(&bytes, schema)
}

/// Parses CSV text under `schema`. Rows with a missing numeric or target
/// cell are dropped and listed in [`Dataset::rejected`]; malformed cells
/// abort the load.
pub fn parse_csv(bytes: &[u8], schema: &FeatureSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(QcmlError::data("empty file"));
    }
    for name in header.iter() {
        if !schema.columns.iter().any(|c| c.name == name) {
            return Err(QcmlError::schema(format!("unknown column `{name}`")));
        }
    }
    let position = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| QcmlError::schema(format!("missing column `{name}`")))
    };
    let feature_specs: Vec<ColumnSpec> = schema.features().cloned().collect();
    let feature_pos = feature_specs
        .iter()
        .map(|c| position(&c.name))
        .collect::<Result<Vec<_>>>()?;
    let target = schema.target();
    let target_pos = position(&target.name)?;

    let mut raw = Vec::new();
    let mut y = Vec::new();
    let mut rejected = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = r + 2;
        let mut row = Vec::with_capacity(feature_specs.len());
        let mut missing = None;
        for (spec, &p) in feature_specs.iter().zip(&feature_pos) {
            let cell = rec.get(p).unwrap_or("").trim();
            match spec.kind {
                ColumnKind::Numeric => match parse_number(cell, &spec.name, line)? {
                    Some(v) => row.push(Cell::Num(v)),
                    None => {
                        missing.get_or_insert_with(|| spec.name.clone());
                        row.push(Cell::Num(0.0));
                    }
                },
                ColumnKind::Categorical => {
                    if cell.is_empty() {
                        missing.get_or_insert_with(|| spec.name.clone());
                    }
                    row.push(Cell::Cat(cell.to_string()));
                }
            }
        }
        let t = parse_number(rec.get(target_pos).unwrap_or("").trim(), &target.name, line)?;
        if t.is_none() {
            missing.get_or_insert_with(|| target.name.clone());
        }
        if let Some(col) = missing {
            let reason = format!("missing value in column `{col}`");
            warn!("line {line}: row rejected, {reason}");
            rejected.push(RejectedRow { line, reason });
            continue;
        }
        raw.push(row);
        y.push(t.unwrap());
    }
    if raw.is_empty() {
        return Err(QcmlError::data(if rejected.is_empty() {
            "file has a header but no data rows".to_string()
        } else {
            format!("all {} rows were rejected", rejected.len())
        }));
    }
    let mut ds = Dataset::from_cells(schema.clone(), raw, y)?;
    ds.rejected = rejected;
    Ok(ds)
}

fn parse_number(cell: &str, column: &str, line: usize) -> Result<Option<f64>> {
    if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(QcmlError::data(format!(
            "line {line}: malformed numeric cell `{cell}` in column `{column}`"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColumnScaling {
    ZScore { mean: f64, std: f64 },
    PassThrough,
    Dropped,
}

/// Per-column scaling fitted on a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub columns: Vec<ColumnScaling>,
}

impl Scaler {
    pub fn kept(&self) -> usize {
        self.columns
            .iter()
            .filter(|c| !matches!(c, ColumnScaling::Dropped))
            .count()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        self.columns
            .iter()
            .zip(row)
            .filter_map(|(c, &v)| match *c {
                ColumnScaling::ZScore { mean, std } => Some((v - mean) / std),
                ColumnScaling::PassThrough => Some(v),
                ColumnScaling::Dropped => None,
            })
            .collect()
    }
}

/// Numeric columns are z-scored with population statistics; one-hot
/// columns pass through; zero-variance numeric columns are dropped.
pub fn fit_scaling(train: &Dataset) -> Result<Scaler> {
    if train.is_empty() {
        return Err(QcmlError::usage("cannot fit scaling on an empty dataset"));
    }
    let n = train.len() as f64;
    let columns = train
        .encoding
        .columns
        .iter()
        .enumerate()
        .map(|(c, col)| {
            if col.is_dummy() {
                return ColumnScaling::PassThrough;
            }
            let mean = train.x.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = train.x.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std <= 1e-12 * mean.abs().max(1.0) {
                warn!("column `{}` has zero variance on train; dropped", col.name);
                ColumnScaling::Dropped
            } else {
                ColumnScaling::ZScore { mean, std }
            }
        })
        .collect();
    Ok(Scaler { columns })
}

pub fn apply_scaling(scaler: &Scaler, data: &Dataset) -> Result<Dataset> {
    if scaler.columns.len() != data.width() {
        return Err(QcmlError::schema(format!(
            "scaler fitted on {} columns, dataset has {}",
            scaler.columns.len(),
            data.width()
        )));
    }
    let mut out = data.clone();
    out.x = data.x.iter().map(|r| scaler.apply_row(r)).collect();
    out.encoding.columns = data
        .encoding
        .columns
        .iter()
        .zip(&scaler.columns)
        .filter(|(_, s)| !matches!(s, ColumnScaling::Dropped))
        .map(|(c, _)| c.clone())
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    HighYield,
    InvestmentGrade,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::HighYield => "high-yield",
            Regime::InvestmentGrade => "investment-grade",
        }
    }

    /// Share of rows drawn from the near-default cluster.
    pub fn outlier_fraction(self) -> f64 {
        match self {
            Regime::HighYield => 0.06,
            Regime::InvestmentGrade => 0.0,
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = QcmlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high-yield" | "hy" => Ok(Regime::HighYield),
            "investment-grade" | "ig" => Ok(Regime::InvestmentGrade),
            _ => Err(QcmlError::usage(format!("unknown regime `{s}`"))),
        }
    }
}

pub const RATING_LEVELS: usize = 20;
pub const COUNTRY_LEVELS: usize = 30;
pub const INDUSTRY_LEVELS: usize = 42;

const BOND_NUMERICS: [&str; 7] = [
    "coupon",
    "coupon_frequency",
    "days_to_maturity",
    "duration",
    "age",
    "amount_issued",
    "amount_outstanding",
];

pub fn bond_schema() -> FeatureSchema {
    let mut cols: Vec<ColumnSpec> = BOND_NUMERICS
        .iter()
        .map(|n| ColumnSpec::new(n, ColumnKind::Numeric, ColumnRole::Feature))
        .collect();
    for n in ["rating", "country", "industry"] {
        cols.push(ColumnSpec::new(n, ColumnKind::Categorical, ColumnRole::Feature));
    }
    cols.push(ColumnSpec::new("spread", ColumnKind::Numeric, ColumnRole::Target));
    FeatureSchema { columns: cols }
}

/// Bond-like synthetic holdings. Both regimes share every non-outlier
/// distribution; the high-yield regime replaces a fraction of rows with a
/// near-default cluster carrying heavy-tailed spreads and distressed
/// numerics. The first rows cycle through every category level so the
/// encoded width is always 7 + 20 + 30 + 42 = 99.
pub fn synth_bonds(seed: u64, n: usize, regime: Regime) -> Result<Dataset> {
    if n < 50 {
        return Err(QcmlError::usage("synth_bonds needs n ≥ 50"));
    }
    let mut rng = seed::stream(seed, 0);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let issued = LogNormal::new(500f64.ln(), 0.6).unwrap();
    let tail: StudentT<f64> = StudentT::new(2.5).unwrap();
    let country_effect: Vec<f64> = (0..COUNTRY_LEVELS).map(|_| 15.0 * unit.sample(&mut rng)).collect();
    let industry_effect: Vec<f64> = (0..INDUSTRY_LEVELS).map(|_| 15.0 * unit.sample(&mut rng)).collect();

    let mut raw = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let cycling = i < INDUSTRY_LEVELS;
        let rating = if cycling { i % RATING_LEVELS } else { rng.random_range(0..RATING_LEVELS) };
        let country = if cycling { i % COUNTRY_LEVELS } else { rng.random_range(0..COUNTRY_LEVELS) };
        let industry = if cycling { i } else { rng.random_range(0..INDUSTRY_LEVELS) };
        let outlier = !cycling && rng.random::<f64>() < regime.outlier_fraction();

        let mut coupon = (4.5 + 1.5 * unit.sample(&mut rng)).max(0.0);
        let frequency = match rng.random::<f64>() {
            u if u < 0.2 => 1.0,
            u if u < 0.9 => 2.0,
            _ => 4.0,
        };
        let days = rng.random_range(180.0..10950.0f64).round();
        let years = days / 365.0;
        let mut duration =
            (years * (1.0 - 0.03 * coupon).max(0.3) + 0.2 * unit.sample(&mut rng)).max(0.05);
        let age = rng.random_range(0.0..3650.0f64).round();
        let amount_issued = issued.sample(&mut rng);
        let mut amount_outstanding = amount_issued * rng.random_range(0.6..1.0);

        let mut spread = 40.0
            + 9.0 * rating as f64
            + 12.0 * coupon
            + 4.0 * duration
            + country_effect[country]
            + industry_effect[industry]
            + 12.0 * unit.sample(&mut rng);
        if outlier {
            coupon += 4.0 + 2.0 * tail.sample(&mut rng).abs();
            duration *= 0.3;
            amount_outstanding *= rng.random_range(0.05..0.4);
            spread += 1500.0 + 600.0 * tail.sample(&mut rng).abs();
        }
        raw.push(vec![
            Cell::Num(round_to(coupon, 4)),
            Cell::Num(frequency),
            Cell::Num(days),
            Cell::Num(round_to(duration, 4)),
            Cell::Num(age),
            Cell::Num(round_to(amount_issued, 3)),
            Cell::Num(round_to(amount_outstanding, 3)),
            Cell::Cat(format!("R{rating:02}")),
            Cell::Cat(format!("C{country:02}")),
            Cell::Cat(format!("I{industry:02}")),
        ]);
        y.push(round_to(spread, 4));
    }
    Dataset::from_cells(bond_schema(), raw, y)
}

/// Rounds to `digits` decimals so CSV round trips are exact in spirit.
fn round_to(v: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (v * s).round() / s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed_schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            ColumnSpec::new("a", ColumnKind::Numeric, ColumnRole::Feature),
            ColumnSpec::new("c", ColumnKind::Categorical, ColumnRole::Feature),
            ColumnSpec::new("y", ColumnKind::Numeric, ColumnRole::Target),
        ])
        .unwrap()
    }

    #[test]
    fn two_rows_one_categorical() {
        let ds = parse_csv(b"a,c,y\n1.5,red,2\n2.5,blue,3\n", &mixed_schema()).unwrap();
        assert_eq!(ds.width(), 3);
        assert_eq!(ds.feature_names(), vec!["a", "c=blue", "c=red"]);
        assert_eq!(ds.x()[0], vec![1.5, 0.0, 1.0]);
        assert_eq!(ds.decode_category(1, "c"), Some("blue"));
    }

    #[test]
    fn unknown_column_named() {
        let err = parse_csv(b"a,c,y,zz\n1,r,2,0\n", &mixed_schema()).unwrap_err();
        assert!(err.to_string().contains("zz"));
        assert!(matches!(err, QcmlError::Schema(_)));
    }

    #[test]
    fn missing_column_and_malformed_cell() {
        assert!(matches!(
            parse_csv(b"a,y\n1,2\n", &mixed_schema()),
            Err(QcmlError::Schema(_))
        ));
        assert!(matches!(
            parse_csv(b"a,c,y\nabc,r,2\n", &mixed_schema()),
            Err(QcmlError::Data(_))
        ));
        assert!(matches!(parse_csv(b"", &mixed_schema()), Err(QcmlError::Data(_))));
    }

    #[test]
    fn missing_numeric_rejects_row() {
        let ds = parse_csv(b"a,c,y\n1,r,2\n,r,3\n4,b,\n5,b,6\n", &mixed_schema()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.rejected.len(), 2);
        assert_eq!(ds.rejected[0].line, 3);
    }

    #[test]
    fn unseen_category_is_flagged_and_zero() {
        let train = parse_csv(b"a,c,y\n1,r,2\n2,b,3\n", &mixed_schema()).unwrap();
        let test = parse_csv(b"a,c,y\n1,g,2\n", &mixed_schema()).unwrap();
        let t = test.reencode(train.encoding());
        assert_eq!(t.x()[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(t.unseen().len(), 1);
        assert_eq!(t.unseen()[0].value, "g");
    }

    #[test]
    fn schema_rules() {
        let no_target = FeatureSchema::new(vec![ColumnSpec::new(
            "a",
            ColumnKind::Numeric,
            ColumnRole::Feature,
        )]);
        assert!(no_target.is_err());
        let toml_text = r#"
            [[columns]]
            name = "x"
            kind = "numeric"
            [[columns]]
            name = "t"
            kind = "numeric"
            role = "target"
        "#;
        assert_eq!(FeatureSchema::from_toml_str(toml_text).unwrap().columns.len(), 2);
    }

    #[test]
    fn scaling_basics() {
        let ds = parse_csv(b"a,c,y\n0,r,1\n2,b,2\n", &mixed_schema()).unwrap();
        let s = fit_scaling(&ds).unwrap();
        let out = apply_scaling(&s, &ds).unwrap();
        assert_eq!(out.x()[0][0], -1.0);
        assert_eq!(out.x()[1][0], 1.0);
        assert_eq!(out.x()[0][1..], ds.x()[0][1..]);
        let far = parse_csv(b"a,c,y\n10,r,1\n", &mixed_schema()).unwrap();
        let far = apply_scaling(&s, &far.reencode(ds.encoding())).unwrap();
        assert_eq!(far.x()[0][0], 9.0);
    }

    #[test]
    fn zero_variance_column_dropped() {
        let ds = parse_csv(b"a,c,y\n3,r,1\n3,b,2\n", &mixed_schema()).unwrap();
        let s = fit_scaling(&ds).unwrap();
        assert_eq!(s.columns[0], ColumnScaling::Dropped);
        let out = apply_scaling(&s, &ds).unwrap();
        assert_eq!(out.width(), 2);
        assert_eq!(out.decode_category(0, "c"), Some("r"));
    }

    #[test]
    fn bonds_have_99_columns_and_are_reproducible() {
        let a = synth_bonds(0, 200, Regime::HighYield).unwrap();
        let b = synth_bonds(0, 200, Regime::HighYield).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.width(), 99);
        for r in 0..a.len() {
            let rating = a.decode_category(r, "rating").unwrap();
            assert_eq!(Cell::Cat(rating.to_string()), a.raw()[r][7]);
        }
    }

    #[test]
    fn encoded_cache_round_trip() {
        let ds = synth_bonds(1, 60, Regime::InvestmentGrade).unwrap();
        let t = EncodedTable::from_bytes(&ds.encoded_bytes()).unwrap();
        assert_eq!(t.x, ds.x());
        assert_eq!(t.names, ds.feature_names());
    }
}
