//! Case-level dataset, auxiliary record tables, CSV ingestion, the
//! chronological week split and a synthetic drift-and-bias generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;

pub const COL_CASE_ID: &str = "case_id";
pub const COL_DATE: &str = "date_decision";
pub const COL_WEEK: &str = "WEEK_NUM";
pub const COL_TARGET: &str = "target";
pub const DEFAULT_GROUP_COLUMN: &str = "group";

/// A single cell of a raw table.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Missing,
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(v) if v.is_finite() => Some(*v),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    /// Category key; numbers are rendered with their shortest round-trip form.
    pub fn category_key(&self) -> Option<String> {
        match self {
            Value::Missing => None,
            Value::Num(v) => Some(format!("{v}")),
            Value::Cat(s) => Some(s.clone()),
        }
    }

    fn render(&self) -> String {
        match self {
            Value::Missing => String::new(),
            Value::Num(v) => format!("{v}"),
            Value::Cat(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRow {
    pub case_id: i64,
    pub decision_date: NaiveDate,
    pub week: u32,
    pub label: u8,
    pub group: Option<String>,
    /// Base fields, aligned with [`Dataset::base_fields`].
    pub fields: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxRecord {
    pub case_id: i64,
    pub values: Vec<Value>,
}

/// Multi-row-per-case feature table, already unioned across file parts.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxTable {
    pub name: String,
    pub fields: Vec<String>,
    pub kinds: Vec<FieldKind>,
    pub records: Vec<AuxRecord>,
}

impl AuxTable {
    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f == name)
    }

    /// Record indices grouped by case, in table order.
    pub fn index_by_case(&self) -> HashMap<i64, Vec<usize>> {
        let mut index: HashMap<i64, Vec<usize>> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            index.entry(r.case_id).or_default().push(i);
        }
        index
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub base_fields: Vec<String>,
    pub base_kinds: Vec<FieldKind>,
    pub rows: Vec<CaseRow>,
    pub aux_tables: Vec<AuxTable>,
    /// False when the base table carried no `target` column (scoring input).
    pub has_labels: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_groups(&self) -> bool {
        self.rows.iter().any(|r| r.group.is_some())
    }

    pub fn base_field_index(&self, name: &str) -> Option<usize> {
        self.base_fields.iter().position(|f| f == name)
    }

    pub fn aux_table(&self, name: &str) -> Option<&AuxTable> {
        self.aux_tables.iter().find(|t| t.name == name)
    }

    pub fn all(&self) -> DatasetView<'_> {
        DatasetView {
            dataset: self,
            indices: (0..self.rows.len()).collect(),
        }
    }

    pub fn view(&self, indices: Vec<usize>) -> DatasetView<'_> {
        DatasetView {
            dataset: self,
            indices,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.rows.len());
        for row in &self.rows {
            if !seen.insert(row.case_id) {
                return Err(Error::Integrity(format!(
                    "duplicate case_id {} in base table",
                    row.case_id
                )));
            }
            if row.label > 1 {
                return Err(Error::Integrity(format!(
                    "case {} has non-binary label {}",
                    row.case_id, row.label
                )));
            }
            if row.fields.len() != self.base_fields.len() {
                return Err(Error::Integrity(format!(
                    "case {} has {} fields, expected {}",
                    row.case_id,
                    row.fields.len(),
                    self.base_fields.len()
                )));
            }
        }
        Ok(())
    }
}

/// Ordered subset of a dataset's rows.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    pub dataset: &'a Dataset,
    pub indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &'a CaseRow> + '_ {
        self.indices.iter().map(move |&i| &self.dataset.rows[i])
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows().map(|r| r.label).collect()
    }

    pub fn weeks(&self) -> Vec<u32> {
        self.rows().map(|r| r.week).collect()
    }

    pub fn case_ids(&self) -> Vec<i64> {
        self.rows().map(|r| r.case_id).collect()
    }

    /// Group labels; rows without a group map to `"NA"`.
    pub fn groups(&self) -> Vec<String> {
        self.rows()
            .map(|r| r.group.clone().unwrap_or_else(|| "NA".to_string()))
            .collect()
    }
}

/// Chronological split: train `week <= cut_week - val_weeks`,
/// validation `(cut_week - val_weeks, cut_week]`, test `week > cut_week`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSplit {
    pub cut_week: u32,
    pub val_weeks: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_by_week(ds: &Dataset, split: TimeSplit) -> Result<SplitIndices> {
    if split.val_weeks > split.cut_week {
        return Err(Error::Config(format!(
            "val_weeks {} exceeds cut_week {}",
            split.val_weeks, split.cut_week
        )));
    }
    let train_end = split.cut_week - split.val_weeks;
    let mut parts = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, row) in ds.rows.iter().enumerate() {
        if row.week <= train_end {
            parts.train.push(i);
        } else if row.week <= split.cut_week {
            parts.val.push(i);
        } else {
            parts.test.push(i);
        }
    }
    for (name, part) in [
        ("train", &parts.train),
        ("validation", &parts.val),
        ("test", &parts.test),
    ] {
        if part.is_empty() {
            return Err(Error::Config(format!(
                "{name} partition is empty for cut_week={} val_weeks={}",
                split.cut_week, split.val_weeks
            )));
        }
    }
    Ok(parts)
}

/// Controls for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadOptions {
    /// Column holding the sensitive group; absent columns leave groups unset.
    pub group_column: String,
    /// Scoring inputs may omit `target`.
    pub require_target: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            group_column: DEFAULT_GROUP_COLUMN.to_string(),
            require_target: true,
        }
    }
}

pub fn load_tables(base_path: &Path, aux_paths: &[PathBuf]) -> Result<Dataset> {
    load_tables_with(base_path, aux_paths, &LoadOptions::default())
}

pub fn load_tables_with(
    base_path: &Path,
    aux_paths: &[PathBuf],
    opts: &LoadOptions,
) -> Result<Dataset> {
    let base = RawTable::read(base_path)?;
    let file = base_path.display().to_string();

    let col = |name: &str| -> Result<usize> {
        base.column(name)
            .ok_or_else(|| Error::schema(&file, format!("missing required column `{name}`")))
    };
    let id_col = col(COL_CASE_ID)?;
    let date_col = col(COL_DATE)?;
    let week_col = col(COL_WEEK)?;
    let target_col = match base.column(COL_TARGET) {
        Some(c) => Some(c),
        None if opts.require_target => {
            return Err(Error::schema(
                &file,
                format!("missing required column `{COL_TARGET}`"),
            ))
        }
        None => None,
    };
    let group_col = base.column(&opts.group_column);

    let reserved: Vec<usize> = [
        Some(id_col),
        Some(date_col),
        Some(week_col),
        target_col,
        group_col,
    ]
    .into_iter()
    .flatten()
    .collect();
    let field_cols: Vec<usize> = (0..base.header.len())
        .filter(|c| !reserved.contains(c))
        .collect();
    let base_fields: Vec<String> = field_cols.iter().map(|&c| base.header[c].clone()).collect();
    let base_kinds: Vec<FieldKind> = field_cols.iter().map(|&c| base.infer_kind(c)).collect();

    let mut rows = Vec::with_capacity(base.cells.len());
    for (line, rec) in base.cells.iter().enumerate() {
        let at = |c: usize| rec[c].as_deref();
        let bad = |what: &str, v: Option<&str>| {
            Error::schema(
                &file,
                format!("row {}: invalid {what} `{}`", line + 2, v.unwrap_or("")),
            )
        };
        let case_id: i64 = at(id_col)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(COL_CASE_ID, at(id_col)))?;
        let decision_date = at(date_col)
            .and_then(parse_date)
            .ok_or_else(|| bad(COL_DATE, at(date_col)))?;
        let week: u32 = at(week_col)
            .and_then(parse_week)
            .ok_or_else(|| bad(COL_WEEK, at(week_col)))?;
        let label = match target_col {
            Some(c) => match at(c).and_then(|v| v.trim().parse::<f64>().ok()) {
                Some(0.0) => 0,
                Some(1.0) => 1,
                _ => return Err(bad(COL_TARGET, at(c))),
            },
            None => 0,
        };
        let group = group_col.map(|c| at(c).unwrap_or("NA").to_string());
        let fields = field_cols
            .iter()
            .zip(&base_kinds)
            .map(|(&c, &kind)| typed_value(rec[c].as_deref(), kind))
            .collect();
        rows.push(CaseRow {
            case_id,
            decision_date,
            week,
            label,
            group,
            fields,
        });
    }

    let aux_tables = load_aux_tables(aux_paths)?;
    let ds = Dataset {
        base_fields,
        base_kinds,
        rows,
        aux_tables,
        has_labels: target_col.is_some(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Groups `name_0.csv`, `name_1.csv`, ... into one table named `name`.
pub fn aux_table_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match stem.rsplit_once('_') {
        Some((prefix, suffix))
            if !prefix.is_empty()
                && !suffix.is_empty()
                && suffix.bytes().all(|b| b.is_ascii_digit()) =>
        {
            prefix.to_string()
        }
        _ => stem,
    }
}

fn load_aux_tables(paths: &[PathBuf]) -> Result<Vec<AuxTable>> {
    // name -> (header union, rows as name-keyed cells)
    let mut order: Vec<String> = Vec::new();
    let mut parts: BTreeMap<String, Vec<RawTable>> = BTreeMap::new();
    for path in paths {
        let table = RawTable::read(path)?;
        if table.column(COL_CASE_ID).is_none() {
            return Err(Error::schema(
                path.display().to_string(),
                format!("missing required column `{COL_CASE_ID}`"),
            ));
        }
        let name = aux_table_name(path);
        if !parts.contains_key(&name) {
            order.push(name.clone());
        }
        parts.entry(name).or_default().push(table);
    }

    let mut tables = Vec::with_capacity(order.len());
    for name in order {
        let group = &parts[&name];
        let mut fields: Vec<String> = Vec::new();
        for t in group {
            for h in &t.header {
                if h != COL_CASE_ID && !fields.contains(h) {
                    fields.push(h.clone());
                }
            }
        }
        // unioned raw cells, then a single type inference pass over the union
        let mut raw: Vec<(i64, Vec<Option<String>>)> = Vec::new();
        for t in group {
            let id_col = t.column(COL_CASE_ID).expect("checked above");
            let map: Vec<Option<usize>> = fields.iter().map(|f| t.column(f)).collect();
            for (line, rec) in t.cells.iter().enumerate() {
                let case_id: i64 = rec[id_col]
                    .as_deref()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| {
                        Error::schema(
                            t.path.display().to_string(),
                            format!("row {}: invalid case_id", line + 2),
                        )
                    })?;
                let cells = map.iter().map(|c| c.and_then(|c| rec[c].clone())).collect();
                raw.push((case_id, cells));
            }
        }
        let kinds: Vec<FieldKind> = (0..fields.len())
            .map(|j| infer_kind(raw.iter().map(|(_, cells)| cells[j].as_deref())))
            .collect();
        let records = raw
            .into_iter()
            .map(|(case_id, cells)| AuxRecord {
                case_id,
                values: cells
                    .iter()
                    .zip(&kinds)
                    .map(|(c, &k)| typed_value(c.as_deref(), k))
                    .collect(),
            })
            .collect();
        tables.push(AuxTable {
            name,
            fields,
            kinds,
            records,
        });
    }
    Ok(tables)
}

struct RawTable {
    path: PathBuf,
    header: Vec<String>,
    /// `None` marks a missing cell (empty or `NA`).
    cells: Vec<Vec<Option<String>>>,
}

impl RawTable {
    fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Load {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let header: Vec<String> = reader
            .headers()?
            .iter()
            .map(|h| h.trim().trim_start_matches('\u{feff}').to_string())
            .collect();
        let mut cells = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            cells.push(
                rec.iter()
                    .map(|v| {
                        let v = v.trim();
                        if v.is_empty() || v == "NA" {
                            None
                        } else {
                            Some(v.to_string())
                        }
                    })
                    .collect(),
            );
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            cells,
        })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn infer_kind(&self, col: usize) -> FieldKind {
        infer_kind(self.cells.iter().map(|r| r[col].as_deref()))
    }
}

fn infer_kind<'a>(mut cells: impl Iterator<Item = Option<&'a str>>) -> FieldKind {
    let numeric = cells.all(|c| c.is_none_or(|v| v.parse::<f64>().is_ok()));
    if numeric {
        FieldKind::Numeric
    } else {
        FieldKind::Categorical
    }
}

fn typed_value(cell: Option<&str>, kind: FieldKind) -> Value {
    match (cell, kind) {
        (None, _) => Value::Missing,
        (Some(v), FieldKind::Numeric) => match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Value::Num(x),
            _ => Value::Missing,
        },
        (Some(v), FieldKind::Categorical) => Value::Cat(v.to_string()),
    }
}

fn parse_date(v: &str) -> Option<NaiveDate> {
    let v = v.trim();
    NaiveDate::parse_from_str(v.get(..10).unwrap_or(v), "%Y-%m-%d").ok()
}

fn parse_week(v: &str) -> Option<u32> {
    let v = v.trim();
    v.parse::<u32>().ok().or_else(|| {
        v.parse::<f64>()
            .ok()
            .filter(|x| *x >= 0.0 && x.fract() == 0.0 && *x <= u32::MAX as f64)
            .map(|x| x as u32)
    })
}

/// Writes `base.csv` and one `<table>_0.csv` per auxiliary table.
pub fn write_tables(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let base_path = dir.join("base.csv");
    let mut w = csv::Writer::from_path(&base_path)?;
    let with_group = ds.has_groups();
    let mut header = vec![COL_CASE_ID, COL_DATE, COL_WEEK];
    if ds.has_labels {
        header.push(COL_TARGET);
    }
    if with_group {
        header.push(DEFAULT_GROUP_COLUMN);
    }
    let mut header: Vec<String> = header.into_iter().map(str::to_string).collect();
    header.extend(ds.base_fields.iter().cloned());
    w.write_record(&header)?;
    for row in &ds.rows {
        let mut rec = vec![
            row.case_id.to_string(),
            row.decision_date.format("%Y-%m-%d").to_string(),
            row.week.to_string(),
        ];
        if ds.has_labels {
            rec.push(row.label.to_string());
        }
        if with_group {
            rec.push(row.group.clone().unwrap_or_default());
        }
        rec.extend(row.fields.iter().map(Value::render));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut written = vec![base_path];
    for table in &ds.aux_tables {
        let path = dir.join(format!("{}_0.csv", table.name));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec![COL_CASE_ID.to_string()];
        header.extend(table.fields.iter().cloned());
        w.write_record(&header)?;
        for r in &table.records {
            let mut rec = vec![r.case_id.to_string()];
            rec.extend(r.values.iter().map(Value::render));
            w.write_record(&rec)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Synthetic generator configuration (JSON document).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_rows: usize,
    /// Numeric base features.
    pub n_features: usize,
    pub n_weeks: u32,
    /// Categorical base features, appended after the numeric ones.
    pub n_categorical: usize,
    /// Numeric fields of the auxiliary `prev` table (0 disables the table).
    pub n_aux_fields: usize,
    pub max_aux_records: usize,
    pub group_b_fraction: f64,
    /// Logit offset applied to group B.
    pub group_offset: f64,
    /// Mean shift of feature 0 for group B; makes feature 0 a group proxy.
    pub group_proxy_shift: f64,
    pub intercept: f64,
    /// Per-week rotation (radians) of the coefficient vector in the plane of features 1 and 2.
    pub drift_angle: f64,
    /// Per-week covariate mean shift magnitude along a fixed direction.
    pub mean_shift: f64,
    pub interaction: f64,
    pub missing_rate: f64,
    pub start_date: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_rows: 20_000,
            n_features: 20,
            n_weeks: 40,
            n_categorical: 2,
            n_aux_fields: 2,
            max_aux_records: 3,
            group_b_fraction: 0.5,
            group_offset: 0.8,
            group_proxy_shift: 1.0,
            intercept: -1.6,
            drift_angle: 0.03,
            mean_shift: 0.02,
            interaction: 0.6,
            missing_rate: 0.05,
            start_date: NaiveDate::from_ymd_opt(2020, 1, 6).expect("valid date"),
        }
    }
}

const CATEGORY_PROBS: [f64; 5] = [0.35, 0.25, 0.2, 0.12, 0.08];
const CATEGORY_EFFECTS: [f64; 5] = [-0.3, -0.1, 0.0, 0.25, 0.5];
const AUX_COEF: f64 = 0.6;
/// In-plane coefficient magnitude of the rotating component.
const PLANE_COEF: f64 = 1.2;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=FRAC_PI_2).contains(&self.drift_angle) {
            return Err(Error::Config(format!(
                "drift_angle {} outside [0, pi/2]",
                self.drift_angle
            )));
        }
        if self.n_features < 3 {
            return Err(Error::Config("n_features must be at least 3".into()));
        }
        if self.n_rows == 0 || self.n_weeks == 0 {
            return Err(Error::Config("n_rows and n_weeks must be positive".into()));
        }
        for (name, v) in [
            ("missing_rate", self.missing_rate),
            ("group_b_fraction", self.group_b_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// The true logistic coefficients over numeric features at `week`.
    pub fn coefficients(&self, seed: u64, week: u32) -> Vec<f64> {
        let mut base = self.base_coefficients(seed);
        let theta = self.drift_angle * week as f64;
        let (s, c) = theta.sin_cos();
        let (a, b) = (base[1], base[2]);
        base[1] = a * c - b * s;
        base[2] = a * s + b * c;
        base
    }

    fn base_coefficients(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0ef);
        let mut beta: Vec<f64> = (0..self.n_features)
            .map(|_| 0.45 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        beta[0] = 0.4;
        beta[1] = PLANE_COEF;
        beta[2] = 0.0;
        beta
    }

    fn shift_direction(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1f7_0000);
        let v: Vec<f64> = (0..self.n_features)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / norm).collect()
    }
}

/// Generates a week-ordered dataset whose labels follow a logistic model with
/// rotating coefficients, covariate mean drift and a group-B intercept offset.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = cfg.shift_direction(seed);
    let coefs: Vec<Vec<f64>> = (0..cfg.n_weeks)
        .map(|w| cfg.coefficients(seed, w))
        .collect();

    let mut base_fields: Vec<String> = (0..cfg.n_features).map(|j| format!("num_{j}")).collect();
    let mut base_kinds = vec![FieldKind::Numeric; cfg.n_features];
    for j in 0..cfg.n_categorical {
        base_fields.push(format!("cat_{j}"));
        base_kinds.push(FieldKind::Categorical);
    }
    let aux_fields: Vec<String> = (0..cfg.n_aux_fields).map(|j| format!("f{j}")).collect();

    let mut rows = Vec::with_capacity(cfg.n_rows);
    let mut aux_records = Vec::new();
    for i in 0..cfg.n_rows {
        let week = ((i as u64 * cfg.n_weeks as u64) / cfg.n_rows as u64) as u32;
        let in_b = rng.random::<f64>() < cfg.group_b_fraction;
        let shift = cfg.mean_shift * week as f64;

        let mut x: Vec<f64> = (0..cfg.n_features)
            .map(|j| rng.sample::<f64, _>(StandardNormal) + shift * direction[j])
            .collect();
        if in_b {
            x[0] += cfg.group_proxy_shift;
        }
        let beta = &coefs[week as usize];
        let mut z = cfg.intercept + x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
        if cfg.n_features >= 5 {
            z += cfg.interaction * x[3] * x[4];
        }
        if in_b {
            z += cfg.group_offset;
        }

        let cats: Vec<usize> = (0..cfg.n_categorical)
            .map(|_| sample_category(&mut rng))
            .collect();
        z += cats.iter().map(|&k| CATEGORY_EFFECTS[k]).sum::<f64>();

        if cfg.n_aux_fields > 0 {
            let latent: f64 = rng.sample(StandardNormal);
            z += AUX_COEF * latent;
            let n_rec = rng.random_range(0..=cfg.max_aux_records);
            for _ in 0..n_rec {
                let values = (0..cfg.n_aux_fields)
                    .map(|j| {
                        let v =
                            latent * (1.0 + j as f64) + 0.5 * rng.sample::<f64, _>(StandardNormal);
                        if rng.random::<f64>() < cfg.missing_rate {
                            Value::Missing
                        } else {
                            Value::Num(v)
                        }
                    })
                    .collect();
                aux_records.push(AuxRecord {
                    case_id: i as i64 + 1,
                    values,
                });
            }
        }

        let label = u8::from(rng.random::<f64>() < sigmoid(z));
        let mut fields: Vec<Value> = x
            .into_iter()
            .map(|v| {
                if rng.random::<f64>() < cfg.missing_rate {
                    Value::Missing
                } else {
                    Value::Num(v)
                }
            })
            .collect();
        for k in cats {
            fields.push(if rng.random::<f64>() < cfg.missing_rate {
                Value::Missing
            } else {
                Value::Cat(format!("k{k}"))
            });
        }
        rows.push(CaseRow {
            case_id: i as i64 + 1,
            decision_date: cfg.start_date + Duration::days(7 * week as i64 + (i % 7) as i64),
            week,
            label,
            group: Some(if in_b { "B" } else { "A" }.to_string()),
            fields,
        });
    }

    let aux_tables = if cfg.n_aux_fields > 0 {
        vec![AuxTable {
            name: "prev".to_string(),
            kinds: vec![FieldKind::Numeric; aux_fields.len()],
            fields: aux_fields,
            records: aux_records,
        }]
    } else {
        Vec::new()
    };

    Ok(Dataset {
        base_fields,
        base_kinds,
        rows,
        aux_tables,
        has_labels: true,
    })
}

fn sample_category(rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in CATEGORY_PROBS.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    CATEGORY_PROBS.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    const BASE: &str = "case_id,date_decision,WEEK_NUM,target,group,income,kind\n\
        1,2020-01-01,0,0,A,10.5,x\n\
        2,2020-01-08,1,1,B,NA,y\n\
        3,2020-01-15,2,0,A,,x\n";

    #[test]
    fn base_without_aux() {
        let dir = tempfile::tempdir().unwrap();
        let base = write(dir.path(), "base.csv", BASE);
        let ds = load_tables(&base, &[]).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.aux_tables.is_empty());
        assert_eq!(ds.base_fields, vec!["income", "kind"]);
        assert_eq!(
            ds.base_kinds,
            vec![FieldKind::Numeric, FieldKind::Categorical]
        );
        assert_eq!(ds.rows[0].fields[0], Value::Num(10.5));
        assert!(ds.rows[1].fields[0].is_missing());
        assert!(ds.rows[2].fields[0].is_missing());
        assert_eq!(ds.rows[1].group.as_deref(), Some("B"));
    }

    #[test]
    fn aux_parts_are_unioned_by_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let base = write(dir.path(), "base.csv", BASE);
        let p0 = write(dir.path(), "prev_0.csv", "case_id,amt\n1,5\n1,7\n");
        let p1 = write(dir.path(), "prev_1.csv", "case_id,amt\n2,1\n3,2\n3,NA\n");
        let ds = load_tables(&base, &[p0, p1]).unwrap();
        assert_eq!(ds.aux_tables.len(), 1);
        assert_eq!(ds.aux_tables[0].name, "prev");
        assert_eq!(ds.aux_tables[0].records.len(), 5);
    }

    #[test]
    fn missing_target_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let base = write(
            dir.path(),
            "base.csv",
            "case_id,date_decision,WEEK_NUM\n1,2020-01-01,0\n",
        );
        let err = load_tables(&base, &[]).unwrap_err();
        match err {
            Error::Schema { file, message } => {
                assert!(file.ends_with("base.csv"));
                assert!(message.contains("target"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aux_without_case_id_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let base = write(dir.path(), "base.csv", BASE);
        let p0 = write(dir.path(), "prev_0.csv", "id,amt\n1,5\n");
        assert!(matches!(
            load_tables(&base, &[p0]),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn duplicate_case_id_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let base = write(
            dir.path(),
            "base.csv",
            "case_id,date_decision,WEEK_NUM,target\n1,2020-01-01,0,0\n1,2020-01-02,0,1\n",
        );
        assert!(matches!(load_tables(&base, &[]), Err(Error::Integrity(_))));
    }

    #[test]
    fn table_name_strips_numeric_suffix() {
        assert_eq!(aux_table_name(Path::new("x/prev_0.csv")), "prev");
        assert_eq!(
            aux_table_name(Path::new("credit_bureau_a_1_12.csv")),
            "credit_bureau_a_1"
        );
        assert_eq!(aux_table_name(Path::new("person.csv")), "person");
    }

    fn week_dataset(weeks: impl IntoIterator<Item = u32>) -> Dataset {
        let rows = weeks
            .into_iter()
            .enumerate()
            .map(|(i, w)| CaseRow {
                case_id: i as i64,
                decision_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
                week: w,
                label: (i % 2) as u8,
                group: None,
                fields: vec![],
            })
            .collect();
        Dataset {
            base_fields: vec![],
            base_kinds: vec![],
            rows,
            aux_tables: vec![],
            has_labels: true,
        }
    }

    #[test]
    fn split_boundaries() {
        let ds = week_dataset(0..10);
        let s = split_by_week(
            &ds,
            TimeSplit {
                cut_week: 7,
                val_weeks: 2,
            },
        )
        .unwrap();
        let weeks = |idx: &[usize]| idx.iter().map(|&i| ds.rows[i].week).collect::<Vec<_>>();
        assert_eq!(weeks(&s.train), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(weeks(&s.val), vec![6, 7]);
        assert_eq!(weeks(&s.test), vec![8, 9]);
    }

    #[test]
    fn split_with_empty_test_fails() {
        let ds = week_dataset(0..10);
        assert!(matches!(
            split_by_week(
                &ds,
                TimeSplit {
                    cut_week: 9,
                    val_weeks: 2
                }
            ),
            Err(Error::Config(_))
        ));
        assert!(split_by_week(
            &ds,
            TimeSplit {
                cut_week: 7,
                val_weeks: 0
            }
        )
        .is_err());
    }

    #[test]
    fn drift_angle_is_validated() {
        let cfg = SynthConfig {
            drift_angle: 2.0,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_drift_keeps_coefficients() {
        let cfg = SynthConfig {
            drift_angle: 0.0,
            ..SynthConfig::default()
        };
        let c0 = cfg.coefficients(3, 0);
        for w in 1..cfg.n_weeks {
            assert_eq!(cfg.coefficients(3, w), c0);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig {
            n_rows: 500,
            ..SynthConfig::default()
        };
        assert_eq!(
            synth_generate(&cfg, 9).unwrap(),
            synth_generate(&cfg, 9).unwrap()
        );
        assert_ne!(
            synth_generate(&cfg, 9).unwrap(),
            synth_generate(&cfg, 10).unwrap()
        );
    }

    #[test]
    fn csv_round_trip_preserves_dataset() {
        let cfg = SynthConfig {
            n_rows: 300,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_tables(&ds, dir.path()).unwrap();
        let back = load_tables(&files[0], &files[1..]).unwrap();
        assert_eq!(back, ds);
    }

    proptest::proptest! {
        #[test]
        fn split_is_an_ordered_partition(
            weeks in proptest::collection::vec(0u32..20, 1..300),
            cut in 2u32..18,
            val in 1u32..3,
        ) {
            let ds = week_dataset(weeks);
            if let Ok(s) = split_by_week(&ds, TimeSplit { cut_week: cut, val_weeks: val }) {
                let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
                proptest::prop_assert!(s.train.windows(2).all(|w| w[0] < w[1]));
                proptest::prop_assert!(s.val.windows(2).all(|w| w[0] < w[1]));
                proptest::prop_assert!(s.test.windows(2).all(|w| w[0] < w[1]));
                all.sort_unstable();
                proptest::prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
            }
        }
    }
}
