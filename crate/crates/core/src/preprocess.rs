//! Train-only feature construction: per-case pooling of auxiliary records,
//! missingness masks, median imputation, frequency encoding and
//! standardization.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{AuxTable, Dataset, DatasetView, FieldKind, Value};
use crate::error::{Error, Result};
use crate::math::{mean_std, median};
use crate::SCHEMA_VERSION;

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DATE_FEATURE: &str = "date_decision";
pub const MASK_SUFFIX: &str = "__observed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Mean,
    Max,
    Min,
    Sum,
    Last,
}

impl Aggregator {
    pub const ALL: [Aggregator; 5] = [
        Aggregator::Mean,
        Aggregator::Max,
        Aggregator::Min,
        Aggregator::Sum,
        Aggregator::Last,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
            Aggregator::Min => "min",
            Aggregator::Sum => "sum",
            Aggregator::Last => "last",
        }
    }

    /// Pools the observed values of one field; `None` when nothing is observed.
    fn pool(self, values: impl Iterator<Item = f64>) -> Option<f64> {
        let mut n = 0usize;
        let mut acc: Option<f64> = None;
        for v in values {
            n += 1;
            acc = Some(match (self, acc) {
                (_, None) => v,
                (Aggregator::Mean | Aggregator::Sum, Some(a)) => a + v,
                (Aggregator::Max, Some(a)) => a.max(v),
                (Aggregator::Min, Some(a)) => a.min(v),
                (Aggregator::Last, Some(_)) => v,
            });
        }
        match self {
            Aggregator::Mean => acc.map(|a| a / n as f64),
            _ => acc,
        }
    }
}

/// Pooling plan for one auxiliary table. Output order is aggregator-major:
/// every field under the first aggregator, then every field under the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablePlan {
    pub table: String,
    pub fields: Vec<String>,
    pub aggregators: Vec<Aggregator>,
    /// Sorts a case's records by this field before `last` is taken.
    #[serde(default)]
    pub order_by: Option<String>,
}

impl TablePlan {
    pub fn pairs(&self) -> impl Iterator<Item = (&str, Aggregator)> + '_ {
        self.aggregators
            .iter()
            .flat_map(move |&a| self.fields.iter().map(move |f| (f.as_str(), a)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregationPlan {
    pub tables: Vec<TablePlan>,
}

impl AggregationPlan {
    /// Every numeric field of every auxiliary table under all five aggregators.
    pub fn default_for(ds: &Dataset) -> Self {
        let tables = ds
            .aux_tables
            .iter()
            .map(|t| TablePlan {
                table: t.name.clone(),
                fields: t
                    .fields
                    .iter()
                    .zip(&t.kinds)
                    .filter(|(_, k)| **k == FieldKind::Numeric)
                    .map(|(f, _)| f.clone())
                    .collect(),
                aggregators: Aggregator::ALL.to_vec(),
                order_by: None,
            })
            .filter(|p| !p.fields.is_empty())
            .collect();
        Self { tables }
    }
}

/// Pools one case's records (each projected onto the plan's fields) into a
/// fragment of length `aggregators.len() * n_fields`. Missing values are
/// skipped per aggregator; an empty record set gives an all-missing fragment.
pub fn aggregate_case(
    records: &[Vec<Option<f64>>],
    n_fields: usize,
    aggregators: &[Aggregator],
) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(n_fields * aggregators.len());
    for &agg in aggregators {
        for j in 0..n_fields {
            out.push(agg.pool(records.iter().filter_map(|r| r[j])));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureSource {
    Base {
        field: String,
    },
    DecisionDate,
    Aux {
        table: String,
        field: String,
        aggregator: Aggregator,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FieldKind,
    pub source: FeatureSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub epsilon: f64,
    /// Adds the decision date as a days-since-epoch numeric feature.
    pub encode_decision_date: bool,
    /// `None` pools every numeric auxiliary field with all aggregators.
    pub plan: Option<AggregationPlan>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            encode_decision_date: true,
            plan: None,
        }
    }
}

/// Statistics fitted on the training partition only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorState {
    pub schema_version: u32,
    pub epsilon: f64,
    pub aggregation_plan: AggregationPlan,
    pub base_fields: Vec<String>,
    pub feature_order: Vec<FeatureSpec>,
    pub medians: BTreeMap<String, f64>,
    pub freq_maps: BTreeMap<String, BTreeMap<String, f64>>,
    pub means: BTreeMap<String, f64>,
    pub stds: BTreeMap<String, f64>,
}

/// Model-ready matrices for a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    /// Encoded feature values followed by one mask column per numeric feature.
    pub x: Array2<f64>,
    /// Observation mask over all features (1 = observed).
    pub mask: Array2<f64>,
    pub column_names: Vec<String>,
    pub case_ids: Vec<i64>,
}

impl Design {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }
}

pub fn fit(train: &DatasetView<'_>, opts: &PreprocessOptions) -> Result<PreprocessorState> {
    if train.is_empty() {
        return Err(Error::Config(
            "cannot fit preprocessing on an empty training set".into(),
        ));
    }
    if !(opts.epsilon > 0.0) {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {}",
            opts.epsilon
        )));
    }
    let ds = train.dataset;
    let plan = opts
        .plan
        .clone()
        .unwrap_or_else(|| AggregationPlan::default_for(ds));

    let mut features = Vec::new();
    for (f, &kind) in ds.base_fields.iter().zip(&ds.base_kinds) {
        features.push(FeatureSpec {
            name: f.clone(),
            kind,
            source: FeatureSource::Base { field: f.clone() },
        });
    }
    if opts.encode_decision_date {
        features.push(FeatureSpec {
            name: DATE_FEATURE.to_string(),
            kind: FieldKind::Numeric,
            source: FeatureSource::DecisionDate,
        });
    }
    for tp in &plan.tables {
        let table = ds
            .aux_table(&tp.table)
            .ok_or_else(|| Error::schema(&tp.table, "aggregation plan names an unknown table"))?;
        for field in tp.fields.iter().chain(tp.order_by.iter()) {
            if table.field_index(field).is_none() {
                return Err(Error::schema(&tp.table, format!("unknown field `{field}`")));
            }
        }
        for (field, agg) in tp.pairs() {
            features.push(FeatureSpec {
                name: format!("{}.{}.{}", tp.table, field, agg.name()),
                kind: FieldKind::Numeric,
                source: FeatureSource::Aux {
                    table: tp.table.clone(),
                    field: field.to_string(),
                    aggregator: agg,
                },
            });
        }
    }

    let raw = extract_raw(ds, &train.indices, &features, &plan)?;

    let mut medians = BTreeMap::new();
    let mut means = BTreeMap::new();
    let mut stds = BTreeMap::new();
    let mut freq_maps = BTreeMap::new();
    for (j, spec) in features.iter().enumerate() {
        match spec.kind {
            FieldKind::Numeric => {
                let observed: Vec<f64> = raw.iter().filter_map(|r| r[j].as_num()).collect();
                let med = median(&observed).unwrap_or_else(|| {
                    log::warn!(
                        "feature `{}` has no observed training values; median set to 0",
                        spec.name
                    );
                    0.0
                });
                let imputed: Vec<f64> = raw.iter().map(|r| r[j].as_num().unwrap_or(med)).collect();
                let (mu, sigma) = mean_std(&imputed);
                medians.insert(spec.name.clone(), med);
                means.insert(spec.name.clone(), mu);
                stds.insert(spec.name.clone(), sigma);
            }
            FieldKind::Categorical => {
                let mut counts: BTreeMap<String, usize> = BTreeMap::new();
                let mut total = 0usize;
                for r in &raw {
                    if let Some(key) = r[j].category_key() {
                        *counts.entry(key).or_default() += 1;
                        total += 1;
                    }
                }
                let map = counts
                    .into_iter()
                    .map(|(k, c)| (k, c as f64 / total as f64))
                    .collect();
                freq_maps.insert(spec.name.clone(), map);
            }
        }
    }

    Ok(PreprocessorState {
        schema_version: SCHEMA_VERSION,
        epsilon: opts.epsilon,
        aggregation_plan: plan,
        base_fields: ds.base_fields.clone(),
        feature_order: features,
        medians,
        freq_maps,
        means,
        stds,
    })
}

impl PreprocessorState {
    pub fn n_features(&self) -> usize {
        self.feature_order.len()
    }

    pub fn n_numeric(&self) -> usize {
        self.feature_order
            .iter()
            .filter(|f| f.kind == FieldKind::Numeric)
            .count()
    }

    /// Width of the model input: encoded values plus numeric mask columns.
    pub fn input_width(&self) -> usize {
        self.n_features() + self.n_numeric()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.feature_order.iter().map(|f| f.name.clone()).collect();
        names.extend(
            self.feature_order
                .iter()
                .filter(|f| f.kind == FieldKind::Numeric)
                .map(|f| format!("{}{MASK_SUFFIX}", f.name)),
        );
        names
    }

    pub fn transform(&self, view: &DatasetView<'_>) -> Result<Design> {
        let ds = view.dataset;
        self.check_compatible(ds)?;
        let raw = extract_raw(
            ds,
            &view.indices,
            &self.feature_order,
            &self.aggregation_plan,
        )?;

        let d = self.n_features();
        let n = raw.len();
        let mut x = Array2::<f64>::zeros((n, self.input_width()));
        let mut mask = Array2::<f64>::zeros((n, d));
        for (i, r) in raw.iter().enumerate() {
            let mut mcol = d;
            for (j, spec) in self.feature_order.iter().enumerate() {
                let cell = &r[j];
                let observed = !cell.is_missing();
                mask[[i, j]] = if observed { 1.0 } else { 0.0 };
                match spec.kind {
                    FieldKind::Numeric => {
                        let v = match cell {
                            Value::Num(v) => *v,
                            Value::Missing => self.medians[&spec.name],
                            Value::Cat(c) => {
                                return Err(Error::schema(
                                    &spec.name,
                                    format!("expected a numeric value, found `{c}`"),
                                ))
                            }
                        };
                        x[[i, j]] =
                            (v - self.means[&spec.name]) / (self.stds[&spec.name] + self.epsilon);
                        x[[i, mcol]] = mask[[i, j]];
                        mcol += 1;
                    }
                    FieldKind::Categorical => {
                        // unseen and missing categories share frequency 0
                        x[[i, j]] = cell
                            .category_key()
                            .and_then(|k| self.freq_maps[&spec.name].get(&k).copied())
                            .unwrap_or(0.0);
                    }
                }
            }
        }
        Ok(Design {
            x,
            mask,
            column_names: self.column_names(),
            case_ids: view.case_ids(),
        })
    }

    fn check_compatible(&self, ds: &Dataset) -> Result<()> {
        for f in &ds.base_fields {
            if !self.base_fields.contains(f) {
                return Err(Error::schema("input", format!("unknown column `{f}`")));
            }
        }
        for f in &self.base_fields {
            if ds.base_field_index(f).is_none() {
                return Err(Error::schema("input", format!("missing column `{f}`")));
            }
        }
        Ok(())
    }

    pub fn check_version(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "preprocessor schema_version {} does not match supported version {}",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        Ok(())
    }
}

/// Raw (unencoded) feature cells for the given rows, in `features` order.
fn extract_raw(
    ds: &Dataset,
    indices: &[usize],
    features: &[FeatureSpec],
    plan: &AggregationPlan,
) -> Result<Vec<Vec<Value>>> {
    // per plan table: fragment for each requested case
    let mut fragments: HashMap<&str, TableFragment> = HashMap::new();
    for tp in &plan.tables {
        let Some(table) = ds.aux_table(&tp.table) else {
            log::warn!(
                "auxiliary table `{}` absent from input; its features are missing",
                tp.table
            );
            fragments.insert(tp.table.as_str(), (owned_pairs(tp), HashMap::new()));
            continue;
        };
        let cols: Vec<usize> = tp
            .fields
            .iter()
            .map(|f| {
                table
                    .field_index(f)
                    .ok_or_else(|| Error::schema(&tp.table, format!("missing field `{f}`")))
            })
            .collect::<Result<_>>()?;
        let order_col = tp
            .order_by
            .as_ref()
            .map(|f| {
                table
                    .field_index(f)
                    .ok_or_else(|| Error::schema(&tp.table, format!("missing field `{f}`")))
            })
            .transpose()?;
        let by_case = table.index_by_case();
        let mut per_case = HashMap::with_capacity(indices.len());
        for &i in indices {
            let id = ds.rows[i].case_id;
            let mut recs: Vec<usize> = by_case.get(&id).cloned().unwrap_or_default();
            if let Some(oc) = order_col {
                recs.sort_by(|&a, &b| {
                    compare_values(&table.records[a].values[oc], &table.records[b].values[oc])
                });
            }
            let projected = project(table, &recs, &cols)?;
            per_case.insert(id, aggregate_case(&projected, cols.len(), &tp.aggregators));
        }
        fragments.insert(tp.table.as_str(), (owned_pairs(tp), per_case));
    }

    let base_cols: Vec<Option<usize>> = features
        .iter()
        .map(|f| match &f.source {
            FeatureSource::Base { field } => ds.base_field_index(field),
            _ => None,
        })
        .collect();

    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let row = &ds.rows[i];
        let mut cells = Vec::with_capacity(features.len());
        for (spec, col) in features.iter().zip(&base_cols) {
            let v = match &spec.source {
                FeatureSource::Base { field } => {
                    let c = col.ok_or_else(|| {
                        Error::schema("input", format!("missing column `{field}`"))
                    })?;
                    row.fields[c].clone()
                }
                FeatureSource::DecisionDate => Value::Num(
                    (row.decision_date
                        - chrono::NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch"))
                    .num_days() as f64,
                ),
                FeatureSource::Aux {
                    table,
                    field,
                    aggregator,
                } => {
                    let (pairs, per_case) = &fragments[table.as_str()];
                    let pos = pairs
                        .iter()
                        .position(|(f, a)| f == field && a == aggregator)
                        .expect("feature derived from plan");
                    match per_case.get(&row.case_id).and_then(|frag| frag[pos]) {
                        Some(v) => Value::Num(v),
                        None => Value::Missing,
                    }
                }
            };
            cells.push(v);
        }
        out.push(cells);
    }
    Ok(out)
}

/// Plan pairs of one aux table and the pooled values per case, one per pair.
type TableFragment = (Vec<(String, Aggregator)>, HashMap<i64, Vec<Option<f64>>>);

fn owned_pairs(tp: &TablePlan) -> Vec<(String, Aggregator)> {
    tp.pairs().map(|(f, a)| (f.to_string(), a)).collect()
}

fn project(table: &AuxTable, recs: &[usize], cols: &[usize]) -> Result<Vec<Vec<Option<f64>>>> {
    recs.iter()
        .map(|&r| {
            cols.iter()
                .map(|&c| match &table.records[r].values[c] {
                    Value::Num(v) => Ok(Some(*v)),
                    Value::Missing => Ok(None),
                    Value::Cat(s) => Err(Error::schema(
                        &table.name,
                        format!("field `{}` expected numeric, found `{s}`", table.fields[c]),
                    )),
                })
                .collect()
        })
        .collect()
}

/// Missing sorts first so observed records win `last`.
fn compare_values(a: &Value, b: &Value) -> Ordering {
    match (a, b) {
        (Value::Missing, Value::Missing) => Ordering::Equal,
        (Value::Missing, _) => Ordering::Less,
        (_, Value::Missing) => Ordering::Greater,
        (Value::Num(x), Value::Num(y)) => x.total_cmp(y),
        _ => a.category_key().cmp(&b.category_key()),
    }
}
