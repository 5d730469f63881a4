//! Newton-boosted logistic tree ensemble with a group-fairness constraint.
//!
//! Each round fits one regression tree to second-order statistics of the
//! logistic loss by exact greedy split search. The fairness constraint is
//! enforced by reweighting groups: whenever the validation gap exceeds
//! `delta_max`, the lower-rate group's gradients and hessians are scaled up by
//! `exp(lambda_fair * (gap - delta_max))` and the higher-rate group's scaled
//! down by the reciprocal, within `[weight_floor, weight_cap]`.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{clamp_prob, logit, sigmoid};
use crate::metrics::{fairness_gaps, FairnessGaps};
use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMetric {
    DemographicParity,
    EqualizedOdds,
}

impl GapMetric {
    pub fn value(self, gaps: &FairnessGaps) -> f64 {
        match self {
            GapMetric::DemographicParity => gaps.dp_gap,
            GapMetric::EqualizedOdds => gaps.eo_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_child_rows: usize,
    pub lambda_reg: f64,
    pub gamma: f64,
    /// Zero disables the fairness constraint.
    pub lambda_fair: f64,
    pub delta_max: f64,
    /// Decision threshold for the fairness gap.
    pub threshold: f64,
    pub gap_metric: GapMetric,
    pub weight_cap: f64,
    pub weight_floor: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_rounds: 200,
            learning_rate: 0.1,
            max_depth: 4,
            min_child_rows: 20,
            lambda_reg: 1.0,
            gamma: 0.0,
            lambda_fair: 10.0,
            delta_max: 0.05,
            threshold: 0.5,
            gap_metric: GapMetric::DemographicParity,
            weight_cap: 4.0,
            weight_floor: 0.25,
        }
    }
}

impl GbdtParams {
    /// The same parameters with the fairness constraint switched off.
    pub fn unconstrained(&self) -> Self {
        Self {
            lambda_fair: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta_max) {
            return Err(Error::Config(format!(
                "delta_max {} outside [0, 1]",
                self.delta_max
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("GBDT learning_rate must be positive".into()));
        }
        if !(self.lambda_reg >= 0.0) || !(self.gamma >= 0.0) || !(self.lambda_fair >= 0.0) {
            return Err(Error::Config(
                "lambda_reg, gamma and lambda_fair must be non-negative".into(),
            ));
        }
        if self.min_child_rows == 0 {
            return Err(Error::Config("min_child_rows must be at least 1".into()));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor <= 1.0 && self.weight_cap >= 1.0) {
            return Err(Error::Config(
                "group weights need 0 < weight_floor <= 1 <= weight_cap".into(),
            ));
        }
        Ok(())
    }

    fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_child_rows: self.min_child_rows,
            lambda_reg: self.lambda_reg,
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_child_rows: usize,
    pub lambda_reg: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x < threshold` go left; missing values follow `missing_left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        missing_left: bool,
    },
    Leaf {
        value: f64,
    },
}

/// A tree as a flat node array rooted at index 0. `covers[k]` is the number
/// of training rows that reached node `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub covers: Vec<f64>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value }],
            covers: vec![cover],
        }
    }

    /// Index of the leaf reached by `row`.
    pub fn leaf_index(&self, row: impl Fn(usize) -> f64) -> usize {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf { .. } => return k,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    missing_left,
                } => {
                    let v = row(feature);
                    let go_left = if v.is_nan() {
                        missing_left
                    } else {
                        v < threshold
                    };
                    k = if go_left { left } else { right };
                }
            }
        }
    }

    pub fn predict_row(&self, row: impl Fn(usize) -> f64) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], k: usize) -> usize {
            match nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Column-major feature copy with per-feature row order (missing rows left out).
struct Columns {
    values: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
}

impl Columns {
    fn new(x: ArrayView2<'_, f64>) -> Self {
        let values: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.to_vec()).collect();
        let sorted = values
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..col.len() as u32)
                    .filter(|&i| !col[i as usize].is_nan())
                    .collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Self { values, sorted }
    }
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    missing_left: bool,
}

struct TreeBuilder<'a> {
    cols: &'a Columns,
    grad: &'a [f64],
    hess: &'a [f64],
    params: TreeParams,
    nodes: Vec<Node>,
    covers: Vec<f64>,
}

impl TreeBuilder<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.params.lambda_reg;
        if denom > 0.0 {
            g * g / denom
        } else {
            0.0
        }
    }

    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.params.lambda_reg;
        if denom > 0.0 {
            -g / denom
        } else {
            0.0
        }
    }

    fn best_split(
        &self,
        rows: &[u32],
        sorted: &[Vec<u32>],
        g_total: f64,
        h_total: f64,
    ) -> Option<Candidate> {
        let min_rows = self.params.min_child_rows;
        let n = rows.len();
        if n < 2 * min_rows {
            return None;
        }
        let parent = self.score(g_total, h_total);
        let mut best: Option<Candidate> = None;
        for (feature, order) in sorted.iter().enumerate() {
            let col = &self.cols.values[feature];
            let n_obs = order.len();
            let (mut g_obs, mut h_obs) = (0.0, 0.0);
            for &i in order {
                g_obs += self.grad[i as usize];
                h_obs += self.hess[i as usize];
            }
            let n_miss = n - n_obs;
            let (g_miss, h_miss) = (g_total - g_obs, h_total - h_obs);
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..n_obs.saturating_sub(1) {
                let i = order[k] as usize;
                gl += self.grad[i];
                hl += self.hess[i];
                let (a, b) = (col[i], col[order[k + 1] as usize]);
                if a == b {
                    continue;
                }
                let mut threshold = a + (b - a) / 2.0;
                if threshold <= a {
                    threshold = b;
                }
                let n_left = k + 1;
                // missing rows on the left first, so equal gains prefer left
                for missing_left in [true, false] {
                    if !missing_left && n_miss == 0 {
                        continue;
                    }
                    let (glm, hlm, nl) = if missing_left {
                        (gl + g_miss, hl + h_miss, n_left + n_miss)
                    } else {
                        (gl, hl, n_left)
                    };
                    let nr = n - nl;
                    if nl < min_rows || nr < min_rows {
                        continue;
                    }
                    let gain = 0.5
                        * (self.score(glm, hlm) + self.score(g_total - glm, h_total - hlm)
                            - parent)
                        - self.params.gamma;
                    if best.as_ref().is_none_or(|c| gain > c.gain) {
                        best = Some(Candidate {
                            gain,
                            feature,
                            threshold,
                            missing_left,
                        });
                    }
                }
            }
        }
        best.filter(|c| c.gain > 0.0)
    }

    fn build(&mut self, rows: Vec<u32>, sorted: Vec<Vec<u32>>, depth: usize) -> usize {
        let (mut g, mut h) = (0.0, 0.0);
        for &i in &rows {
            g += self.grad[i as usize];
            h += self.hess[i as usize];
        }
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: self.leaf_value(g, h),
        });
        self.covers.push(rows.len() as f64);
        if depth >= self.params.max_depth {
            return id;
        }
        let Some(split) = self.best_split(&rows, &sorted, g, h) else {
            return id;
        };

        let col = &self.cols.values[split.feature];
        let goes_left = |i: u32| {
            let v = col[i as usize];
            if v.is_nan() {
                split.missing_left
            } else {
                v < split.threshold
            }
        };
        let (rows_l, rows_r): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&i| goes_left(i));
        let mut sorted_l = Vec::with_capacity(sorted.len());
        let mut sorted_r = Vec::with_capacity(sorted.len());
        for order in sorted {
            let (l, r): (Vec<u32>, Vec<u32>) = order.into_iter().partition(|&i| goes_left(i));
            sorted_l.push(l);
            sorted_r.push(r);
        }
        let left = self.build(rows_l, sorted_l, depth + 1);
        let right = self.build(rows_r, sorted_r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            missing_left: split.missing_left,
        };
        id
    }
}

fn fit_tree_on(cols: &Columns, grad: &[f64], hess: &[f64], params: TreeParams) -> Tree {
    let n = grad.len() as u32;
    let mut builder = TreeBuilder {
        cols,
        grad,
        hess,
        params,
        nodes: Vec::new(),
        covers: Vec::new(),
    };
    builder.build((0..n).collect(), cols.sorted.clone(), 0);
    Tree {
        nodes: builder.nodes,
        covers: builder.covers,
    }
}

/// One regression tree on per-row gradients and hessians by exact greedy search.
pub fn fit_tree(
    grad: &[f64],
    hess: &[f64],
    x: ArrayView2<'_, f64>,
    params: TreeParams,
) -> Result<Tree> {
    if grad.len() != x.nrows() || hess.len() != x.nrows() {
        return Err(Error::Contract(
            "gradients and hessians must be row-aligned with X".into(),
        ));
    }
    if hess.iter().any(|&h| !(h >= 0.0)) {
        return Err(Error::Contract("hessians must be non-negative".into()));
    }
    Ok(fit_tree_on(&Columns::new(x), grad, hess, params))
}

/// Rows, labels and group membership for fitting.
#[derive(Debug, Clone, Copy)]
pub struct GbdtData<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a [u8],
    pub groups: &'a [String],
}

impl GbdtData<'_> {
    fn check(&self, name: &str) -> Result<()> {
        if self.y.len() != self.x.nrows() || self.groups.len() != self.x.nrows() {
            return Err(Error::Contract(format!(
                "{name}: X, labels and groups differ in length"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub schema_version: u32,
    pub n_features: usize,
    pub base_logit: f64,
    pub learning_rate: f64,
    pub params: GbdtParams,
    pub trees: Vec<Tree>,
    pub group_names: Vec<String>,
    /// Group weights in effect for each fitted round, aligned with `group_names`.
    pub weight_history: Vec<Vec<f64>>,
    /// Validation fairness gap after each round (empty when the constraint is off).
    pub gap_history: Vec<f64>,
}

impl GbdtModel {
    pub fn fit(
        train: &GbdtData<'_>,
        val: Option<&GbdtData<'_>>,
        params: &GbdtParams,
    ) -> Result<Self> {
        params.validate()?;
        train.check("train")?;
        if train.y.is_empty() {
            return Err(Error::Contract(
                "cannot fit GBDT on an empty training set".into(),
            ));
        }
        let enforce = params.lambda_fair > 0.0;
        if let Some(v) = val {
            v.check("validation")?;
            if v.x.ncols() != train.x.ncols() {
                return Err(Error::schema(
                    "gbdt",
                    "validation feature count differs from train",
                ));
            }
        }
        if enforce && val.is_none_or(|v| v.y.is_empty()) {
            return Err(Error::Config(
                "lambda_fair > 0 requires validation rows".into(),
            ));
        }

        let mut group_names: Vec<String> = train.groups.to_vec();
        if let Some(v) = val {
            group_names.extend(v.groups.iter().cloned());
        }
        group_names.sort();
        group_names.dedup();
        let group_of = |g: &String| group_names.binary_search(g).expect("group collected");
        let train_group: Vec<usize> = train.groups.iter().map(group_of).collect();

        let n = train.y.len();
        let pos = train.y.iter().filter(|&&y| y == 1).count();
        let base_logit = logit(clamp_prob(pos as f64 / n as f64));
        let mut model = Self {
            schema_version: SCHEMA_VERSION,
            n_features: train.x.ncols(),
            base_logit,
            learning_rate: params.learning_rate,
            params: params.clone(),
            trees: Vec::new(),
            group_names: group_names.clone(),
            weight_history: Vec::new(),
            gap_history: Vec::new(),
        };
        if pos == 0 || pos == n {
            log::warn!(
                "GBDT training labels are all {}; returning a constant model",
                train.y[0]
            );
            return Ok(model);
        }

        let cols = Columns::new(train.x);
        let mut margin = vec![base_logit; n];
        let mut val_margin = val.map(|v| vec![base_logit; v.y.len()]);
        let mut weights = vec![1.0; group_names.len()];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let eta = params.learning_rate;

        for _ in 0..params.n_rounds {
            for i in 0..n {
                let p = sigmoid(margin[i]);
                let w = weights[train_group[i]];
                grad[i] = w * (p - f64::from(train.y[i]));
                hess[i] = w * p * (1.0 - p);
            }
            let tree = fit_tree_on(&cols, &grad, &hess, params.tree_params());
            for (i, m) in margin.iter_mut().enumerate() {
                *m += eta * tree.predict_row(|j| cols.values[j][i]);
            }
            model.weight_history.push(weights.clone());
            if let (Some(v), Some(vm)) = (val, val_margin.as_mut()) {
                let xv = v.x;
                for (i, m) in vm.iter_mut().enumerate() {
                    *m += eta * tree.predict_row(|j| xv[[i, j]]);
                }
                if enforce {
                    let probs: Vec<f64> = vm.iter().map(|&m| sigmoid(m)).collect();
                    let gaps = fairness_gaps(&probs, v.y, v.groups, params.threshold)?;
                    let gap = params.gap_metric.value(&gaps);
                    model.gap_history.push(gap);
                    if gap > params.delta_max {
                        reweight(&mut weights, &group_names, &gaps, gap, params);
                    }
                }
            }
            model.trees.push(tree);
        }
        Ok(model)
    }

    pub fn predict_margin(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::schema(
                "gbdt",
                format!("expected {} features, got {}", self.n_features, x.ncols()),
            ));
        }
        Ok(x.rows()
            .into_iter()
            .map(|row| {
                let sum: f64 = self.trees.iter().map(|t| t.predict_row(|j| row[j])).sum();
                self.base_logit + self.learning_rate * sum
            })
            .collect())
    }

    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.predict_margin(x)?.into_iter().map(sigmoid).collect())
    }

    /// Final group weights keyed by group name.
    pub fn final_weights(&self) -> BTreeMap<String, f64> {
        let last = self.weight_history.last();
        self.group_names
            .iter()
            .enumerate()
            .map(|(k, g)| (g.clone(), last.map_or(1.0, |w| w[k])))
            .collect()
    }

    pub fn check_version(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "gbdt schema_version {} does not match supported version {}",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        Ok(())
    }
}

/// Pushes weight toward the group with the lowest rate of the violated gap.
fn reweight(
    weights: &mut [f64],
    names: &[String],
    gaps: &FairnessGaps,
    gap: f64,
    params: &GbdtParams,
) {
    let rate = |r: &crate::metrics::GroupRates| -> Option<f64> {
        match params.gap_metric {
            GapMetric::DemographicParity => Some(r.positive_rate),
            GapMetric::EqualizedOdds if gaps.tpr_gap >= gaps.fpr_gap => r.tpr,
            GapMetric::EqualizedOdds => r.fpr,
        }
    };
    let rated: Vec<(usize, f64)> = gaps
        .per_group
        .iter()
        .filter_map(|(g, r)| Some((names.binary_search(g).ok()?, rate(r)?)))
        .collect();
    // first minimum and first maximum in name order
    let low = rated
        .iter()
        .fold(None::<(usize, f64)>, |acc, &(k, v)| match acc {
            Some((_, best)) if best <= v => acc,
            _ => Some((k, v)),
        });
    let high = rated
        .iter()
        .fold(None::<(usize, f64)>, |acc, &(k, v)| match acc {
            Some((_, best)) if best >= v => acc,
            _ => Some((k, v)),
        });
    let (Some((lo, _)), Some((hi, _))) = (low, high) else {
        return;
    };
    if lo == hi {
        return;
    }
    let factor = (params.lambda_fair * (gap - params.delta_max)).exp();
    weights[lo] = (weights[lo] * factor).min(params.weight_cap);
    weights[hi] = (weights[hi] / factor).max(params.weight_floor);
}
