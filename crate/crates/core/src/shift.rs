//! Train-versus-validation drift test and shift-aware convex score fusion.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::mean_nll;

pub const DEFAULT_PSI_BINS: usize = 10;
pub const DEFAULT_TAU: f64 = 0.10;
/// Proportion floor inside the PSI logarithm.
pub const PSI_FLOOR: f64 = 1e-6;
/// Number of grid steps on `[0, 1]` for the fusion weight.
pub const BETA_STEPS: usize = 20;
/// Objectives closer than this are treated as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub per_feature_psi: BTreeMap<String, f64>,
    pub mean_psi: f64,
    pub score_ks: f64,
    pub d_shift: f64,
    pub tau: f64,
    pub shifted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionChoice {
    /// Weight on the GBDT score; `1 - beta` goes to the BNN.
    pub beta: f64,
    pub objective: String,
    pub objective_value: f64,
    pub search_grid: Vec<f64>,
    pub grid_objectives: Vec<f64>,
    pub used_recent_half: bool,
    pub weeks_used: Vec<u32>,
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Right-closed bin edges from train quantiles; edges at the train maximum
/// are dropped so every bin is populated by some train value.
pub fn psi_edges(train: &[f64], n_bins: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = train.iter().copied().filter(|v| !v.is_nan()).collect();
    if sorted.is_empty() {
        return Vec::new();
    }
    sorted.sort_by(f64::total_cmp);
    let max = sorted[sorted.len() - 1];
    let mut edges: Vec<f64> = (1..n_bins)
        .map(|k| quantile_sorted(&sorted, k as f64 / n_bins as f64))
        .filter(|&e| e < max)
        .collect();
    edges.dedup();
    edges
}

fn bin_proportions(values: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut counts = vec![0usize; edges.len() + 1];
    let mut n = 0usize;
    for &v in values.iter().filter(|v| !v.is_nan()) {
        counts[edges.partition_point(|&e| e < v)] += 1;
        n += 1;
    }
    counts
        .into_iter()
        .map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect()
}

/// Population stability index of `val` against train quantile bins.
pub fn psi(train: &[f64], val: &[f64], n_bins: usize) -> Result<f64> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("PSI needs non-empty columns".into()));
    }
    if n_bins == 0 {
        return Err(Error::Contract("PSI needs at least one bin".into()));
    }
    let edges = psi_edges(train, n_bins);
    let p = bin_proportions(train, &edges);
    let q = bin_proportions(val, &edges);
    Ok(p.iter()
        .zip(&q)
        .map(|(&p, &q)| {
            let (p, q) = (p.max(PSI_FLOOR), q.max(PSI_FLOOR));
            (p - q) * (p / q).ln()
        })
        .sum())
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("KS needs non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Per-column PSI between feature matrices plus KS between score samples,
/// aggregated as `max(mean PSI, KS)`.
pub fn drift_test(
    train_x: ArrayView2<'_, f64>,
    train_scores: &[f64],
    val_x: ArrayView2<'_, f64>,
    val_scores: &[f64],
    feature_names: &[String],
    tau: f64,
) -> Result<DriftReport> {
    if train_x.ncols() != val_x.ncols() || feature_names.len() != train_x.ncols() {
        return Err(Error::Contract(
            "drift test needs matching feature counts".into(),
        ));
    }
    let mut per_feature_psi = BTreeMap::new();
    let mut total = 0.0;
    for (j, name) in feature_names.iter().enumerate() {
        let a = train_x.column(j).to_vec();
        let b = val_x.column(j).to_vec();
        let v = psi(&a, &b, DEFAULT_PSI_BINS)?;
        total += v;
        per_feature_psi.insert(name.clone(), v);
    }
    let mean_psi = if feature_names.is_empty() {
        0.0
    } else {
        total / feature_names.len() as f64
    };
    let score_ks = ks_statistic(train_scores, val_scores)?;
    let d_shift = mean_psi.max(score_ks);
    Ok(DriftReport {
        per_feature_psi,
        mean_psi,
        score_ks,
        d_shift,
        tau,
        shifted: d_shift > tau,
    })
}

/// `beta * mu_gbdt + (1 - beta) * mu_bnn`, row by row.
pub fn fuse(mu_gbdt: &[f64], mu_bnn: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Contract(format!(
            "fusion weight {beta} outside [0, 1]"
        )));
    }
    if mu_gbdt.len() != mu_bnn.len() {
        return Err(Error::Contract("fusion inputs differ in length".into()));
    }
    Ok(mu_gbdt
        .iter()
        .zip(mu_bnn)
        .map(|(&g, &b)| beta * g + (1.0 - beta) * b)
        .collect())
}

pub fn beta_grid() -> Vec<f64> {
    (0..=BETA_STEPS)
        .map(|i| i as f64 / BETA_STEPS as f64)
        .collect()
}

/// Grid search of the fusion weight by validation NLL. Under shift only the
/// most recent half of the validation weeks is scored.
pub fn select_weight(
    mu_gbdt: &[f64],
    mu_bnn: &[f64],
    labels: &[u8],
    weeks: &[u32],
    report: &DriftReport,
) -> Result<FusionChoice> {
    let n = labels.len();
    if mu_gbdt.len() != n || mu_bnn.len() != n || weeks.len() != n {
        return Err(Error::Contract(
            "select_weight inputs must be aligned".into(),
        ));
    }
    let mut distinct: Vec<u32> = weeks.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let weeks_used: Vec<u32> = if report.shifted {
        let keep = distinct.len().div_ceil(2);
        distinct[distinct.len() - keep..].to_vec()
    } else {
        distinct
    };
    let rows: Vec<usize> = (0..n)
        .filter(|&i| weeks_used.binary_search(&weeks[i]).is_ok())
        .collect();
    let y: Vec<u8> = rows.iter().map(|&i| labels[i]).collect();
    let g: Vec<f64> = rows.iter().map(|&i| mu_gbdt[i]).collect();
    let b: Vec<f64> = rows.iter().map(|&i| mu_bnn[i]).collect();

    let grid = beta_grid();
    let both_classes = y.contains(&0) && y.contains(&1);
    let objectives: Vec<f64> = grid
        .iter()
        .map(|&beta| {
            fuse(&g, &b, beta).map(|s| {
                if s.is_empty() {
                    f64::NAN
                } else {
                    mean_nll(&s, &y)
                }
            })
        })
        .collect::<Result<_>>()?;

    let mid = BETA_STEPS / 2;
    let best = if both_classes {
        let min = objectives.iter().copied().fold(f64::INFINITY, f64::min);
        (0..grid.len())
            .filter(|&i| objectives[i] <= min + TIE_TOLERANCE)
            .min_by_key(|&i| (i.abs_diff(mid), i))
            .unwrap_or(mid)
    } else {
        log::warn!(
            "validation rows used for fusion hold a single class; falling back to beta = 0.5"
        );
        mid
    };
    Ok(FusionChoice {
        beta: grid[best],
        objective: "val_nll".into(),
        objective_value: objectives[best],
        search_grid: grid,
        grid_objectives: objectives,
        used_recent_half: report.shifted,
        weeks_used,
    })
}
