//! Ranking, operational, calibration, stability and group-fairness metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_TARGET_FPR: f64 = 0.01;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub recall_at_fpr: f64,
    pub brier: f64,
    pub ece: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub n: usize,
    pub positive_rate: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessGaps {
    pub dp_gap: f64,
    pub eo_gap: f64,
    pub tpr_gap: f64,
    pub fpr_gap: f64,
    pub delta: f64,
    pub per_group: BTreeMap<String, GroupRates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub split_week: u32,
    pub early_auc_pr: f64,
    pub late_auc_pr: f64,
    pub drop: f64,
    pub week_series: Vec<(u32, f64)>,
    /// Weeks without a positive label, left out of `week_series`.
    pub omitted_weeks: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_score: f64,
    pub mean_label: f64,
}

fn check_aligned(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

fn require_both_classes(labels: &[u8], metric: &str) -> Result<(usize, usize)> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{metric} needs both classes (positives={pos}, negatives={neg})"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_aligned(scores, labels)?;
    let (n_pos, n_neg) = require_both_classes(labels, "AUC-ROC")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // doubled pair count keeps the tie halves integral
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_tied, mut neg_tied) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos_tied += 1;
            } else {
                neg_tied += 1;
            }
            j += 1;
        }
        doubled += 2 * pos_tied * neg_below + pos_tied * neg_tied;
        neg_below += neg_tied;
        i = j;
    }
    Ok(doubled as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Rows sorted by descending score, ties by original index.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Average precision: mean over positives of the precision at their rank.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_aligned(scores, labels)?;
    let (n_pos, _) = class_counts(labels);
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "AUC-PR needs at least one positive".into(),
        ));
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in descending_order(scores).iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// TPR at the lowest score threshold (`score >= t` flags) whose false
/// positives stay within `floor(target_fpr * n_neg)`.
pub fn recall_at_fpr(scores: &[f64], labels: &[u8], target_fpr: f64) -> Result<f64> {
    check_aligned(scores, labels)?;
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::Contract(format!(
            "target_fpr {target_fpr} outside [0, 1]"
        )));
    }
    let (n_pos, n_neg) = require_both_classes(labels, "Recall@FPR")?;
    let allowed_fp = (target_fpr * n_neg as f64 + 1e-9).floor() as usize;
    let order = descending_order(scores);
    let (mut tp, mut fp, mut best_tp) = (0usize, 0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if fp > allowed_fp {
            break;
        }
        best_tp = tp;
    }
    Ok(best_tp as f64 / n_pos as f64)
}

pub fn brier(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_aligned(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::UndefinedMetric(
            "Brier score of an empty sample".into(),
        ));
    }
    let sse: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| (s - f64::from(y)).powi(2))
        .sum();
    Ok(sse / scores.len() as f64)
}

/// Equal-width bins on `[0, 1]`; the last bin is closed on the right.
pub fn reliability_bins(
    scores: &[f64],
    labels: &[u8],
    n_bins: usize,
) -> Result<Vec<ReliabilityBin>> {
    check_aligned(scores, labels)?;
    if n_bins == 0 {
        return Err(Error::Contract("n_bins must be positive".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut sum_s = vec![0.0; n_bins];
    let mut sum_y = vec![0.0; n_bins];
    for (&s, &y) in scores.iter().zip(labels) {
        let b = ((s * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
        count[b] += 1;
        sum_s[b] += s;
        sum_y[b] += f64::from(y);
    }
    Ok((0..n_bins)
        .map(|b| {
            let c = count[b];
            let (ms, my) = if c > 0 {
                (sum_s[b] / c as f64, sum_y[b] / c as f64)
            } else {
                (0.0, 0.0)
            };
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: c,
                mean_score: ms,
                mean_label: my,
            }
        })
        .collect())
}

pub fn ece(scores: &[f64], labels: &[u8], n_bins: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("ECE of an empty sample".into()));
    }
    let n = scores.len() as f64;
    Ok(reliability_bins(scores, labels, n_bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.mean_label - b.mean_score).abs())
        .sum())
}

/// Group rates of the decision `score >= delta` and their max-min gaps.
/// Groups without members of a condition are skipped for that rate.
pub fn fairness_gaps<G: AsRef<str>>(
    scores: &[f64],
    labels: &[u8],
    groups: &[G],
    delta: f64,
) -> Result<FairnessGaps> {
    check_aligned(scores, labels)?;
    if groups.len() != scores.len() {
        return Err(Error::Contract("groups must be aligned with scores".into()));
    }
    #[derive(Default)]
    struct Tally {
        n: usize,
        flagged: usize,
        pos: usize,
        tp: usize,
        neg: usize,
        fp: usize,
    }
    let mut tallies: BTreeMap<&str, Tally> = BTreeMap::new();
    for ((&s, &y), g) in scores.iter().zip(labels).zip(groups) {
        let t = tallies.entry(g.as_ref()).or_default();
        let flag = s >= delta;
        t.n += 1;
        t.flagged += usize::from(flag);
        if y == 1 {
            t.pos += 1;
            t.tp += usize::from(flag);
        } else {
            t.neg += 1;
            t.fp += usize::from(flag);
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let per_group: BTreeMap<String, GroupRates> = tallies
        .into_iter()
        .map(|(g, t)| {
            (
                g.to_string(),
                GroupRates {
                    n: t.n,
                    positive_rate: t.flagged as f64 / t.n as f64,
                    tpr: ratio(t.tp, t.pos),
                    fpr: ratio(t.fp, t.neg),
                },
            )
        })
        .collect();
    let spread = |vals: Vec<f64>| -> f64 {
        if vals.len() < 2 {
            return 0.0;
        }
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    };
    let dp_gap = spread(per_group.values().map(|r| r.positive_rate).collect());
    let tpr_gap = spread(per_group.values().filter_map(|r| r.tpr).collect());
    let fpr_gap = spread(per_group.values().filter_map(|r| r.fpr).collect());
    Ok(FairnessGaps {
        dp_gap,
        eo_gap: tpr_gap.max(fpr_gap),
        tpr_gap,
        fpr_gap,
        delta,
        per_group,
    })
}

/// Early (`week <= split_week`) versus late AUC-PR, plus the per-week series.
pub fn stability_report(
    scores: &[f64],
    labels: &[u8],
    weeks: &[u32],
    split_week: u32,
) -> Result<StabilityReport> {
    check_aligned(scores, labels)?;
    if weeks.len() != scores.len() {
        return Err(Error::Contract("weeks must be aligned with scores".into()));
    }
    let subset = |keep: &dyn Fn(u32) -> bool| -> (Vec<f64>, Vec<u8>) {
        scores
            .iter()
            .zip(labels)
            .zip(weeks)
            .filter(|(_, &w)| keep(w))
            .map(|((&s, &y), _)| (s, y))
            .unzip()
    };
    let period = |name: &str, keep: &dyn Fn(u32) -> bool| -> Result<f64> {
        let (s, y) = subset(keep);
        auc_pr(&s, &y)
            .map_err(|_| Error::UndefinedMetric(format!("{name} period has no positive labels")))
    };
    let early = period("early", &|w| w <= split_week)?;
    let late = period("late", &|w| w > split_week)?;

    let mut distinct: Vec<u32> = weeks.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let mut week_series = Vec::new();
    let mut omitted_weeks = Vec::new();
    for w in distinct {
        let (s, y) = subset(&|x| x == w);
        match auc_pr(&s, &y) {
            Ok(ap) => week_series.push((w, ap)),
            Err(_) => omitted_weeks.push(w),
        }
    }
    Ok(StabilityReport {
        split_week,
        early_auc_pr: early,
        late_auc_pr: late,
        drop: early - late,
        week_series,
        omitted_weeks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub ece_bins: usize,
    pub target_fpr: f64,
    pub threshold: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            ece_bins: DEFAULT_ECE_BINS,
            target_fpr: DEFAULT_TARGET_FPR,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

pub fn metric_bundle(scores: &[f64], labels: &[u8], opts: &MetricOptions) -> Result<MetricBundle> {
    let (n_pos, n_neg) = require_both_classes(labels, "metric bundle")?;
    Ok(MetricBundle {
        auc_roc: auc_roc(scores, labels)?,
        auc_pr: auc_pr(scores, labels)?,
        recall_at_fpr: recall_at_fpr(scores, labels, opts.target_fpr)?,
        brier: brier(scores, labels)?,
        ece: ece(scores, labels, opts.ece_bins)?,
        n_pos,
        n_neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut doubled = 0u64;
        let (mut np, mut nn) = (0u64, 0u64);
        for (i, &yi) in labels.iter().enumerate() {
            if yi == 1 {
                np += 1;
            } else {
                nn += 1;
            }
            if yi != 1 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj == 0 {
                    if scores[i] > scores[j] {
                        doubled += 2;
                    } else if scores[i] == scores[j] {
                        doubled += 1;
                    }
                }
            }
        }
        doubled as f64 / (2.0 * np as f64 * nn as f64)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(
            auc_roc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(),
            0.75
        );
        assert!(matches!(
            auc_roc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_pr_examples() {
        assert_eq!(auc_pr(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auc_pr(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]).unwrap(), 0.25);
        let ap = auc_pr(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert!(auc_pr(&[0.5], &[0]).is_err());
    }

    #[test]
    fn recall_at_fpr_examples() {
        assert_eq!(
            recall_at_fpr(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 0.01).unwrap(),
            1.0
        );
        assert_eq!(
            recall_at_fpr(&[0.9, 0.8, 0.2, 0.1], &[0, 1, 1, 0], 1.0).unwrap(),
            1.0
        );

        // 100 negatives -> one false positive admitted; ranking pos, neg, pos, neg, pos...
        let mut scores = vec![];
        let mut labels = vec![];
        for (k, y) in [1u8, 0, 1, 0, 1].iter().enumerate() {
            scores.push(1.0 - k as f64 * 0.01);
            labels.push(*y);
        }
        for k in 0..98 {
            scores.push(0.5 - k as f64 * 0.001);
            labels.push(0);
        }
        scores.push(0.0);
        labels.push(1);
        // positives above the second negative: 2 of 4
        assert_eq!(recall_at_fpr(&scores, &labels, 0.01).unwrap(), 0.5);
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[1.0, 0.0], &[1, 0]).unwrap(), 0.0);
        assert_eq!(brier(&[0.5; 3], &[1, 0, 1]).unwrap(), 0.25);
        assert!((brier(&[0.8, 0.3], &[1, 0]).unwrap() - 0.065).abs() < 1e-15);
    }

    #[test]
    fn ece_examples() {
        let labels = [1, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        assert!(ece(&[0.7; 10], &labels, 15).unwrap() < 1e-12);
        assert!((ece(&[0.7; 10], &[0; 10], 15).unwrap() - 0.7).abs() < 1e-12);
        let scores = [0.2, 0.2, 0.2, 0.2, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9];
        let labels = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        assert!((ece(&scores, &labels, 15).unwrap() - 0.14).abs() < 1e-12);
        // score 1.0 lands in the last bin
        let bins = reliability_bins(&[1.0], &[1], 15).unwrap();
        assert_eq!(bins[14].count, 1);
    }

    #[test]
    fn fairness_examples() {
        let one = fairness_gaps(&[0.9, 0.1, 0.6], &[1, 0, 0], &["a", "a", "a"], 0.5).unwrap();
        assert_eq!(
            (one.dp_gap, one.eo_gap, one.tpr_gap, one.fpr_gap),
            (0.0, 0.0, 0.0, 0.0)
        );

        // A: 3 of 10 flagged, B: 2 of 10 flagged
        let mut scores = vec![0.0; 20];
        for i in [0, 1, 2, 10, 11] {
            scores[i] = 1.0;
        }
        let groups: Vec<&str> = (0..20).map(|i| if i < 10 { "A" } else { "B" }).collect();
        let g = fairness_gaps(&scores, &[0; 20], &groups, 0.5).unwrap();
        assert!((g.dp_gap - 0.1).abs() < 1e-15);
    }

    #[test]
    fn fairness_three_groups() {
        // TPR {1, 0.5, 0.75}, FPR {0, 0, 0.25}
        let mut s = vec![];
        let mut y = vec![];
        let mut g = vec![];
        let mut add = |grp: &'static str, tp: usize, fnr: usize, fp: usize, tn: usize| {
            for (n, sc, lab) in [(tp, 1.0, 1u8), (fnr, 0.0, 1), (fp, 1.0, 0), (tn, 0.0, 0)] {
                for _ in 0..n {
                    s.push(sc);
                    y.push(lab);
                    g.push(grp);
                }
            }
        };
        add("g1", 4, 0, 0, 4);
        add("g2", 2, 2, 0, 4);
        add("g3", 3, 1, 1, 3);
        let gaps = fairness_gaps(&s, &y, &g, 0.5).unwrap();
        assert_eq!(gaps.tpr_gap, 0.5);
        assert_eq!(gaps.fpr_gap, 0.25);
        assert_eq!(gaps.eo_gap, 0.5);
        assert_eq!(gaps.per_group["g3"].tpr, Some(0.75));
    }

    #[test]
    fn stability_examples() {
        let scores = [0.9, 0.2, 0.7, 0.1, 0.9, 0.2, 0.7, 0.1];
        let labels = [1, 0, 1, 0, 1, 0, 1, 0];
        let weeks = [0, 0, 1, 1, 2, 2, 3, 3];
        let r = stability_report(&scores, &labels, &weeks, 1).unwrap();
        assert_eq!(r.drop, 0.0);
        assert_eq!(r.week_series.len(), 4);

        // constant late scores -> AP equals late prevalence
        let late_scores = [0.9, 0.2, 0.7, 0.1, 0.5, 0.5, 0.5, 0.5];
        let late_labels = [1, 0, 1, 0, 1, 0, 0, 0];
        let r = stability_report(&late_scores, &late_labels, &weeks, 1).unwrap();
        assert_eq!(r.early_auc_pr, 1.0);
        // tie-break by index puts the positive first -> AP 1, so build it last
        let late_labels = [1, 0, 1, 0, 0, 0, 0, 1];
        let r = stability_report(&late_scores, &late_labels, &weeks, 1).unwrap();
        assert_eq!(r.late_auc_pr, 0.25);
        assert_eq!(r.drop, 1.0 - 0.25);
        assert_eq!(r.omitted_weeks, vec![2]);
        assert_eq!(r.week_series.len(), 3);

        let err = stability_report(&scores, &[1, 0, 1, 0, 0, 0, 0, 0], &weeks, 1).unwrap_err();
        assert!(err.to_string().contains("late"));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..20).prop_map(|v| v as f64 / 19.0), n),
                proptest::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force((scores, labels) in instance()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert_eq!(auc_roc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }

        #[test]
        fn auc_invariant_to_increasing_transform((scores, labels) in instance()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let t: Vec<f64> = scores.iter().map(|&s| crate::math::sigmoid(2.0 * s + 1.0)).collect();
            prop_assert_eq!(auc_roc(&scores, &labels).unwrap(), auc_roc(&t, &labels).unwrap());
        }

        #[test]
        fn recall_non_decreasing_in_target((scores, labels) in instance(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(recall_at_fpr(&scores, &labels, lo).unwrap() <= recall_at_fpr(&scores, &labels, hi).unwrap());
        }

        #[test]
        fn fairness_invariant_to_row_order((scores, labels) in instance(), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let groups: Vec<String> = (0..scores.len()).map(|i| format!("g{}", i % 3)).collect();
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y2: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let g2: Vec<String> = idx.iter().map(|&i| groups[i].clone()).collect();
            prop_assert_eq!(
                fairness_gaps(&scores, &labels, &groups, 0.5).unwrap(),
                fairness_gaps(&s2, &y2, &g2, 0.5).unwrap()
            );
        }
    }
}
