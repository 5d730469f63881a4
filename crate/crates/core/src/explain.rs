//! Path-dependent Shapley attributions for the tree ensemble, in margin space.
//!
//! `tree_shap` is the polynomial-time extended-path recursion; absent features
//! are marginalized by following both children weighted by training cover.
//! `shapley_bruteforce` enumerates feature subsets under the same value
//! function and serves as its oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{GbdtModel, Node, Tree};

/// Largest feature count accepted by the subset enumeration.
pub const BRUTEFORCE_MAX_FEATURES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub feature: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub case_id: Option<i64>,
    pub base_value: f64,
    /// Sorted by absolute value, largest first.
    pub contributions: Vec<Contribution>,
    pub margin: f64,
}

impl Attribution {
    fn new(
        case_id: Option<i64>,
        base_value: f64,
        phi: &[f64],
        names: &[String],
        margin: f64,
    ) -> Self {
        let mut order: Vec<usize> = (0..phi.len()).collect();
        order.sort_by(|&a, &b| phi[b].abs().total_cmp(&phi[a].abs()).then(a.cmp(&b)));
        Self {
            case_id,
            base_value,
            contributions: order
                .into_iter()
                .map(|j| Contribution {
                    feature: names[j].clone(),
                    value: phi[j],
                })
                .collect(),
            margin,
        }
    }

    pub fn value_of(&self, feature: &str) -> Option<f64> {
        self.contributions
            .iter()
            .find(|c| c.feature == feature)
            .map(|c| c.value)
    }

    pub fn total(&self) -> f64 {
        self.contributions.iter().map(|c| c.value).sum()
    }
}

fn check_inputs(model: &GbdtModel, x: &[f64]) -> Result<()> {
    if x.len() != model.n_features {
        return Err(Error::schema(
            "explain",
            format!("expected {} features, got {}", model.n_features, x.len()),
        ));
    }
    for (t, tree) in model.trees.iter().enumerate() {
        if tree.covers.len() != tree.nodes.len() {
            return Err(Error::Contract(format!(
                "tree {t} has no per-node cover counts; re-fit the model so covers are recorded"
            )));
        }
    }
    Ok(())
}

fn goes_left(x: &[f64], feature: usize, threshold: f64, missing_left: bool) -> bool {
    let v = x[feature];
    if v.is_nan() {
        missing_left
    } else {
        v < threshold
    }
}

/// Expected tree output with every feature marginalized by cover.
pub fn expected_value(tree: &Tree) -> f64 {
    conditional_value(tree, 0, &[], &[])
}

/// Expected tree output given the features flagged in `known`.
fn conditional_value(tree: &Tree, k: usize, x: &[f64], known: &[bool]) -> f64 {
    match tree.nodes[k] {
        Node::Leaf { value } => value,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            missing_left,
        } => {
            if known.get(feature).copied().unwrap_or(false) {
                let next = if goes_left(x, feature, threshold, missing_left) {
                    left
                } else {
                    right
                };
                conditional_value(tree, next, x, known)
            } else {
                let c = tree.covers[k];
                tree.covers[left] / c * conditional_value(tree, left, x, known)
                    + tree.covers[right] / c * conditional_value(tree, right, x, known)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElement>, zero: f64, one: f64, feature: Option<usize>) {
    let l = path.len();
    path.push(PathElement {
        feature,
        zero,
        one,
        weight: if l == 0 { 1.0 } else { 0.0 },
    });
    let lf = (l + 1) as f64;
    for i in (0..l).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / lf;
        path[i].weight = zero * path[i].weight * (l - i) as f64 / lf;
    }
}

fn unwind(path: &mut Vec<PathElement>, i: usize) {
    let l = path.len() - 1;
    let (one, zero) = (path[i].one, path[i].zero);
    let lf = (l + 1) as f64;
    let mut n = path[l].weight;
    for j in (0..l).rev() {
        if one != 0.0 {
            let t = path[j].weight;
            path[j].weight = n * lf / ((j + 1) as f64 * one);
            n = t - path[j].weight * zero * (l - j) as f64 / lf;
        } else {
            path[j].weight = path[j].weight * lf / (zero * (l - j) as f64);
        }
    }
    for j in i..l {
        path[j].feature = path[j + 1].feature;
        path[j].zero = path[j + 1].zero;
        path[j].one = path[j + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElement], i: usize) -> f64 {
    let l = path.len() - 1;
    let (one, zero) = (path[i].one, path[i].zero);
    let lf = (l + 1) as f64;
    let mut total = 0.0;
    if one != 0.0 {
        let mut n = path[l].weight;
        for j in (0..l).rev() {
            let t = n * lf / ((j + 1) as f64 * one);
            total += t;
            n = path[j].weight - t * zero * (l - j) as f64 / lf;
        }
    } else {
        for j in (0..l).rev() {
            total += path[j].weight * lf / (zero * (l - j) as f64);
        }
    }
    total
}

struct ShapRun<'a> {
    tree: &'a Tree,
    x: &'a [f64],
    phi: &'a mut [f64],
}

impl ShapRun<'_> {
    fn recurse(
        &mut self,
        k: usize,
        mut path: Vec<PathElement>,
        zero: f64,
        one: f64,
        feature: Option<usize>,
    ) {
        extend(&mut path, zero, one, feature);
        match self.tree.nodes[k] {
            Node::Leaf { value } => {
                for i in 1..path.len() {
                    let w = unwound_sum(&path, i);
                    let e = path[i];
                    if let Some(f) = e.feature {
                        self.phi[f] += w * (e.one - e.zero) * value;
                    }
                }
            }
            Node::Split {
                feature: f,
                threshold,
                left,
                right,
                missing_left,
            } => {
                let (hot, cold) = if goes_left(self.x, f, threshold, missing_left) {
                    (left, right)
                } else {
                    (right, left)
                };
                let (mut iz, mut io) = (1.0, 1.0);
                if let Some(pos) = path.iter().skip(1).position(|e| e.feature == Some(f)) {
                    let pos = pos + 1;
                    iz = path[pos].zero;
                    io = path[pos].one;
                    unwind(&mut path, pos);
                }
                let covers = &self.tree.covers;
                let cover = covers[k];
                self.recurse(hot, path.clone(), iz * covers[hot] / cover, io, Some(f));
                if covers[cold] > 0.0 {
                    self.recurse(cold, path, iz * covers[cold] / cover, 0.0, Some(f));
                }
            }
        }
    }
}

/// Adds one tree's Shapley values for `x` into `phi`.
pub fn tree_shap_single(tree: &Tree, x: &[f64], phi: &mut [f64]) {
    let mut run = ShapRun { tree, x, phi };
    run.recurse(0, Vec::with_capacity(16), 1.0, 1.0, None);
}

/// Base value and per-feature margin attributions of the ensemble at `x`.
pub fn tree_shap(model: &GbdtModel, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_inputs(model, x)?;
    let mut phi = vec![0.0; model.n_features];
    let mut expected = 0.0;
    for tree in &model.trees {
        tree_shap_single(tree, x, &mut phi);
        expected += expected_value(tree);
    }
    phi.iter_mut().for_each(|v| *v *= model.learning_rate);
    Ok((model.base_logit + model.learning_rate * expected, phi))
}

/// Exact Shapley values by subset enumeration under the cover-weighted value function.
pub fn shapley_bruteforce(model: &GbdtModel, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_inputs(model, x)?;
    let d = model.n_features;
    if d > BRUTEFORCE_MAX_FEATURES {
        return Err(Error::TooLarge(format!(
            "brute-force Shapley enumerates 2^d subsets; d = {d} exceeds {BRUTEFORCE_MAX_FEATURES}"
        )));
    }
    let value = |mask: usize| -> f64 {
        let known: Vec<bool> = (0..d).map(|j| mask >> j & 1 == 1).collect();
        let sum: f64 = model
            .trees
            .iter()
            .map(|t| conditional_value(t, 0, x, &known))
            .sum();
        model.base_logit + model.learning_rate * sum
    };
    let values: Vec<f64> = (0..1usize << d).map(value).collect();
    let fact: Vec<f64> = (0..=d)
        .scan(1.0, |acc, k| {
            if k > 0 {
                *acc *= k as f64;
            }
            Some(*acc)
        })
        .collect();
    let mut phi = vec![0.0; d];
    for (i, p) in phi.iter_mut().enumerate() {
        for mask in 0..1usize << d {
            if mask >> i & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact[s] * fact[d - s - 1] / fact[d];
            *p += w * (values[mask | 1 << i] - values[mask]);
        }
    }
    Ok((values[0], phi))
}

/// Attribution record for one row.
pub fn explain_row(
    model: &GbdtModel,
    x: &[f64],
    feature_names: &[String],
    case_id: Option<i64>,
) -> Result<Attribution> {
    if feature_names.len() != model.n_features {
        return Err(Error::Contract(
            "feature names do not match the model".into(),
        ));
    }
    let (base, phi) = tree_shap(model, x)?;
    let margin = model.base_logit
        + model.learning_rate
            * model
                .trees
                .iter()
                .map(|t| t.predict_row(|j| x[j]))
                .sum::<f64>();
    Ok(Attribution::new(case_id, base, &phi, feature_names, margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::GbdtParams;
    use crate::SCHEMA_VERSION;

    fn model(trees: Vec<Tree>, d: usize, eta: f64) -> GbdtModel {
        GbdtModel {
            schema_version: SCHEMA_VERSION,
            n_features: d,
            base_logit: 0.0,
            learning_rate: eta,
            params: GbdtParams::default(),
            trees,
            group_names: vec![],
            weight_history: vec![],
            gap_history: vec![],
        }
    }

    fn stump(feature: usize) -> Tree {
        Tree {
            nodes: vec![
                Node::Split {
                    feature,
                    threshold: 0.0,
                    left: 1,
                    right: 2,
                    missing_left: true,
                },
                Node::Leaf { value: -1.0 },
                Node::Leaf { value: 1.0 },
            ],
            covers: vec![10.0, 5.0, 5.0],
        }
    }

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("f{j}")).collect()
    }

    #[test]
    fn single_leaf_model_has_zero_attributions() {
        let m = model(vec![Tree::leaf(0.7, 10.0)], 3, 1.0);
        let a = explain_row(&m, &[1.0, 2.0, 3.0], &names(3), Some(1)).unwrap();
        assert!(a.contributions.iter().all(|c| c.value == 0.0));
        assert_eq!(a.base_value, 0.7);
        assert_eq!(
            shapley_bruteforce(&m, &[1.0, 2.0, 3.0]).unwrap().1,
            vec![0.0; 3]
        );
    }

    #[test]
    fn stump_attribution() {
        let m = model(vec![stump(0)], 3, 1.0);
        let a = explain_row(&m, &[0.5, -4.0, 9.0], &names(3), None).unwrap();
        assert_eq!(a.base_value, 0.0);
        assert_eq!(a.value_of("f0"), Some(1.0));
        assert_eq!(a.value_of("f1"), Some(0.0));
        assert_eq!(a.contributions[0].feature, "f0");
        let (_, brute) = shapley_bruteforce(&m, &[0.5, -4.0, 9.0]).unwrap();
        assert_eq!(brute, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn one_feature_is_margin_minus_base() {
        let m = model(vec![stump(0), stump(0)], 1, 0.3);
        let (base, phi) = shapley_bruteforce(&m, &[-1.0]).unwrap();
        let margin = m.predict_margin(ndarray::array![[-1.0]].view()).unwrap()[0];
        assert!((phi[0] - (margin - base)).abs() < 1e-15);
    }

    #[test]
    fn missing_covers_and_size_are_rejected() {
        let mut t = stump(0);
        t.covers.clear();
        assert!(tree_shap(&model(vec![t], 1, 1.0), &[0.0]).is_err());
        let wide = model(vec![stump(0)], 13, 1.0);
        assert!(matches!(
            shapley_bruteforce(&wide, &[0.0; 13]),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn repeated_feature_on_path() {
        // same feature split twice along a path exercises unwind
        let tree = Tree {
            nodes: vec![
                Node::Split {
                    feature: 0,
                    threshold: 0.0,
                    left: 1,
                    right: 2,
                    missing_left: true,
                },
                Node::Split {
                    feature: 0,
                    threshold: -1.0,
                    left: 3,
                    right: 4,
                    missing_left: true,
                },
                Node::Split {
                    feature: 1,
                    threshold: 0.0,
                    left: 5,
                    right: 6,
                    missing_left: false,
                },
                Node::Leaf { value: -2.0 },
                Node::Leaf { value: 0.5 },
                Node::Leaf { value: 1.0 },
                Node::Leaf { value: 3.0 },
            ],
            covers: vec![20.0, 12.0, 8.0, 4.0, 8.0, 5.0, 3.0],
        };
        let m = model(vec![tree], 2, 1.0);
        for x in [[-2.0, 1.0], [-0.5, -1.0], [1.0, 1.0], [f64::NAN, f64::NAN]] {
            let (b1, fast) = tree_shap(&m, &x).unwrap();
            let (b2, slow) = shapley_bruteforce(&m, &x).unwrap();
            assert!((b1 - b2).abs() < 1e-12);
            for j in 0..2 {
                assert!(
                    (fast[j] - slow[j]).abs() < 1e-12,
                    "{x:?}: {fast:?} vs {slow:?}"
                );
            }
        }
    }
}
