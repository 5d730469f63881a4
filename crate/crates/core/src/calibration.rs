//! Temperature scaling fitted by validation negative log-likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{bernoulli_nll, clamp_prob, logit, sigmoid, PROB_EPS};

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
/// Golden-section tolerance on `ln T`.
pub const LN_T_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub schema_version: u32,
    pub temperature: f64,
    pub val_nll_before: f64,
    pub val_nll_after: f64,
    pub epsilon: f64,
}

/// `sigmoid(logit(s) / t)` with `s` clamped away from 0 and 1.
pub fn apply_temperature(score: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {t}"
        )));
    }
    Ok(sigmoid(logit(clamp_prob(score)) / t))
}

fn nll_at(logits: &[f64], labels: &[u8], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| bernoulli_nll(sigmoid(z / t), y))
        .sum();
    total / logits.len() as f64
}

/// Mean NLL of `scores` recalibrated at temperature `t`.
pub fn temperature_nll(scores: &[f64], labels: &[u8], t: f64) -> f64 {
    let logits: Vec<f64> = scores.iter().map(|&s| logit(clamp_prob(s))).collect();
    nll_at(&logits, labels, t)
}

pub fn fit_temperature(scores: &[f64], labels: &[u8]) -> Result<TemperatureModel> {
    fit_temperature_in(scores, labels, T_MIN, T_MAX)
}

/// Golden-section fit of `ln T` over `[ln t_min, ln t_max]`; the interval must contain 1.
pub fn fit_temperature_in(
    scores: &[f64],
    labels: &[u8],
    t_min: f64,
    t_max: f64,
) -> Result<TemperatureModel> {
    if !(t_min > 0.0 && t_min <= 1.0 && t_max >= 1.0 && t_max.is_finite()) {
        return Err(Error::Config(format!(
            "temperature bounds [{t_min}, {t_max}] must be positive and contain 1"
        )));
    }
    if scores.len() != labels.len() {
        return Err(Error::Contract("scores and labels differ in length".into()));
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::UndefinedMetric(
            "temperature fit needs both classes in the validation labels".into(),
        ));
    }
    let logits: Vec<f64> = scores.iter().map(|&s| logit(clamp_prob(s))).collect();
    let f = |ln_t: f64| nll_at(&logits, labels, ln_t.exp());

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (t_min.ln(), t_max.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LN_T_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mut t = ((a + b) / 2.0).exp();
    let before = nll_at(&logits, labels, 1.0);
    let mut after = nll_at(&logits, labels, t);
    if before < after {
        t = 1.0;
        after = before;
    }
    Ok(TemperatureModel {
        schema_version: crate::SCHEMA_VERSION,
        temperature: t,
        val_nll_before: before,
        val_nll_after: after,
        epsilon: PROB_EPS,
    })
}

impl TemperatureModel {
    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        scores
            .iter()
            .map(|&s| sigmoid(logit(clamp_prob(s)) / self.temperature))
            .collect()
    }

    pub fn check_version(&self) -> Result<()> {
        if self.schema_version != crate::SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "temperature schema_version {} does not match supported version {}",
                self.schema_version,
                crate::SCHEMA_VERSION
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn apply_examples() {
        assert!((apply_temperature(0.3, 1.0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(apply_temperature(0.5, 7.0).unwrap(), 0.5);
        assert!((apply_temperature(0.8, 2.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(apply_temperature(0.8, 0.0).is_err());
        assert!(apply_temperature(0.8, -1.0).is_err());
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(fit_temperature(&[0.2, 0.4], &[1, 1]).is_err());
    }

    #[test]
    fn fitted_temperature_matches_dense_grid() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..2000).map(|_| rng.random_range(0.02..0.98)).collect();
        // overconfident by 1.5
        let labels: Vec<u8> = scores
            .iter()
            .map(|&s| u8::from(rng.random::<f64>() < sigmoid(logit(s) / 1.5)))
            .collect();
        let fit = fit_temperature(&scores, &labels).unwrap();
        let (lo, hi) = (T_MIN.ln(), T_MAX.ln());
        let step = (hi - lo) / 1999.0;
        let grid_best = (0..2000)
            .map(|k| lo + k as f64 * step)
            .min_by(|a, b| {
                temperature_nll(&scores, &labels, a.exp()).total_cmp(&temperature_nll(
                    &scores,
                    &labels,
                    b.exp(),
                ))
            })
            .unwrap();
        assert!((fit.temperature.ln() - grid_best).abs() <= step);
        assert!(fit.val_nll_after <= fit.val_nll_before + 1e-9);
    }

    proptest! {
        #[test]
        fn temperatures_compose(s in 0.01f64..0.99, t1 in 0.2f64..5.0, t2 in 0.2f64..5.0) {
            let twice = apply_temperature(apply_temperature(s, t1).unwrap(), t2).unwrap();
            let once = apply_temperature(s, t1 * t2).unwrap();
            prop_assume!(apply_temperature(s, t1).unwrap() > 1e-5 && apply_temperature(s, t1).unwrap() < 1.0 - 1e-5);
            prop_assert!((twice - once).abs() < 1e-9);
        }

        #[test]
        fn strictly_increasing(a in 0.001f64..0.999, b in 0.001f64..0.999, t in 0.1f64..10.0) {
            prop_assume!(b - a > 1e-9);
            prop_assert!(apply_temperature(a, t).unwrap() < apply_temperature(b, t).unwrap());
        }

        #[test]
        fn fit_never_worsens_nll(rows in proptest::collection::vec((0.0f64..=1.0, 0u8..2), 2..80)) {
            let s: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let y: Vec<u8> = rows.iter().map(|r| r.1).collect();
            prop_assume!(y.contains(&0) && y.contains(&1));
            let m = fit_temperature(&s, &y).unwrap();
            prop_assert!(m.val_nll_after <= m.val_nll_before + 1e-9);
            prop_assert!((T_MIN..=T_MAX).contains(&m.temperature));
        }
    }
}
