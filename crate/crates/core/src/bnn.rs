//! Mean-field variational Bayesian MLP (Bayes by backprop).
//!
//! Every weight and bias carries an independent Gaussian posterior
//! `N(mu, softplus(rho)^2)` against an isotropic `N(0, sigma0^2)` prior.
//! Training minimizes the negative ELBO with reparameterized samples;
//! prediction averages sigmoid outputs over posterior draws and reports the
//! epistemic (between-sample variance) and aleatoric (mean Bernoulli
//! variance) parts of the predictive variance.
//!
//! Parameters are stored flat. Layer `l` occupies `in_l * out_l` weights
//! (row-major, `in x out`) followed by `out_l` biases.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus};
use crate::SCHEMA_VERSION;

/// Loss magnitude treated as divergence during training.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnnConfig {
    pub hidden: Vec<usize>,
    pub prior_sigma: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Posterior draws per training step.
    pub train_samples: usize,
    /// Posterior draws at prediction time.
    pub predict_samples: usize,
    pub init_mu_std: f64,
    pub init_rho: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for BnnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            prior_sigma: 1.0,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 256,
            train_samples: 1,
            predict_samples: 30,
            init_mu_std: 0.05,
            init_rho: -5.0,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

impl BnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_sigma > 0.0) {
            return Err(Error::Config("prior_sigma must be positive".into()));
        }
        if self.batch_size == 0 || self.train_samples == 0 || self.predict_samples == 0 {
            return Err(Error::Config(
                "batch_size, train_samples and predict_samples must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnModel {
    pub schema_version: u32,
    /// Input width, hidden widths, then 1.
    pub layer_sizes: Vec<usize>,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub prior_sigma: f64,
    pub predict_samples: usize,
    pub seed: u64,
}

/// Per-row Monte-Carlo predictive summary.
#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    pub mean: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub aleatoric: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    n_in: usize,
    n_out: usize,
    offset: usize,
}

impl LayerShape {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_in * self.n_out
    }

    fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.n_in * self.n_out;
        start..start + self.n_out
    }
}

/// Closed-form `KL(q || N(0, sigma0^2 I))` for a fully factorized Gaussian.
pub fn kl_mean_field(mu: &[f64], rho: &[f64], sigma0: f64) -> f64 {
    mu.iter()
        .zip(rho)
        .map(|(&m, &r)| kl_term(m, softplus(r), sigma0))
        .sum()
}

#[inline]
fn kl_term(mu: f64, sigma: f64, sigma0: f64) -> f64 {
    (sigma0 / sigma).ln() + (sigma * sigma + mu * mu) / (2.0 * sigma0 * sigma0) - 0.5
}

/// Loss and gradients of the negative ELBO for fixed noise draws.
#[derive(Debug, Clone)]
pub struct ElboEval {
    pub loss: f64,
    pub grad_mu: Vec<f64>,
    pub grad_rho: Vec<f64>,
}

impl BnnModel {
    pub fn new(input_width: usize, cfg: &BnnConfig) -> Result<Self> {
        cfg.validate()?;
        if input_width == 0 {
            return Err(Error::Config("BNN input width must be positive".into()));
        }
        let mut layer_sizes = vec![input_width];
        layer_sizes.extend(&cfg.hidden);
        layer_sizes.push(1);
        let n_params: usize = layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mu = (0..n_params)
            .map(|_| cfg.init_mu_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            layer_sizes,
            mu,
            rho: vec![cfg.init_rho; n_params],
            prior_sigma: cfg.prior_sigma,
            predict_samples: cfg.predict_samples,
            seed: cfg.seed,
        })
    }

    pub fn n_params(&self) -> usize {
        self.mu.len()
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let l = LayerShape {
                    n_in: w[0],
                    n_out: w[1],
                    offset,
                };
                offset += w[0] * w[1] + w[1];
                l
            })
            .collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn kl(&self) -> f64 {
        kl_mean_field(&self.mu, &self.rho, self.prior_sigma)
    }

    /// Draws `W = mu + sigma * eps`.
    fn weights_from_noise(&self, sigmas: &[f64], eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(sigmas)
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect()
    }

    /// Forward pass; returns hidden activations (input first) and output logits.
    fn forward(&self, w: &[f64], x: ArrayView2<'_, f64>) -> (Vec<Array2<f64>>, Array1<f64>) {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
        acts.push(x.to_owned());
        let mut logits = Array1::zeros(x.nrows());
        for (l, shape) in layers.iter().enumerate() {
            let wm = ArrayView2::from_shape((shape.n_in, shape.n_out), &w[shape.weights()])
                .expect("layer shape");
            let b = ArrayView1::from(&w[shape.biases()]);
            let mut z = acts[l].dot(&wm);
            z += &b;
            if l == last {
                logits = z.column(0).to_owned();
            } else {
                z.mapv_inplace(f64::tanh);
                acts.push(z);
            }
        }
        (acts, logits)
    }

    /// Negative ELBO on a batch with explicit standard-normal noise draws
    /// (one vector of length `n_params` per sample). The likelihood term is
    /// scaled by `n_total / batch_len` so the KL is counted once per epoch.
    pub fn elbo_with_noise(
        &self,
        x: ArrayView2<'_, f64>,
        y: &[u8],
        n_total: usize,
        noise: &[Vec<f64>],
    ) -> Result<ElboEval> {
        if x.nrows() == 0 || x.nrows() != y.len() {
            return Err(Error::Contract(
                "batch must be non-empty and aligned with labels".into(),
            ));
        }
        if noise.is_empty() {
            return Err(Error::Contract(
                "at least one noise draw is required".into(),
            ));
        }
        let sigmas = self.sigmas();
        let layers = self.layers();
        let n_params = self.n_params();
        let scale = n_total as f64 / x.nrows() as f64;
        let per_sample = 1.0 / noise.len() as f64;

        let mut nll = 0.0;
        let mut grad_mu = vec![0.0; n_params];
        let mut grad_rho = vec![0.0; n_params];
        for eps in noise {
            let w = self.weights_from_noise(&sigmas, eps);
            let (acts, logits) = self.forward(&w, x);
            let mut delta = Array2::<f64>::zeros((x.nrows(), 1));
            for (i, (&z, &yi)) in logits.iter().zip(y).enumerate() {
                nll += softplus(z) - f64::from(yi) * z;
                delta[[i, 0]] = (sigmoid(z) - f64::from(yi)) * scale * per_sample;
            }
            let mut gw = vec![0.0; n_params];
            for (l, shape) in layers.iter().enumerate().rev() {
                let a = &acts[l];
                let gwm = a.t().dot(&delta);
                for (dst, src) in gw[shape.weights()].iter_mut().zip(gwm.iter()) {
                    *dst = *src;
                }
                for (dst, src) in gw[shape.biases()]
                    .iter_mut()
                    .zip(delta.sum_axis(Axis(0)).iter())
                {
                    *dst = *src;
                }
                if l > 0 {
                    let wm = ArrayView2::from_shape((shape.n_in, shape.n_out), &w[shape.weights()])
                        .expect("layer shape");
                    let mut back = delta.dot(&wm.t());
                    // tanh'(z) = 1 - tanh(z)^2, and acts[l] holds tanh(z)
                    back.zip_mut_with(a, |d, &h| *d *= 1.0 - h * h);
                    delta = back;
                }
            }
            for k in 0..n_params {
                grad_mu[k] += gw[k];
                grad_rho[k] += gw[k] * eps[k] * sigmoid(self.rho[k]);
            }
        }

        let s0sq = self.prior_sigma * self.prior_sigma;
        let mut kl = 0.0;
        for k in 0..n_params {
            let (m, s) = (self.mu[k], sigmas[k]);
            kl += kl_term(m, s, self.prior_sigma);
            grad_mu[k] += m / s0sq;
            grad_rho[k] += (-1.0 / s + s / s0sq) * sigmoid(self.rho[k]);
        }
        let loss = scale * per_sample * nll + kl;
        if !loss.is_finite() {
            return Err(self.numerical_diagnostic(loss));
        }
        Ok(ElboEval {
            loss,
            grad_mu,
            grad_rho,
        })
    }

    /// Negative ELBO with `samples` fresh reparameterized draws.
    pub fn elbo_loss(
        &self,
        x: ArrayView2<'_, f64>,
        y: &[u8],
        n_total: usize,
        samples: usize,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let noise = self.draw_noise(samples.max(1), rng);
        Ok(self.elbo_with_noise(x, y, n_total, &noise)?.loss)
    }

    fn draw_noise(&self, samples: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        (0..samples)
            .map(|_| {
                (0..self.n_params())
                    .map(|_| rng.sample(StandardNormal))
                    .collect()
            })
            .collect()
    }

    fn numerical_diagnostic(&self, loss: f64) -> Error {
        let (layer, magnitude) = self
            .layers()
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let r = s.offset..s.biases().end;
                let m = self.mu[r].iter().fold(0.0f64, |a, v| a.max(v.abs()));
                (l, m)
            })
            .fold((0, 0.0), |best, cur| {
                if cur.1 > best.1 || cur.1.is_nan() {
                    cur
                } else {
                    best
                }
            });
        Error::Numerical(format!(
            "ELBO loss {loss} is not finite or diverged; largest |mu| {magnitude:.3e} in layer {layer}"
        ))
    }

    /// Stochastic-gradient training on shuffled mini-batches; deterministic
    /// for a fixed `cfg.seed`.
    pub fn train(&mut self, x: ArrayView2<'_, f64>, y: &[u8], cfg: &BnnConfig) -> Result<()> {
        cfg.validate()?;
        if x.nrows() != y.len() {
            return Err(Error::Contract(
                "features and labels differ in length".into(),
            ));
        }
        if x.ncols() != self.input_width() {
            return Err(Error::schema(
                "bnn",
                format!(
                    "expected {} input columns, got {}",
                    self.input_width(),
                    x.ncols()
                ),
            ));
        }
        if cfg.epochs == 0 || x.nrows() == 0 {
            return Ok(());
        }
        let n = x.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut order: Vec<usize> = (0..n).collect();
        let mut adam = AdamState::new(self.n_params());

        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let xb = x.select(Axis(0), batch);
                let yb: Vec<u8> = batch.iter().map(|&i| y[i]).collect();
                let noise = self.draw_noise(cfg.train_samples, &mut rng);
                let eval = self.elbo_with_noise(xb.view(), &yb, n, &noise)?;
                if eval.loss > DIVERGENCE_LIMIT {
                    return Err(self.numerical_diagnostic(eval.loss));
                }
                match cfg.optimizer {
                    Optimizer::Sgd => {
                        for k in 0..self.n_params() {
                            self.mu[k] -= cfg.learning_rate * eval.grad_mu[k];
                            self.rho[k] -= cfg.learning_rate * eval.grad_rho[k];
                        }
                    }
                    Optimizer::Adam => {
                        adam.step(&mut self.mu, &mut self.rho, &eval, cfg.learning_rate)
                    }
                }
            }
        }
        Ok(())
    }

    /// Monte-Carlo predictive mean with epistemic and aleatoric variance.
    /// The same `samples` weight draws are shared by every row of the call.
    pub fn predict_mc(
        &self,
        x: ArrayView2<'_, f64>,
        samples: usize,
        seed: u64,
    ) -> Result<McPrediction> {
        if samples == 0 {
            return Err(Error::Contract(
                "predict_mc requires at least one sample".into(),
            ));
        }
        if x.ncols() != self.input_width() {
            return Err(Error::schema(
                "bnn",
                format!(
                    "expected {} input columns, got {}",
                    self.input_width(),
                    x.ncols()
                ),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigmas = self.sigmas();
        let draws: Vec<Vec<f64>> = (0..samples)
            .map(|_| {
                let eps = (0..self.n_params())
                    .map(|_| rng.sample(StandardNormal))
                    .collect::<Vec<f64>>();
                self.weights_from_noise(&sigmas, &eps)
            })
            .collect();
        let probs: Vec<Vec<f64>> = draws
            .iter()
            .map(|w| self.forward(w, x).1.iter().map(|&z| sigmoid(z)).collect())
            .collect();
        Ok(summarize_samples(&probs))
    }

    pub fn check_version(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "bnn schema_version {} does not match supported version {}",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        Ok(())
    }
}

/// Mean, population variance and mean Bernoulli variance across samples;
/// `probs[s][i]` is the probability of row `i` under draw `s`.
pub fn summarize_samples(probs: &[Vec<f64>]) -> McPrediction {
    let s = probs.len() as f64;
    let n = probs.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; n];
    let mut epistemic = vec![0.0; n];
    let mut aleatoric = vec![0.0; n];
    for i in 0..n {
        let m = probs.iter().map(|p| p[i]).sum::<f64>() / s;
        mean[i] = m;
        epistemic[i] = probs.iter().map(|p| (p[i] - m).powi(2)).sum::<f64>() / s;
        aleatoric[i] = probs.iter().map(|p| p[i] * (1.0 - p[i])).sum::<f64>() / s;
    }
    McPrediction {
        mean,
        epistemic,
        aleatoric,
    }
}

struct AdamState {
    m_mu: Vec<f64>,
    v_mu: Vec<f64>,
    m_rho: Vec<f64>,
    v_rho: Vec<f64>,
    t: i32,
}

impl AdamState {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m_mu: vec![0.0; n],
            v_mu: vec![0.0; n],
            m_rho: vec![0.0; n],
            v_rho: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, mu: &mut [f64], rho: &mut [f64], eval: &ElboEval, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for k in 0..p.len() {
                m[k] = Self::B1 * m[k] + (1.0 - Self::B1) * g[k];
                v[k] = Self::B2 * v[k] + (1.0 - Self::B2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
            }
        };
        update(mu, &mut self.m_mu, &mut self.v_mu, &eval.grad_mu);
        update(rho, &mut self.m_rho, &mut self.v_rho, &eval.grad_rho);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::softplus;
    use ndarray::array;

    fn tiny(cfg: &BnnConfig, input: usize) -> BnnModel {
        BnnModel::new(input, cfg).unwrap()
    }

    #[test]
    fn kl_is_zero_when_posterior_equals_prior() {
        let sigma0 = 0.7;
        // softplus(rho) == sigma0
        let rho = (f64::exp(sigma0) - 1.0).ln();
        assert!((softplus(rho) - sigma0).abs() < 1e-12);
        let kl = kl_mean_field(&[0.0; 4], &[rho; 4], sigma0);
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_single_weight_closed_form() {
        let rho = (1f64.exp() - 1.0).ln();
        let kl = kl_mean_field(&[1.0], &[rho], 1.0);
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_network_has_ln2_nll_per_row() {
        let cfg = BnnConfig {
            hidden: vec![3],
            ..Default::default()
        };
        let mut m = tiny(&cfg, 2);
        m.mu.iter_mut().for_each(|v| *v = 0.0);
        m.rho.iter_mut().for_each(|v| *v = -40.0);
        let x = array![[1.0, 2.0], [-1.0, 0.5], [0.3, 0.3]];
        let noise = vec![vec![0.0; m.n_params()]];
        let eval = m.elbo_with_noise(x.view(), &[0, 1, 1], 3, &noise).unwrap();
        let nll = eval.loss - m.kl();
        assert!((nll - 3.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn single_sample_has_no_epistemic_variance() {
        let cfg = BnnConfig {
            hidden: vec![4],
            init_rho: 0.0,
            ..Default::default()
        };
        let m = tiny(&cfg, 3);
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]];
        let p = m.predict_mc(x.view(), 1, 5).unwrap();
        assert!(p.epistemic.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn summary_hand_arithmetic() {
        let probs = vec![vec![0.2], vec![0.4], vec![0.6]];
        let s = summarize_samples(&probs);
        assert!((s.mean[0] - 0.4).abs() < 1e-15);
        assert!((s.epistemic[0] - 0.08 / 3.0).abs() < 1e-15);
        assert!((s.aleatoric[0] - 0.64 / 3.0).abs() < 1e-15);

        let half = summarize_samples(&[vec![0.5], vec![0.5]]);
        assert_eq!(
            (half.mean[0], half.epistemic[0], half.aleatoric[0]),
            (0.5, 0.0, 0.25)
        );
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let cfg = BnnConfig {
            hidden: vec![4],
            epochs: 0,
            ..Default::default()
        };
        let mut m = tiny(&cfg, 2);
        let before = m.clone();
        m.train(array![[0.0, 1.0]].view(), &[1], &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = BnnConfig {
            hidden: vec![5],
            epochs: 3,
            batch_size: 4,
            seed: 11,
            ..Default::default()
        };
        let x = array![[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [-1.0, 2.0], [2.0, -1.0]];
        let y = [1, 0, 1, 1, 0];
        let mut a = tiny(&cfg, 2);
        let mut b = tiny(&cfg, 2);
        a.train(x.view(), &y, &cfg).unwrap();
        b.train(x.view(), &y, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mu, tiny(&cfg, 2).mu);
    }

    #[test]
    fn prediction_is_pure_for_fixed_seed() {
        let cfg = BnnConfig {
            hidden: vec![4],
            init_rho: -1.0,
            ..Default::default()
        };
        let m = tiny(&cfg, 2);
        let x = array![[0.3, -0.2], [1.5, 0.7]];
        assert_eq!(
            m.predict_mc(x.view(), 7, 3).unwrap(),
            m.predict_mc(x.view(), 7, 3).unwrap()
        );
        // rows do not influence each other's draws
        let single = m.predict_mc(x.slice(ndarray::s![1..2, ..]), 7, 3).unwrap();
        assert_eq!(
            single.mean[0],
            m.predict_mc(x.view(), 7, 3).unwrap().mean[1]
        );
    }

    #[test]
    fn model_json_round_trip() {
        let m = tiny(
            &BnnConfig {
                hidden: vec![3],
                ..Default::default()
            },
            2,
        );
        let back: BnnModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
