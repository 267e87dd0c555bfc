//! Generator and critic networks plus the adversarial loss terms.
//!
//! The generator runs a QGRU over the `w` conditioning steps and maps the final
//! hidden state through two HQL heads to the mean and log-variance of a
//! diagonal Gaussian over the next step. The critic runs its own QGRU over the
//! window with a candidate next step appended and scores it with one HQL head.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    AnsatzConfig, GruConfig, GruParams, GruStepCache, Hql, HqlCache, HqlConfig, HqlParams,
    Parameters, QGru,
};
use crate::linalg::norm2;
use crate::qsim::NoiseSpec;
use crate::rng::Rng;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Step size of the directional difference used for the penalty's parameter gradient.
const PENALTY_HVP_STEP: f64 = 1e-4;

/// Architecture of both networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of series features `d`.
    pub features: usize,
    pub hidden_dim: usize,
    pub generator: AnsatzConfig,
    pub critic: AnsatzConfig,
}

impl ModelConfig {
    pub fn new(features: usize, hidden_dim: usize, ansatz: AnsatzConfig) -> Self {
        Self {
            features,
            hidden_dim,
            generator: ansatz,
            critic: ansatz,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub backbone: GruParams,
    pub head_mu: HqlParams,
    pub head_logvar: HqlParams,
}

impl Parameters for GeneratorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.backbone.visit(&format!("{prefix}backbone"), f);
        self.head_mu.visit(&format!("{prefix}head_mu"), f);
        self.head_logvar.visit(&format!("{prefix}head_logvar"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.backbone.visit_mut(f);
        self.head_mu.visit_mut(f);
        self.head_logvar.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams {
    pub backbone: GruParams,
    pub head_score: HqlParams,
}

impl Parameters for CriticParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.backbone.visit(&format!("{prefix}backbone"), f);
        self.head_score.visit(&format!("{prefix}head_score"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.backbone.visit_mut(f);
        self.head_score.visit_mut(f);
    }
}

/// Predicted diagonal Gaussian over the next step.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOut {
    pub mu: Vec<f64>,
    /// Clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Vec<f64>,
}

impl GaussianOut {
    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// `mu + exp(logvar / 2) ⊙ eps`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Pulls `∂L/∂x̂` back to `(∂L/∂mu, ∂L/∂logvar)`.
pub fn reparameterize_backward(logvar: &[f64], eps: &[f64], d_xhat: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d_logvar = logvar
        .iter()
        .zip(eps)
        .zip(d_xhat)
        .map(|((lv, e), g)| g * 0.5 * (0.5 * lv).exp() * e)
        .collect();
    (d_xhat.to_vec(), d_logvar)
}

/// One generator forward pass with everything needed for backward.
#[derive(Clone, Debug)]
pub struct GeneratorPass {
    pub out: GaussianOut,
    pub x_hat: Vec<f64>,
    pub eps: Vec<f64>,
    raw_logvar: Vec<f64>,
    gru_caches: Vec<GruStepCache>,
    mu_cache: HqlCache,
    logvar_cache: HqlCache,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: ModelConfig,
    gru: QGru,
    head: Hql,
}

impl Generator {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let gru = QGru::new(GruConfig {
            input_dim: config.features,
            hidden_dim: config.hidden_dim,
            ansatz: config.generator,
        })?;
        let head = Hql::new(HqlConfig::new(config.hidden_dim, config.features, config.generator))?;
        Ok(Self {
            config: *config,
            gru,
            head,
        })
    }

    pub fn features(&self) -> usize {
        self.config.features
    }

    pub fn zero_params(&self) -> GeneratorParams {
        GeneratorParams {
            backbone: GruParams::zeros(self.gru.config()),
            head_mu: HqlParams::zeros(self.head.config()),
            head_logvar: HqlParams::zeros(self.head.config()),
        }
    }

    pub fn init_params(&self, rng: &mut Rng) -> GeneratorParams {
        GeneratorParams {
            backbone: GruParams::init(self.gru.config(), rng),
            head_mu: HqlParams::init(self.head.config(), rng),
            head_logvar: HqlParams::init(self.head.config(), rng),
        }
    }

    /// Forecasts the step after `window` (`w · d` values) and draws
    /// `x̂ = mu + σ ⊙ eps`.
    pub fn forward(
        &self,
        p: &GeneratorParams,
        window: &[f64],
        eps: &[f64],
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<GeneratorPass> {
        if eps.len() != self.config.features {
            return Err(Error::Shape(format!(
                "eps has length {}, expected {}",
                eps.len(),
                self.config.features
            )));
        }
        let (h, gru_caches) = self.gru.forward(&p.backbone, window, None, noise, rng)?;
        let (mu, mu_cache) = self.head.forward(&p.head_mu, &h, noise, rng)?;
        let (raw_logvar, logvar_cache) = self.head.forward(&p.head_logvar, &h, noise, rng)?;
        let logvar: Vec<f64> = raw_logvar
            .iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        let x_hat = reparameterize(&mu, &logvar, eps);
        Ok(GeneratorPass {
            out: GaussianOut { mu, logvar },
            x_hat,
            eps: eps.to_vec(),
            raw_logvar,
            gru_caches,
            mu_cache,
            logvar_cache,
        })
    }

    /// Parameter gradients from `∂L/∂mu` and `∂L/∂logvar` (post-clamp).
    pub fn backward(
        &self,
        p: &GeneratorParams,
        pass: &GeneratorPass,
        d_mu: &[f64],
        d_logvar: &[f64],
    ) -> Result<GeneratorParams> {
        let mut grads = p.zeros_like();
        let d_raw: Vec<f64> = pass
            .raw_logvar
            .iter()
            .zip(d_logvar)
            .map(|(raw, g)| {
                if (LOGVAR_MIN..=LOGVAR_MAX).contains(raw) {
                    *g
                } else {
                    0.0
                }
            })
            .collect();
        let mut dh = self
            .head
            .backward_into(&p.head_mu, &pass.mu_cache, d_mu, &mut grads.head_mu)?;
        let dh_lv =
            self.head
                .backward_into(&p.head_logvar, &pass.logvar_cache, &d_raw, &mut grads.head_logvar)?;
        crate::linalg::add_assign(&mut dh, &dh_lv);
        let back = self.gru.backward(&p.backbone, &pass.gru_caches, &dh)?;
        grads.backbone = back.params;
        Ok(grads)
    }
}

/// One critic forward pass.
#[derive(Clone, Debug)]
pub struct CriticPass {
    pub score: f64,
    window_len: usize,
    gru_caches: Vec<GruStepCache>,
    head_cache: HqlCache,
}

#[derive(Clone, Debug)]
pub struct Critic {
    config: ModelConfig,
    gru: QGru,
    head: Hql,
}

impl Critic {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let gru = QGru::new(GruConfig {
            input_dim: config.features,
            hidden_dim: config.hidden_dim,
            ansatz: config.critic,
        })?;
        let head = Hql::new(HqlConfig::new(config.hidden_dim, 1, config.critic))?;
        Ok(Self {
            config: *config,
            gru,
            head,
        })
    }

    pub fn zero_params(&self) -> CriticParams {
        CriticParams {
            backbone: GruParams::zeros(self.gru.config()),
            head_score: HqlParams::zeros(self.head.config()),
        }
    }

    /// Random backbone and head circuit; the head's output layer starts at
    /// zero so the initial critic is constant and its first update is set by
    /// the Wasserstein term alone, not by the penalty.
    pub fn init_params(&self, rng: &mut Rng) -> CriticParams {
        let mut head_score = HqlParams::init(self.head.config(), rng);
        head_score.w_out.iter_mut().for_each(|v| *v = 0.0);
        head_score.b_out.iter_mut().for_each(|v| *v = 0.0);
        CriticParams {
            backbone: GruParams::init(self.gru.config(), rng),
            head_score,
        }
    }

    pub fn forward(
        &self,
        p: &CriticParams,
        window: &[f64],
        candidate: &[f64],
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<CriticPass> {
        let d = self.config.features;
        if candidate.len() != d || window.len() % d != 0 {
            return Err(Error::Shape(format!(
                "critic expects a window of whole {d}-vectors and a {d}-vector candidate, got {} and {}",
                window.len(),
                candidate.len()
            )));
        }
        let mut seq = Vec::with_capacity(window.len() + d);
        seq.extend_from_slice(window);
        seq.extend_from_slice(candidate);
        let (h, gru_caches) = self.gru.forward(&p.backbone, &seq, None, noise, rng)?;
        let (y, head_cache) = self.head.forward(&p.head_score, &h, noise, rng)?;
        Ok(CriticPass {
            score: y[0],
            window_len: window.len(),
            gru_caches,
            head_cache,
        })
    }

    /// `D(window ∥ candidate)`.
    pub fn score(
        &self,
        p: &CriticParams,
        window: &[f64],
        candidate: &[f64],
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<f64> {
        Ok(self.forward(p, window, candidate, noise, rng)?.score)
    }

    /// Gradients of `upstream · D` with respect to the critic parameters and
    /// the appended candidate.
    pub fn backward(
        &self,
        p: &CriticParams,
        pass: &CriticPass,
        upstream: f64,
    ) -> Result<(CriticParams, Vec<f64>)> {
        let mut grads = p.zeros_like();
        let dh = self
            .head
            .backward_into(&p.head_score, &pass.head_cache, &[upstream], &mut grads.head_score)?;
        let back = self.gru.backward(&p.backbone, &pass.gru_caches, &dh)?;
        grads.backbone = back.params;
        Ok((grads, back.inputs[pass.window_len..].to_vec()))
    }

    /// `(D, ∂D/∂candidate)`.
    pub fn input_gradient(
        &self,
        p: &CriticParams,
        window: &[f64],
        candidate: &[f64],
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<f64>)> {
        let pass = self.forward(p, window, candidate, noise, rng)?;
        let (_, g) = self.backward(p, &pass, 1.0)?;
        Ok((pass.score, g))
    }

    /// Penalty `(‖∇D(x̃)‖ − 1)²` at one interpolant and its gradient with
    /// respect to the critic parameters.
    ///
    /// The parameter gradient is `2(‖g‖−1) · ∂/∂θ ⟨∇ₓD, g/‖g‖⟩`, a mixed
    /// second derivative evaluated as a central difference of `∇θD` along
    /// `g/‖g‖`. Each evaluation replays the same random stream so a noisy
    /// critic sees one fixed trajectory.
    pub fn penalty_and_grad(
        &self,
        p: &CriticParams,
        window: &[f64],
        x_tilde: &[f64],
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<(f64, CriticParams)> {
        let replay = rng.clone();
        let (_, g) = self.input_gradient(p, window, x_tilde, noise, rng)?;
        let norm = norm2(&g);
        let penalty = (norm - 1.0).powi(2);
        let mut grads = p.zeros_like();
        if norm < 1e-12 {
            return Ok((penalty, grads));
        }
        let shifted = |sign: f64| -> Result<CriticParams> {
            let x: Vec<f64> = x_tilde
                .iter()
                .zip(&g)
                .map(|(xi, gi)| xi + sign * PENALTY_HVP_STEP * gi / norm)
                .collect();
            let pass = self.forward(p, window, &x, noise, &mut replay.clone())?;
            Ok(self.backward(p, &pass, 1.0)?.0)
        };
        let plus = shifted(1.0)?;
        let minus = shifted(-1.0)?;
        let coeff = 2.0 * (norm - 1.0) / (2.0 * PENALTY_HVP_STEP);
        grads.add_from(&plus);
        let mut neg = minus;
        neg.scale(-1.0);
        grads.add_from(&neg);
        grads.scale(coeff);
        Ok((penalty, grads))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `½ · mean[exp(logvar) + mu² − 1 − logvar]` over every batch element and feature.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> f64 {
    let terms: Vec<f64> = mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .collect();
    0.5 * mean(&terms)
}

/// `mean[exp(logvar)]`.
pub fn var_penalty(logvar: &[f64]) -> f64 {
    logvar.iter().map(|lv| lv.exp()).sum::<f64>() / logvar.len() as f64
}

/// `−mean(D(x̂)) + L_var + λ_kl · L_KL`.
pub fn generator_loss(fake_scores: &[f64], mu: &[f64], logvar: &[f64], lambda_kl: f64) -> f64 {
    -mean(fake_scores) + var_penalty(logvar) + lambda_kl * kl_loss(mu, logvar)
}

/// `mean(D(x̂)) − mean(D(x))`.
pub fn critic_loss(real_scores: &[f64], fake_scores: &[f64]) -> f64 {
    mean(fake_scores) - mean(real_scores)
}

/// `∂/∂mu` and `∂/∂logvar` of `L_var + λ_kl · L_KL` where the means run over
/// `n_total` entries.
pub fn regularizer_grads(mu: &[f64], logvar: &[f64], lambda_kl: f64, n_total: usize) -> (Vec<f64>, Vec<f64>) {
    let n = n_total as f64;
    let d_mu = mu.iter().map(|m| lambda_kl * m / n).collect();
    let d_lv = logvar
        .iter()
        .map(|lv| {
            let e = lv.exp();
            (e + lambda_kl * 0.5 * (e - 1.0)) / n
        })
        .collect();
    (d_mu, d_lv)
}

/// Mean of `(‖g_i‖ − 1)²` where `g_i = grad_fn(i, x̃_i)` and
/// `x̃_i = u_i · real_i + (1 − u_i) · fake_i`.
pub fn penalty_with<F>(real: &[Vec<f64>], fake: &[Vec<f64>], u: &[f64], mut grad_fn: F) -> Result<f64>
where
    F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
{
    if real.len() != fake.len() || real.len() != u.len() || real.is_empty() {
        return Err(Error::Shape(format!(
            "penalty batch sizes disagree or are empty: {} real, {} fake, {} coefficients",
            real.len(),
            fake.len(),
            u.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..real.len() {
        let x = interpolate(&real[i], &fake[i], u[i]);
        let g = grad_fn(i, &x)?;
        total += (norm2(&g) - 1.0).powi(2);
    }
    Ok(total / real.len() as f64)
}

pub fn interpolate(real: &[f64], fake: &[f64], u: f64) -> Vec<f64> {
    real.iter().zip(fake).map(|(r, f)| u * r + (1.0 - u) * f).collect()
}

/// WGAN-GP penalty over a batch of `(window, real, fake)` triples with
/// `u ~ U(0, 1)` drawn per element.
pub fn gradient_penalty(
    critic: &Critic,
    p: &CriticParams,
    windows: &[Vec<f64>],
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<f64> {
    let u: Vec<f64> = (0..real.len()).map(|_| rng.random::<f64>()).collect();
    gradient_penalty_at(critic, p, windows, real, fake, &u, noise, rng)
}

/// [`gradient_penalty`] with fixed interpolation coefficients.
#[allow(clippy::too_many_arguments)]
pub fn gradient_penalty_at(
    critic: &Critic,
    p: &CriticParams,
    windows: &[Vec<f64>],
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    u: &[f64],
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<f64> {
    if windows.len() != real.len() {
        return Err(Error::Shape("one window per penalty element required".into()));
    }
    penalty_with(real, fake, u, |i, x| {
        Ok(critic.input_gradient(p, &windows[i], x, noise, rng)?.1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::Encoding;
    use crate::rng;

    fn toy_config(features: usize) -> ModelConfig {
        ModelConfig::new(
            features,
            2,
            AnsatzConfig {
                n_qubits: 2,
                n_blocks: 2,
                injection_blocks: 1,
                encoding: Encoding::ArcTan,
            },
        )
    }

    /// Initialized critic with a nonzero head output layer.
    fn live_critic(c: &Critic, seed: u64) -> CriticParams {
        let mut r = rng::seeded(seed);
        let mut p = c.init_params(&mut r);
        p.head_score = HqlParams::init(c.head.config(), &mut r);
        p
    }

    #[test]
    fn reparameterization_cases() {
        assert_eq!(reparameterize(&[0.5], &[0.0], &[1.0]), vec![1.5]);
        assert_eq!(reparameterize(&[0.2, -0.3], &[1.0, -2.0], &[0.0, 0.0]), vec![0.2, -0.3]);
        let (_, dlv) = reparameterize_backward(&[0.0], &[1.0], &[1.0]);
        assert_eq!(dlv, vec![0.5]);
        let h = 1e-6;
        let fd = (reparameterize(&[0.0], &[h], &[1.0])[0] - reparameterize(&[0.0], &[-h], &[1.0])[0])
            / (2.0 * h);
        assert!((fd - 0.5).abs() < 1e-9);
    }

    #[test]
    fn reparameterization_is_linear_in_eps() {
        let mu = [0.3, -0.1];
        let lv = [0.4, -1.2];
        let (e1, e2) = ([0.5, -1.0], [2.0, 0.25]);
        let (a, b) = (0.7, -1.9);
        let combo: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| a * x + b * y).collect();
        let lhs = reparameterize(&mu, &lv, &combo);
        let r1 = reparameterize(&mu, &lv, &e1);
        let r2 = reparameterize(&mu, &lv, &e2);
        for i in 0..2 {
            let expected = mu[i] + a * (r1[i] - mu[i]) + b * (r2[i] - mu[i]);
            assert!((lhs[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_values() {
        assert_eq!(kl_loss(&[0.0], &[0.0]), 0.0);
        assert_eq!(kl_loss(&[1.0], &[0.0]), 0.5);
        let ln4 = 4f64.ln();
        assert!((kl_loss(&[0.0], &[ln4]) - (3.0 - ln4) / 2.0).abs() < 1e-15);
        assert!((kl_loss(&[0.0], &[ln4]) - 0.8069).abs() < 1e-4);

        assert_eq!(var_penalty(&[0.0]), 1.0);
        assert!((var_penalty(&[0.25f64.ln()]) - 0.25).abs() < 1e-15);
        assert!((var_penalty(&[0.0, ln4]) - 2.5).abs() < 1e-15);

        assert_eq!(generator_loss(&[0.0], &[0.0], &[0.0], 1.0), 1.0);
        assert_eq!(generator_loss(&[2.0, 4.0], &[0.0], &[0.0], 0.0), -2.0);
        assert_eq!(generator_loss(&[0.0], &[1.0], &[0.0], 0.5), 1.25);

        assert_eq!(critic_loss(&[0.3, 0.5], &[0.3, 0.5]), 0.0);
        assert_eq!(critic_loss(&[1.0], &[0.0]), -1.0);
        assert_eq!(critic_loss(&[1.0, 3.0], &[2.0, 2.0]), 0.0);
    }

    #[test]
    fn kl_is_non_negative() {
        let mut r = rng::seeded(2);
        for _ in 0..2000 {
            let m: f64 = r.random_range(-3.0..3.0);
            let lv: f64 = r.random_range(-10.0..10.0);
            assert!(kl_loss(&[m], &[lv]) >= 0.0);
            if m != 0.0 || lv != 0.0 {
                assert!(kl_loss(&[m], &[lv]) > 0.0);
            }
        }
    }

    #[test]
    fn critic_loss_is_antisymmetric() {
        let real = [0.2, -1.0, 3.5];
        let fake = [1.0, 0.1, -0.4];
        assert_eq!(critic_loss(&real, &fake), -critic_loss(&fake, &real));
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let mu = [0.3, -0.7, 0.1, 0.9];
        let lv = [0.2, -1.5, 0.8, -0.1];
        let lambda = 0.3;
        let f = |mu: &[f64], lv: &[f64]| var_penalty(lv) + lambda * kl_loss(mu, lv);
        let (dmu, dlv) = regularizer_grads(&mu, &lv, lambda, 4);
        let h = 1e-6;
        for i in 0..4 {
            let (mut a, mut b) = (mu, mu);
            a[i] += h;
            b[i] -= h;
            assert!(((f(&a, &lv) - f(&b, &lv)) / (2.0 * h) - dmu[i]).abs() < 1e-8);
            let (mut a, mut b) = (lv, lv);
            a[i] += h;
            b[i] -= h;
            assert!(((f(&mu, &a) - f(&mu, &b)) / (2.0 * h) - dlv[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn generator_forward_contracts() {
        let cfg = toy_config(2);
        let g = Generator::new(&cfg).unwrap();
        let p = g.init_params(&mut rng::seeded(1));
        let window = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let noise = NoiseSpec::noiseless();
        let pass = g.forward(&p, &window, &[0.0, 0.0], &noise, &mut rng::seeded(0)).unwrap();
        assert_eq!(pass.x_hat, pass.out.mu);
        let again = g.forward(&p, &window, &[0.0, 0.0], &noise, &mut rng::seeded(0)).unwrap();
        assert_eq!((pass.out.clone(), pass.x_hat.clone()), (again.out, again.x_hat));

        let mut q = p.clone();
        q.head_logvar = HqlParams::zeros(&HqlConfig::new(2, 2, cfg.generator));
        let pass = g.forward(&q, &window, &[0.3, -0.8], &noise, &mut rng::seeded(0)).unwrap();
        assert_eq!(pass.out.logvar, vec![0.0, 0.0]);
        assert_eq!(pass.x_hat, vec![pass.out.mu[0] + 0.3, pass.out.mu[1] - 0.8]);

        let mut big = p.clone();
        big.head_logvar.b_out = vec![50.0, -50.0];
        let pass = g.forward(&big, &window, &[1.0, 1.0], &noise, &mut rng::seeded(0)).unwrap();
        assert!(pass.out.logvar[0] <= LOGVAR_MAX && pass.out.logvar[1] >= LOGVAR_MIN);
    }

    #[test]
    fn critic_score_contracts() {
        let cfg = toy_config(2);
        let c = Critic::new(&cfg).unwrap();
        let noise = NoiseSpec::noiseless();
        let mut zero = c.zero_params();
        zero.head_score.b_out = vec![0.37];
        for cand in [[0.0, 0.0], [0.9, 0.1]] {
            let s = c.score(&zero, &[0.5, 0.5], &cand, &noise, &mut rng::seeded(0)).unwrap();
            assert_eq!(s, 0.37);
        }
        let p = live_critic(&c, 4);
        let a = c.score(&p, &[0.5, 0.5, 0.2, 0.1], &[0.1, 0.9], &noise, &mut rng::seeded(0)).unwrap();
        let b = c.score(&p, &[0.5, 0.5, 0.2, 0.1], &[0.9, 0.1], &noise, &mut rng::seeded(0)).unwrap();
        assert!((a - b).abs() > 1e-9);
        let bound: f64 = p.head_score.w_out.iter().map(|w| w.abs()).sum::<f64>() + p.head_score.b_out[0].abs();
        assert!(a.abs() <= bound && b.abs() <= bound);
    }

    #[test]
    fn penalty_stub_cases() {
        let real = vec![vec![0.2], vec![0.9]];
        let fake = vec![vec![0.4], vec![0.1]];
        let u = [0.3, 0.6];
        let constant = penalty_with(&real, &fake, &u, |_, _| Ok(vec![0.0])).unwrap();
        assert_eq!(constant, 1.0);
        let sum_map = penalty_with(&real, &fake, &u, |_, x| Ok(vec![1.0; x.len()])).unwrap();
        assert_eq!(sum_map, 0.0);
        let wide = penalty_with(&[vec![0.0; 4]], &[vec![1.0; 4]], &[0.5], |_, x| Ok(vec![1.0; x.len()])).unwrap();
        assert!((wide - 1.0).abs() < 1e-15);

        let cfg = toy_config(1);
        let c = Critic::new(&cfg).unwrap();
        let zero = c.zero_params();
        let gp = gradient_penalty(&c, &zero, &[vec![0.5, 0.5]], &[vec![0.5]], &[vec![0.7]], &NoiseSpec::noiseless(), &mut rng::seeded(1)).unwrap();
        assert_eq!(gp, 1.0);
    }

    #[test]
    fn penalty_is_symmetric_at_half() {
        let cfg = toy_config(2);
        let c = Critic::new(&cfg).unwrap();
        let p = live_critic(&c, 8);
        let w = vec![vec![0.2, 0.4, 0.6, 0.8]];
        let (a, b) = (vec![vec![0.1, 0.7]], vec![vec![0.9, 0.3]]);
        let noise = NoiseSpec::noiseless();
        let ab = gradient_penalty_at(&c, &p, &w, &a, &b, &[0.5], &noise, &mut rng::seeded(0)).unwrap();
        let ba = gradient_penalty_at(&c, &p, &w, &b, &a, &[0.5], &noise, &mut rng::seeded(0)).unwrap();
        assert_eq!(ab, ba);
    }

    fn assert_close(analytic: f64, fd: f64, rel: f64) {
        let tol = rel * fd.abs().max(analytic.abs()) + 1e-6;
        assert!((analytic - fd).abs() <= tol, "analytic {analytic} vs fd {fd}");
    }

    fn perturbed<P: Parameters>(p: &P, j: usize, delta: f64) -> P {
        let mut v = p.flatten();
        v[j] += delta;
        let mut q = p.clone();
        q.assign_flat(&v);
        q
    }

    #[test]
    fn critic_input_gradient_matches_finite_differences() {
        let cfg = toy_config(2);
        let c = Critic::new(&cfg).unwrap();
        let p = live_critic(&c, 6);
        let noise = NoiseSpec::noiseless();
        let window = [0.3, 0.6, 0.1, 0.8];
        let x = [0.4, 0.55];
        let (_, g) = c.input_gradient(&p, &window, &x, &noise, &mut rng::seeded(0)).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let (mut a, mut b) = (x, x);
            a[j] += h;
            b[j] -= h;
            let fd = (c.score(&p, &window, &a, &noise, &mut rng::seeded(0)).unwrap()
                - c.score(&p, &window, &b, &noise, &mut rng::seeded(0)).unwrap())
                / (2.0 * h);
            assert_close(g[j], fd, 1e-3);
        }
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        let cfg = toy_config(2);
        let c = Critic::new(&cfg).unwrap();
        let p = live_critic(&c, 12);
        let noise = NoiseSpec::noiseless();
        let window = [0.3, 0.6, 0.1, 0.8];
        let x = [0.4, 0.55];
        let (_, grads) = c.penalty_and_grad(&p, &window, &x, &noise, &mut rng::seeded(0)).unwrap();
        let g = grads.flatten();
        let pen = |q: &CriticParams| {
            let (_, gx) = c.input_gradient(q, &window, &x, &noise, &mut rng::seeded(0)).unwrap();
            (norm2(&gx) - 1.0).powi(2)
        };
        let h = 1e-5;
        for j in (0..g.len()).step_by(7) {
            let fd = (pen(&perturbed(&p, j, h)) - pen(&perturbed(&p, j, -h))) / (2.0 * h);
            assert_close(g[j], fd, 1e-3);
        }
    }

    #[test]
    fn generator_loss_gradient_matches_finite_differences() {
        let cfg = toy_config(2);
        let g = Generator::new(&cfg).unwrap();
        let c = Critic::new(&cfg).unwrap();
        let mut r = rng::seeded(30);
        let gp = g.init_params(&mut r);
        let cp = live_critic(&c, 99);
        let noise = NoiseSpec::noiseless();
        let windows = [[0.1, 0.2, 0.3, 0.4], [0.7, 0.6, 0.5, 0.4]];
        let eps = [[0.3, -0.5], [1.1, 0.2]];
        let lambda = 0.1;
        let loss = |p: &GeneratorParams| {
            let mut scores = Vec::new();
            let mut mus = Vec::new();
            let mut lvs = Vec::new();
            for (w, e) in windows.iter().zip(&eps) {
                let pass = g.forward(p, w, e, &noise, &mut rng::seeded(0)).unwrap();
                scores.push(c.score(&cp, w, &pass.x_hat, &noise, &mut rng::seeded(0)).unwrap());
                mus.extend(pass.out.mu);
                lvs.extend(pass.out.logvar);
            }
            generator_loss(&scores, &mus, &lvs, lambda)
        };
        let mut grads = gp.zeros_like();
        for (w, e) in windows.iter().zip(&eps) {
            let pass = g.forward(&gp, w, e, &noise, &mut rng::seeded(0)).unwrap();
            let (_, d_x) = c.input_gradient(&cp, w, &pass.x_hat, &noise, &mut rng::seeded(0)).unwrap();
            let d_x: Vec<f64> = d_x.iter().map(|v| -v / 2.0).collect();
            let (mut d_mu, mut d_lv) = reparameterize_backward(&pass.out.logvar, &pass.eps, &d_x);
            let (rm, rl) = regularizer_grads(&pass.out.mu, &pass.out.logvar, lambda, 4);
            crate::linalg::add_assign(&mut d_mu, &rm);
            crate::linalg::add_assign(&mut d_lv, &rl);
            grads.add_from(&g.backward(&gp, &pass, &d_mu, &d_lv).unwrap());
        }
        let flat = grads.flatten();
        let h = 1e-6;
        for j in (0..flat.len()).step_by(3) {
            let fd = (loss(&perturbed(&gp, j, h)) - loss(&perturbed(&gp, j, -h))) / (2.0 * h);
            assert_close(flat[j], fd, 1e-3);
        }
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        let cfg = toy_config(1);
        let c = Critic::new(&cfg).unwrap();
        let p = live_critic(&c, 40);
        let noise = NoiseSpec::noiseless();
        let window = [0.2, 0.4, 0.6];
        let (real, fake) = ([0.8], [0.3]);
        let loss = |q: &CriticParams| {
            critic_loss(
                &[c.score(q, &window, &real, &noise, &mut rng::seeded(0)).unwrap()],
                &[c.score(q, &window, &fake, &noise, &mut rng::seeded(0)).unwrap()],
            )
        };
        let pr = c.forward(&p, &window, &real, &noise, &mut rng::seeded(0)).unwrap();
        let pf = c.forward(&p, &window, &fake, &noise, &mut rng::seeded(0)).unwrap();
        let mut grads = c.backward(&p, &pf, 1.0).unwrap().0;
        grads.add_from(&c.backward(&p, &pr, -1.0).unwrap().0);
        let flat = grads.flatten();
        let h = 1e-6;
        for j in 0..flat.len() {
            let fd = (loss(&perturbed(&p, j, h)) - loss(&perturbed(&p, j, -h))) / (2.0 * h);
            assert_close(flat[j], fd, 1e-3);
        }
    }
}
