//! Training objectives built from differentiable graph ops, plus prior
//! sampling. Every loss is a batch mean.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::Prng;

/// Probability floor inside the classification log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub latent_dim: usize,
    /// 0 for models without a categorical latent.
    pub class_dim: usize,
    pub class_probs: Vec<f64>,
}

impl PriorSpec {
    pub fn gaussian(latent_dim: usize) -> Self {
        Self { latent_dim, class_dim: 0, class_probs: Vec::new() }
    }

    pub fn uniform_mixture(latent_dim: usize, class_dim: usize) -> Self {
        Self { latent_dim, class_dim, class_probs: vec![1.0 / class_dim as f64; class_dim] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be >= 1".into()));
        }
        if self.class_probs.len() != self.class_dim {
            return Err(Error::Config("class_probs length differs from class_dim".into()));
        }
        if self.class_dim > 0 {
            let s: f64 = self.class_probs.iter().sum();
            if (s - 1.0).abs() > 1e-9 || self.class_probs.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Config(format!("class probabilities must sum to 1, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PriorSample {
    /// `(batch, latent_dim)`.
    pub z: Tensor,
    /// `(batch, class_dim)` one-hot rows, absent for Gaussian priors.
    pub y: Option<Tensor>,
    pub classes: Vec<usize>,
}

pub fn standard_normal(shape: &[usize], rng: &mut Prng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

pub fn one_hot(classes: &[usize], class_dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes.len(), class_dim]);
    for (b, &c) in classes.iter().enumerate() {
        t.data_mut()[b * class_dim + c] = 1.0;
    }
    t
}

/// `z ~ N(0, I)` and, for a mixture prior, `y ~ Cat(c)` as one-hot rows.
pub fn sample_prior(prior: &PriorSpec, batch: usize, rng: &mut Prng) -> Result<PriorSample> {
    prior.validate()?;
    let z = standard_normal(&[batch, prior.latent_dim], rng);
    if prior.class_dim == 0 {
        return Ok(PriorSample { z, y: None, classes: Vec::new() });
    }
    let classes: Vec<usize> = (0..batch)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            prior
                .class_probs
                .iter()
                .position(|&p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(prior.class_dim - 1)
        })
        .collect();
    let y = one_hot(&classes, prior.class_dim);
    Ok(PriorSample { z, y: Some(y), classes })
}

/// `KL(N(mu, sigma^2) || N(0, I))` for one latent vector.
pub fn kl_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Shape(format!("mu has {} entries, sigma {}", mu.len(), sigma.len())));
    }
    if let Some(s) = sigma.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::numeric("kl_gaussian", format!("sigma {s} is not positive")));
    }
    Ok(0.5
        * mu.iter()
            .zip(sigma)
            .map(|(m, s)| {
                let v = s * s;
                v + m * m - 1.0 - v.ln()
            })
            .sum::<f64>())
}

/// Batch-mean KL of the `(batch, N)` posterior given by `mu` and `logvar`.
pub fn kl_from_logvar(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let batch = g.value(mu).batch() as f64;
    let var = g.exp(logvar)?;
    let mu2 = g.square(mu)?;
    let a = g.add(var, mu2)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0)?;
    let s = g.sum(c)?;
    g.scale(s, 0.5 / batch)
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
    let half = g.scale(logvar, 0.5)?;
    let sigma = g.exp(half)?;
    let e = g.constant(eps);
    let noise = g.mul(sigma, e)?;
    g.add(mu, noise)
}

/// `0.5 * ||x - x_hat||^2` summed per sample, averaged over the batch.
pub fn squared_error(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    let batch = g.value(x).batch() as f64;
    let d = g.sub(x_hat, x)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    g.scale(s, 0.5 / batch)
}

/// `scale` times the per-element mean squared error.
pub fn scaled_mse(g: &mut Graph, x: Var, x_hat: Var, scale: f64) -> Result<Var> {
    let d = g.sub(x_hat, x)?;
    let sq = g.square(d)?;
    let m = g.mean(sq)?;
    g.scale(m, scale)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub reconstruction_se: f64,
    pub kl: f64,
    pub discriminator: f64,
    pub generator: f64,
    pub classification_ce: f64,
    pub beta_n: f64,
    pub alpha: f64,
    pub recon_scale: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.reconstruction_se,
            self.kl,
            self.discriminator,
            self.generator,
            self.classification_ce,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `0.5 ||x - x_hat||^2 + beta_n * KL`, batch averaged.
pub fn vae_loss(g: &mut Graph, x: Var, x_hat: Var, mu: Var, logvar: Var, beta_n: f64) -> Result<(Var, LossReport)> {
    if !(beta_n >= 0.0) {
        return Err(Error::Config(format!("beta_n must be non-negative, got {beta_n}")));
    }
    let se = squared_error(g, x, x_hat)?;
    let kl = kl_from_logvar(g, mu, logvar)?;
    let weighted = g.scale(kl, beta_n)?;
    let loss = g.add(se, weighted)?;
    let report = LossReport {
        reconstruction_se: g.scalar(se),
        kl: g.scalar(kl),
        beta_n,
        ..LossReport::default()
    };
    Ok((loss, report))
}

/// `-E[log S(real)] - E[log(1 - S(fake))]` via stable softplus.
pub fn discriminator_loss(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let neg = g.scale(real_logits, -1.0)?;
    let a = g.softplus(neg)?;
    let a = g.mean(a)?;
    let b = g.softplus(fake_logits)?;
    let b = g.mean(b)?;
    g.add(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorStyle {
    /// `-E[log S(d)]`.
    #[default]
    Nonsaturating,
    /// `E[log(1 - S(d))]`.
    Saturating,
    /// `-E[d]`.
    Logit,
}

impl std::str::FromStr for GeneratorStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonsaturating" => Ok(Self::Nonsaturating),
            "saturating" => Ok(Self::Saturating),
            "logit" => Ok(Self::Logit),
            _ => Err(Error::Config(format!("unknown generator style {s:?}"))),
        }
    }
}

impl std::fmt::Display for GeneratorStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nonsaturating => "nonsaturating",
            Self::Saturating => "saturating",
            Self::Logit => "logit",
        })
    }
}

pub fn generator_loss(g: &mut Graph, fake_logits: Var, style: GeneratorStyle) -> Result<Var> {
    match style {
        GeneratorStyle::Nonsaturating => {
            let neg = g.scale(fake_logits, -1.0)?;
            let s = g.softplus(neg)?;
            g.mean(s)
        }
        GeneratorStyle::Saturating => {
            // log(1 - S(d)) = -softplus(d)
            let s = g.softplus(fake_logits)?;
            let m = g.mean(s)?;
            g.scale(m, -1.0)
        }
        GeneratorStyle::Logit => {
            let m = g.mean(fake_logits)?;
            g.scale(m, -1.0)
        }
    }
}

/// `alpha` times the batch mean of `-log probs[b, labels[b]]`.
pub fn classification_loss(g: &mut Graph, probs: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let picked = g.pick_rows(probs, labels)?;
    if g.value(picked).data().iter().any(|&p| p < PROB_FLOOR) {
        log::warn!("classification loss: true-class probability below {PROB_FLOOR}, clamped");
    }
    let lp = g.log_clamped(picked, PROB_FLOOR)?;
    let m = g.mean(lp)?;
    g.scale(m, -alpha)
}

/// `log p(z) - log q_hat(z)` with `q_hat` a Gaussian kernel density estimate
/// of `q_samples` (Silverman bandwidth). The optimal discriminator logit for
/// real samples from `p` and fakes from `q`.
pub fn optimal_discriminator_oracle(log_p: impl Fn(f64) -> f64, q_samples: &[f64], z: f64) -> Result<f64> {
    let n = q_samples.len();
    if n < 2 {
        return Err(Error::InsufficientData("density estimate needs at least 2 samples".into()));
    }
    let mean = q_samples.iter().sum::<f64>() / n as f64;
    let sd = (q_samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Degenerate("q samples have no spread".into()));
    }
    let h = 1.06 * sd * (n as f64).powf(-0.2);
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let q: f64 = q_samples.iter().map(|s| (-0.5 * ((z - s) / h).powi(2)).exp()).sum::<f64>() * norm;
    if !(q > 0.0) {
        return Err(Error::Degenerate(format!("estimated q({z}) is zero")));
    }
    Ok(log_p(z) - q.ln())
}
