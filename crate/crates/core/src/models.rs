//! Encoder, decoder, discriminator and classifier networks for the VAE, AAE
//! and semi-supervised AAE variants.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Graph, LayerSpec, Mode, ParameterSet, Sequential, Tensor, Var};
use crate::error::{Error, Result};
use crate::objectives::standard_normal;
use crate::preprocess::TUPLE_LEN;
use crate::Prng;

pub const LEAKY_SLOPE: f64 = 0.1;
const LEAKY: Activation = Activation::LeakyRelu(LEAKY_SLOPE);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vae,
    Aae,
    Saae,
}

impl Variant {
    pub fn uses_noise(self) -> bool {
        self != Variant::Vae
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Self::Vae),
            "aae" => Ok(Self::Aae),
            "saae" => Ok(Self::Saae),
            _ => Err(Error::Config(format!("unknown model variant {s:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Vae => "vae",
            Variant::Aae => "aae",
            Variant::Saae => "saae",
        })
    }
}

/// Sizes shared by every network of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub variant: Variant,
    pub n_t: usize,
    pub latent_dim: usize,
    /// Categorical latent size; used by the semi-supervised variant only.
    pub class_dim: usize,
    pub enc_filters: Vec<usize>,
    pub kernel_size: usize,
    pub dec_filters: Vec<usize>,
    pub dec_dilations: Vec<usize>,
    pub hidden: usize,
    pub disc_hidden: Vec<usize>,
    pub enc_dropout: f64,
    pub dec_dropout: f64,
}

impl ArchConfig {
    pub fn new(variant: Variant, n_t: usize, latent_dim: usize, class_dim: usize) -> Self {
        Self {
            variant,
            n_t,
            latent_dim,
            class_dim: if variant == Variant::Saae { class_dim } else { 0 },
            enc_filters: vec![32, 64, 64, 128],
            kernel_size: 5,
            dec_filters: vec![128, 64, 64, 32],
            dec_dilations: vec![1, 2, 4, 8],
            hidden: 128,
            disc_hidden: vec![64; 4],
            enc_dropout: 0.1,
            dec_dropout: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.n_t == 0 || self.latent_dim == 0 || self.hidden == 0 || self.kernel_size == 0 {
            return bad("n_t, latent_dim, hidden and kernel_size must be >= 1".into());
        }
        if self.variant == Variant::Saae && self.class_dim < 2 {
            return bad(format!("semi-supervised model needs >= 2 classes, got {}", self.class_dim));
        }
        if self.variant != Variant::Saae && self.class_dim != 0 {
            return bad("class_dim is only meaningful for the semi-supervised variant".into());
        }
        if self.enc_filters.is_empty() || self.enc_filters.contains(&0) {
            return bad("encoder filters must be non-empty and positive".into());
        }
        if self.dec_filters.len() != self.dec_dilations.len() || self.dec_filters.is_empty() {
            return bad("decoder filters and dilations must have equal, non-zero length".into());
        }
        if self.disc_hidden.contains(&0) {
            return bad("discriminator widths must be positive".into());
        }
        Ok(())
    }

    /// Pool size per encoder block: 2 while at least 4 steps remain, else 1.
    pub fn pools(&self) -> Vec<usize> {
        let mut len = self.n_t;
        self.enc_filters
            .iter()
            .map(|_| {
                if len >= 4 {
                    len /= 2;
                    2
                } else {
                    1
                }
            })
            .collect()
    }

    /// Upsampling factors of the decoder blocks, mirroring the pools.
    pub fn upsample_factors(&self) -> Vec<usize> {
        let mut pools = self.pools();
        pools.reverse();
        pools.resize(self.dec_filters.len(), 1);
        pools
    }

    /// Time steps entering the first decoder block.
    pub fn decoder_seed_len(&self) -> usize {
        let growth: usize = self.upsample_factors().iter().product();
        self.n_t.div_ceil(growth)
    }

    /// Width of the decoder input: `N`, or `N + C` for the joint latent.
    pub fn code_dim(&self) -> usize {
        self.latent_dim + self.class_dim
    }
}

fn conv_trunk(filters: &[usize], kernel: usize, pools: &[usize], dropout: f64) -> Vec<LayerSpec> {
    let mut s = Vec::new();
    for (&f, &p) in filters.iter().zip(pools) {
        s.push(LayerSpec::Conv1d { filters: f, kernel_size: kernel, dilation: 1 });
        s.push(LayerSpec::Activation { activation: LEAKY });
        if p > 1 {
            s.push(LayerSpec::MaxPool1d { pool: p });
        }
        s.push(LayerSpec::BatchNorm);
        s.push(LayerSpec::Dropout { p: dropout });
    }
    s.push(LayerSpec::Flatten);
    s
}

/// Encoder outputs. For the VAE `z` is the posterior mean.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub z: Var,
    pub logvar: Option<Var>,
    pub probs: Option<Var>,
}

/// Convolutional encoder: conv stack, optional noise input, a hidden dense
/// layer and the latent heads.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub params: ParameterSet,
    variant: Variant,
    trunk: Sequential,
    hidden: Sequential,
    z_head: Sequential,
    class_head: Option<Sequential>,
}

/// Names of encoder parameters the classification head owns.
pub const CLASS_HEAD_PREFIX: &str = "enc.class";

impl Encoder {
    pub fn build(arch: &ArchConfig, rng: &mut Prng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParameterSet::new();
        let trunk = Sequential::build(
            &conv_trunk(&arch.enc_filters, arch.kernel_size, &arch.pools(), arch.enc_dropout),
            &[arch.n_t, TUPLE_LEN],
            &mut params,
            "enc.conv",
            rng,
        )?;
        let feat = trunk.out_shape()[0] + usize::from(arch.variant.uses_noise());
        let hidden = Sequential::build(
            &[LayerSpec::Dense { units: arch.hidden }, LayerSpec::Activation { activation: LEAKY }],
            &[feat],
            &mut params,
            "enc.hidden",
            rng,
        )?;
        let z_units = if arch.variant == Variant::Vae { 2 * arch.latent_dim } else { arch.latent_dim };
        let z_head = Sequential::build(&[LayerSpec::Dense { units: z_units }], &[arch.hidden], &mut params, "enc.z", rng)?;
        let class_head = if arch.variant == Variant::Saae {
            Some(Sequential::build(
                &[
                    LayerSpec::Dense { units: arch.class_dim },
                    LayerSpec::Activation { activation: Activation::Softmax },
                ],
                &[arch.hidden],
                &mut params,
                CLASS_HEAD_PREFIX,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self { params, variant: arch.variant, trunk, hidden, z_head, class_head })
    }

    /// `noise` is the `(batch, 1)` auxiliary input of the adversarial
    /// variants; when absent it is drawn from `N(0, 1)`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, noise: Option<Tensor>, mode: Mode, rng: &mut Prng) -> Result<Encoded> {
        let batch = g.value(x).batch();
        let mut h = self.trunk.forward(g, &mut self.params, x, mode, rng)?;
        if self.variant.uses_noise() {
            let eta = noise.unwrap_or_else(|| standard_normal(&[batch, 1], rng));
            if eta.shape() != [batch, 1] {
                return Err(Error::Shape(format!("noise must be ({batch}, 1), got {:?}", eta.shape())));
            }
            let e = g.constant(eta);
            h = g.concat(&[h, e])?;
        }
        let h = self.hidden.forward(g, &mut self.params, h, mode, rng)?;
        let out = self.z_head.forward(g, &mut self.params, h, mode, rng)?;
        let (z, logvar) = if self.variant == Variant::Vae {
            let n = g.value(out).last_dim() / 2;
            (g.slice_cols(out, 0, n)?, Some(g.slice_cols(out, n, n)?))
        } else {
            (out, None)
        };
        let probs = match &self.class_head {
            Some(head) => Some(head.forward(g, &mut self.params, h, mode, rng)?),
            None => None,
        };
        for v in [Some(z), logvar, probs].into_iter().flatten() {
            if !g.value(v).all_finite() {
                return Err(Error::numeric("encode", "non-finite encoder output"));
            }
        }
        Ok(Encoded { z, logvar, probs })
    }
}

/// Dense head followed by upsampling dilated convolutions.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub params: ParameterSet,
    net: Sequential,
    code_dim: usize,
}

impl Decoder {
    pub fn build(arch: &ArchConfig, rng: &mut Prng) -> Result<Self> {
        arch.validate()?;
        let seed_len = arch.decoder_seed_len();
        let first = arch.dec_filters[0];
        let mut s = vec![
            LayerSpec::Dense { units: arch.hidden },
            LayerSpec::Activation { activation: LEAKY },
            LayerSpec::Dense { units: seed_len * first },
            LayerSpec::Activation { activation: LEAKY },
            LayerSpec::Unflatten { steps: seed_len, channels: first },
        ];
        for ((&f, &d), &u) in arch.dec_filters.iter().zip(&arch.dec_dilations).zip(&arch.upsample_factors()) {
            if u > 1 {
                s.push(LayerSpec::Upsample1d { factor: u });
            }
            s.push(LayerSpec::Conv1d { filters: f, kernel_size: arch.kernel_size, dilation: d });
            s.push(LayerSpec::Activation { activation: LEAKY });
            s.push(LayerSpec::BatchNorm);
            s.push(LayerSpec::Dropout { p: arch.dec_dropout });
        }
        s.push(LayerSpec::CropTime { len: arch.n_t });
        s.push(LayerSpec::Conv1d { filters: TUPLE_LEN, kernel_size: 1, dilation: 1 });
        let mut params = ParameterSet::new();
        let net = Sequential::build(&s, &[arch.code_dim()], &mut params, "dec", rng)?;
        Ok(Self { params, net, code_dim: arch.code_dim() })
    }

    /// Maps `(batch, N)` or `(batch, N + C)` codes to `(batch, n_t, 6)`.
    pub fn forward(&mut self, g: &mut Graph, code: Var, mode: Mode, rng: &mut Prng) -> Result<Var> {
        let s = g.value(code).shape();
        if s.len() != 2 || s[1] != self.code_dim {
            return Err(Error::Shape(format!("decoder expects (batch, {}), got {s:?}", self.code_dim)));
        }
        let y = self.net.forward(g, &mut self.params, code, mode, rng)?;
        if !g.value(y).all_finite() {
            return Err(Error::numeric("decode", "non-finite decoder output"));
        }
        Ok(y)
    }
}

/// Dense network emitting one raw logit per row.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: ParameterSet,
    net: Sequential,
    input_dim: usize,
}

impl Discriminator {
    pub fn build(input_dim: usize, hidden: &[usize], rng: &mut Prng) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Spec("discriminator input must be non-empty".into()));
        }
        let mut s = Vec::new();
        for &h in hidden {
            s.push(LayerSpec::Dense { units: h });
            s.push(LayerSpec::Activation { activation: LEAKY });
        }
        s.push(LayerSpec::Dense { units: 1 });
        let mut params = ParameterSet::new();
        let net = Sequential::build(&s, &[input_dim], &mut params, "disc", rng)?;
        Ok(Self { params, net, input_dim })
    }

    pub fn for_arch(arch: &ArchConfig, rng: &mut Prng) -> Result<Self> {
        Self::build(arch.code_dim(), &arch.disc_hidden, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn forward(&mut self, g: &mut Graph, z: Var, rng: &mut Prng) -> Result<Var> {
        self.net.forward(g, &mut self.params, z, Mode::Train, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    FeedForward,
    Cnn,
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feed_forward" | "ff" => Ok(Self::FeedForward),
            "cnn" => Ok(Self::Cnn),
            _ => Err(Error::Config(format!("unknown classifier kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub n_t: usize,
    pub classes: usize,
    pub filters: Vec<usize>,
    pub kernel_size: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl ClassifierSpec {
    pub fn new(kind: ClassifierKind, n_t: usize, classes: usize) -> Self {
        Self {
            kind,
            n_t,
            classes,
            filters: vec![32, 64, 64, 128],
            kernel_size: 5,
            hidden: vec![128, 64],
            dropout: 0.1,
        }
    }
}

/// Feed-forward or convolutional network with a softmax output.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub params: ParameterSet,
    pub spec: ClassifierSpec,
    net: Sequential,
}

impl Classifier {
    pub fn build(spec: &ClassifierSpec, rng: &mut Prng) -> Result<Self> {
        if spec.classes < 2 || spec.n_t == 0 {
            return Err(Error::Spec("classifier needs >= 2 classes and n_t >= 1".into()));
        }
        let mut s = match spec.kind {
            ClassifierKind::FeedForward => vec![LayerSpec::Flatten],
            ClassifierKind::Cnn => {
                let probe = ArchConfig {
                    enc_filters: spec.filters.clone(),
                    ..ArchConfig::new(Variant::Aae, spec.n_t, 1, 0)
                };
                conv_trunk(&spec.filters, spec.kernel_size, &probe.pools(), spec.dropout)
            }
        };
        for &h in &spec.hidden {
            s.push(LayerSpec::Dense { units: h });
            s.push(LayerSpec::Activation { activation: LEAKY });
            if spec.kind == ClassifierKind::FeedForward && spec.dropout > 0.0 {
                s.push(LayerSpec::Dropout { p: spec.dropout });
            }
        }
        s.push(LayerSpec::Dense { units: spec.classes });
        s.push(LayerSpec::Activation { activation: Activation::Softmax });
        let mut params = ParameterSet::new();
        let net = Sequential::build(&s, &[spec.n_t, TUPLE_LEN], &mut params, "clf", rng)?;
        Ok(Self { params, spec: spec.clone(), net })
    }

    /// `(batch, classes)` class probabilities.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode, rng: &mut Prng) -> Result<Var> {
        self.net.forward(g, &mut self.params, x, mode, rng)
    }

    /// Probabilities for every row of `x`, computed in inference mode.
    pub fn predict_proba(&mut self, x: &Tensor, rng: &mut Prng) -> Result<Tensor> {
        let mut out = Vec::with_capacity(x.batch() * self.spec.classes);
        for idx in chunks(x.batch()) {
            let mut g = Graph::new();
            let xv = g.input(x.select_rows(&idx));
            let p = self.forward(&mut g, xv, Mode::Infer, rng)?;
            out.extend_from_slice(g.value(p).data());
        }
        Tensor::new(vec![x.batch(), self.spec.classes], out)
    }

    pub fn predict(&mut self, x: &Tensor, rng: &mut Prng) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(x, rng)?))
    }
}

/// Row-chunks used for batched inference.
pub const INFER_CHUNK: usize = 512;

pub fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(INFER_CHUNK).map(move |s| (s..(s + INFER_CHUNK).min(n)).collect())
}

/// Index of the largest entry per row; the first one on ties.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.last_dim();
    t.data()
        .chunks(c)
        .map(|r| r.iter().enumerate().fold(0, |best, (i, &v)| if v > r[best] { i } else { best }))
        .collect()
}

/// The networks of one autoencoder model.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub arch: ArchConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Option<Discriminator>,
}

/// Inference-mode encodings of a whole dataset.
#[derive(Debug, Clone)]
pub struct Encodings {
    /// `(n, N)`; posterior means for the VAE.
    pub z: Tensor,
    pub logvar: Option<Tensor>,
    pub probs: Option<Tensor>,
}

impl Autoencoder {
    pub fn build(arch: &ArchConfig, rng: &mut Prng) -> Result<Self> {
        let encoder = Encoder::build(arch, rng)?;
        let decoder = Decoder::build(arch, rng)?;
        let discriminator = if arch.variant.uses_noise() {
            Some(Discriminator::for_arch(arch, rng)?)
        } else {
            None
        };
        Ok(Self { arch: arch.clone(), encoder, decoder, discriminator })
    }

    /// Encodes `x` in inference mode. `noise` supplies one auxiliary value
    /// per row for the adversarial variants and is drawn from `rng` when
    /// absent.
    pub fn encode(&mut self, x: &Tensor, noise: Option<&Tensor>, rng: &mut Prng) -> Result<Encodings> {
        let n = x.batch();
        let mut z = Vec::new();
        let mut lv = Vec::new();
        let mut pr = Vec::new();
        for idx in chunks(n) {
            let mut g = Graph::new();
            let xv = g.input(x.select_rows(&idx));
            let eta = match (self.arch.variant.uses_noise(), noise) {
                (true, Some(t)) => Some(t.select_rows(&idx)),
                (true, None) => Some(standard_normal(&[idx.len(), 1], rng)),
                (false, _) => None,
            };
            let e = self.encoder.forward(&mut g, xv, eta, Mode::Infer, rng)?;
            z.extend_from_slice(g.value(e.z).data());
            if let Some(v) = e.logvar {
                lv.extend_from_slice(g.value(v).data());
            }
            if let Some(v) = e.probs {
                pr.extend_from_slice(g.value(v).data());
            }
        }
        let nz = self.arch.latent_dim;
        Ok(Encodings {
            z: Tensor::new(vec![n, nz], z)?,
            logvar: if lv.is_empty() { None } else { Some(Tensor::new(vec![n, nz], lv)?) },
            probs: if pr.is_empty() { None } else { Some(Tensor::new(vec![n, self.arch.class_dim], pr)?) },
        })
    }

    /// Decodes `(n, N)` latents, concatenated with `(n, C)` class rows for
    /// the semi-supervised variant, in inference mode.
    pub fn decode(&mut self, z: &Tensor, y: Option<&Tensor>, rng: &mut Prng) -> Result<Tensor> {
        let n = z.batch();
        if (self.arch.class_dim > 0) != y.is_some() {
            return Err(Error::Shape("class rows must be given exactly for the semi-supervised variant".into()));
        }
        let mut out = Vec::with_capacity(n * self.arch.n_t * TUPLE_LEN);
        for idx in chunks(n) {
            let mut g = Graph::new();
            let mut code = g.input(z.select_rows(&idx));
            if let Some(y) = y {
                let yv = g.input(y.select_rows(&idx));
                code = g.concat(&[code, yv])?;
            }
            let x = self.decoder.forward(&mut g, code, Mode::Infer, rng)?;
            out.extend_from_slice(g.value(x).data());
        }
        Tensor::new(vec![n, self.arch.n_t, TUPLE_LEN], out)
    }

    /// Encode then decode in inference mode. The semi-supervised variant
    /// feeds the soft class probabilities to the decoder.
    pub fn reconstruct(&mut self, x: &Tensor, rng: &mut Prng) -> Result<Tensor> {
        let e = self.encode(x, None, rng)?;
        self.decode(&e.z, e.probs.as_ref(), rng)
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.params.trainable_count()
            + self.decoder.params.trainable_count()
            + self.discriminator.as_ref().map_or(0, |d| d.params.trainable_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn pools_for_25_steps() {
        let a = ArchConfig::new(Variant::Aae, 25, 4, 0);
        assert_eq!(a.pools(), vec![2, 2, 2, 1]);
        assert_eq!(a.upsample_factors(), vec![1, 2, 2, 2]);
        assert_eq!(a.decoder_seed_len(), 4);
        let b = ArchConfig::new(Variant::Aae, 100, 4, 0);
        assert_eq!(b.pools(), vec![2, 2, 2, 2]);
    }

    #[test]
    fn saae_requires_classes() {
        let mut rng = Prng::seed_from_u64(0);
        let a = ArchConfig::new(Variant::Saae, 25, 4, 1);
        assert!(Encoder::build(&a, &mut rng).is_err());
    }

    #[test]
    fn argmax_first_on_ties() {
        let t = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.5, 0.9, 0.1, 0.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
