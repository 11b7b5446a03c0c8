//! Phase-structured training loops.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::diffcore::{Adam, AdamConfig, Graph, Mode, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::models::{argmax_rows, ArchConfig, Autoencoder, Classifier, ClassifierSpec, Variant};
use crate::objectives::{
    classification_loss, discriminator_loss, generator_loss, kl_from_logvar, reparameterize, sample_prior,
    scaled_mse, squared_error, standard_normal, GeneratorStyle, PriorSpec,
};
use crate::preprocess::NormStats;
use crate::Prng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_reconstruction: f64,
    pub lr_discriminator: f64,
    pub lr_classification: f64,
    pub beta_n: f64,
    pub alpha: f64,
    pub recon_scale: f64,
    pub label_fraction: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub patience: usize,
    pub generator_style: GeneratorStyle,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr_reconstruction: 1e-4,
            lr_discriminator: 2e-4,
            lr_classification: 1e-4,
            beta_n: 0.02,
            alpha: 5.0,
            recon_scale: 4.0,
            label_fraction: 0.01,
            seed: 0,
            validation_fraction: 0.1,
            patience: 20,
            generator_style: GeneratorStyle::Nonsaturating,
        }
    }
}

impl TrainConfig {
    /// Learning rates used for each model family by default.
    pub fn for_variant(variant: Variant) -> Self {
        let base = Self::default();
        match variant {
            Variant::Vae => Self { lr_reconstruction: 1e-4, ..base },
            Variant::Aae => Self { lr_reconstruction: 2e-4, lr_discriminator: 1e-4, ..base },
            Variant::Saae => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad("label_fraction must be in (0, 1]");
        }
        if [self.lr_reconstruction, self.lr_discriminator, self.lr_classification]
            .iter()
            .any(|&lr| !(lr > 0.0))
        {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if !(self.beta_n >= 0.0) || !(self.alpha >= 0.0) || !(self.recon_scale > 0.0) {
            return bad("beta_n and alpha must be non-negative, recon_scale positive");
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub discriminator: f64,
    pub generator: f64,
    pub classification: f64,
    pub discriminator_accuracy: f64,
    /// Validation squared error per sample, normalized units.
    pub val_se: f64,
    /// Validation macro F1 where labels are available, else NaN.
    pub val_mf1: f64,
}

pub const LOG_HEADER: &str =
    "epoch,reconstruction,kl,discriminator,generator,classification,discriminator_accuracy,val_se,val_mf1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<EpochLog>,
    pub best_epoch: usize,
    pub warnings: Vec<String>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                r.epoch,
                r.reconstruction,
                r.kl,
                r.discriminator,
                r.generator,
                r.classification,
                r.discriminator_accuracy,
                r.val_se,
                r.val_mf1
            ));
        }
        s
    }

    /// Training losses of every row are finite; validation columns may be NaN
    /// when they do not apply.
    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| {
            [r.reconstruction, r.kl, r.discriminator, r.generator, r.classification]
                .iter()
                .all(|v| v.is_finite())
        })
    }
}

/// A trained autoencoder with the statistics needed to use it on raw data.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Autoencoder,
    pub norm: NormStats,
    pub prior: PriorSpec,
    pub log: TrainingLog,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub norm: NormStats,
    pub log: TrainingLog,
    pub seed: u64,
}

/// Seeded shuffle of `0..n` split into `(train, validation)`.
pub fn split_indices(n: usize, validation_fraction: f64, rng: &mut Prng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = (validation_fraction * n as f64).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

/// Picks `count` labeled indices spread as evenly as possible over the
/// classes present in `dataset`.
pub fn stratified_labels(dataset: &LabeledDataset, count: usize, seed: u64) -> Result<Vec<usize>> {
    let labels = dataset.require_labels()?;
    let c = dataset.classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(k) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Stratification(format!("class {k} has no samples")));
    }
    if count < c {
        return Err(Error::Stratification(format!("{count} labels cannot cover {c} classes")));
    }
    let mut rng = Prng::seed_from_u64(seed);
    for v in &mut by_class {
        v.shuffle(&mut rng);
    }
    let mut out = Vec::with_capacity(count);
    let mut round = 0;
    while out.len() < count {
        let before = out.len();
        for v in &by_class {
            if out.len() < count && round < v.len() {
                out.push(v[round]);
            }
        }
        if out.len() == before {
            return Err(Error::InsufficientData(format!("dataset has fewer than {count} labeled samples")));
        }
        round += 1;
    }
    out.sort_unstable();
    Ok(out)
}

fn check_classes(labels: &[usize], classes: usize) -> Result<()> {
    for k in 0..classes {
        if !labels.contains(&k) {
            return Err(Error::Stratification(format!("labeled subset has no sample of class {k}")));
        }
    }
    Ok(())
}

fn finite(v: f64, what: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged(format!("{what} loss is {v} at epoch {epoch}")))
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks_exact(size)
}

fn snapshot(sets: &[&ParameterSet]) -> Vec<ParameterSet> {
    sets.iter().map(|s| (*s).clone()).collect()
}

/// Per-sample squared error of inference-mode reconstructions.
pub fn reconstruction_se(model: &mut Autoencoder, x: &Tensor, rng: &mut Prng) -> Result<f64> {
    if x.batch() == 0 {
        return Ok(f64::NAN);
    }
    let xr = model.reconstruct(x, rng)?;
    let se: f64 = x.data().iter().zip(xr.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(0.5 * se / x.batch() as f64)
}

struct Prepared {
    x: Tensor,
    norm: NormStats,
    train: Vec<usize>,
    val: Vec<usize>,
}

fn prepare(dataset: &LabeledDataset, cfg: &TrainConfig, rng: &mut Prng) -> Result<Prepared> {
    cfg.validate()?;
    if dataset.len() < cfg.batch_size.min(2) {
        return Err(Error::InsufficientData("dataset too small to train".into()));
    }
    let raw = dataset.to_tensor();
    let (train, val) = split_indices(dataset.len(), cfg.validation_fraction, rng);
    if train.len() < 2 {
        return Err(Error::InsufficientData("no training samples after the validation split".into()));
    }
    let norm = NormStats::fit(&raw.select_rows(&train))?;
    Ok(Prepared { x: norm.normalize(&raw), norm, train, val })
}

fn effective_batch(cfg: &TrainConfig, n: usize) -> usize {
    cfg.batch_size.min(n)
}

/// Trains a VAE on the six-channel vectors; labels are ignored.
pub fn train_vae(dataset: &LabeledDataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainedModel> {
    if arch.variant != Variant::Vae {
        return Err(Error::Config("train_vae needs a vae architecture".into()));
    }
    let mut rng = Prng::seed_from_u64(cfg.seed);
    let data = prepare(dataset, cfg, &mut rng)?;
    let mut model = Autoencoder::build(arch, &mut rng)?;
    let mut opt_enc = Adam::new(AdamConfig::with_lr(cfg.lr_reconstruction), &model.encoder.params);
    let mut opt_dec = Adam::new(AdamConfig::with_lr(cfg.lr_reconstruction), &model.decoder.params);
    let bs = effective_batch(cfg, data.train.len());
    let x_val = data.x.select_rows(&data.val);
    let mut log = TrainingLog::default();
    let mut best = (f64::INFINITY, snapshot(&[&model.encoder.params, &model.decoder.params]));
    let mut order = data.train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut row = EpochLog { epoch, val_mf1: f64::NAN, ..EpochLog::default() };
        let mut nb = 0.0;
        for idx in batches(&order, bs) {
            let mut g = Graph::new();
            let x = g.input(data.x.select_rows(idx));
            let e = model.encoder.forward(&mut g, x, None, Mode::Train, &mut rng)?;
            let logvar = e.logvar.expect("vae encoder emits a log-variance");
            let eps = standard_normal(g.value(e.z).shape(), &mut rng);
            let z = reparameterize(&mut g, e.z, logvar, eps)?;
            let x_hat = model.decoder.forward(&mut g, z, Mode::Train, &mut rng)?;
            let se = squared_error(&mut g, x, x_hat)?;
            let kl = kl_from_logvar(&mut g, e.z, logvar)?;
            let wkl = g.scale(kl, cfg.beta_n)?;
            let loss = g.add(se, wkl)?;
            row.reconstruction += finite(g.scalar(se), "reconstruction", epoch)?;
            row.kl += finite(g.scalar(kl), "kl", epoch)?;
            let grads = g.backward(loss)?;
            model.encoder.params.absorb(&grads)?;
            model.decoder.params.absorb(&grads)?;
            opt_enc.step(&mut model.encoder.params, epoch)?;
            opt_dec.step(&mut model.decoder.params, epoch)?;
            nb += 1.0;
        }
        row.reconstruction /= nb;
        row.kl /= nb;
        row.val_se = reconstruction_se(&mut model, &x_val, &mut rng)?;
        let score = if row.val_se.is_nan() { row.reconstruction } else { row.val_se };
        log.rows.push(row);
        if score < best.0 {
            best = (score, snapshot(&[&model.encoder.params, &model.decoder.params]));
            log.best_epoch = epoch;
        } else if epoch - log.best_epoch >= cfg.patience {
            break;
        }
    }
    model.encoder.params.copy_values_from(&best.1[0])?;
    model.decoder.params.copy_values_from(&best.1[1])?;
    Ok(TrainedModel {
        model,
        norm: data.norm,
        prior: PriorSpec::gaussian(arch.latent_dim),
        log,
        seed: cfg.seed,
    })
}

struct CollapseWatch {
    streak: usize,
}

impl CollapseWatch {
    fn observe(&mut self, accuracy: f64, epoch: usize, log: &mut TrainingLog) {
        self.streak = if accuracy > 0.99 { self.streak + 1 } else { 0 };
        if self.streak == 5 {
            let msg = format!("discriminator accuracy above 0.99 for 5 epochs (epoch {epoch})");
            log::warn!("{msg}");
            log.warnings.push(msg);
        }
    }
}

fn logit_accuracy(real: &Tensor, fake: &Tensor) -> f64 {
    let r = real.data().iter().filter(|&&v| v > 0.0).count();
    let f = fake.data().iter().filter(|&&v| v <= 0.0).count();
    (r + f) as f64 / (real.len() + fake.len()) as f64
}

/// Trains an AAE: reconstruction, then discriminator, then generator per
/// batch.
pub fn train_aae(dataset: &LabeledDataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainedModel> {
    if arch.variant != Variant::Aae {
        return Err(Error::Config("train_aae needs an aae architecture".into()));
    }
    let mut rng = Prng::seed_from_u64(cfg.seed);
    let data = prepare(dataset, cfg, &mut rng)?;
    let mut model = Autoencoder::build(arch, &mut rng)?;
    let prior = PriorSpec::gaussian(arch.latent_dim);
    let mut opt_enc = Adam::new(AdamConfig::with_lr(cfg.lr_reconstruction), &model.encoder.params);
    let mut opt_dec = Adam::new(AdamConfig::with_lr(cfg.lr_reconstruction), &model.decoder.params);
    let disc_params = &model.discriminator.as_ref().expect("aae has a discriminator").params;
    let mut opt_disc = Adam::new(AdamConfig::with_lr(cfg.lr_discriminator), disc_params);
    let mut opt_gen = Adam::new(AdamConfig::with_lr(cfg.lr_discriminator), &model.encoder.params);
    let bs = effective_batch(cfg, data.train.len());
    let x_val = data.x.select_rows(&data.val);
    let mut log = TrainingLog::default();
    let mut watch = CollapseWatch { streak: 0 };
    let all = |m: &Autoencoder| {
        snapshot(&[&m.encoder.params, &m.decoder.params, &m.discriminator.as_ref().expect("present").params])
    };
    let mut best = (f64::INFINITY, all(&model));
    let mut order = data.train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut row = EpochLog { epoch, val_mf1: f64::NAN, ..EpochLog::default() };
        let mut nb = 0.0;
        for idx in batches(&order, bs) {
            let xb = data.x.select_rows(idx);
            // reconstruction
            let mut g = Graph::new();
            let x = g.input(xb.clone());
            let e = model.encoder.forward(&mut g, x, None, Mode::Train, &mut rng)?;
            let x_hat = model.decoder.forward(&mut g, e.z, Mode::Train, &mut rng)?;
            let loss = scaled_mse(&mut g, x, x_hat, cfg.recon_scale)?;
            row.reconstruction += finite(g.scalar(loss), "reconstruction", epoch)?;
            let z_fake = g.value(e.z).clone();
            let grads = g.backward(loss)?;
            model.encoder.params.absorb(&grads)?;
            model.decoder.params.absorb(&grads)?;
            opt_enc.step(&mut model.encoder.params, epoch)?;
            opt_dec.step(&mut model.decoder.params, epoch)?;

            // discriminator
            let disc = model.discriminator.as_mut().expect("present");
            let real = sample_prior(&prior, idx.len(), &mut rng)?.z;
            let mut g = Graph::new();
            let r = g.constant(real);
            let f = g.constant(z_fake);
            let dr = disc.forward(&mut g, r, &mut rng)?;
            let df = disc.forward(&mut g, f, &mut rng)?;
            let loss = discriminator_loss(&mut g, dr, df)?;
            row.discriminator += finite(g.scalar(loss), "discriminator", epoch)?;
            row.discriminator_accuracy += logit_accuracy(g.value(dr), g.value(df));
            let grads = g.backward(loss)?;
            disc.params.absorb(&grads)?;
            opt_disc.step(&mut disc.params, epoch)?;

            // generator
            let mut g = Graph::new();
            let x = g.input(xb);
            let e = model.encoder.forward(&mut g, x, None, Mode::Train, &mut rng)?;
            let df = disc.forward(&mut g, e.z, &mut rng)?;
            let loss = generator_loss(&mut g, df, cfg.generator_style)?;
            row.generator += finite(g.scalar(loss), "generator", epoch)?;
            let grads = g.backward(loss)?;
            model.encoder.params.absorb(&grads)?;
            opt_gen.step(&mut model.encoder.params, epoch)?;
            nb += 1.0;
        }
        row.reconstruction /= nb;
        row.discriminator /= nb;
        row.generator /= nb;
        row.discriminator_accuracy /= nb;
        watch.observe(row.discriminator_accuracy, epoch, &mut log);
        row.val_se = reconstruction_se(&mut model, &x_val, &mut rng)?;
        let score = if row.val_se.is_nan() { row.reconstruction } else { row.val_se };
        log.rows.push(row);
        if score < best.0 {
            best = (score, all(&model));
            log.best_epoch = epoch;
        } else if epoch - log.best_epoch >= cfg.patience {
            break;
        }
    }
    restore(&mut model, &best.1)?;
    Ok(TrainedModel { model, norm: data.norm, prior, log, seed: cfg.seed })
}

fn restore(model: &mut Autoencoder, sets: &[ParameterSet]) -> Result<()> {
    model.encoder.params.copy_values_from(&sets[0])?;
    model.decoder.params.copy_values_from(&sets[1])?;
    if let (Some(d), Some(s)) = (model.discriminator.as_mut(), sets.get(2)) {
        d.params.copy_values_from(s)?;
    }
    Ok(())
}

/// Trains the semi-supervised AAE. `labeled` indexes the vectors of
/// `dataset` whose labels may be used; all vectors are used unlabeled.
///
/// Per batch: reconstruction with the joint-space generator term on the
/// encoder and decoder, the discriminator on prior `(z, y)` versus encoder
/// `(z, pi)`, then cross-entropy on a labeled batch for the encoder.
pub fn train_saae(
    dataset: &LabeledDataset,
    labeled: &[usize],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    if arch.variant != Variant::Saae {
        return Err(Error::Config("train_saae needs an saae architecture".into()));
    }
    if arch.class_dim != dataset.classes {
        return Err(Error::Config(format!(
            "architecture has {} classes, dataset {}",
            arch.class_dim, dataset.classes
        )));
    }
    let labels: Vec<usize> = labeled
        .iter()
        .map(|&i| {
            dataset
                .vectors
                .get(i)
                .and_then(|v| v.label)
                .ok_or_else(|| Error::Stratification(format!("labeled index {i} has no label")))
        })
        .collect::<Result<_>>()?;
    check_classes(&labels, arch.class_dim)?;
    let mut rng = Prng::seed_from_u64(cfg.seed);
    let data = prepare(dataset, cfg, &mut rng)?;
    let is_val: std::collections::HashSet<usize> = data.val.iter().copied().collect();
    let (mut lab_train, mut lab_val) = (Vec::new(), Vec::new());
    for (&i, &y) in labeled.iter().zip(&labels) {
        if is_val.contains(&i) {
            lab_val.push((i, y));
        } else {
            lab_train.push((i, y));
        }
    }
    if lab_train.len() < 2 {
        return Err(Error::InsufficientData("fewer than 2 labeled training samples".into()));
    }
    check_classes(&lab_train.iter().map(|p| p.1).collect::<Vec<_>>(), arch.class_dim)?;

    let mut model = Autoencoder::build(arch, &mut rng)?;
    let prior = PriorSpec::uniform_mixture(arch.latent_dim, arch.class_dim);
    let mut opt_enc = Adam::new(AdamConfig::with_lr(cfg.lr_reconstruction), &model.encoder.params);
    let mut opt_dec = Adam::new(AdamConfig::with_lr(cfg.lr_reconstruction), &model.decoder.params);
    let disc_params = &model.discriminator.as_ref().expect("saae has a discriminator").params;
    let mut opt_disc = Adam::new(AdamConfig::with_lr(cfg.lr_discriminator), disc_params);
    let mut opt_cls = Adam::new(AdamConfig::with_lr(cfg.lr_classification), &model.encoder.params);
    let bs = effective_batch(cfg, data.train.len());
    let lbs = bs.min(lab_train.len());
    let x_val = data.x.select_rows(&data.val);
    let x_lab_val = data.x.select_rows(&lab_val.iter().map(|p| p.0).collect::<Vec<_>>());
    let y_lab_val: Vec<usize> = lab_val.iter().map(|p| p.1).collect();
    let mut log = TrainingLog::default();
    let mut watch = CollapseWatch { streak: 0 };
    let all = |m: &Autoencoder| {
        snapshot(&[&m.encoder.params, &m.decoder.params, &m.discriminator.as_ref().expect("present").params])
    };
    // ordered by (validation mF1, -validation SE)
    let mut best = ((f64::NEG_INFINITY, f64::NEG_INFINITY), all(&model));
    let mut order = data.train.clone();
    let mut lab_order = lab_train.clone();
    lab_order.shuffle(&mut rng);
    let mut lab_pos = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut row = EpochLog { epoch, ..EpochLog::default() };
        let mut nb = 0.0;
        for idx in batches(&order, bs) {
            // reconstruction with the joint-space generator term
            let disc = model.discriminator.as_mut().expect("present");
            let mut g = Graph::new();
            let x = g.input(data.x.select_rows(idx));
            let e = model.encoder.forward(&mut g, x, None, Mode::Train, &mut rng)?;
            let probs = e.probs.expect("saae encoder emits class probabilities");
            let code = g.concat(&[e.z, probs])?;
            let x_hat = model.decoder.forward(&mut g, code, Mode::Train, &mut rng)?;
            let rec = scaled_mse(&mut g, x, x_hat, cfg.recon_scale)?;
            let df = disc.forward(&mut g, code, &mut rng)?;
            let gen = generator_loss(&mut g, df, cfg.generator_style)?;
            let loss = g.add(rec, gen)?;
            row.reconstruction += finite(g.scalar(rec), "reconstruction", epoch)?;
            row.generator += finite(g.scalar(gen), "generator", epoch)?;
            let fake = g.value(code).clone();
            let grads = g.backward(loss)?;
            model.encoder.params.absorb(&grads)?;
            model.decoder.params.absorb(&grads)?;
            opt_enc.step(&mut model.encoder.params, epoch)?;
            opt_dec.step(&mut model.decoder.params, epoch)?;

            // discriminator on the joint space
            let s = sample_prior(&prior, idx.len(), &mut rng)?;
            let mut g = Graph::new();
            let zr = g.constant(s.z);
            let yr = g.constant(s.y.expect("mixture prior has classes"));
            let r = g.concat(&[zr, yr])?;
            let f = g.constant(fake);
            let dr = disc.forward(&mut g, r, &mut rng)?;
            let df = disc.forward(&mut g, f, &mut rng)?;
            let loss = discriminator_loss(&mut g, dr, df)?;
            row.discriminator += finite(g.scalar(loss), "discriminator", epoch)?;
            row.discriminator_accuracy += logit_accuracy(g.value(dr), g.value(df));
            let grads = g.backward(loss)?;
            disc.params.absorb(&grads)?;
            opt_disc.step(&mut disc.params, epoch)?;

            // supervised classification on a cycling labeled batch
            if lab_pos + lbs > lab_order.len() {
                lab_order.shuffle(&mut rng);
                lab_pos = 0;
            }
            let chunk = &lab_order[lab_pos..lab_pos + lbs];
            lab_pos += lbs;
            let li: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let ly: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let mut g = Graph::new();
            let x = g.input(data.x.select_rows(&li));
            let e = model.encoder.forward(&mut g, x, None, Mode::Train, &mut rng)?;
            let loss = classification_loss(&mut g, e.probs.expect("present"), &ly, cfg.alpha)?;
            row.classification += finite(g.scalar(loss), "classification", epoch)?;
            let grads = g.backward(loss)?;
            model.encoder.params.absorb(&grads)?;
            opt_cls.step(&mut model.encoder.params, epoch)?;
            nb += 1.0;
        }
        row.reconstruction /= nb;
        row.generator /= nb;
        row.discriminator /= nb;
        row.classification /= nb;
        row.discriminator_accuracy /= nb;
        watch.observe(row.discriminator_accuracy, epoch, &mut log);
        row.val_se = reconstruction_se(&mut model, &x_val, &mut rng)?;
        row.val_mf1 = if y_lab_val.is_empty() {
            f64::NAN
        } else {
            let probs = model.encode(&x_lab_val, None, &mut rng)?.probs.expect("present");
            macro_f1(&argmax_rows(&probs), &y_lab_val, arch.class_dim)?.macro_f1
        };
        let key = (
            if row.val_mf1.is_nan() { 0.0 } else { row.val_mf1 },
            -(if row.val_se.is_nan() { row.reconstruction } else { row.val_se }),
        );
        log.rows.push(row);
        if key > best.0 {
            best = (key, all(&model));
            log.best_epoch = epoch;
        } else if epoch - log.best_epoch >= cfg.patience {
            break;
        }
    }
    restore(&mut model, &best.1)?;
    Ok(TrainedModel { model, norm: data.norm, prior, log, seed: cfg.seed })
}

/// Supervised training of a baseline classifier on the `labeled` vectors.
///
/// A `validation_fraction` share of the labeled vectors (when at least one
/// per class remains for training) selects the best epoch by macro F1.
pub fn train_classifier(
    dataset: &LabeledDataset,
    labeled: &[usize],
    spec: &ClassifierSpec,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    let labels: Vec<usize> = labeled
        .iter()
        .map(|&i| {
            dataset
                .vectors
                .get(i)
                .and_then(|v| v.label)
                .ok_or_else(|| Error::Stratification(format!("labeled index {i} has no label")))
        })
        .collect::<Result<_>>()?;
    check_classes(&labels, spec.classes)?;
    let mut rng = Prng::seed_from_u64(cfg.seed);
    let raw = dataset.to_tensor().select_rows(labeled);
    let (mut tr, mut va) = split_indices(labeled.len(), cfg.validation_fraction, &mut rng);
    let tr_labels: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
    if check_classes(&tr_labels, spec.classes).is_err() || tr.len() < 2 {
        tr.append(&mut va);
        tr.sort_unstable();
    }
    let norm = NormStats::fit_lenient(&raw.select_rows(&tr))?;
    let x = norm.normalize(&raw);
    let mut clf = Classifier::build(spec, &mut rng)?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr_classification), &clf.params);
    let bs = effective_batch(cfg, tr.len());
    let x_val = x.select_rows(&va);
    let y_val: Vec<usize> = va.iter().map(|&i| labels[i]).collect();
    let mut log = TrainingLog::default();
    let mut best = ((f64::NEG_INFINITY, f64::NEG_INFINITY), clf.params.clone());
    let mut order = tr.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut row = EpochLog { epoch, val_se: f64::NAN, ..EpochLog::default() };
        let mut nb = 0.0;
        for idx in batches(&order, bs) {
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.input(x.select_rows(idx));
            let p = clf.forward(&mut g, xv, Mode::Train, &mut rng)?;
            let loss = classification_loss(&mut g, p, &ys, 1.0)?;
            row.classification += finite(g.scalar(loss), "classification", epoch)?;
            let grads = g.backward(loss)?;
            clf.params.absorb(&grads)?;
            opt.step(&mut clf.params, epoch)?;
            nb += 1.0;
        }
        row.classification /= nb;
        row.val_mf1 = if va.is_empty() {
            f64::NAN
        } else {
            macro_f1(&clf.predict(&x_val, &mut rng)?, &y_val, spec.classes)?.macro_f1
        };
        let key = (if row.val_mf1.is_nan() { 0.0 } else { row.val_mf1 }, -row.classification);
        log.rows.push(row);
        if key > best.0 {
            best = (key, clf.params.clone());
            log.best_epoch = epoch;
        } else if epoch - log.best_epoch >= cfg.patience {
            break;
        }
    }
    clf.params.copy_values_from(&best.1)?;
    Ok(TrainedClassifier { classifier: clf, norm, log, seed: cfg.seed })
}

impl TrainedModel {
    /// Encodes raw (unnormalized) vectors.
    pub fn encode_raw(&mut self, raw: &Tensor, rng: &mut Prng) -> Result<crate::models::Encodings> {
        let x = self.norm.normalize(raw);
        self.model.encode(&x, None, rng)
    }

    /// Class predictions of the semi-supervised encoder for raw vectors.
    pub fn classify_raw(&mut self, raw: &Tensor, rng: &mut Prng) -> Result<Vec<usize>> {
        let probs = self
            .encode_raw(raw, rng)?
            .probs
            .ok_or_else(|| Error::Config(format!("{} model has no classification head", self.model.arch.variant)))?;
        Ok(argmax_rows(&probs))
    }

    /// Draws `n` prior samples and decodes them to raw-unit vectors. For
    /// the mixture prior, `class` fixes the categorical latent.
    pub fn generate(&mut self, n: usize, class: Option<usize>, rng: &mut Prng) -> Result<(Tensor, Vec<usize>)> {
        let (x, classes) = self.decode_prior(n, class, rng)?;
        Ok((self.norm.denormalize(&x), classes))
    }

    /// Like [`generate`](Self::generate) but draws from the full likelihood
    /// `N(decoded mean, I)` in normalized feature space instead of returning
    /// the mean.
    pub fn sample(&mut self, n: usize, class: Option<usize>, rng: &mut Prng) -> Result<(Tensor, Vec<usize>)> {
        let (mut x, classes) = self.decode_prior(n, class, rng)?;
        for v in x.data_mut() {
            *v += rng.sample::<f64, _>(StandardNormal);
        }
        Ok((self.norm.denormalize(&x), classes))
    }

    fn decode_prior(&mut self, n: usize, class: Option<usize>, rng: &mut Prng) -> Result<(Tensor, Vec<usize>)> {
        let s = sample_prior(&self.prior, n, rng)?;
        let (y, classes) = match (self.prior.class_dim, class) {
            (0, None) => (None, Vec::new()),
            (0, Some(_)) => return Err(Error::Config("model has no class latent".into())),
            (c, Some(k)) if k >= c => return Err(Error::Config(format!("class {k} outside [0, {c})"))),
            (c, Some(k)) => (Some(crate::objectives::one_hot(&vec![k; n], c)), vec![k; n]),
            (_, None) => (s.y, s.classes),
        };
        Ok((self.model.decode(&s.z, y.as_ref(), rng)?, classes))
    }
}

impl TrainedClassifier {
    pub fn predict_raw(&mut self, raw: &Tensor, rng: &mut Prng) -> Result<Vec<usize>> {
        let x = self.norm.normalize(raw);
        self.classifier.predict(&x, rng)
    }
}
