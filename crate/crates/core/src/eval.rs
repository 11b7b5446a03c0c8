//! Evaluation protocols: macro F1, relative reconstruction error, CAS,
//! distinguishability of generated samples, and latent-space diagnostics.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::{Autoencoder, ClassifierKind, ClassifierSpec, Variant};
use crate::objectives::{one_hot, sample_prior, standard_normal};
use crate::preprocess::BreathingVector;
use crate::trainer::{train_classifier, TrainConfig, TrainedModel};
use crate::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Classes absent from both labels and predictions; scored 0.
    pub absent: Vec<usize>,
}

pub fn macro_f1(predictions: &[usize], labels: &[usize], classes: usize) -> Result<F1Report> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if classes == 0 {
        return Err(Error::Config("class count must be >= 1".into()));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::Config(format!("class index {bad} outside [0, {classes})")));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let mut absent = Vec::new();
    let per_class: Vec<ClassScores> = (0..classes)
        .map(|k| {
            let tp = confusion[k][k] as f64;
            let predicted: usize = (0..classes).map(|l| confusion[l][k]).sum();
            let support: usize = confusion[k].iter().sum();
            if predicted == 0 && support == 0 {
                absent.push(k);
            }
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassScores { precision, recall, f1, support }
        })
        .collect();
    if !absent.is_empty() {
        log::warn!("classes {absent:?} absent from labels and predictions; F1 set to 0");
    }
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64;
    Ok(F1Report { per_class, macro_f1, confusion, absent })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    let v = if values.len() > 1 { values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}

fn mean_se(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.batch().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeError {
    pub percent: f64,
    pub model_se: f64,
    pub baseline_se: f64,
}

/// Mean squared reconstruction error of `model` on normalized `x` as a
/// percentage of that of a freshly initialized model with the same
/// architecture, seeded by `baseline_seed`.
pub fn relative_recon_error(model: &mut Autoencoder, x: &Tensor, baseline_seed: u64) -> Result<RelativeError> {
    let mut rng = Prng::seed_from_u64(baseline_seed);
    let mut baseline = Autoencoder::build(&model.arch, &mut rng)?;
    relative_to(model, &mut baseline, x, baseline_seed)
}

/// Like [`relative_recon_error`] against an explicit baseline model.
pub fn relative_to(model: &mut Autoencoder, baseline: &mut Autoencoder, x: &Tensor, seed: u64) -> Result<RelativeError> {
    let noise = standard_normal(&[x.batch(), 1], &mut Prng::seed_from_u64(seed ^ 0x5eed));
    let run = |m: &mut Autoencoder| -> Result<f64> {
        let mut rng = Prng::seed_from_u64(seed);
        let e = m.encode(x, Some(&noise), &mut rng)?;
        let xr = m.decode(&e.z, e.probs.as_ref(), &mut rng)?;
        Ok(mean_se(x, &xr))
    };
    let model_se = run(model)?;
    let baseline_se = run(baseline)?;
    if !(baseline_se > 0.0) {
        return Err(Error::Degenerate("baseline model reconstructs perfectly".into()));
    }
    Ok(RelativeError { percent: 100.0 * model_se / baseline_se, model_se, baseline_se })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedScore {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl RepeatedScore {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&scores);
        Self { scores, mean, std }
    }
}

fn labeled_from_tensor(x: &Tensor, labels: &[usize], classes: usize, tag: &str) -> Result<LabeledDataset> {
    let width = x.len() / x.batch().max(1);
    let n_t = x.shape()[1];
    let vectors = (0..x.batch())
        .map(|i| BreathingVector::from_flat(&x.data()[i * width..(i + 1) * width], Some(labels[i]), format!("{tag}{i}")))
        .collect();
    LabeledDataset::new(n_t, classes, vectors)
}

/// Classification accuracy score for an arbitrary labeled sampler.
///
/// Each repeat draws `n_generated` raw-unit vectors with class labels from
/// `generate`, trains a fresh classifier on them, and scores macro F1 on
/// the labeled `real_test` set.
pub fn cas_with<F>(
    mut generate: F,
    real_test: &LabeledDataset,
    n_generated: usize,
    spec: &ClassifierSpec,
    cfg: &TrainConfig,
    repeats: usize,
) -> Result<RepeatedScore>
where
    F: FnMut(usize, &mut Prng) -> Result<(Tensor, Vec<usize>)>,
{
    let test_labels = real_test.require_labels()?;
    let test_x = real_test.to_tensor();
    let mut scores = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let seed = cfg.seed.wrapping_add(1000 * r as u64 + 1);
        let mut rng = Prng::seed_from_u64(seed);
        let (x, y) = generate(n_generated, &mut rng)?;
        let train = labeled_from_tensor(&x, &y, real_test.classes, "gen")?;
        let all: Vec<usize> = (0..train.len()).collect();
        let mut clf = train_classifier(&train, &all, spec, &TrainConfig { seed, ..cfg.clone() })?;
        let pred = clf.predict_raw(&test_x, &mut rng)?;
        scores.push(macro_f1(&pred, &test_labels, real_test.classes)?.macro_f1);
    }
    Ok(RepeatedScore::from_scores(scores))
}

/// CAS of a semi-supervised generative model: samples `(z, y)` from its
/// prior and draws labeled training vectors from the decoder likelihood.
pub fn cas(
    model: &mut TrainedModel,
    real_test: &LabeledDataset,
    n_generated: usize,
    spec: &ClassifierSpec,
    cfg: &TrainConfig,
    repeats: usize,
) -> Result<RepeatedScore> {
    if model.model.arch.variant != Variant::Saae {
        return Err(Error::Config("CAS needs a semi-supervised model".into()));
    }
    cas_with(|n, rng| model.sample(n, None, rng), real_test, n_generated, spec, cfg, repeats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Prior,
    PosteriorVicinity,
}

/// Radius of vicinity sampling around encodings, in prior standard
/// deviations.
pub const VICINITY_RADIUS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distinguishability {
    pub accuracy: RepeatedScore,
    pub bce: RepeatedScore,
}

/// Trains binary classifiers to separate reconstructions of `x` (normalized)
/// from decoded samples and reports held-out accuracy and cross-entropy.
pub fn distinguishability_test(
    model: &mut Autoencoder,
    x: &Tensor,
    source: SampleSource,
    cfg: &TrainConfig,
    repeats: usize,
) -> Result<Distinguishability> {
    let mut rng = Prng::seed_from_u64(cfg.seed);
    let enc = model.encode(x, None, &mut rng)?;
    let real = model.decode(&enc.z, enc.probs.as_ref(), &mut rng)?;
    let arch = model.arch.clone();
    distinguish_with(
        &real,
        |n, rng| match source {
            SampleSource::Prior => {
                let prior = if arch.class_dim > 0 {
                    crate::objectives::PriorSpec::uniform_mixture(arch.latent_dim, arch.class_dim)
                } else {
                    crate::objectives::PriorSpec::gaussian(arch.latent_dim)
                };
                let s = sample_prior(&prior, n, rng)?;
                model.decode(&s.z, s.y.as_ref(), rng)
            }
            SampleSource::PosteriorVicinity => {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..enc.z.batch())).collect();
                let mut z = enc.z.select_rows(&idx);
                let eps = standard_normal(z.shape(), rng);
                for (v, e) in z.data_mut().iter_mut().zip(eps.data()) {
                    *v += VICINITY_RADIUS * e;
                }
                let y = enc.probs.as_ref().map(|p| p.select_rows(&idx));
                model.decode(&z, y.as_ref(), rng)
            }
        },
        cfg,
        repeats,
    )
}

/// Distinguishability between fixed `real` samples and those drawn from
/// `fake`. Each repeat trains a CNN on 80% of a balanced mix.
pub fn distinguish_with<F>(real: &Tensor, mut fake: F, cfg: &TrainConfig, repeats: usize) -> Result<Distinguishability>
where
    F: FnMut(usize, &mut Prng) -> Result<Tensor>,
{
    let n = real.batch();
    if n < 10 {
        return Err(Error::InsufficientData("distinguishability needs at least 10 real samples".into()));
    }
    let n_t = real.shape()[1];
    let spec = ClassifierSpec::new(ClassifierKind::Cnn, n_t, 2);
    let (mut accs, mut bces) = (Vec::new(), Vec::new());
    for r in 0..repeats {
        let seed = cfg.seed.wrapping_add(7919 * r as u64 + 3);
        let mut rng = Prng::seed_from_u64(seed);
        let f = fake(n, &mut rng)?;
        let mut data = real.data().to_vec();
        data.extend_from_slice(f.data());
        let both = Tensor::new(vec![2 * n, n_t, real.shape()[2]], data)?;
        let labels: Vec<usize> = (0..2 * n).map(|i| usize::from(i >= n)).collect();
        let ds = labeled_from_tensor(&both, &labels, 2, "d")?;
        let (train, test) = crate::trainer::split_indices(2 * n, 0.2, &mut rng);
        let mut clf = train_classifier(&ds, &train, &spec, &TrainConfig { seed, ..cfg.clone() })?;
        let test_x = both.select_rows(&test);
        let xn = clf.norm.normalize(&test_x);
        let probs = clf.classifier.predict_proba(&xn, &mut rng)?;
        let mut correct = 0;
        let mut bce = 0.0;
        for (k, &i) in test.iter().enumerate() {
            let p_fake = probs.data()[2 * k + 1];
            let y = labels[i];
            if usize::from(p_fake > 0.5) == y {
                correct += 1;
            }
            let p = if y == 1 { p_fake } else { 1.0 - p_fake };
            bce -= p.max(1e-12).ln();
        }
        accs.push(correct as f64 / test.len() as f64);
        bces.push(bce / test.len() as f64);
    }
    Ok(Distinguishability { accuracy: RepeatedScore::from_scores(accs), bce: RepeatedScore::from_scores(bces) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` equal-width bins spanning the data range.
    pub fn new(values: &[f64], bins: usize) -> Self {
        Self::with_range(values, bins, values.iter().copied().fold(f64::INFINITY, f64::min), values.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn with_range(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let bins = bins.max(1);
        let (lo, hi) = if values.is_empty() || !(hi > lo) { (lo.min(0.0), lo.max(0.0) + 1.0) } else { (lo, hi) };
        let w = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + w * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            if v >= lo && v <= hi {
                counts[(((v - lo) / w) as usize).min(bins - 1)] += 1;
            }
        }
        Self { edges, counts }
    }

    /// Center of the most populated bin (first on ties).
    pub fn mode(&self) -> f64 {
        let k = self.counts.iter().enumerate().fold(0, |b, (i, &c)| if c > self.counts[b] { i } else { b });
        0.5 * (self.edges[k] + self.edges[k + 1])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:?},{:?},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        s
    }
}

pub const DEFAULT_BINS: usize = 50;

/// Nearest-neighbor L1 distance of every row of `z`, divided by the latent
/// dimension.
pub fn latent_neighbor_distances(z: &Tensor) -> Result<Vec<f64>> {
    let n = z.batch();
    if n < 2 || z.rank() != 2 {
        return Err(Error::InsufficientData("need at least 2 encodings of shape (n, N)".into()));
    }
    let d = z.last_dim();
    let rows: Vec<&[f64]> = (0..n).map(|i| z.row(i)).collect();
    Ok((0..n)
        .map(|i| {
            let mut best = f64::INFINITY;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let mut s = 0.0;
                for k in 0..d {
                    s += (rows[i][k] - rows[j][k]).abs();
                    if s >= best {
                        break;
                    }
                }
                best = best.min(s);
            }
            best / d as f64
        })
        .collect())
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("KS needs two non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    Ok(d)
}

pub fn row_norms(z: &Tensor) -> Vec<f64> {
    (0..z.batch()).map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Mean of the chi distribution with `n` degrees of freedom, the expected
/// norm of a standard normal vector.
pub fn chi_mean(n: usize) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let n = n as f64;
    2f64.sqrt() * (ln_gamma((n + 1.0) / 2.0) - ln_gamma(n / 2.0)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormComparison {
    pub encodings: Histogram,
    pub prior: Histogram,
    pub ks: f64,
}

/// L2-norm histograms of encodings and prior samples on a shared range,
/// with the KS statistic between the two norm samples.
pub fn latent_norm_distribution(encodings: &Tensor, prior_samples: &Tensor) -> Result<NormComparison> {
    let a = row_norms(encodings);
    let b = row_norms(prior_samples);
    let ks = ks_statistic(&a, &b)?;
    let hi = a.iter().chain(&b).copied().fold(0.0, f64::max);
    Ok(NormComparison {
        encodings: Histogram::with_range(&a, DEFAULT_BINS, 0.0, hi),
        prior: Histogram::with_range(&b, DEFAULT_BINS, 0.0, hi),
        ks,
    })
}

#[derive(Debug, Clone)]
pub struct LatentGrid {
    /// Row-major grid coordinates, first axis slowest.
    pub coords: Vec<[f64; 2]>,
    /// `(points^2, n_t, 6)` decoded vectors in raw units.
    pub signals: Tensor,
}

impl LatentGrid {
    /// CSV with columns `z0,z1,period,a_ee,d_ee,a_mi,a_ei,d_ei,a_me`.
    pub fn to_csv(&self) -> String {
        let n_t = self.signals.shape()[1];
        let mut s = String::from("z0,z1,period,a_ee,d_ee,a_mi,a_ei,d_ei,a_me\n");
        for (i, c) in self.coords.iter().enumerate() {
            for t in 0..n_t {
                let off = (i * n_t + t) * 6;
                let v = &self.signals.data()[off..off + 6];
                s.push_str(&format!(
                    "{:?},{:?},{t},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                    c[0], c[1], v[0], v[1], v[2], v[3], v[4], v[5]
                ));
            }
        }
        s
    }
}

pub fn grid_points(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Decodes an equally spaced `points x points` grid over `[lo, hi]^2` of a
/// two-dimensional latent space. `class` fixes the categorical latent of
/// semi-supervised models.
pub fn grid_sample_2d(model: &mut TrainedModel, lo: f64, hi: f64, points: usize, class: Option<usize>) -> Result<LatentGrid> {
    let arch = &model.model.arch;
    if arch.latent_dim != 2 {
        return Err(Error::Config(format!("grid sampling needs latent_dim 2, model has {}", arch.latent_dim)));
    }
    if points == 0 || !(hi > lo) {
        return Err(Error::Config("grid needs points >= 1 and hi > lo".into()));
    }
    let axis = grid_points(lo, hi, points);
    let coords: Vec<[f64; 2]> = axis.iter().flat_map(|&a| axis.iter().map(move |&b| [a, b])).collect();
    let z = Tensor::new(vec![coords.len(), 2], coords.iter().flatten().copied().collect())?;
    let y = match (arch.class_dim, class) {
        (0, _) => None,
        (c, Some(k)) if k < c => Some(one_hot(&vec![k; coords.len()], c)),
        (c, _) => return Err(Error::Config(format!("semi-supervised grid needs a class in [0, {c})"))),
    };
    let mut rng = Prng::seed_from_u64(model.seed);
    let x = model.model.decode(&z, y.as_ref(), &mut rng)?;
    let signals = model.norm.denormalize(&x);
    if !signals.all_finite() {
        return Err(Error::numeric("grid_sample_2d", "non-finite decoded signal"));
    }
    Ok(LatentGrid { coords, signals })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: Option<F1Report>,
    pub cas: Option<RepeatedScore>,
    pub relative_error_percent: Option<f64>,
    pub relative_error_baseline_std: Option<f64>,
    pub distinguishability: Option<Distinguishability>,
    pub latent_norms: Option<NormComparison>,
    pub neighbor_distances: Option<Histogram>,
}

impl EvalReport {
    /// `metric,value` rows for every populated field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut put = |k: String, v: f64| s.push_str(&format!("{k},{v:?}\n"));
        if let Some(f) = &self.f1 {
            put("mf1".into(), f.macro_f1);
            for (k, c) in f.per_class.iter().enumerate() {
                put(format!("precision_{k}"), c.precision);
                put(format!("recall_{k}"), c.recall);
                put(format!("f1_{k}"), c.f1);
            }
        }
        if let Some(c) = &self.cas {
            put("cas_mf1_mean".into(), c.mean);
            put("cas_mf1_std".into(), c.std);
        }
        if let Some(v) = self.relative_error_percent {
            put("relative_recon_error_percent".into(), v);
        }
        if let Some(v) = self.relative_error_baseline_std {
            put("relative_recon_error_baseline_std".into(), v);
        }
        if let Some(d) = &self.distinguishability {
            put("distinguish_accuracy_mean".into(), d.accuracy.mean);
            put("distinguish_accuracy_std".into(), d.accuracy.std);
            put("distinguish_bce_mean".into(), d.bce.mean);
            put("distinguish_bce_std".into(), d.bce.std);
        }
        if let Some(n) = &self.latent_norms {
            put("latent_norm_ks".into(), n.ks);
        }
        s
    }

    pub fn summary(&self) -> String {
        self.to_csv()
            .lines()
            .skip(1)
            .map(|l| l.replacen(',', ": ", 1))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_example() {
        let mut pred = Vec::new();
        let mut lab = Vec::new();
        let push = |p: usize, l: usize, n: usize, pred: &mut Vec<usize>, lab: &mut Vec<usize>| {
            pred.extend(std::iter::repeat_n(p, n));
            lab.extend(std::iter::repeat_n(l, n));
        };
        push(0, 0, 10, &mut pred, &mut lab);
        push(1, 1, 5, &mut pred, &mut lab);
        push(2, 1, 5, &mut pred, &mut lab);
        push(2, 2, 10, &mut pred, &mut lab);
        let r = macro_f1(&pred, &lab, 3).unwrap();
        let f1: Vec<f64> = r.per_class.iter().map(|c| c.f1).collect();
        assert!((f1[0] - 1.0).abs() < 1e-12);
        assert!((f1[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1[2] - 0.8).abs() < 1e-12);
        assert!((r.macro_f1 - (1.0 + 2.0 / 3.0 + 0.8) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_scores_zero() {
        let r = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(r.absent, vec![2]);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(macro_f1(&[0, 3], &[0, 1], 3).is_err());
    }

    #[test]
    fn neighbor_distance_examples() {
        let z = Tensor::new(vec![2, 5], vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, -2.0]).unwrap();
        assert_eq!(latent_neighbor_distances(&z).unwrap(), vec![1.0, 1.0]);
        let dup = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(latent_neighbor_distances(&dup).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn ks_extremes() {
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn chi_mean_small_cases() {
        assert!((chi_mean(1) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((chi_mean(2) - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn grid_includes_origin() {
        let g = grid_points(-1.5, 1.5, 25);
        assert_eq!(g.len(), 25);
        assert!(g.contains(&0.0));
    }
}
