//! Experiment drivers shared by `repro` and the acceptance tests.

use breathae::dataset::LabeledDataset;
use breathae::eval::{macro_f1, F1Report};
use breathae::models::{ClassifierKind, Variant};
use breathae::preprocess::PrincipalAxisSeries;
use breathae::reconstruct::{
    apply_recon, interpolation_pair, make_training_windows, mean_l1, train_recon_net, ReconMode, WindowPair,
};
use breathae::synth::{generate_shaped_trace, generate_sinusoid_dataset, SynthConfig, WaveShape};
use breathae::trainer::{stratified_labels, train_classifier, train_saae, TrainedClassifier, TrainedModel};
use breathae::Prng;
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Slope-only (`s1`) or period/amplitude jittered (`s2`) synthetic study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    S1,
    S2,
    Recon,
}

impl std::str::FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "s1" => Ok(Self::S1),
            "s2" => Ok(Self::S2),
            "recon" => Ok(Self::Recon),
            _ => Err(CliError::Config(format!("unknown experiment {s:?}"))),
        }
    }
}

impl Experiment {
    /// Keys the experiment sets before user overrides are applied.
    pub fn preset(self) -> &'static str {
        match self {
            Self::S1 => "model = saae\nvary_period_amplitude = false\nlabels_fraction = 0.01\n",
            Self::S2 => "model = saae\nvary_period_amplitude = true\nlabels_fraction = 0.05\n",
            Self::Recon => "model = popbr\n",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemiSupervisedRun {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub labeled: Vec<usize>,
    pub model: TrainedModel,
    pub train_f1: F1Report,
    pub test_f1: F1Report,
}

/// Synthesizes train and test sets from `cfg`.
pub fn synth_sets(cfg: &RunConfig) -> CliResult<(LabeledDataset, LabeledDataset)> {
    Ok((generate_sinusoid_dataset(&cfg.synth())?, generate_sinusoid_dataset(&cfg.synth_test())?))
}

pub fn score(pred: &[usize], ds: &LabeledDataset) -> CliResult<F1Report> {
    Ok(macro_f1(pred, &ds.require_labels()?, ds.classes)?)
}

/// Trains a semi-supervised model on `train` with stratified labels and
/// scores it on both sets.
pub fn semi_supervised_on(
    cfg: &RunConfig,
    train: LabeledDataset,
    test: LabeledDataset,
) -> CliResult<SemiSupervisedRun> {
    let labeled = stratified_labels(&train, cfg.label_count(train.len()), cfg.seed)?;
    let arch = cfg.arch(Variant::Saae, train.n_t);
    let mut model = train_saae(&train, &labeled, &arch, &cfg.train())?;
    let mut rng = Prng::seed_from_u64(cfg.seed);
    let train_f1 = score(&model.classify_raw(&train.to_tensor(), &mut rng)?, &train)?;
    let test_f1 = score(&model.classify_raw(&test.to_tensor(), &mut rng)?, &test)?;
    Ok(SemiSupervisedRun { train, test, labeled, model, train_f1, test_f1 })
}

pub fn semi_supervised(cfg: &RunConfig) -> CliResult<SemiSupervisedRun> {
    let (train, test) = synth_sets(cfg)?;
    semi_supervised_on(cfg, train, test)
}

/// Pure classifier trained on the same labeled subset.
pub fn baseline(
    cfg: &RunConfig,
    kind: ClassifierKind,
    train: &LabeledDataset,
    labeled: &[usize],
    test: &LabeledDataset,
) -> CliResult<(TrainedClassifier, F1Report)> {
    let spec = cfg.classifier_spec(kind, train.n_t);
    let mut clf = train_classifier(train, labeled, &spec, &cfg.train())?;
    let mut rng = Prng::seed_from_u64(cfg.seed);
    let f1 = score(&clf.predict_raw(&test.to_tensor(), &mut rng)?, test)?;
    Ok((clf, f1))
}

#[derive(Debug, Clone)]
pub struct ReconSource {
    pub id: String,
    pub real: Vec<f64>,
    pub interp: Vec<f64>,
    pub windows: Vec<WindowPair>,
}

/// Waveform, period (s) and amplitude (mm) of source `k` of `n`.
fn source_params(k: usize, n: usize) -> (WaveShape, f64, f64) {
    let u = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.5 };
    let shape = WaveShape { inhale_fraction: 0.35 + 0.25 * u, sharpness: 0.7 + 0.9 * ((k * 3) % n) as f64 / n as f64 };
    (shape, 3.2 + 1.6 * ((k * 2) % n) as f64 / n as f64, 6.0 + 1.5 * ((k * 4) % n) as f64 / n as f64)
}

/// Synthetic multi-source corpus standing in for recorded patients; each
/// source differs in waveform, breathing period and amplitude.
pub fn recon_corpus(cfg: &RunConfig) -> CliResult<Vec<ReconSource>> {
    let n = cfg.recon_sources;
    if n < 2 {
        return Err(CliError::Config("recon_sources must be >= 2".into()));
    }
    (0..n)
        .map(|k| {
            let (shape, period, amplitude) = source_params(k, n);
            let sc = SynthConfig {
                base_period: period,
                base_amplitude: amplitude,
                vary_period_amplitude: true,
                ..cfg.synth()
            };
            let sig = generate_shaped_trace(&sc, shape, cfg.recon_shape_jitter, k as u64, cfg.recon_cycles)?;
            let series = PrincipalAxisSeries::from_values(sig.sample_rate, sig.values);
            let (real, interp) = interpolation_pair(&series)?;
            let id = format!("source{k}");
            let windows = make_training_windows(&real, &interp, cfg.recon_stride, &id)?;
            Ok(ReconSource { id, real, interp, windows })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconStudy {
    pub sources: Vec<String>,
    /// `patbr[k][j]`: L1 error on source `j` of the model trained on `k`.
    pub patbr: Vec<Vec<f64>>,
    /// Population model error on each source it was not trained on.
    pub popbr_heldout: Vec<f64>,
    /// Error of the plain interpolation on each source.
    pub interpolation: Vec<f64>,
}

impl ReconStudy {
    /// Mean error of the model trained on source `k` over the other sources.
    pub fn patbr_cross(&self, k: usize) -> f64 {
        let row = &self.patbr[k];
        let others: Vec<f64> = row.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| *v).collect();
        others.iter().sum::<f64>() / others.len() as f64
    }

    pub fn popbr_mean(&self) -> f64 {
        self.popbr_heldout.iter().sum::<f64>() / self.popbr_heldout.len() as f64
    }

    /// Population error no worse than any single-source model off its source.
    pub fn ordering_holds(&self) -> bool {
        (0..self.sources.len()).all(|k| self.popbr_mean() <= self.patbr_cross(k))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,interpolation_l1,popbr_heldout_l1,patbr_own_l1,patbr_cross_l1\n");
        for (k, id) in self.sources.iter().enumerate() {
            s.push_str(&format!(
                "{id},{:?},{:?},{:?},{:?}\n",
                self.interpolation[k], self.popbr_heldout[k], self.patbr[k][k], self.patbr_cross(k)
            ));
        }
        s
    }
}

/// Per-source models versus leave-one-source-out population models.
pub fn recon_study(cfg: &RunConfig, corpus: &[ReconSource]) -> CliResult<ReconStudy> {
    let tc = cfg.recon_train();
    let eval = |net: &mut breathae::reconstruct::ReconNet, s: &ReconSource| -> CliResult<f64> {
        Ok(mean_l1(&apply_recon(net, &s.interp)?, &s.real)?)
    };
    let mut patbr = Vec::with_capacity(corpus.len());
    for src in corpus {
        let mut net = train_recon_net(&src.windows, &cfg.recon_spec(ReconMode::Patbr), &tc)?.net;
        patbr.push(corpus.iter().map(|s| eval(&mut net, s)).collect::<CliResult<Vec<_>>>()?);
    }
    let mut popbr_heldout = Vec::with_capacity(corpus.len());
    for (k, held) in corpus.iter().enumerate() {
        let pool: Vec<WindowPair> =
            corpus.iter().enumerate().filter(|(j, _)| *j != k).flat_map(|(_, s)| s.windows.iter().cloned()).collect();
        let mut net = train_recon_net(&pool, &cfg.recon_spec(ReconMode::Popbr), &tc)?.net;
        popbr_heldout.push(eval(&mut net, held)?);
    }
    let interpolation = corpus.iter().map(|s| mean_l1(&s.interp, &s.real)).collect::<Result<Vec<_>, _>>()?;
    Ok(ReconStudy { sources: corpus.iter().map(|s| s.id.clone()).collect(), patbr, popbr_heldout, interpolation })
}
