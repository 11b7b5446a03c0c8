//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use breathae::models::{ArchConfig, ClassifierKind, ClassifierSpec, Variant};
use breathae::objectives::GeneratorStyle;
use breathae::reconstruct::{ReconMode, ReconNetSpec, ReconTrainConfig};
use breathae::synth::{SlopeRange, SynthConfig};
use breathae::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

/// Model family selected by the `model` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Vae,
    Aae,
    Saae,
    FeedForward,
    Cnn,
    Patbr,
    Popbr,
}

impl ModelKind {
    pub fn variant(self) -> Option<Variant> {
        match self {
            Self::Vae => Some(Variant::Vae),
            Self::Aae => Some(Variant::Aae),
            Self::Saae => Some(Variant::Saae),
            _ => None,
        }
    }

    pub fn classifier(self) -> Option<ClassifierKind> {
        match self {
            Self::FeedForward => Some(ClassifierKind::FeedForward),
            Self::Cnn => Some(ClassifierKind::Cnn),
            _ => None,
        }
    }

    pub fn recon(self) -> Option<ReconMode> {
        match self {
            Self::Patbr => Some(ReconMode::Patbr),
            Self::Popbr => Some(ReconMode::Popbr),
            _ => None,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "vae" => Self::Vae,
            "aae" => Self::Aae,
            "saae" => Self::Saae,
            "ff" | "feed_forward" => Self::FeedForward,
            "cnn" => Self::Cnn,
            "patbr" => Self::Patbr,
            "popbr" => Self::Popbr,
            _ => return Err(format!("unknown model {s:?}")),
        })
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vae => "vae",
            Self::Aae => "aae",
            Self::Saae => "saae",
            Self::FeedForward => "ff",
            Self::Cnn => "cnn",
            Self::Patbr => "patbr",
            Self::Popbr => "popbr",
        })
    }
}

/// Conversion between a config field and its textual value.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(u64, usize, bool, String, ModelKind, GeneratorStyle);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("{s} is not finite"))
        }
    }
    // Debug formatting round-trips exactly.
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for Option<f64> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            f64::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.render())
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',').map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}"))).collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for SlopeRange {
    fn parse_value(s: &str) -> Result<Self, String> {
        let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
        Ok(SlopeRange::new(f64::parse_value(lo.trim())?, f64::parse_value(hi.trim())?))
    }
    fn render(&self) -> String {
        format!("{}:{}", self.lo.render(), self.hi.render())
    }
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name) ),*];

            /// Sets one key; unknown keys and unparsable values are errors.
            pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| CliError::Config(format!("{key}: {e}")))?;
                    } )*
                    _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), ConfigValue::render(&self.$name)) ),*]
            }
        }
    };
}

fn s1() -> SynthConfig {
    SynthConfig::s1(1, 30_000)
}

run_config! {
    seed: u64 = 1,

    /// Input dataset file.
    dataset: String = String::new(),
    /// Input model bundle.
    bundle: String = String::new(),
    /// Comma separated marker series CSV files.
    series: String = String::new(),
    /// Stored slope thresholds JSON for preprocessing.
    thresholds: String = String::new(),

    num_samples: usize = s1().num_samples,
    periods_per_sample: usize = s1().periods_per_sample,
    sample_rate: f64 = s1().sample_rate,
    base_amplitude: f64 = s1().base_amplitude,
    base_period: f64 = s1().base_period,
    slope_down: SlopeRange = s1().slope_classes[0],
    slope_regular: SlopeRange = s1().slope_classes[1],
    slope_up: SlopeRange = s1().slope_classes[2],
    period_jitter: f64 = s1().period_jitter,
    amplitude_jitter: f64 = s1().amplitude_jitter,
    noise_sigma: f64 = s1().noise_sigma,
    vary_period_amplitude: bool = false,
    /// `csv` or `bin`.
    dataset_format: String = "csv".into(),
    test_samples: usize = 3000,
    test_seed: u64 = 1_000_003,
    /// Breathing cycles of the synthetic 3-D marker trace; 0 disables it.
    marker_cycles: usize = 200,

    percentile: f64 = 0.075,
    stride: usize = 1,

    model: ModelKind = ModelKind::Saae,
    latent_dim: usize = 15,
    classes: usize = 3,
    enc_filters: Vec<usize> = vec![32, 64, 64, 128],
    dec_filters: Vec<usize> = vec![128, 64, 64, 32],
    dec_dilations: Vec<usize> = vec![1, 2, 4, 8],
    kernel_size: usize = 5,
    hidden: usize = 128,
    disc_hidden: Vec<usize> = vec![64; 4],
    enc_dropout: f64 = 0.1,
    dec_dropout: f64 = 0.3,
    classifier_filters: Vec<usize> = vec![32, 64, 64, 128],
    classifier_hidden: Vec<usize> = vec![128, 64],
    classifier_dropout: f64 = 0.1,

    epochs: usize = 100,
    batch_size: usize = 256,
    /// `auto` picks the per-model default.
    lr_reconstruction: Option<f64> = None,
    lr_discriminator: Option<f64> = None,
    lr_classification: Option<f64> = None,
    beta_n: f64 = 0.02,
    alpha: f64 = 5.0,
    recon_scale: f64 = 4.0,
    labels_fraction: f64 = 0.01,
    validation_fraction: f64 = 0.1,
    patience: usize = 20,
    generator_style: GeneratorStyle = GeneratorStyle::Nonsaturating,

    num_generate: usize = 1000,
    /// Class name or index, or `any`.
    generate_class: String = "any".into(),

    /// Comma separated subset of mf1,recon,cas,distinguish,latent,grid or `all`.
    protocol: String = "all".into(),
    cas_generated: usize = 10_000,
    cas_repeats: usize = 3,
    cas_epochs: usize = 30,
    distinguish_samples: usize = 2000,
    distinguish_repeats: usize = 3,
    grid_points: usize = 11,
    grid_range: f64 = 2.0,

    recon_sources: usize = 5,
    recon_cycles: usize = 300,
    recon_epochs: usize = 200,
    recon_batch_size: usize = 256,
    recon_lr: f64 = 1e-4,
    recon_decay: f64 = 1e-6,
    recon_hidden: Vec<usize> = vec![256; 3],
    recon_stride: usize = 100,
    popbr_fraction: f64 = 0.1,
    recon_shape_jitter: f64 = 0.2,
}

impl RunConfig {
    /// Applies a `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            self.set(k, v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::MissingFile(path.to_path_buf())
            } else {
                CliError::io(path, e)
            }
        })?;
        self.apply_text(&text)
    }

    /// Replaces `auto` learning rates by the model family defaults.
    pub fn resolve(&mut self) {
        let base = match self.model.variant() {
            Some(v) => TrainConfig::for_variant(v),
            None => TrainConfig::default(),
        };
        self.lr_reconstruction.get_or_insert(base.lr_reconstruction);
        self.lr_discriminator.get_or_insert(base.lr_discriminator);
        self.lr_classification.get_or_insert(base.lr_classification);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            num_samples: self.num_samples,
            periods_per_sample: self.periods_per_sample,
            sample_rate: self.sample_rate,
            base_amplitude: self.base_amplitude,
            base_period: self.base_period,
            slope_classes: [self.slope_down, self.slope_regular, self.slope_up],
            period_jitter: self.period_jitter,
            amplitude_jitter: self.amplitude_jitter,
            noise_sigma: self.noise_sigma,
            vary_period_amplitude: self.vary_period_amplitude,
            ..s1()
        }
    }

    /// Synthesis settings of the held-out test set.
    pub fn synth_test(&self) -> SynthConfig {
        SynthConfig { seed: self.test_seed, num_samples: self.test_samples, ..self.synth() }
    }

    pub fn arch(&self, variant: Variant, n_t: usize) -> ArchConfig {
        ArchConfig {
            enc_filters: self.enc_filters.clone(),
            dec_filters: self.dec_filters.clone(),
            dec_dilations: self.dec_dilations.clone(),
            kernel_size: self.kernel_size,
            hidden: self.hidden,
            disc_hidden: self.disc_hidden.clone(),
            enc_dropout: self.enc_dropout,
            dec_dropout: self.dec_dropout,
            ..ArchConfig::new(variant, n_t, self.latent_dim, self.classes)
        }
    }

    pub fn classifier_spec(&self, kind: ClassifierKind, n_t: usize) -> ClassifierSpec {
        ClassifierSpec {
            filters: self.classifier_filters.clone(),
            kernel_size: self.kernel_size,
            hidden: self.classifier_hidden.clone(),
            dropout: self.classifier_dropout,
            ..ClassifierSpec::new(kind, n_t, self.classes)
        }
    }

    pub fn train(&self) -> TrainConfig {
        let base = match self.model.variant() {
            Some(v) => TrainConfig::for_variant(v),
            None => TrainConfig::default(),
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_reconstruction: self.lr_reconstruction.unwrap_or(base.lr_reconstruction),
            lr_discriminator: self.lr_discriminator.unwrap_or(base.lr_discriminator),
            lr_classification: self.lr_classification.unwrap_or(base.lr_classification),
            beta_n: self.beta_n,
            alpha: self.alpha,
            recon_scale: self.recon_scale,
            label_fraction: self.labels_fraction,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
            patience: self.patience,
            generator_style: self.generator_style,
        }
    }

    pub fn recon_spec(&self, mode: ReconMode) -> ReconNetSpec {
        ReconNetSpec { hidden: self.recon_hidden.clone(), mode }
    }

    pub fn recon_train(&self) -> ReconTrainConfig {
        ReconTrainConfig {
            epochs: self.recon_epochs,
            batch_size: self.recon_batch_size,
            lr: self.recon_lr,
            decay: self.recon_decay,
            seed: self.seed,
            popbr_fraction: self.popbr_fraction,
        }
    }

    pub fn series_paths(&self) -> Vec<std::path::PathBuf> {
        self.series.split(',').map(str::trim).filter(|p| !p.is_empty()).map(Into::into).collect()
    }

    /// Number of labeled training samples implied by `labels_fraction`.
    pub fn label_count(&self, n: usize) -> usize {
        ((self.labels_fraction * n as f64).round() as usize).max(self.classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("recon_lr", "0.1").unwrap();
        cfg.set("slope_up", "0.004:0.03").unwrap();
        cfg.set("enc_filters", "8,16").unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_text("epoch = 3"), Err(CliError::Config(_))));
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(RunConfig::from_text("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn resolve_fills_learning_rates() {
        let mut cfg = RunConfig::default();
        cfg.resolve();
        assert!(cfg.lr_reconstruction.is_some());
        assert!(!cfg.to_text().contains("auto"));
    }
}
