//! Command implementations. Each command is a pure function of its input
//! files and resolved config and writes one artifact directory.

use std::path::{Path, PathBuf};

use breathae::bundle::{ModelBundle, ModelSpec};
use breathae::dataset::LabeledDataset;
use breathae::eval::{
    cas, distinguishability_test, grid_sample_2d, latent_neighbor_distances, latent_norm_distribution,
    relative_recon_error, EvalReport, Histogram, SampleSource, DEFAULT_BINS,
};
use breathae::models::{ClassifierKind, Variant};
use breathae::objectives::sample_prior;
use breathae::preprocess::{
    assemble_vectors, class_index, label_baseline_shift, pca_project, remove_artifacts, segment_periods,
    SlopeThresholds, CLASS_NAMES,
};
use breathae::reconstruct::{apply_recon, interpolation_pair, linear_interpolate, make_training_windows, train_recon_net};
use breathae::synth::{generate_marker_series, generate_sinusoid_dataset, Marker3DSeries, SynthConfig};
use breathae::trainer::{stratified_labels, train_aae, train_classifier, train_saae, train_vae, TrainingLog};
use breathae::Prng;
use rand::SeedableRng;

use crate::artifacts::{load_dataset, read_file, sha256_hex, ArtifactDir, PLOT_SCRIPT};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::experiments::{self, Experiment};

pub const BUNDLE_FILE: &str = "bundle.bin";
pub const LOG_FILE: &str = "training_log.csv";
pub const REPORT_FILE: &str = "eval_report.csv";
pub const PLOT_FILE: &str = "plot.py";
pub const THRESHOLDS_FILE: &str = "thresholds.json";

fn binary(cfg: &RunConfig) -> CliResult<bool> {
    match cfg.dataset_format.as_str() {
        "csv" => Ok(false),
        "bin" => Ok(true),
        f => Err(CliError::Config(format!("dataset_format must be csv or bin, got {f:?}"))),
    }
}

fn load_bundle(dir: &mut ArtifactDir, path: &Path) -> CliResult<ModelBundle> {
    let bytes = read_file(path)?;
    dir.record_input("bundle", sha256_hex(&bytes));
    Ok(ModelBundle::from_bytes(&bytes)?)
}

fn input_dataset(dir: &mut ArtifactDir, label: &str, path: &Path) -> CliResult<LabeledDataset> {
    let (ds, hash) = load_dataset(path)?;
    dir.record_input(label, hash);
    Ok(ds)
}

fn write_report(dir: &mut ArtifactDir, report: &EvalReport) -> CliResult<()> {
    dir.write(REPORT_FILE, report.to_csv().as_bytes())?;
    if let Some(n) = &report.latent_norms {
        dir.write("latent_norms_encodings.csv", n.encodings.to_csv().as_bytes())?;
        dir.write("latent_norms_prior.csv", n.prior.to_csv().as_bytes())?;
    }
    if let Some(h) = &report.neighbor_distances {
        dir.write("neighbor_distances.csv", h.to_csv().as_bytes())?;
    }
    if let Some(f) = &report.f1 {
        let mut s = String::from("true\\predicted");
        for k in 0..f.confusion.len() {
            s.push_str(&format!(",{k}"));
        }
        s.push('\n');
        for (k, row) in f.confusion.iter().enumerate() {
            s.push_str(&k.to_string());
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        dir.write("confusion.csv", s.as_bytes())?;
    }
    dir.write(PLOT_FILE, PLOT_SCRIPT.as_bytes())?;
    Ok(())
}

fn write_log(dir: &mut ArtifactDir, log: &TrainingLog) -> CliResult<()> {
    dir.write(LOG_FILE, log.to_csv().as_bytes())?;
    Ok(())
}

/// Labeled indices for training: a stratified `labels_fraction` subset of a
/// fully labeled set, or every labeled vector of a partially labeled one.
pub fn labeled_indices(cfg: &RunConfig, ds: &LabeledDataset) -> CliResult<Vec<usize>> {
    if ds.vectors.iter().all(|v| v.label.is_some()) {
        Ok(stratified_labels(ds, cfg.label_count(ds.len()), cfg.seed)?)
    } else {
        Ok(ds.vectors.iter().enumerate().filter(|(_, v)| v.label.is_some()).map(|(i, _)| i).collect())
    }
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    let bin = binary(cfg)?;
    let mut dir = ArtifactDir::create(out, cfg)?;
    let ds = generate_sinusoid_dataset(&cfg.synth())?;
    dir.write_dataset("dataset", &ds, bin)?;
    if cfg.test_samples > 0 {
        let test = generate_sinusoid_dataset(&cfg.synth_test())?;
        dir.write_dataset("test", &test, bin)?;
    }
    if cfg.marker_cycles > 0 {
        let markers = generate_marker_series(&SynthConfig { num_samples: cfg.marker_cycles, ..cfg.synth() })?;
        let mut buf = Vec::new();
        markers.write_csv(&mut buf)?;
        dir.write("markers.csv", &buf)?;
    }
    dir.write(THRESHOLDS_FILE, serde_json::to_string_pretty(&cfg.synth().slope_thresholds()).map_err(breathae::Error::from)?.as_bytes())?;
    dir.finish()
}

fn read_markers(dir: &mut ArtifactDir, path: &Path) -> CliResult<Marker3DSeries> {
    let bytes = read_file(path)?;
    dir.record_input(&format!("series:{}", source_id(path)), sha256_hex(&bytes));
    Ok(Marker3DSeries::read_csv(bytes.as_slice())?)
}

fn source_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "series".into(), |s| s.to_string_lossy().replace([',', '\n', '\r'], "_"))
}

/// Marker CSV traces to labeled vectors. With `thresholds` the stored
/// cut-offs are applied; otherwise they are fitted on these traces.
pub fn cmd_preprocess(
    cfg: &RunConfig,
    inputs: &[PathBuf],
    thresholds: Option<&Path>,
    out: &Path,
) -> CliResult<PathBuf> {
    if inputs.is_empty() {
        return Err(CliError::Config("preprocess needs at least one series file".into()));
    }
    let bin = binary(cfg)?;
    let mut dir = ArtifactDir::create(out, cfg)?;
    let mut vectors = Vec::new();
    for path in inputs {
        let series = pca_project(&remove_artifacts(read_markers(&mut dir, path)?))?;
        let periods = segment_periods(&series)?;
        vectors.extend(assemble_vectors(&periods, cfg.periods_per_sample, cfg.stride, &source_id(path))?);
    }
    let th = match thresholds {
        Some(p) => {
            let bytes = read_file(p)?;
            dir.record_input("thresholds", sha256_hex(&bytes));
            let th: SlopeThresholds =
                serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("thresholds file: {e}")))?;
            th.apply(&mut vectors);
            th
        }
        None => label_baseline_shift(&mut vectors, cfg.percentile)?,
    };
    let ds = LabeledDataset::new(cfg.periods_per_sample, cfg.classes, vectors)?;
    dir.write_dataset("dataset", &ds, bin)?;
    dir.write(THRESHOLDS_FILE, serde_json::to_string_pretty(&th).map_err(breathae::Error::from)?.as_bytes())?;
    dir.finish()
}

fn sidecar_thresholds(dataset: &Path) -> Option<SlopeThresholds> {
    let p = dataset.with_file_name(THRESHOLDS_FILE);
    serde_json::from_slice(&std::fs::read(p).ok()?).ok()
}

/// Trains the model selected by `cfg.model`. Autoencoders and classifiers
/// read a dataset; reconstruction networks read marker series.
pub fn cmd_train(cfg: &RunConfig, dataset: Option<&Path>, series: &[PathBuf], out: &Path) -> CliResult<PathBuf> {
    let mut dir = ArtifactDir::create(out, cfg)?;
    let mut report = EvalReport::default();
    let bundle = if let Some(mode) = cfg.model.recon() {
        if series.is_empty() {
            return Err(CliError::Config(format!("{} training needs --series files", cfg.model)));
        }
        let mut pairs = Vec::new();
        for path in series {
            let s = pca_project(&remove_artifacts(read_markers(&mut dir, path)?))?;
            let (real, interp) = interpolation_pair(&s)?;
            pairs.extend(make_training_windows(&real, &interp, cfg.recon_stride, &source_id(path))?);
        }
        let trained = train_recon_net(&pairs, &cfg.recon_spec(mode), &cfg.recon_train())?;
        let mut csv = String::from("epoch,reconstruction\n");
        for (e, l) in trained.losses.iter().enumerate() {
            csv.push_str(&format!("{e},{l:?}\n"));
        }
        dir.write(LOG_FILE, csv.as_bytes())?;
        ModelBundle::from_recon(&trained.net, cfg.seed)
    } else {
        let path = dataset.ok_or_else(|| CliError::Config("train needs --dataset".into()))?;
        let ds = input_dataset(&mut dir, "dataset", path)?;
        let tc = cfg.train();
        let mut bundle = if let Some(kind) = cfg.model.classifier() {
            let labeled = labeled_indices(cfg, &ds)?;
            let mut clf = train_classifier(&ds, &labeled, &cfg.classifier_spec(kind, ds.n_t), &tc)?;
            write_log(&mut dir, &clf.log)?;
            if ds.vectors.iter().all(|v| v.label.is_some()) {
                let pred = clf.predict_raw(&ds.to_tensor(), &mut Prng::seed_from_u64(cfg.seed))?;
                report.f1 = Some(experiments::score(&pred, &ds)?);
            }
            ModelBundle::from_classifier(&clf)
        } else {
            let variant = cfg.model.variant().expect("autoencoder variant");
            let arch = cfg.arch(variant, ds.n_t);
            let mut model = match variant {
                Variant::Vae => train_vae(&ds, &arch, &tc)?,
                Variant::Aae => train_aae(&ds, &arch, &tc)?,
                Variant::Saae => train_saae(&ds, &labeled_indices(cfg, &ds)?, &arch, &tc)?,
            };
            write_log(&mut dir, &model.log)?;
            if variant == Variant::Saae && ds.vectors.iter().all(|v| v.label.is_some()) {
                let pred = model.classify_raw(&ds.to_tensor(), &mut Prng::seed_from_u64(cfg.seed))?;
                report.f1 = Some(experiments::score(&pred, &ds)?);
            }
            ModelBundle::from_trained(&model)
        };
        bundle.header.thresholds = sidecar_thresholds(path);
        bundle
    };
    let mut bundle = bundle;
    bundle.header.training_log = Some(LOG_FILE.into());
    dir.write(BUNDLE_FILE, &bundle.to_bytes()?)?;
    write_report(&mut dir, &report)?;
    dir.finish()
}

fn parse_class(cfg: &RunConfig) -> CliResult<Option<usize>> {
    let s = cfg.generate_class.as_str();
    if s == "any" {
        return Ok(None);
    }
    if let Ok(k) = s.parse::<usize>() {
        return Ok(Some(k));
    }
    class_index(s)
        .map(Some)
        .ok_or_else(|| CliError::Config(format!("generate_class must be any, an index or one of {CLASS_NAMES:?}")))
}

fn series_csv(ds: &LabeledDataset, sample_rate: f64) -> CliResult<String> {
    let mut s = String::from("sample,t,value\n");
    for (i, v) in ds.vectors.iter().enumerate() {
        for (j, y) in linear_interpolate(v, sample_rate)?.iter().enumerate() {
            s.push_str(&format!("{i},{:?},{y:?}\n", j as f64 / sample_rate));
        }
    }
    Ok(s)
}

/// Decodes `num_generate` prior samples into vectors and time series.
pub fn cmd_generate(cfg: &RunConfig, bundle: &Path, out: &Path) -> CliResult<PathBuf> {
    let mut dir = ArtifactDir::create(out, cfg)?;
    let mut model = load_bundle(&mut dir, bundle)?.to_trained()?;
    let class = parse_class(cfg)?;
    let mut rng = Prng::seed_from_u64(cfg.seed);
    let (x, classes) = model.generate(cfg.num_generate, class, &mut rng)?;
    let n_t = model.model.arch.n_t;
    let vectors = (0..x.batch())
        .map(|i| breathae::preprocess::BreathingVector::from_flat(x.row(i), classes.get(i).copied(), format!("gen{i}")))
        .collect();
    let c = model.model.arch.class_dim.max(cfg.classes);
    let ds = LabeledDataset::new(n_t, c, vectors)?;
    dir.write_dataset("generated", &ds, binary(cfg)?)?;
    dir.write("series.csv", series_csv(&ds, cfg.sample_rate)?.as_bytes())?;
    dir.write(PLOT_FILE, PLOT_SCRIPT.as_bytes())?;
    dir.finish()
}

fn predict(bundle: &ModelBundle, ds: &LabeledDataset, seed: u64) -> CliResult<Vec<usize>> {
    let mut rng = Prng::seed_from_u64(seed);
    let x = ds.to_tensor();
    match &bundle.header.model {
        ModelSpec::Classifier(_) => Ok(bundle.to_classifier()?.predict_raw(&x, &mut rng)?),
        ModelSpec::Autoencoder(_) => Ok(bundle.to_trained()?.classify_raw(&x, &mut rng)?),
        ModelSpec::Recon(_) => Err(CliError::Config("a reconstruction bundle cannot classify".into())),
    }
}

pub fn cmd_classify(cfg: &RunConfig, bundle: &Path, dataset: &Path, out: &Path) -> CliResult<PathBuf> {
    let mut dir = ArtifactDir::create(out, cfg)?;
    let b = load_bundle(&mut dir, bundle)?;
    let ds = input_dataset(&mut dir, "dataset", dataset)?;
    let pred = predict(&b, &ds, cfg.seed)?;
    let mut s = String::from("index,source_id,predicted,label\n");
    for (i, (v, p)) in ds.vectors.iter().zip(&pred).enumerate() {
        let label = v.label.map_or(-1, |l| l as i64);
        s.push_str(&format!("{i},{},{p},{label}\n", v.source_id));
    }
    dir.write("predictions.csv", s.as_bytes())?;
    let mut report = EvalReport::default();
    if ds.vectors.iter().all(|v| v.label.is_some()) {
        report.f1 = Some(experiments::score(&pred, &ds)?);
    }
    write_report(&mut dir, &report)?;
    dir.finish()
}

/// Interpolates each vector and refines it with a reconstruction network.
pub fn cmd_reconstruct(cfg: &RunConfig, bundle: &Path, vectors: &Path, out: &Path) -> CliResult<PathBuf> {
    let mut dir = ArtifactDir::create(out, cfg)?;
    let mut net = load_bundle(&mut dir, bundle)?.to_recon()?;
    let ds = input_dataset(&mut dir, "vectors", vectors)?;
    let mut s = String::from("sample,t,interpolated,reconstructed\n");
    for (i, v) in ds.vectors.iter().enumerate() {
        let interp = linear_interpolate(v, cfg.sample_rate)?;
        let rec = apply_recon(&mut net, &interp)?;
        for (j, (a, b)) in interp.iter().zip(&rec).enumerate() {
            s.push_str(&format!("{i},{:?},{a:?},{b:?}\n", j as f64 / cfg.sample_rate));
        }
    }
    dir.write("series.csv", s.as_bytes())?;
    dir.write(PLOT_FILE, PLOT_SCRIPT.as_bytes())?;
    dir.finish()
}

const PROTOCOLS: [&str; 6] = ["mf1", "recon", "cas", "distinguish", "latent", "grid"];

fn protocols(cfg: &RunConfig) -> CliResult<(Vec<&'static str>, bool)> {
    if cfg.protocol == "all" {
        return Ok((PROTOCOLS.to_vec(), false));
    }
    let mut out = Vec::new();
    for p in cfg.protocol.split(',').map(str::trim) {
        let k = PROTOCOLS
            .iter()
            .find(|q| **q == p)
            .ok_or_else(|| CliError::Config(format!("unknown protocol {p:?}; expected all or {PROTOCOLS:?}")))?;
        out.push(*k);
    }
    Ok((out, true))
}

/// Runs the evaluation protocols on `dataset`. With `protocol = all`,
/// protocols that do not apply to the bundle are skipped; naming one that
/// does not apply is an error.
pub fn cmd_eval(cfg: &RunConfig, bundle: &Path, dataset: &Path, out: &Path) -> CliResult<PathBuf> {
    let mut dir = ArtifactDir::create(out, cfg)?;
    let b = load_bundle(&mut dir, bundle)?;
    let ds = input_dataset(&mut dir, "dataset", dataset)?;
    let (chosen, strict) = protocols(cfg)?;
    let labeled = ds.vectors.iter().all(|v| v.label.is_some());
    let mut report = EvalReport::default();
    let skip = |what: &str, why: &str| -> CliResult<()> {
        if strict {
            Err(CliError::Config(format!("protocol {what} not applicable: {why}")))
        } else {
            log::info!("skipping {what}: {why}");
            Ok(())
        }
    };
    if let ModelSpec::Autoencoder(arch) = &b.header.model {
        let mut model = b.to_trained()?;
        let x = model.norm.normalize(&ds.to_tensor());
        for p in chosen {
            match p {
                "mf1" if arch.variant == Variant::Saae && labeled => {
                    report.f1 = Some(experiments::score(&predict(&b, &ds, cfg.seed)?, &ds)?);
                }
                "mf1" => skip(p, "needs a semi-supervised bundle and a labeled dataset")?,
                "recon" => {
                    let r = relative_recon_error(&mut model.model, &x, cfg.seed)?;
                    report.relative_error_percent = Some(r.percent);
                }
                "cas" if arch.variant == Variant::Saae && labeled => {
                    let spec = cfg.classifier_spec(ClassifierKind::Cnn, arch.n_t);
                    let tc = breathae::trainer::TrainConfig { epochs: cfg.cas_epochs, ..cfg.train() };
                    report.cas = Some(cas(&mut model, &ds, cfg.cas_generated, &spec, &tc, cfg.cas_repeats)?);
                }
                "cas" => skip(p, "needs a semi-supervised bundle and a labeled dataset")?,
                "distinguish" => {
                    let n = cfg.distinguish_samples.min(x.batch());
                    let idx: Vec<usize> = (0..n).collect();
                    let tc = breathae::trainer::TrainConfig { epochs: cfg.cas_epochs, ..cfg.train() };
                    report.distinguishability = Some(distinguishability_test(
                        &mut model.model,
                        &x.select_rows(&idx),
                        SampleSource::Prior,
                        &tc,
                        cfg.distinguish_repeats,
                    )?);
                }
                "latent" => {
                    let mut rng = Prng::seed_from_u64(cfg.seed);
                    let z = model.model.encode(&x, None, &mut rng)?.z;
                    let prior = sample_prior(&model.prior, z.batch(), &mut rng)?;
                    report.latent_norms = Some(latent_norm_distribution(&z, &prior.z)?);
                    report.neighbor_distances = Some(Histogram::new(&latent_neighbor_distances(&z)?, DEFAULT_BINS));
                }
                "grid" if arch.latent_dim == 2 => {
                    let class = if arch.class_dim > 0 { Some(parse_class(cfg)?.unwrap_or(0)) } else { None };
                    let g = grid_sample_2d(&mut model, -cfg.grid_range, cfg.grid_range, cfg.grid_points, class)?;
                    dir.write("latent_grid.csv", g.to_csv().as_bytes())?;
                }
                "grid" => skip(p, "needs latent_dim 2")?,
                _ => unreachable!("protocol list is closed"),
            }
        }
    } else {
        for p in chosen {
            if p == "mf1" && labeled {
                report.f1 = Some(experiments::score(&predict(&b, &ds, cfg.seed)?, &ds)?);
            } else {
                skip(p, "not supported for this bundle type")?;
            }
        }
    }
    write_report(&mut dir, &report)?;
    dir.write("summary.txt", report.summary().as_bytes())?;
    dir.finish()
}

/// Runs a whole experiment into one artifact directory.
pub fn cmd_repro(exp: Experiment, cfg: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    let bin = binary(cfg)?;
    let mut dir = ArtifactDir::create(out, cfg)?;
    match exp {
        Experiment::S1 | Experiment::S2 => {
            let (train, test) = experiments::synth_sets(cfg)?;
            dir.write_dataset("train", &train, bin)?;
            dir.write_dataset("test", &test, bin)?;
            let mut run = experiments::semi_supervised_on(cfg, train, test)?;
            dir.write("labeled_indices.csv", {
                let mut s = String::from("index\n");
                for i in &run.labeled {
                    s.push_str(&format!("{i}\n"));
                }
                s
            }
            .as_bytes())?;
            write_log(&mut dir, &run.model.log)?;
            let mut bundle = ModelBundle::from_trained(&run.model);
            bundle.header.thresholds = Some(cfg.synth().slope_thresholds());
            bundle.header.training_log = Some(LOG_FILE.into());
            dir.write(BUNDLE_FILE, &bundle.to_bytes()?)?;

            let x = run.model.norm.normalize(&run.test.to_tensor());
            let mut rng = Prng::seed_from_u64(cfg.seed);
            let z = run.model.model.encode(&x, None, &mut rng)?.z;
            let prior = sample_prior(&run.model.prior, z.batch(), &mut rng)?;
            let spec = cfg.classifier_spec(ClassifierKind::Cnn, run.train.n_t);
            let tc = breathae::trainer::TrainConfig { epochs: cfg.cas_epochs, ..cfg.train() };
            let report = EvalReport {
                f1: Some(run.test_f1.clone()),
                cas: Some(cas(&mut run.model, &run.test, cfg.cas_generated, &spec, &tc, cfg.cas_repeats)?),
                relative_error_percent: Some(relative_recon_error(&mut run.model.model, &x, cfg.seed)?.percent),
                latent_norms: Some(latent_norm_distribution(&z, &prior.z)?),
                neighbor_distances: Some(Histogram::new(&latent_neighbor_distances(&z)?, DEFAULT_BINS)),
                ..EvalReport::default()
            };
            let mut extra = format!("train_mf1,{:?}\n", run.train_f1.macro_f1);
            if exp == Experiment::S2 {
                for (name, kind) in [("ff", ClassifierKind::FeedForward), ("cnn", ClassifierKind::Cnn)] {
                    let (_, f1) = experiments::baseline(cfg, kind, &run.train, &run.labeled, &run.test)?;
                    extra.push_str(&format!("baseline_{name}_mf1,{:?}\n", f1.macro_f1));
                }
            }
            write_report(&mut dir, &report)?;
            dir.write("extra_metrics.csv", format!("metric,value\n{extra}").as_bytes())?;
        }
        Experiment::Recon => {
            let corpus = experiments::recon_corpus(cfg)?;
            let study = experiments::recon_study(cfg, &corpus)?;
            dir.write("recon_report.csv", study.to_csv().as_bytes())?;
            dir.write(
                "recon_summary.csv",
                format!(
                    "metric,value\npopbr_heldout_mean_l1,{:?}\nordering_holds,{}\n",
                    study.popbr_mean(),
                    study.ordering_holds()
                )
                .as_bytes(),
            )?;
            dir.write(PLOT_FILE, PLOT_SCRIPT.as_bytes())?;
        }
    }
    dir.finish()
}
