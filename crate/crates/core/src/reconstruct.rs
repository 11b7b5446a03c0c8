//! Turning breathing vectors back into uniformly sampled traces: linear
//! interpolation through the tuple knots, refined by a window-based
//! feed-forward network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Adam, AdamConfig, Graph, LayerSpec, Mode, ParameterSet, Sequential, Tensor};
use crate::error::{Error, Result};
use crate::objectives::squared_error;
use crate::preprocess::{detect_end_exhale, segment_periods, BreathingVector, PeriodTuple, PrincipalAxisSeries};
use crate::Prng;

pub const WINDOW_IN: usize = 120;
pub const WINDOW_OUT: usize = 100;

/// Knot times (relative to the period start) and values of one period,
/// ending at the next period's EE.
fn knots(p: &PeriodTuple, next_ee: f64) -> [(f64, f64); 5] {
    [
        (0.0, p.a_ee),
        (p.d_ee / 2.0, p.a_mi),
        (p.d_ee, p.a_ei),
        (p.d_ee + p.d_ei / 2.0, p.a_me),
        (p.d_ee + p.d_ei, next_ee),
    ]
}

/// Piecewise-linear trace through EE, MI, EI, ME and the next EE of every
/// period, sampled at `sample_rate` from the first EE. The last period
/// closes on its own EE amplitude.
pub fn linear_interpolate(x: &BreathingVector, sample_rate: f64) -> Result<Vec<f64>> {
    interpolate_periods(&x.periods, sample_rate)
}

pub fn interpolate_periods(periods: &[PeriodTuple], sample_rate: f64) -> Result<Vec<f64>> {
    if !(sample_rate > 0.0) {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    if periods.is_empty() {
        return Err(Error::InsufficientData("no periods to interpolate".into()));
    }
    if let Some(p) = periods.iter().find(|p| !(p.d_ee > 0.0) || !(p.d_ei > 0.0)) {
        return Err(Error::Config(format!("non-positive period durations {} / {}", p.d_ee, p.d_ei)));
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(4 * periods.len() + 1);
    let mut start = 0.0;
    for (j, p) in periods.iter().enumerate() {
        let next = periods.get(j + 1).map_or(p.a_ee, |q| q.a_ee);
        let k = knots(p, next);
        pts.extend(k[..4].iter().map(|&(t, v)| (start + t, v)));
        start += p.duration();
        if j + 1 == periods.len() {
            pts.push((start, k[4].1));
        }
    }
    // tolerate float round-off on the final grid point
    let n = (start * sample_rate + 1e-9).floor() as usize + 1;
    let mut seg = 0;
    Ok((0..n)
        .map(|i| {
            let t = i as f64 / sample_rate;
            while seg + 2 < pts.len() && t > pts[seg + 1].0 {
                seg += 1;
            }
            let (t0, v0) = pts[seg];
            let (t1, v1) = pts[seg + 1];
            let u = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            v0 + u * (v1 - v0)
        })
        .collect())
}

/// Real trace and its tuple interpolation, both starting at the first
/// detected EE and of equal length.
pub fn interpolation_pair(series: &PrincipalAxisSeries) -> Result<(Vec<f64>, Vec<f64>)> {
    let periods = segment_periods(series)?;
    let ee = detect_end_exhale(&series.values, series.sample_rate);
    let interp = interpolate_periods(&periods, series.sample_rate)?;
    let start = ee[0];
    let len = interp.len().min(series.values.len() - start);
    Ok((series.values[start..start + len].to_vec(), interp[..len].to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPair {
    pub source_id: String,
    /// Normalized interpolated window.
    pub input: Vec<f64>,
    /// Normalized first `WINDOW_OUT` real values.
    pub target: Vec<f64>,
    pub norm_min: f64,
    pub norm_max: f64,
}

impl WindowPair {
    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        denorm(values, self.norm_min, self.norm_max)
    }
}

fn denorm(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    values.iter().map(|v| v * (hi - lo) + lo).collect()
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

/// Smallest accepted window range, mm.
pub const MIN_WINDOW_RANGE: f64 = 1e-9;

/// Windows of `WINDOW_IN` samples advancing by `stride`, each scaled to
/// `[0, 1]` by the min and max of its interpolated input.
pub fn make_training_windows(real: &[f64], interp: &[f64], stride: usize, source_id: &str) -> Result<Vec<WindowPair>> {
    if real.len() != interp.len() {
        return Err(Error::Shape(format!("real has {} samples, interpolation {}", real.len(), interp.len())));
    }
    if real.len() < WINDOW_IN {
        return Err(Error::InsufficientData(format!("series of {} samples is shorter than {WINDOW_IN}", real.len())));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    (0..=real.len() - WINDOW_IN)
        .step_by(stride)
        .map(|s| {
            let inp = &interp[s..s + WINDOW_IN];
            let (lo, hi) = min_max(inp);
            if !(hi - lo > MIN_WINDOW_RANGE) {
                return Err(Error::Degenerate(format!("window at {s} has no range")));
            }
            let scale = |v: &f64| (v - lo) / (hi - lo);
            Ok(WindowPair {
                source_id: source_id.to_string(),
                input: inp.iter().map(scale).collect(),
                target: real[s..s + WINDOW_OUT].iter().map(scale).collect(),
                norm_min: lo,
                norm_max: hi,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    /// One source only.
    Patbr,
    /// A random subset of a multi-source window pool.
    Popbr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconNetSpec {
    pub hidden: Vec<usize>,
    pub mode: ReconMode,
}

impl ReconNetSpec {
    pub fn new(mode: ReconMode) -> Self {
        Self { hidden: vec![256; 3], mode }
    }
}

#[derive(Debug, Clone)]
pub struct ReconNet {
    pub spec: ReconNetSpec,
    pub params: ParameterSet,
    net: Sequential,
}

impl ReconNet {
    pub fn build(spec: &ReconNetSpec, rng: &mut Prng) -> Result<Self> {
        let mut s = Vec::new();
        for &h in &spec.hidden {
            s.push(LayerSpec::Dense { units: h });
            s.push(LayerSpec::Activation { activation: Activation::LeakyRelu(0.1) });
        }
        s.push(LayerSpec::Dense { units: WINDOW_OUT });
        let mut params = ParameterSet::new();
        let net = Sequential::build(&s, &[WINDOW_IN], &mut params, "recon", rng)?;
        Ok(Self { spec: spec.clone(), params, net })
    }

    pub fn forward(&mut self, g: &mut Graph, x: crate::diffcore::Var, rng: &mut Prng) -> Result<crate::diffcore::Var> {
        self.net.forward(g, &mut self.params, x, Mode::Infer, rng)
    }

    /// Maps normalized `(n, 120)` windows to `(n, 100)`.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut rng = Prng::seed_from_u64(0);
        let mut out = Vec::with_capacity(x.batch() * WINDOW_OUT);
        for idx in crate::models::chunks(x.batch()) {
            let mut g = Graph::new();
            let xv = g.input(x.select_rows(&idx));
            let y = self.forward(&mut g, xv, &mut rng)?;
            out.extend_from_slice(g.value(y).data());
        }
        Tensor::new(vec![x.batch(), WINDOW_OUT], out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub seed: u64,
    /// Share of the pool used for population training.
    pub popbr_fraction: f64,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 256, lr: 1e-4, decay: 1e-6, seed: 0, popbr_fraction: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRecon {
    pub net: ReconNet,
    /// Mean training SE per epoch, normalized units.
    pub losses: Vec<f64>,
    pub windows_used: usize,
}

fn stack(pairs: &[&WindowPair], f: impl Fn(&WindowPair) -> &[f64], width: usize) -> Result<Tensor> {
    Tensor::new(vec![pairs.len(), width], pairs.iter().flat_map(|p| f(p).iter().copied()).collect())
}

/// Squared-error regression of real windows on interpolated ones.
pub fn train_recon_net(pairs: &[WindowPair], spec: &ReconNetSpec, cfg: &ReconTrainConfig) -> Result<TrainedRecon> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("epochs, batch_size and lr must be positive".into()));
    }
    let mut rng = Prng::seed_from_u64(cfg.seed);
    let chosen: Vec<&WindowPair> = match spec.mode {
        ReconMode::Patbr => {
            let first = &pairs[0].source_id;
            if let Some(other) = pairs.iter().find(|p| &p.source_id != first) {
                return Err(Error::Config(format!(
                    "single-source training got sources {first:?} and {:?}",
                    other.source_id
                )));
            }
            pairs.iter().collect()
        }
        ReconMode::Popbr => {
            if !(cfg.popbr_fraction > 0.0 && cfg.popbr_fraction <= 1.0) {
                return Err(Error::Config("popbr_fraction must be in (0, 1]".into()));
            }
            let mut all: Vec<&WindowPair> = pairs.iter().collect();
            all.shuffle(&mut rng);
            let k = ((cfg.popbr_fraction * pairs.len() as f64).round() as usize).max(1);
            all.truncate(k);
            all
        }
    };
    let x = stack(&chosen, |p| &p.input, WINDOW_IN)?;
    let y = stack(&chosen, |p| &p.target, WINDOW_OUT)?;
    let mut net = ReconNet::build(spec, &mut rng)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, decay: cfg.decay, ..AdamConfig::default() }, &net.params);
    let mut order: Vec<usize> = (0..chosen.len()).collect();
    let bs = cfg.batch_size.min(chosen.len());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut nb) = (0.0, 0.0);
        for idx in order.chunks(bs) {
            let mut g = Graph::new();
            let xv = g.input(x.select_rows(idx));
            let yv = g.input(y.select_rows(idx));
            let out = net.forward(&mut g, xv, &mut rng)?;
            let loss = squared_error(&mut g, yv, out)?;
            total += g.scalar(loss);
            nb += 1.0;
            let grads = g.backward(loss)?;
            net.params.absorb(&grads)?;
            opt.step(&mut net.params, epoch)?;
        }
        let mean = total / nb;
        if !mean.is_finite() {
            return Err(Error::Diverged(format!("reconstruction loss {mean} at epoch {epoch}")));
        }
        losses.push(mean);
    }
    Ok(TrainedRecon { net, losses, windows_used: chosen.len() })
}

/// Refines an interpolated trace window by window.
///
/// Windows of 120 samples start every 100 samples; each is normalized by
/// its own range, mapped to 100 outputs, and denormalized. The last window
/// is padded by repeating the final sample and its output truncated.
pub fn apply_recon(net: &mut ReconNet, interp: &[f64]) -> Result<Vec<f64>> {
    let n = interp.len();
    if n < WINDOW_IN {
        return Err(Error::InsufficientData(format!("series of {n} samples is shorter than {WINDOW_IN}")));
    }
    let starts: Vec<usize> = (0..n).step_by(WINDOW_OUT).collect();
    let mut ranges = Vec::with_capacity(starts.len());
    let mut data = Vec::with_capacity(starts.len() * WINDOW_IN);
    for &s in &starts {
        let w: Vec<f64> = (s..s + WINDOW_IN).map(|i| interp[i.min(n - 1)]).collect();
        let (lo, hi) = min_max(&w);
        let (lo, hi) = if hi - lo > MIN_WINDOW_RANGE { (lo, hi) } else { (lo, lo + 1.0) };
        data.extend(w.iter().map(|v| (v - lo) / (hi - lo)));
        ranges.push((lo, hi));
    }
    let out = net.predict(&Tensor::new(vec![starts.len(), WINDOW_IN], data)?)?;
    let mut series = Vec::with_capacity(n);
    for (k, (&s, &(lo, hi))) in starts.iter().zip(&ranges).enumerate() {
        let take = WINDOW_OUT.min(n - s);
        series.extend(denorm(&out.row(k)[..take], lo, hi));
    }
    Ok(series)
}

/// Mean absolute difference between two equally long traces.
pub fn mean_l1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("traces of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn period(a_ee: f64, d_ee: f64, a_mi: f64, a_ei: f64, d_ei: f64, a_me: f64) -> PeriodTuple {
        PeriodTuple { a_ee, d_ee, a_mi, a_ei, d_ei, a_me }
    }

    #[test]
    fn knots_are_hit_exactly() {
        // 1 Hz grid, knots at integer seconds
        let p = period(0.0, 2.0, 1.0, 3.0, 4.0, 2.0);
        let s = interpolate_periods(&[p], 1.0).unwrap();
        assert_eq!(s, vec![0.0, 1.0, 3.0, 2.5, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn quarter_point_is_midpoint_of_first_segment() {
        let p = period(0.0, 4.0, 1.0, 2.0, 4.0, 1.0);
        let s = interpolate_periods(&[p], 1.0).unwrap();
        assert_eq!(s[1], 0.5);
    }

    #[test]
    fn duration_matches_periods() {
        let ps = vec![period(0.0, 1.3, 1.0, 2.0, 2.1, 1.0), period(0.1, 1.5, 1.0, 2.0, 2.4, 1.0)];
        let s = interpolate_periods(&ps, 26.0).unwrap();
        let total: f64 = ps.iter().map(PeriodTuple::duration).sum();
        assert!(((s.len() - 1) as f64 / 26.0 - total).abs() <= 1.0 / 26.0);
        assert!(interpolate_periods(&[period(0.0, 0.0, 1.0, 2.0, 1.0, 1.0)], 26.0).is_err());
    }

    #[test]
    fn window_counts_and_round_trip() {
        let real: Vec<f64> = (0..320).map(|i| (i as f64 * 0.1).sin()).collect();
        let w = make_training_windows(&real, &real, 100, "a").unwrap();
        assert_eq!(w.len(), 3);
        let back = w[1].denormalize(&w[1].input);
        for (a, b) in back.iter().zip(&real[100..220]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(make_training_windows(&[1.0; 200], &[1.0; 200], 100, "a").is_err());
        assert!(make_training_windows(&real[..100], &real[..100], 100, "a").is_err());
    }

    #[test]
    fn patbr_rejects_mixed_sources() {
        let real: Vec<f64> = (0..240).map(|i| (i as f64 * 0.1).sin()).collect();
        let mut w = make_training_windows(&real, &real, 120, "a").unwrap();
        w.extend(make_training_windows(&real, &real, 120, "b").unwrap());
        let cfg = ReconTrainConfig { epochs: 1, ..ReconTrainConfig::default() };
        assert!(train_recon_net(&w, &ReconNetSpec::new(ReconMode::Patbr), &cfg).is_err());
    }

    #[test]
    fn apply_preserves_length() {
        let mut rng = Prng::seed_from_u64(1);
        let mut net = ReconNet::build(&ReconNetSpec { hidden: vec![8], mode: ReconMode::Patbr }, &mut rng).unwrap();
        let s: Vec<f64> = (0..437).map(|i| (i as f64 * 0.05).sin()).collect();
        assert_eq!(apply_recon(&mut net, &s).unwrap().len(), 437);
    }
}
