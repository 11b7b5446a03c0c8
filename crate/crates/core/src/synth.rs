//! Synthetic breathing data: slope-labeled sinusoid datasets and correlated
//! 3-D marker traces.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::preprocess::{segment_periods, BreathingVector, PrincipalAxisSeries, SlopeThresholds};
use crate::Prng;

/// Open slope interval in mm/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeRange {
    pub lo: f64,
    pub hi: f64,
}

impl SlopeRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_samples: usize,
    pub periods_per_sample: usize,
    pub sample_rate: f64,
    /// Peak-to-trough amplitude, mm.
    pub base_amplitude: f64,
    /// Seconds.
    pub base_period: f64,
    /// Slope intervals for `[down, regular, up]`.
    pub slope_classes: [SlopeRange; 3],
    pub period_jitter: f64,
    pub amplitude_jitter: f64,
    pub noise_sigma: f64,
    /// `false` reproduces the slope-only experiment, `true` also jitters
    /// period and amplitude per breathing cycle.
    pub vary_period_amplitude: bool,
    /// Direction of the breathing motion for 3-D marker traces.
    pub marker_direction: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_samples: 1000,
            periods_per_sample: 25,
            sample_rate: 26.0,
            base_amplitude: 5.0,
            base_period: 4.0,
            slope_classes: [
                SlopeRange::new(-0.02, -0.005),
                SlopeRange::new(-0.002, 0.002),
                SlopeRange::new(0.005, 0.02),
            ],
            period_jitter: 0.1,
            amplitude_jitter: 0.1,
            noise_sigma: 0.05,
            vary_period_amplitude: false,
            marker_direction: [0.25, 0.35, 0.9],
        }
    }
}

/// Jitter factors are clipped to this range.
pub const JITTER_CLIP: (f64, f64) = (0.5, 2.0);

impl SynthConfig {
    /// Slope-only sinusoids.
    pub fn s1(seed: u64, num_samples: usize) -> Self {
        Self { seed, num_samples, ..Self::default() }
    }

    /// Sinusoids with per-cycle period and amplitude variability.
    pub fn s2(seed: u64, num_samples: usize) -> Self {
        Self { seed, num_samples, vary_period_amplitude: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_samples == 0 {
            return err("num_samples must be >= 1".into());
        }
        if self.periods_per_sample == 0 {
            return err("periods_per_sample must be >= 1".into());
        }
        if !(self.sample_rate > 0.0) {
            return err("sample_rate must be positive".into());
        }
        if !(self.base_amplitude > 0.0) || !(self.base_period > 0.0) {
            return err("base amplitude and period must be positive".into());
        }
        if !(self.period_jitter >= 0.0) || !(self.amplitude_jitter >= 0.0) || !(self.noise_sigma >= 0.0) {
            return err("jitter and noise must be non-negative".into());
        }
        for r in &self.slope_classes {
            if !(r.lo <= r.hi) {
                return err(format!("empty slope range [{}, {}]", r.lo, r.hi));
            }
        }
        let mut sorted = self.slope_classes;
        sorted.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        if sorted.windows(2).any(|w| w[0].hi >= w[1].lo) {
            return err("slope class ranges overlap".into());
        }
        if self.marker_direction.iter().map(|v| v * v).sum::<f64>() <= 0.0 {
            return err("marker direction must be non-zero".into());
        }
        Ok(())
    }

    /// Slope cut-offs halfway through the guard gaps between class ranges.
    pub fn slope_thresholds(&self) -> SlopeThresholds {
        let [down, regular, up] = self.slope_classes;
        SlopeThresholds {
            lower: 0.5 * (down.hi + regular.lo),
            upper: 0.5 * (regular.hi + up.lo),
        }
    }

    fn jitter(&self, sigma: f64, rng: &mut Prng) -> f64 {
        if !self.vary_period_amplitude || sigma == 0.0 {
            return 1.0;
        }
        let n = Normal::new(0.0, sigma).expect("sigma validated");
        n.sample(rng).exp().clamp(JITTER_CLIP.0, JITTER_CLIP.1)
    }
}

/// Ground truth for one generated breathing cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleTruth {
    pub start: f64,
    pub period: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSignal {
    pub values: Vec<f64>,
    pub sample_rate: f64,
    pub slope: f64,
    pub label: usize,
    pub cycles: Vec<CycleTruth>,
}

/// Random stream for sample `index`, independent of every other sample.
pub fn sample_rng(seed: u64, index: u64) -> Prng {
    let mut rng = Prng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `A * sin^2(pi * (t - start) / T)` inside each cycle plus the linear trend
/// `slope * t` and white noise.
fn render(cycles: &[CycleTruth], slope: f64, cfg: &SynthConfig, rng: &mut Prng) -> Vec<f64> {
    let end = cycles.last().map_or(0.0, |c| c.start + c.period);
    let n = (end * cfg.sample_rate).floor() as usize + 1;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut cycle = 0;
    (0..n)
        .map(|i| {
            let t = i as f64 / cfg.sample_rate;
            while cycle + 1 < cycles.len() && t >= cycles[cycle + 1].start {
                cycle += 1;
            }
            let c = cycles[cycle];
            let phase = ((t - c.start) / c.period).clamp(0.0, 1.0);
            let s = (std::f64::consts::PI * phase).sin();
            let eps = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            c.amplitude * s * s + slope * t + eps
        })
        .collect()
}

/// Per-cycle waveform profile: the inhale occupies `inhale_fraction` of
/// the cycle and `sharpness` raises the raised-cosine branches to a power.
/// `(0.5, 1.0)` is the plain `sin^2` cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveShape {
    pub inhale_fraction: f64,
    pub sharpness: f64,
}

impl Default for WaveShape {
    fn default() -> Self {
        Self { inhale_fraction: 0.5, sharpness: 1.0 }
    }
}

impl WaveShape {
    /// Profile value in `[0, 1]` at cycle phase `phase` in `[0, 1]`.
    pub fn profile(&self, phase: f64) -> f64 {
        let f = self.inhale_fraction;
        let base = if phase < f {
            0.5 * (1.0 - (std::f64::consts::PI * phase / f).cos())
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * (phase - f) / (1.0 - f)).cos())
        };
        base.powf(self.sharpness)
    }
}

/// Trace of `cycles` breathing cycles with a custom waveform, used as a
/// stand-in for one recorded source.
///
/// `shape_jitter` is the per-cycle standard deviation of both shape
/// parameters, relative to `shape`; draws are clamped to a valid shape.
pub fn generate_shaped_trace(
    cfg: &SynthConfig,
    shape: WaveShape,
    shape_jitter: f64,
    index: u64,
    cycles: usize,
) -> Result<SynthSignal> {
    if !(shape.inhale_fraction > 0.0 && shape.inhale_fraction < 1.0) || !(shape.sharpness > 0.0) {
        return Err(Error::Config("inhale_fraction must be in (0, 1) and sharpness positive".into()));
    }
    if !(shape_jitter >= 0.0) {
        return Err(Error::Config("shape_jitter must be non-negative".into()));
    }
    let mut sig = generate_signal(&SynthConfig { noise_sigma: 0.0, ..cfg.clone() }, index, cycles)?;
    let mut rng = sample_rng(cfg.seed ^ 0x5a17e, index);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut jitter = |v: f64| -> f64 {
        if shape_jitter == 0.0 {
            return v;
        }
        let e: f64 = StandardNormal.sample(&mut rng);
        v * (1.0 + shape_jitter * e)
    };
    let shapes: Vec<WaveShape> = sig
        .cycles
        .iter()
        .map(|_| WaveShape {
            inhale_fraction: jitter(shape.inhale_fraction).clamp(0.1, 0.9),
            sharpness: jitter(shape.sharpness).clamp(0.2, 5.0),
        })
        .collect();
    let mut cycle = 0;
    for (i, v) in sig.values.iter_mut().enumerate() {
        let t = i as f64 / cfg.sample_rate;
        while cycle + 1 < sig.cycles.len() && t >= sig.cycles[cycle + 1].start {
            cycle += 1;
        }
        let c = sig.cycles[cycle];
        let phase = ((t - c.start) / c.period).clamp(0.0, 1.0);
        let eps = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = c.amplitude * shapes[cycle].profile(phase) + sig.slope * t + eps;
    }
    Ok(sig)
}

/// One labeled breathing trace with `cycles` complete cycles.
pub fn generate_signal(cfg: &SynthConfig, index: u64, cycles: usize) -> Result<SynthSignal> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg.seed, index);
    let label = rng.random_range(0..3);
    let range = cfg.slope_classes[label];
    let slope = if range.hi > range.lo { rng.random_range(range.lo..range.hi) } else { range.lo };
    let mut start = 0.0;
    let truth: Vec<CycleTruth> = (0..cycles)
        .map(|_| {
            let period = cfg.base_period * cfg.jitter(cfg.period_jitter, &mut rng);
            let amplitude = cfg.base_amplitude * cfg.jitter(cfg.amplitude_jitter, &mut rng);
            let c = CycleTruth { start, period, amplitude };
            start += period;
            c
        })
        .collect();
    let values = render(&truth, slope, cfg, &mut rng);
    Ok(SynthSignal { values, sample_rate: cfg.sample_rate, slope, label, cycles: truth })
}

/// Labeled dataset of compressed synthetic traces.
///
/// Each trace is rendered with two spare cycles, segmented like a recorded
/// trace, and truncated to `periods_per_sample` tuples. The label is the
/// slope class the trend was drawn from.
pub fn generate_sinusoid_dataset(cfg: &SynthConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let n_t = cfg.periods_per_sample;
    let vectors = (0..cfg.num_samples)
        .map(|i| {
            let sig = generate_signal(cfg, i as u64, n_t + 2)?;
            let series = PrincipalAxisSeries::from_values(sig.sample_rate, sig.values);
            let mut periods = segment_periods(&series)?;
            if periods.len() < n_t {
                return Err(Error::Segmentation(format!(
                    "sample {i}: recovered {} periods, need {n_t}",
                    periods.len()
                )));
            }
            periods.truncate(n_t);
            Ok(BreathingVector {
                periods,
                label: Some(sig.label),
                source_id: format!("synth-{}-{i}", cfg.seed),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset::new(n_t, 3, vectors)?.with_provenance(format!(
        "synth seed={} vary_period_amplitude={}",
        cfg.seed, cfg.vary_period_amplitude
    )))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marker3DSeries {
    pub sample_rate: f64,
    pub positions: Vec<[f64; 3]>,
    pub duration: f64,
}

impl Marker3DSeries {
    pub fn new(sample_rate: f64, positions: Vec<[f64; 3]>) -> Self {
        let duration = positions.len() as f64 / sample_rate;
        Self { sample_rate, positions, duration }
    }

    /// CSV with header `t,x,y,z`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,x,y,z")?;
        for (i, p) in self.positions.iter().enumerate() {
            writeln!(w, "{:?},{:?},{:?},{:?}", i as f64 / self.sample_rate, p[0], p[1], p[2])?;
        }
        Ok(())
    }

    /// Reads `t,x,y,z` rows; the sample rate is inferred from the mean time step.
    pub fn read_csv<R: std::io::BufRead>(r: R) -> Result<Self> {
        let mut times = Vec::new();
        let mut positions = Vec::new();
        for (no, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (no == 0 && line.starts_with('t')) {
                continue;
            }
            let v = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Format(format!("line {}: {s:?}: {e}", no + 1))))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != 4 {
                return Err(Error::Format(format!("line {}: expected t,x,y,z", no + 1)));
            }
            times.push(v[0]);
            positions.push([v[1], v[2], v[3]]);
        }
        if times.len() < 2 {
            return Err(Error::InsufficientData("marker series needs at least 2 rows".into()));
        }
        let span = times[times.len() - 1] - times[0];
        if !(span > 0.0) {
            return Err(Error::Format("time column must increase".into()));
        }
        Ok(Self::new((times.len() - 1) as f64 / span, positions))
    }
}

/// 3-D trace of `num_samples` breathing cycles: a shared 1-D signal along
/// `marker_direction` plus independent per-channel noise.
pub fn generate_marker_series(cfg: &SynthConfig) -> Result<Marker3DSeries> {
    cfg.validate()?;
    if cfg.num_samples < 10 {
        return Err(Error::Config("marker series needs at least 10 breathing cycles".into()));
    }
    let quiet = SynthConfig { noise_sigma: 0.0, ..cfg.clone() };
    let sig = generate_signal(&quiet, u64::MAX, cfg.num_samples)?;
    let norm = cfg.marker_direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dir = cfg.marker_direction.map(|v| v / norm);
    let mut rng = sample_rng(cfg.seed, u64::MAX - 1);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut eps = || if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
    let n = (cfg.num_samples as f64 * cfg.base_period * cfg.sample_rate).round() as usize;
    let positions = (0..n)
        .map(|i| {
            let v = sig.values[i.min(sig.values.len() - 1)];
            [v * dir[0] + eps(), v * dir[1] + eps(), v * dir[2] + eps()]
        })
        .collect();
    Ok(Marker3DSeries { sample_rate: cfg.sample_rate, positions, duration: n as f64 / cfg.sample_rate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_slope_ranges_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.slope_classes[1] = SlopeRange::new(-0.01, 0.002);
        assert!(matches!(generate_sinusoid_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_slope_gives_identical_regular_periods() {
        let cfg = SynthConfig {
            num_samples: 4,
            noise_sigma: 0.0,
            slope_classes: [
                SlopeRange::new(-0.02, -0.005),
                SlopeRange::new(0.0, 0.0),
                SlopeRange::new(0.005, 0.02),
            ],
            ..SynthConfig::default()
        };
        let sig = (0..50).map(|i| generate_signal(&cfg, i, 27).unwrap()).find(|s| s.label == 1).unwrap();
        let periods = segment_periods(&PrincipalAxisSeries::from_values(26.0, sig.values)).unwrap();
        for p in &periods[..25] {
            assert_eq!(p.to_array(), periods[0].to_array());
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SynthConfig::s2(11, 20);
        let a = generate_sinusoid_dataset(&cfg).unwrap();
        let b = generate_sinusoid_dataset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn marker_series_length_matches_duration() {
        let cfg = SynthConfig { num_samples: 12, ..SynthConfig::default() };
        let m = generate_marker_series(&cfg).unwrap();
        assert_eq!(m.positions.len(), (m.duration * m.sample_rate).round() as usize);
        assert!(generate_marker_series(&SynthConfig { num_samples: 5, ..cfg }).is_err());
    }

    #[test]
    fn marker_csv_round_trip() {
        let m = generate_marker_series(&SynthConfig { num_samples: 10, ..SynthConfig::default() }).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = Marker3DSeries::read_csv(&buf[..]).unwrap();
        assert_eq!(back.positions, m.positions);
        assert!((back.sample_rate - 26.0).abs() < 1e-9);
    }

    #[test]
    fn default_shape_is_sin_squared() {
        let w = WaveShape::default();
        for k in 0..=20 {
            let p = k as f64 / 20.0;
            let s = (std::f64::consts::PI * p).sin();
            assert!((w.profile(p) - s * s).abs() < 1e-12);
        }
    }

    #[test]
    fn thresholds_sit_in_guard_gaps() {
        let th = SynthConfig::default().slope_thresholds();
        assert!((th.lower + 0.0035).abs() < 1e-12);
        assert!((th.upper - 0.0035).abs() < 1e-12);
    }
}
