//! Compression of breathing traces into period-tuple vectors.
//!
//! Pipeline: principal-axis projection of the 3-D marker trace, detection of
//! end-exhale (EE) points, discretization of every period into four
//! time-position points, sliding-window assembly, baseline-shift labeling and
//! per-channel feature normalization.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::synth::Marker3DSeries;

/// Values per period tuple.
pub const TUPLE_LEN: usize = 6;

/// Class indices used for baseline-shift labels.
pub const CLASS_DOWN: usize = 0;
pub const CLASS_REGULAR: usize = 1;
pub const CLASS_UP: usize = 2;
pub const CLASS_NAMES: [&str; 3] = ["down", "regular", "up"];

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|c| c.eq_ignore_ascii_case(name))
}

/// Moving-average window used before EE detection, seconds.
pub const SMOOTHING_WINDOW_S: f64 = 0.5;
/// Minimum spacing between detected EE points, seconds.
pub const MIN_PERIOD_SEPARATION_S: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalAxisSeries {
    pub sample_rate: f64,
    pub values: Vec<f64>,
    pub variance_retained: f64,
    pub projection_axis: [f64; 3],
    pub channel_means: [f64; 3],
}

impl PrincipalAxisSeries {
    /// Wraps an already one-dimensional trace.
    pub fn from_values(sample_rate: f64, values: Vec<f64>) -> Self {
        Self {
            sample_rate,
            values,
            variance_retained: 1.0,
            projection_axis: [1.0, 0.0, 0.0],
            channel_means: [0.0; 3],
        }
    }

    /// Affine lift of a 1-D trace back into marker coordinates.
    pub fn lift(&self, values: &[f64]) -> Vec<[f64; 3]> {
        let (a, m) = (self.projection_axis, self.channel_means);
        values
            .iter()
            .map(|v| [m[0] + v * a[0], m[1] + v * a[1], m[2] + v * a[2]])
            .collect()
    }
}

/// One breathing period: `(A_EE, Δ_EE, A_MI, A_EI, Δ_EI, A_ME)`.
///
/// MI and ME sit at the temporal midpoints of the inhale and exhale
/// branches, so their time offsets are implied by `d_ee` and `d_ei`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodTuple {
    pub a_ee: f64,
    pub d_ee: f64,
    pub a_mi: f64,
    pub a_ei: f64,
    pub d_ei: f64,
    pub a_me: f64,
}

impl PeriodTuple {
    pub fn to_array(&self) -> [f64; TUPLE_LEN] {
        [self.a_ee, self.d_ee, self.a_mi, self.a_ei, self.d_ei, self.a_me]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            a_ee: v[0],
            d_ee: v[1],
            a_mi: v[2],
            a_ei: v[3],
            d_ei: v[4],
            a_me: v[5],
        }
    }

    pub fn duration(&self) -> f64 {
        self.d_ee + self.d_ei
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreathingVector {
    pub periods: Vec<PeriodTuple>,
    pub label: Option<usize>,
    pub source_id: String,
}

impl BreathingVector {
    pub fn n_t(&self) -> usize {
        self.periods.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.periods.iter().flat_map(|p| p.to_array()).collect()
    }

    pub fn from_flat(values: &[f64], label: Option<usize>, source_id: impl Into<String>) -> Self {
        Self {
            periods: values.chunks_exact(TUPLE_LEN).map(PeriodTuple::from_slice).collect(),
            label,
            source_id: source_id.into(),
        }
    }

    /// Least-squares slope of the EE positions against the cumulative start
    /// time of each period, in mm/s.
    pub fn ee_slope(&self) -> f64 {
        let mut t = 0.0;
        let pts: Vec<(f64, f64)> = self
            .periods
            .iter()
            .map(|p| {
                let pt = (t, p.a_ee);
                t += p.duration();
                pt
            })
            .collect();
        least_squares_slope(&pts)
    }
}

pub fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mt = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Hook for removing acquisition artifacts (machine recalibration jumps).
/// Synthetic traces carry none, so this passes the series through.
pub fn remove_artifacts(series: Marker3DSeries) -> Marker3DSeries {
    series
}

/// Projects a 3-D marker trace onto its principal axis.
///
/// The axis sign is chosen so the projected trace has positive skewness
/// (breathing dwells near exhale, so inhale peaks form the long positive
/// tail); when the skewness is too small to decide, the axis component of
/// largest magnitude is made positive.
pub fn pca_project(series: &Marker3DSeries) -> Result<PrincipalAxisSeries> {
    let pos = &series.positions;
    if pos.len() < 2 {
        return Err(Error::Degenerate("need at least 2 samples".into()));
    }
    if pos.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite marker position".into()));
    }
    let n = pos.len() as f64;
    let mut mean = [0.0; 3];
    for p in pos {
        for c in 0..3 {
            mean[c] += p[c] / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in pos {
        let d = Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    let total = cov.trace();
    if total <= f64::EPSILON * cov.abs().max().max(1.0) {
        return Err(Error::Degenerate("zero-variance input".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let (imax, lmax) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, l)| if l > acc.1 { (i, l) } else { acc });
    let col = eig.eigenvectors.column(imax);
    let norm = col.norm();
    let mut axis = [col[0] / norm, col[1] / norm, col[2] / norm];

    let project = |axis: &[f64; 3]| -> Vec<f64> {
        pos.iter()
            .map(|p| (p[0] - mean[0]) * axis[0] + (p[1] - mean[1]) * axis[1] + (p[2] - mean[2]) * axis[2])
            .collect()
    };
    let mut values = project(&axis);
    let skew = skewness(&values);
    let flip = if skew.abs() > 0.05 {
        skew < 0.0
    } else {
        let dominant = (0..3).max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs())).unwrap_or(0);
        axis[dominant] < 0.0
    };
    if flip {
        axis.iter_mut().for_each(|a| *a = -*a);
        values.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(PrincipalAxisSeries {
        sample_rate: series.sample_rate,
        values,
        variance_retained: (lmax / total).clamp(0.0, 1.0),
        projection_axis: axis,
        channel_means: mean,
    })
}

fn skewness(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

/// Centered moving average; the window shrinks at the edges.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut prefix = Vec::with_capacity(values.len() + 1);
    prefix.push(0.0);
    for v in values {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Sample indices of end-exhale points.
///
/// Local minima of the smoothed trace are accepted greedily from the lowest
/// upward, suppressing any candidate closer than the minimum separation to
/// an accepted one; each survivor is then moved to the raw minimum within
/// half a smoothing window.
pub fn detect_end_exhale(values: &[f64], sample_rate: f64) -> Vec<usize> {
    let n = values.len();
    if n < 3 {
        return Vec::new();
    }
    let window = ((SMOOTHING_WINDOW_S * sample_rate).round() as usize).max(1);
    let sep = (MIN_PERIOD_SEPARATION_S * sample_rate).round() as usize;
    let smooth = moving_average(values, window);
    // first sample of every local minimum (plateaus included)
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            (i == 0 || smooth[i] < smooth[i - 1]) && (i + 1 == n || smooth[i] <= smooth[i + 1])
        })
        .collect();
    candidates.sort_by(|&a, &b| smooth[a].total_cmp(&smooth[b]).then(a.cmp(&b)));
    let mut accepted: Vec<usize> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|&a| a.abs_diff(c) >= sep) {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();
    let half = window / 2;
    let mut refined: Vec<usize> = accepted
        .into_iter()
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            (lo..=hi).fold(lo, |best, j| if values[j] < values[best] { j } else { best })
        })
        .collect();
    refined.dedup();
    refined
}

/// Linear interpolation of a uniformly sampled trace at time `t` seconds.
fn sample_at(values: &[f64], sample_rate: f64, t: f64) -> f64 {
    let x = t * sample_rate;
    let i = x.floor().max(0.0) as usize;
    if i + 1 >= values.len() {
        return values[values.len() - 1];
    }
    let frac = x - i as f64;
    values[i] + frac * (values[i + 1] - values[i])
}

/// Discretizes a trace into period tuples, one per pair of consecutive EE
/// points.
pub fn segment_periods(series: &PrincipalAxisSeries) -> Result<Vec<PeriodTuple>> {
    let fs = series.sample_rate;
    if fs <= 0.0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    let v = &series.values;
    let ee = detect_end_exhale(v, fs);
    if ee.len() < 2 {
        return Err(Error::Segmentation(format!(
            "found {} end-exhale points, need at least 2",
            ee.len()
        )));
    }
    let mut periods = Vec::with_capacity(ee.len() - 1);
    for w in ee.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ei = (a..=b).fold(a, |best, j| if v[j] > v[best] { j } else { best });
        if ei == a || ei == b {
            return Err(Error::Segmentation(format!(
                "no inhale peak strictly inside period [{a}, {b}]"
            )));
        }
        let (t_a, t_ei, t_b) = (a as f64 / fs, ei as f64 / fs, b as f64 / fs);
        let d_ee = t_ei - t_a;
        let d_ei = t_b - t_ei;
        periods.push(PeriodTuple {
            a_ee: v[a],
            d_ee,
            a_mi: sample_at(v, fs, t_a + d_ee / 2.0),
            a_ei: v[ei],
            d_ei,
            a_me: sample_at(v, fs, t_ei + d_ei / 2.0),
        });
    }
    Ok(periods)
}

/// Sliding windows of `n_t` consecutive periods advancing by `stride`.
pub fn assemble_vectors(
    periods: &[PeriodTuple],
    n_t: usize,
    stride: usize,
    source_id: &str,
) -> Result<Vec<BreathingVector>> {
    if stride == 0 || n_t == 0 {
        return Err(Error::Config("n_t and stride must be >= 1".into()));
    }
    if periods.len() < n_t {
        return Err(Error::InsufficientData(format!(
            "{} periods available, {n_t} needed",
            periods.len()
        )));
    }
    Ok((0..=periods.len() - n_t)
        .step_by(stride)
        .map(|start| BreathingVector {
            periods: periods[start..start + n_t].to_vec(),
            label: None,
            source_id: source_id.to_string(),
        })
        .collect())
}

/// Slope cut-offs separating down / regular / up baseline shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeThresholds {
    pub lower: f64,
    pub upper: f64,
}

impl SlopeThresholds {
    /// Empirical lower/upper `percentile` tails of `slopes`.
    ///
    /// With `k = ceil(p * n)`, exactly `k` distinct slopes fall strictly
    /// below `lower` and exactly `k` strictly above `upper`.
    pub fn from_slopes(slopes: &[f64], percentile: f64) -> Result<Self> {
        if slopes.is_empty() {
            return Err(Error::InsufficientData("no slopes to threshold".into()));
        }
        if !(0.0..0.5).contains(&percentile) {
            return Err(Error::Config(format!("percentile {percentile} outside [0, 0.5)")));
        }
        let mut sorted = slopes.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let k = ((percentile * n as f64) - 1e-9).ceil().max(0.0) as usize;
        let k = k.min((n - 1) / 2);
        Ok(Self {
            lower: sorted[k],
            upper: sorted[n - 1 - k],
        })
    }

    pub fn classify(&self, slope: f64) -> usize {
        if slope > self.upper {
            CLASS_UP
        } else if slope < self.lower {
            CLASS_DOWN
        } else {
            CLASS_REGULAR
        }
    }

    /// Labels every vector with these fixed thresholds.
    pub fn apply(&self, vectors: &mut [BreathingVector]) {
        for v in vectors {
            v.label = Some(self.classify(v.ee_slope()));
        }
    }
}

/// Labels `vectors` by their EE slope percentile and returns the thresholds
/// so held-out data can be labeled consistently with [`SlopeThresholds::apply`].
pub fn label_baseline_shift(
    vectors: &mut [BreathingVector],
    percentile: f64,
) -> Result<SlopeThresholds> {
    if vectors.is_empty() {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    let slopes: Vec<f64> = vectors.iter().map(BreathingVector::ee_slope).collect();
    let thresholds = SlopeThresholds::from_slopes(&slopes, percentile)?;
    thresholds.apply(vectors);
    Ok(thresholds)
}

/// Per-channel affine normalization statistics for the six tuple channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; TUPLE_LEN],
    pub std: [f64; TUPLE_LEN],
}

impl NormStats {
    /// Statistics over a `(n, n_t, 6)` tensor.
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.is_empty() || x.last_dim() != TUPLE_LEN {
            return Err(Error::Shape(format!("expected (n, n_t, 6), got {:?}", x.shape())));
        }
        let rows = (x.len() / TUPLE_LEN) as f64;
        let mut mean = [0.0; TUPLE_LEN];
        for row in x.data().chunks_exact(TUPLE_LEN) {
            for c in 0..TUPLE_LEN {
                mean[c] += row[c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows);
        let mut var = [0.0; TUPLE_LEN];
        for row in x.data().chunks_exact(TUPLE_LEN) {
            for c in 0..TUPLE_LEN {
                var[c] += (row[c] - mean[c]).powi(2);
            }
        }
        let mut std = [0.0; TUPLE_LEN];
        for c in 0..TUPLE_LEN {
            std[c] = (var[c] / rows).sqrt();
            if !(std[c] > 1e-12 * mean[c].abs().max(1.0)) {
                return Err(Error::Degenerate(format!("channel {c} has zero variance")));
            }
        }
        Ok(Self { mean, std })
    }

    /// Like [`NormStats::fit`] but leaves zero-variance channels unscaled.
    pub fn fit_lenient(x: &Tensor) -> Result<Self> {
        if x.is_empty() || x.last_dim() != TUPLE_LEN {
            return Err(Error::Shape(format!("expected (n, n_t, 6), got {:?}", x.shape())));
        }
        let rows = (x.len() / TUPLE_LEN) as f64;
        let mut mean = [0.0; TUPLE_LEN];
        let mut sq = [0.0; TUPLE_LEN];
        for row in x.data().chunks_exact(TUPLE_LEN) {
            for c in 0..TUPLE_LEN {
                mean[c] += row[c] / rows;
            }
        }
        for row in x.data().chunks_exact(TUPLE_LEN) {
            for c in 0..TUPLE_LEN {
                sq[c] += (row[c] - mean[c]).powi(2) / rows;
            }
        }
        let std = sq.map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; TUPLE_LEN],
            std: [1.0; TUPLE_LEN],
        }
    }

    pub fn normalize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(TUPLE_LEN) {
            for c in 0..TUPLE_LEN {
                row[c] = (row[c] - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(TUPLE_LEN) {
            for c in 0..TUPLE_LEN {
                row[c] = row[c] * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

/// Fits statistics on `x` and returns the normalized tensor with them.
pub fn normalize_features(x: &Tensor) -> Result<(Tensor, NormStats)> {
    let stats = NormStats::fit(x)?;
    Ok((stats.normalize(x), stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tuple(a_ee: f64, d: f64) -> PeriodTuple {
        PeriodTuple { a_ee, d_ee: d, a_mi: a_ee + 0.5, a_ei: a_ee + 1.0, d_ei: d, a_me: a_ee + 0.5 }
    }

    #[test]
    fn assemble_counts() {
        let periods: Vec<PeriodTuple> = (0..100).map(|i| tuple(i as f64, 2.0)).collect();
        assert_eq!(assemble_vectors(&periods, 25, 25, "s").unwrap().len(), 4);
        assert_eq!(assemble_vectors(&periods, 25, 1, "s").unwrap().len(), 76);
        assert!(matches!(
            assemble_vectors(&periods[..99], 100, 1, "s"),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn constant_signals_are_regular() {
        let mut vs: Vec<BreathingVector> = (0..10)
            .map(|i| BreathingVector { periods: vec![tuple(1.0, 2.0); 25], label: None, source_id: i.to_string() })
            .collect();
        label_baseline_shift(&mut vs, 0.075).unwrap();
        assert!(vs.iter().all(|v| v.label == Some(CLASS_REGULAR)));
        assert!(label_baseline_shift(&mut [], 0.075).is_err());
    }

    #[test]
    fn percentile_tails_have_exact_counts() {
        // slopes in a scrambled but known order: vector i has slope proportional to (i*7919 mod 1000)
        let mut vs: Vec<BreathingVector> = (0..1000)
            .map(|i| {
                let m = ((i * 7919) % 1000) as f64 * 1e-4 - 0.05;
                let periods = (0..25).map(|j| tuple(m * 4.0 * j as f64, 2.0)).collect();
                BreathingVector { periods, label: None, source_id: i.to_string() }
            })
            .collect();
        let th = label_baseline_shift(&mut vs, 0.075).unwrap();
        let count = |c| vs.iter().filter(|v| v.label == Some(c)).count();
        assert_eq!(count(CLASS_UP), 75);
        assert_eq!(count(CLASS_DOWN), 75);
        assert_eq!(count(CLASS_REGULAR), 850);

        // stored thresholds label another set without recomputing percentiles
        let mut held: Vec<BreathingVector> = (0..4)
            .map(|i| BreathingVector { periods: (0..25).map(|j| tuple(0.5 * j as f64, 2.0)).collect(), label: None, source_id: i.to_string() })
            .collect();
        th.apply(&mut held);
        assert!(held.iter().all(|v| v.label == Some(CLASS_UP)));
    }

    #[test]
    fn normalization_round_trip_and_identity() {
        let x = Tensor::from_fn(&[5, 4, 6], |i| ((i * 37) % 11) as f64 * 0.7 + (i % 6) as f64);
        let (n, stats) = normalize_features(&x).unwrap();
        assert!(stats.denormalize(&n).max_abs_diff(&x) < 1e-9);
        let (again, _) = normalize_features(&n).unwrap();
        assert!(again.max_abs_diff(&n) < 1e-9);
    }

    #[test]
    fn constant_channel_is_rejected() {
        let x = Tensor::from_fn(&[5, 4, 6], |i| if i % 6 == 2 { 3.0 } else { i as f64 });
        assert!(matches!(NormStats::fit(&x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ee_slope_of_linear_trend() {
        let v = BreathingVector {
            periods: (0..10).map(|j| tuple(0.01 * 4.0 * j as f64, 2.0)).collect(),
            label: None,
            source_id: String::new(),
        };
        assert!((v.ee_slope() - 0.01).abs() < 1e-12);
    }
}
