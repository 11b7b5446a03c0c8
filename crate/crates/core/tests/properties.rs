use breathae::dataset::LabeledDataset;
use breathae::diffcore::{Graph, Tensor};
use breathae::eval::{ks_statistic, macro_f1};
use breathae::objectives::kl_gaussian;
use breathae::preprocess::{
    assemble_vectors, pca_project, segment_periods, BreathingVector, NormStats, PeriodTuple, PrincipalAxisSeries,
    SlopeThresholds,
};
use breathae::reconstruct::{interpolate_periods, make_training_windows, WINDOW_IN, WINDOW_OUT};
use breathae::synth::{generate_signal, Marker3DSeries, SynthConfig};
use breathae::trainer::stratified_labels;
use proptest::prelude::*;

/// Direct evaluation of the causal dilated convolution sum.
fn conv_oracle(x: &[f64], shape: [usize; 3], k: &[f64], taps: usize, filters: usize, b: &[f64], d: usize) -> Vec<f64> {
    let [batch, steps, chans] = shape;
    let mut out = vec![0.0; batch * steps * filters];
    for n in 0..batch {
        for j in 0..steps {
            for f in 0..filters {
                let mut s = b[f];
                for t in 0..taps {
                    if t * d > j {
                        continue;
                    }
                    for h in 0..chans {
                        s += k[(t * chans + h) * filters + f] * x[(n * steps + j - t * d) * chans + h];
                    }
                }
                out[(n * steps + j) * filters + f] = s;
            }
        }
    }
    out
}

fn period() -> impl Strategy<Value = PeriodTuple> {
    (-5.0..5.0f64, 0.5..3.0f64, 0.0..5.0f64, 0.5..3.0f64).prop_map(|(a_ee, d_ee, rise, d_ei)| PeriodTuple {
        a_ee,
        d_ee,
        a_mi: a_ee + 0.5 * rise,
        a_ei: a_ee + rise,
        d_ei,
        a_me: a_ee + 0.4 * rise,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv1d_matches_direct_sum(
        batch in 1usize..3, steps in 1usize..12, chans in 1usize..4, filters in 1usize..4,
        taps in 1usize..5, d in 1usize..5, seed in 0u64..1000,
    ) {
        let val = |i: usize| (((i as u64 + 1) * (seed + 7919)) % 101) as f64 / 50.0 - 1.0;
        let x: Vec<f64> = (0..batch * steps * chans).map(val).collect();
        let k: Vec<f64> = (0..taps * chans * filters).map(|i| val(i + 3000)).collect();
        let b: Vec<f64> = (0..filters).map(|i| val(i + 9000)).collect();
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(vec![batch, steps, chans], x.clone()).unwrap());
        let kv = g.input(Tensor::new(vec![taps, chans, filters], k.clone()).unwrap());
        let bv = g.input(Tensor::new(vec![filters], b.clone()).unwrap());
        let y = g.conv1d(xv, kv, bv, d).unwrap();
        let want = conv_oracle(&x, [batch, steps, chans], &k, taps, filters, &b, d);
        for (a, e) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_matches_triple_loop(n in 1usize..5, i in 1usize..6, o in 1usize..6, seed in 0u64..1000) {
        let val = |k: usize| (((k as u64 + 3) * (seed + 31)) % 97) as f64 / 40.0 - 1.2;
        let x: Vec<f64> = (0..n * i).map(val).collect();
        let w: Vec<f64> = (0..i * o).map(|k| val(k + 500)).collect();
        let b: Vec<f64> = (0..o).map(|k| val(k + 900)).collect();
        let mut g = Graph::new();
        let xv = g.input(Tensor::new(vec![n, i], x.clone()).unwrap());
        let wv = g.input(Tensor::new(vec![i, o], w.clone()).unwrap());
        let bv = g.input(Tensor::new(vec![o], b.clone()).unwrap());
        let y = g.dense(xv, wv, bv).unwrap();
        for r in 0..n {
            for c in 0..o {
                let mut s = b[c];
                for k in 0..i {
                    s += x[r * i + k] * w[k * o + c];
                }
                prop_assert!((g.value(y).data()[r * o + c] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_is_nonnegative(v in prop::collection::vec((-3.0..3.0f64, 0.05..4.0f64), 1..8)) {
        let (mu, sigma): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        prop_assert!(kl_gaussian(&mu, &sigma).unwrap() >= 0.0);
    }

    #[test]
    fn macro_f1_ignores_sample_order(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60), rot in 0usize..60) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let r = rot % pairs.len();
        let mut p2 = p.clone();
        let mut l2 = l.clone();
        p2.rotate_left(r);
        l2.rotate_left(r);
        p2.reverse();
        l2.reverse();
        let a = macro_f1(&p, &l, 3).unwrap();
        let b = macro_f1(&p2, &l2, 3).unwrap();
        prop_assert_eq!(a.macro_f1, b.macro_f1);
        prop_assert_eq!(a.confusion, b.confusion);
    }

    #[test]
    fn normalization_round_trip(rows in prop::collection::vec(prop::collection::vec(-50.0..50.0f64, 6), 2..20)) {
        let n = rows.len();
        let mut data: Vec<f64> = rows.concat();
        // Guarantee non-zero variance in every channel.
        for c in 0..6 {
            data[c] += 1.0;
        }
        let x = Tensor::new(vec![n, 1, 6], data).unwrap();
        let stats = NormStats::fit(&x).unwrap();
        let back = stats.denormalize(&stats.normalize(&x));
        prop_assert!(back.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn windows_denormalize_to_real_values(len in 120usize..400, stride in 1usize..150, phase in 0.0..6.0f64) {
        let real: Vec<f64> = (0..len).map(|i| (i as f64 * 0.2 + phase).sin() * 3.0 + 0.01 * i as f64).collect();
        let interp: Vec<f64> = real.iter().map(|v| v + 0.1).collect();
        let w = make_training_windows(&real, &interp, stride, "s").unwrap();
        prop_assert_eq!(w.len(), (len - WINDOW_IN) / stride + 1);
        for (k, pair) in w.iter().enumerate() {
            let s = k * stride;
            let back = pair.denormalize(&pair.target);
            prop_assert_eq!(back.len(), WINDOW_OUT);
            for (a, b) in back.iter().zip(&real[s..s + WINDOW_OUT]) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!(pair.input.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        }
    }

    #[test]
    fn dataset_text_and_binary_round_trip(
        vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 12 * 3),
        labels in prop::collection::vec(prop::option::of(0usize..3), 3),
    ) {
        let vectors = (0..3)
            .map(|i| BreathingVector::from_flat(&vals[i * 12..(i + 1) * 12], labels[i], format!("src-{i}")))
            .collect();
        let ds = LabeledDataset::new(2, 3, vectors).unwrap();
        let mut text = Vec::new();
        ds.write_text(&mut text).unwrap();
        prop_assert_eq!(&LabeledDataset::read_text(text.as_slice()).unwrap().vectors, &ds.vectors);
        let mut bin = Vec::new();
        ds.write_binary(&mut bin).unwrap();
        prop_assert_eq!(&LabeledDataset::read_binary(bin.as_slice()).unwrap().vectors, &ds.vectors);
    }

    #[test]
    fn interpolation_passes_through_every_knot(periods in prop::collection::vec(period(), 1..6)) {
        let fs = 1000.0;
        let y = interpolate_periods(&periods, fs).unwrap();
        let mut t0 = 0.0;
        let at = |t: f64| y[(t * fs).round() as usize];
        for p in &periods {
            // Knots only coincide with samples up to the grid; compare at the
            // nearest sample with the local slope bound.
            let tol = 2.0 * 10.0 / (0.25 * fs);
            prop_assert!((at(t0) - p.a_ee).abs() < tol);
            prop_assert!((at(t0 + p.d_ee) - p.a_ei).abs() < tol);
            t0 += p.duration();
        }
    }

    #[test]
    fn assemble_count(p in 1usize..60, n_t in 1usize..30, stride in 1usize..10) {
        let periods = vec![PeriodTuple { a_ee: 0.0, d_ee: 1.0, a_mi: 0.5, a_ei: 1.0, d_ei: 1.0, a_me: 0.5 }; p];
        match assemble_vectors(&periods, n_t, stride, "s") {
            Ok(v) => prop_assert_eq!(v.len(), (p - n_t) / stride + 1),
            Err(_) => prop_assert!(p < n_t),
        }
    }

    #[test]
    fn percentile_tails_count(n in 20usize..300, pct in 0.01..0.3f64, seed in 0u64..100) {
        let slopes: Vec<f64> = (0..n).map(|i| ((i as u64 * 7_368_787 + seed * 13) % 1_000_003) as f64 + i as f64 * 1e-7).collect();
        let th = SlopeThresholds::from_slopes(&slopes, pct).unwrap();
        let k = ((pct * n as f64) - 1e-9).ceil() as usize;
        let k = k.min((n - 1) / 2);
        prop_assert_eq!(slopes.iter().filter(|&&s| s < th.lower).count(), k);
        prop_assert_eq!(slopes.iter().filter(|&&s| s > th.upper).count(), k);
    }

    #[test]
    fn ks_is_a_bounded_symmetric_distance(a in prop::collection::vec(-5.0..5.0f64, 1..40), b in prop::collection::vec(-5.0..5.0f64, 1..40)) {
        let d = ks_statistic(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, ks_statistic(&b, &a).unwrap());
        prop_assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn synthesis_is_deterministic(seed in 0u64..1000, index in 0u64..1000) {
        let cfg = SynthConfig::s2(seed, 10);
        let a = generate_signal(&cfg, index, 6).unwrap();
        let b = generate_signal(&cfg, index, 6).unwrap();
        prop_assert_eq!(a.values, b.values);
        prop_assert_eq!(a.label, b.label);
    }

    #[test]
    fn stratified_labels_are_balanced(n in 30usize..200, count in 3usize..30, seed in 0u64..50) {
        let vectors = (0..n)
            .map(|i| BreathingVector::from_flat(&[i as f64; 6], Some(i % 3), "s"))
            .collect();
        let ds = LabeledDataset::new(1, 3, vectors).unwrap();
        let idx = stratified_labels(&ds, count, seed).unwrap();
        prop_assert_eq!(idx.len(), count);
        let mut dedup = idx.clone();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), count);
        let per: Vec<usize> = (0..3).map(|c| idx.iter().filter(|&&i| i % 3 == c).count()).collect();
        prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
    }

    #[test]
    fn pca_is_rotation_invariant(angle in 0.0..std::f64::consts::TAU, tilt in -1.2..1.2f64) {
        // Rank-1 breathing motion along a direction rotated in 3-D.
        let dir = [angle.cos() * tilt.cos(), angle.sin() * tilt.cos(), tilt.sin()];
        let values: Vec<f64> = (0..416).map(|i| {
            let s = (std::f64::consts::PI * i as f64 / 104.0).sin();
            5.0 * s.powi(4)
        }).collect();
        let series = Marker3DSeries::new(26.0, values.iter().map(|v| [v * dir[0], v * dir[1], v * dir[2]]).collect());
        let p = pca_project(&series).unwrap();
        prop_assert!((p.variance_retained - 1.0).abs() < 1e-9);
        let axis_norm: f64 = p.projection_axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!((axis_norm - 1.0).abs() < 1e-9);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        for (a, v) in p.values.iter().zip(&values) {
            prop_assert!((a - (v - mean)).abs() < 1e-9);
        }
    }
}

#[test]
fn isotropic_noise_retains_a_third_of_the_variance() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = breathae::Prng::seed_from_u64(3);
    let pos: Vec<[f64; 3]> = (0..10_000)
        .map(|_| {
            let mut s = || -> f64 { StandardNormal.sample(&mut rng) };
            [s(), s(), s()]
        })
        .collect();
    let p = pca_project(&Marker3DSeries::new(26.0, pos)).unwrap();
    assert!((p.variance_retained - 1.0 / 3.0).abs() < 0.05, "{}", p.variance_retained);
}

#[test]
fn default_marker_series_keeps_most_variance() {
    let m = breathae::synth::generate_marker_series(&SynthConfig::s1(4, 60)).unwrap();
    assert!(pca_project(&m).unwrap().variance_retained >= 0.95);
}

#[test]
fn segmentation_matches_generator_ground_truth() {
    let cfg = SynthConfig { noise_sigma: 0.0, ..SynthConfig::s2(8, 1) };
    for index in 0..10 {
        let sig = generate_signal(&cfg, index, 30).unwrap();
        let step = 1.0 / cfg.sample_rate;
        let series = PrincipalAxisSeries::from_values(cfg.sample_rate, sig.values.clone());
        let periods = segment_periods(&series).unwrap();
        let ee = breathae::preprocess::detect_end_exhale(&sig.values, cfg.sample_rate);
        let t0 = ee[0] as f64 * step;
        let first = sig.cycles.iter().position(|c| (c.start - t0).abs() <= step).expect("first EE at a cycle start");
        assert!(periods.len() >= 25);
        let mut t = t0;
        for (p, truth) in periods.iter().zip(&sig.cycles[first..]) {
            assert!((t - truth.start).abs() <= step, "cycle start {t} vs {}", truth.start);
            t += p.duration();
        }
    }
}

#[test]
fn noiseless_labels_agree_with_slope_rule() {
    let cfg = SynthConfig { noise_sigma: 0.0, ..SynthConfig::s2(12, 600) };
    let ds = breathae::synth::generate_sinusoid_dataset(&cfg).unwrap();
    let th = cfg.slope_thresholds();
    let mut worst = 0.0f64;
    for v in &ds.vectors {
        let label = v.label.unwrap();
        let range = cfg.slope_classes[label];
        let s = v.ee_slope();
        worst = worst.max(range.lo - s).max(s - range.hi);
        assert_eq!(th.classify(s), label);
    }
    // Sampling the minima on the 26 Hz grid moves the fitted slope by far
    // less than the guard gap between classes.
    assert!(worst < 1e-4, "slope outside its class interval by {worst}");
}

#[test]
fn generated_classes_are_balanced() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let ds = breathae::synth::generate_sinusoid_dataset(&SynthConfig::s1(5, 3000)).unwrap();
    let mut counts = [0f64; 3];
    for l in ds.require_labels().unwrap() {
        counts[l] += 1.0;
    }
    let e = ds.len() as f64 / 3.0;
    let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
    let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "counts {counts:?} chi2 {chi2}");
}
