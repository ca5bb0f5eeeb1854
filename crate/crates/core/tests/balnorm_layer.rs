use balnorm::balnorm::{
    apply_shift_scale, balance_signs, balanced_init, compute_bias, compute_channel_sums, compute_scale_single_pass,
    compute_scale_two_pass, stats_instances, update_running_stats, BalNormConfig, BalNormState, ChannelStats,
    NormGeometry, Variant,
};
use balnorm::tensor::{conv2d_forward, ConvSpec, PaddingMode};
use balnorm::{Error, Mode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight transcription of the normalization formulas, one output channel
/// at a time, without sharing code with the library.
fn oracle_w2(w: &Tensor, v: &[f64], r: f64, two_pass: bool) -> Vec<f64> {
    let s = w.shape();
    let (cout, cin, kk) = (s[0], s[1], s[2] * s[3]);
    let total: f64 = v.iter().sum();
    let mut out = Vec::with_capacity(w.len());
    for d in 0..cout {
        let slice = |c: usize| &w.data()[(d * cin + c) * kk..(d * cin + c + 1) * kk];
        let mut weighted = 0.0;
        for c in 0..cin {
            weighted += v[c] * slice(c).iter().sum::<f64>();
        }
        let b = -weighted / (kk as f64 * total);
        let mut den = 0.0;
        for c in 0..cin {
            let p: f64 = if two_pass {
                slice(c).iter().map(|x| x + b).filter(|&x| x > 0.0).sum()
            } else {
                let pos = slice(c).iter().filter(|&&x| x > 0.0);
                pos.clone().sum::<f64>() + b * pos.count() as f64
            };
            den += v[c] * p;
        }
        let scale = r / den;
        for c in 0..cin {
            out.extend(slice(c).iter().map(|x| scale * (x + b)));
        }
    }
    out
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn w2_of(w: &Tensor, x: &Tensor, spec: &ConvSpec, variant: Variant) -> balnorm::Result<Tensor> {
    let v = compute_channel_sums(x, 1.0)?;
    let geom = NormGeometry::new(x.shape(), w.shape(), spec)?;
    let b = compute_bias(w, &v)?;
    let s = match variant {
        Variant::TwoPass => compute_scale_two_pass(w, &b, &v, &geom)?,
        Variant::SinglePass => compute_scale_single_pass(w, &b, &v, &geom)?,
    };
    apply_shift_scale(w, &b, &s)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

/// Conv of the positive and negative parts of w'' separately.
fn contributions(x: &Tensor, w2: &Tensor, spec: &ConvSpec) -> (Vec<f64>, Vec<f64>) {
    let pos = conv2d_forward(x, &w2.map(|v| v.max(0.0)), spec).unwrap();
    let neg = conv2d_forward(x, &w2.map(|v| v.min(0.0)), spec).unwrap();
    let cout = w2.shape()[0];
    let per_channel = |t: &Tensor| {
        let plane = t.shape()[2] * t.shape()[3];
        let mut acc = vec![0.0; cout];
        for (i, v) in t.data().iter().enumerate() {
            acc[(i / plane) % cout] += v;
        }
        acc
    };
    (per_channel(&pos), per_channel(&neg))
}

#[test]
fn channel_sums_examples() {
    assert_eq!(compute_channel_sums(&Tensor::ones(&[2, 1, 3, 3]), 1.0).unwrap().data(), &[18.0]);
    let x = Tensor::new(vec![2, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
    assert_eq!(compute_channel_sums(&x, 0.5).unwrap().data(), &[8.0]);
    assert_eq!(stats_instances(128, 0.25).unwrap(), 32);
}

#[test]
fn bias_examples() {
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, -2.0]).unwrap();
    assert_eq!(compute_bias(&w, &Tensor::from_vec(vec![5.0])).unwrap().data(), &[-1.0]);

    let w = Tensor::new(vec![1, 2, 1, 1], vec![3.0, -1.0]).unwrap();
    let b = compute_bias(&w, &Tensor::from_vec(vec![2.0, 4.0])).unwrap().data()[0];
    assert!(close(b, -1.0 / 3.0, 1e-15));

    let w = Tensor::new(vec![1, 2, 1, 1], vec![2.0, -1.0]).unwrap();
    assert_eq!(compute_bias(&w, &Tensor::from_vec(vec![1.0, 2.0])).unwrap().data(), &[0.0]);
}

#[test]
fn two_channel_worked_example() {
    // v = [2, 4], w = [3, -1] with 1x1 kernels, r = 1: b = -1/3, the shifted
    // weights are [8/3, -4/3], the positive part is 2 * 8/3 = 16/3, so
    // s = 3/16 and w'' = [1/2, -1/4].
    let w = Tensor::new(vec![1, 2, 1, 1], vec![3.0, -1.0]).unwrap();
    let v = Tensor::from_vec(vec![2.0, 4.0]);
    let b = compute_bias(&w, &v).unwrap();
    let geom = NormGeometry::new(&[1, 2, 1, 1], w.shape(), &ConvSpec::new(PaddingMode::Cyclic, 1, [0, 0])).unwrap();
    assert_eq!(geom.r, 1.0);
    for s in [
        compute_scale_two_pass(&w, &b, &v, &geom).unwrap(),
        compute_scale_single_pass(&w, &b, &v, &geom).unwrap(),
    ] {
        assert!(close(s.data()[0], 3.0 / 16.0, 1e-15));
        let w2 = apply_shift_scale(&w, &b, &s).unwrap();
        assert!(close(w2.data()[0], 0.5, 1e-15) && close(w2.data()[1], -0.25, 1e-15));
        let x = Tensor::new(vec![1, 2, 1, 1], vec![2.0, 4.0]).unwrap();
        let spec = ConvSpec::new(PaddingMode::Cyclic, 1, [0, 0]);
        assert!(conv2d_forward(&x, &w2, &spec).unwrap().data()[0].abs() < 1e-15);
        let (pos, _) = contributions(&x, &w2, &spec);
        assert!(close(pos[0], 1.0, 1e-15));
    }
    let mut state = BalNormState::new(1, 2, BalNormConfig::default());
    let x = Tensor::new(vec![1, 2, 1, 1], vec![2.0, 4.0]).unwrap();
    let w2 = state.transform_tensors(&w, &x, &ConvSpec::new(PaddingMode::Cyclic, 1, [0, 0]), Mode::Train).unwrap();
    assert!(close(w2.data()[0], 0.5, 1e-15) && close(w2.data()[1], -0.25, 1e-15));
}

#[test]
fn three_by_three_cyclic_contribution_is_nine() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&[1, 1, 3, 3], &mut rng, 0.1, 1.0);
    let w = balanced_init(&[1, 1, 3, 3], 4).unwrap();
    let spec = ConvSpec::new(PaddingMode::Cyclic, 1, [1, 1]);
    assert_eq!(NormGeometry::new(x.shape(), w.shape(), &spec).unwrap().r, 9.0);
    let w2 = w2_of(&w, &x, &spec, Variant::TwoPass).unwrap();
    let (pos, neg) = contributions(&x, &w2, &spec);
    assert!(close(pos[0], 9.0, 1e-12), "{}", pos[0]);
    assert!(close(neg[0], -9.0, 1e-12), "{}", neg[0]);
}

#[test]
fn variants_agree_without_sign_flips() {
    // w = [1, 1, -1] on ones: b = -1/3, the shifted kernel [2/3, 2/3, -4/3]
    // keeps every sign, and both variants give s = 3 / (3 * 4/3) = 3/4.
    let w = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 1.0, -1.0]).unwrap();
    let x = Tensor::ones(&[1, 1, 1, 3]);
    let spec = ConvSpec::new(PaddingMode::Cyclic, 1, [0, 1]);
    let v = compute_channel_sums(&x, 1.0).unwrap();
    let geom = NormGeometry::new(x.shape(), w.shape(), &spec).unwrap();
    let b = compute_bias(&w, &v).unwrap();
    assert!(close(b.data()[0], -1.0 / 3.0, 1e-15));
    let two = compute_scale_two_pass(&w, &b, &v, &geom).unwrap().data()[0];
    let one = compute_scale_single_pass(&w, &b, &v, &geom).unwrap().data()[0];
    assert!(close(two, 0.75, 1e-15) && close(one, 0.75, 1e-15));
}

#[test]
fn variants_differ_when_a_weight_flips() {
    // w = [0.2, 2, -1] on ones: b = -0.4 turns 0.2 negative. Two-pass sees a
    // positive part of 1.6 (s = 3 / 4.8 = 0.625); single-pass counts two
    // positives, 2.2 - 0.8 = 1.4 (s = 3 / 4.2).
    let w = Tensor::new(vec![1, 1, 1, 3], vec![0.2, 2.0, -1.0]).unwrap();
    let x = Tensor::ones(&[1, 1, 1, 3]);
    let spec = ConvSpec::new(PaddingMode::Cyclic, 1, [0, 1]);
    let v = compute_channel_sums(&x, 1.0).unwrap();
    let geom = NormGeometry::new(x.shape(), w.shape(), &spec).unwrap();
    let b = compute_bias(&w, &v).unwrap();
    assert!(close(b.data()[0], -0.4, 1e-15));
    let two = compute_scale_two_pass(&w, &b, &v, &geom).unwrap().data()[0];
    let one = compute_scale_single_pass(&w, &b, &v, &geom).unwrap().data()[0];
    assert!(close(two, 0.625, 1e-14));
    assert!(close(one, 3.0 / 4.2, 1e-14));
    assert!((one - two).abs() / two > 1e-3);
}

#[test]
fn one_signed_channels_are_degenerate() {
    let w = Tensor::new(vec![2, 1, 1, 3], vec![0.5, -1.0, 0.5, 0.3, 0.2, 0.1]).unwrap();
    let x = Tensor::ones(&[1, 1, 1, 3]);
    let spec = ConvSpec::new(PaddingMode::Cyclic, 1, [0, 1]);
    match w2_of(&w, &x, &spec, Variant::SinglePass) {
        Err(Error::DegenerateWeights { channel: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
    let flat = Tensor::new(vec![1, 1, 1, 3], vec![0.4; 3]).unwrap();
    assert!(matches!(
        w2_of(&flat, &x, &spec, Variant::TwoPass),
        Err(Error::DegenerateWeights { channel: 0, .. })
    ));
    assert!(matches!(
        w2_of(&w, &Tensor::zeros(&[1, 1, 1, 3]), &spec, Variant::TwoPass),
        Err(Error::ZeroInputSum { .. })
    ));
}

#[test]
fn running_statistics_follow_the_ema() {
    let spec = ConvSpec::new(PaddingMode::Cyclic, 1, [1, 1]);
    let geom = NormGeometry::new(&[2, 1, 3, 3], &[1, 1, 3, 3], &spec).unwrap();
    let mut stats = ChannelStats::new(1, 0.1);
    assert!(matches!(stats.reconstruct(&geom), Err(Error::UninitializedStats)));
    update_running_stats(&mut stats, &Tensor::from_vec(vec![18.0]), &geom).unwrap();
    assert_eq!(stats.v_bar_running.data(), &[1.0]);
    update_running_stats(&mut stats, &Tensor::from_vec(vec![36.0]), &geom).unwrap();
    assert!(close(stats.v_bar_running.data()[0], 1.1, 1e-15));
    for _ in 0..400 {
        update_running_stats(&mut stats, &Tensor::from_vec(vec![36.0]), &geom).unwrap();
    }
    assert!(close(stats.v_bar_running.data()[0], 2.0, 1e-15));
}

#[test]
fn eval_at_batch_one_matches_training_on_copies() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let one = random_tensor(&[1, 3, 4, 4], &mut rng, 0.0, 1.0);
    let mut copies = Vec::new();
    for _ in 0..128 {
        copies.extend_from_slice(one.data());
    }
    let batch = Tensor::new(vec![128, 3, 4, 4], copies).unwrap();
    let w = balanced_init(&[5, 3, 3, 3], 1).unwrap();
    let spec = ConvSpec::new(PaddingMode::Cyclic, 1, [1, 1]);
    for variant in [Variant::TwoPass, Variant::SinglePass] {
        let mut state = BalNormState::new(5, 3, BalNormConfig { variant, ..Default::default() });
        let trained = state.transform_tensors(&w, &batch, &spec, Mode::Train).unwrap();
        let eval = state.transform_tensors(&w, &one, &spec, Mode::Eval).unwrap();
        for (a, b) in trained.data().iter().zip(eval.data()) {
            assert!(close(*a, *b, 1e-12), "{a} vs {b}");
        }
    }
}

#[test]
fn balanced_init_never_leaves_one_signed_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let w = balanced_init(&[16, 8, 3, 3], rng.random()).unwrap();
        for slice in w.data().chunks(72) {
            assert!(slice.iter().any(|&v| v > 0.0) && slice.iter().any(|&v| v < 0.0));
        }
    }
}

#[test]
fn balance_signs_keeps_magnitudes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut slice = [0.5, 0.3, 0.2];
    assert!(balance_signs(&mut slice, &mut rng).unwrap());
    assert!(slice.iter().any(|&v| v < 0.0) && slice.iter().any(|&v| v > 0.0));
    let mut mags: Vec<f64> = slice.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    assert_eq!(mags, vec![0.2, 0.3, 0.5]);

    let mut mixed = [0.5, -0.3];
    assert!(!balance_signs(&mut mixed, &mut rng).unwrap());
    assert_eq!(mixed, [0.5, -0.3]);
    assert!(matches!(balance_signs(&mut [0.7, 0.0], &mut rng), Err(Error::ImpossibleBalance)));
}

#[derive(Debug, Clone)]
struct Case {
    x: Tensor,
    w: Tensor,
    spec: ConvSpec,
}

fn layer_case() -> impl Strategy<Value = Case> {
    (1usize..4, 1usize..5, 1usize..5, 3usize..8, 3usize..8, 0usize..3, any::<u64>()).prop_filter_map(
        "kernel fits",
        |(b, cin, cout, h, w, half, seed)| {
            let k = 2 * half + 1;
            if k > h || k > w || cin * k * k < 2 {
                return None;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(Case {
                x: random_tensor(&[b, cin, h, w], &mut rng, 0.01, 1.0),
                w: balanced_init(&[cout, cin, k, k], rng.random()).unwrap(),
                spec: ConvSpec::new(PaddingMode::Cyclic, 1, [half, half]),
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn library_matches_formula_oracle(case in layer_case()) {
        let v = compute_channel_sums(&case.x, 1.0).unwrap();
        let r = NormGeometry::new(case.x.shape(), case.w.shape(), &case.spec).unwrap().r;
        for (variant, two) in [(Variant::TwoPass, true), (Variant::SinglePass, false)] {
            let expected = oracle_w2(&case.w, v.data(), r, two);
            match w2_of(&case.w, &case.x, &case.spec, variant) {
                Ok(got) => {
                    for (a, e) in got.data().iter().zip(&expected) {
                        prop_assert!((a - e).abs() <= 1e-10 * e.abs().max(1e-3), "{} vs {}", a, e);
                    }
                }
                // Single-pass can lose its positive part when the shift
                // flips every positive weight.
                Err(Error::DegenerateWeights { .. }) => prop_assert!(!two),
                Err(e) => prop_assert!(false, "{}", e),
            }
        }
    }

    #[test]
    fn output_has_zero_mean_and_contributions_r(case in layer_case()) {
        let w2 = w2_of(&case.w, &case.x, &case.spec, Variant::TwoPass).unwrap();
        let y = conv2d_forward(&case.x, &w2, &case.spec).unwrap();
        let [b, cout, ho, wo] = [y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]];
        let r = (b * ho * wo) as f64;
        let (pos, neg) = contributions(&case.x, &w2, &case.spec);
        for d in 0..cout {
            let total: f64 = (0..b).flat_map(|n| y.data()[(n * cout + d) * ho * wo..(n * cout + d + 1) * ho * wo].iter()).sum();
            prop_assert!(total.abs() / r <= 1e-9, "mean residual {}", total / r);
            prop_assert!(close(pos[d], r, 1e-9), "{} vs {}", pos[d], r);
            prop_assert!(close(neg[d], -r, 1e-9), "{} vs {}", neg[d], -r);
        }
    }

    #[test]
    fn two_pass_is_reparameterization_invariant(case in layer_case(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cout = case.w.shape()[0];
        let per = case.w.len() / cout;
        let alpha: Vec<f64> = (0..cout).map(|_| rng.random_range(0.1..10.0)).collect();
        let shift: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let moved = Tensor::new(
            case.w.shape().to_vec(),
            case.w.data().iter().enumerate().map(|(i, v)| alpha[i / per] * v + shift[i / per]).collect(),
        ).unwrap();
        let base = w2_of(&case.w, &case.x, &case.spec, Variant::TwoPass).unwrap();
        // A shift can make a slice flat; that is the only legitimate failure.
        match w2_of(&moved, &case.x, &case.spec, Variant::TwoPass) {
            Ok(w2) => {
                for (a, b) in base.data().iter().zip(w2.data()) {
                    prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-6), "{} vs {}", a, b);
                }
            }
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn input_scale_rescales_weights_and_keeps_outputs(case in layer_case(), alpha in prop::sample::select(vec![0.5, 2.0, 7.0])) {
        let scaled = case.x.scale(alpha);
        for variant in [Variant::TwoPass, Variant::SinglePass] {
            let (Ok(base), Ok(w2)) = (
                w2_of(&case.w, &case.x, &case.spec, variant),
                w2_of(&case.w, &scaled, &case.spec, variant),
            ) else { continue };
            for (a, b) in base.data().iter().zip(w2.data()) {
                prop_assert!(close(*a, alpha * b, 1e-10));
            }
            let y0 = conv2d_forward(&case.x, &base, &case.spec).unwrap();
            let y1 = conv2d_forward(&scaled, &w2, &case.spec).unwrap();
            let scale = y0.max_abs().max(1e-300);
            for (a, b) in y0.data().iter().zip(y1.data()) {
                prop_assert!((a - b).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn stat_fraction_reads_only_the_leading_instances(b in 2usize..40, fraction in prop::sample::select(vec![0.25, 0.5, 1.0]), spike in 2.0f64..100.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random_tensor(&[b, 2, 3, 3], &mut rng, 0.0, 1.0);
        let m = stats_instances(b, fraction).unwrap();
        prop_assert_eq!(m, ((fraction * b as f64).ceil() as usize).max(1));
        let base = compute_channel_sums(&x, fraction).unwrap();
        let per = 2 * 9;
        for v in &mut x.data_mut()[m * per..] {
            *v *= spike;
        }
        prop_assert_eq!(compute_channel_sums(&x, fraction).unwrap(), base.clone());
        let mut expected = [0.0; 2];
        for (i, v) in x.data()[..m * per].iter().enumerate() {
            expected[i / 9 % 2] += v;
        }
        for c in 0..2 {
            prop_assert!(close(base.data()[c], expected[c] * b as f64 / m as f64, 1e-12));
        }
    }
}
