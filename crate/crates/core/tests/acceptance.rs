//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! The process fails if any criterion fails, except those listed in
//! `KNOWN_FAILURES`, which must fail.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use balnorm::autodiff::GradCheckOptions;
use balnorm::balnorm::{compute_channel_sums, stats_instances, BalNormConfig, BalNormState, Variant};
use balnorm::check::{isolated_layer_gradcheck, random_case, run_checks, tiny_net_gradcheck, transform_parts, CheckOptions, Status};
use balnorm::metrics::{aggregate, Band, MetricsRecord};
use balnorm::model::NormKind;
use balnorm::optim::Schedule;
use balnorm::tensor::{conv2d_forward, ConvSpec, PaddingMode};
use balnorm::train::{train, TrainConfig};
use balnorm::{Mode, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 3: w'' scales as 1/alpha under x -> alpha x, so literal w'' equality
/// cannot hold; only the layer output is invariant.
/// 8: on the synthetic blobs batch norm reaches a lower epoch-3 loss than
/// the balanced net (about 0.045 vs 0.051), though both clear the
/// unnormalized net by a wide margin at epoch 10.
const KNOWN_FAILURES: &[usize] = &[3, 8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0, |m, (&p, &q)| m.max(rel(p, q)))
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let report = run_checks(&CheckOptions::default());
    let elapsed = start.elapsed();
    let names = ["balnorm_zero_mean_output", "balnorm_contribution_equals_r", "balnorm_3x3_cyclic_contribution_9"];
    let mut pass = elapsed < Duration::from_secs(60);
    let mut parts = Vec::new();
    for name in names {
        let r = report.get(name).expect("invariant is in the catalog");
        pass &= r.status == Status::Pass && r.cases >= 1 && r.worst <= 1e-9;
        parts.push(format!("{name} {} worst {:.2e}", r.status, r.worst));
    }
    pass &= report.passed();
    parts.push(format!("catalog passed {} in {:.1}s", report.passed(), elapsed.as_secs_f64()));
    Ok(outcome(pass, parts.join("; ")))
}

fn criterion_2() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let c = random_case(&mut rng, PaddingMode::Cyclic, None);
        let alpha = rng.random_range(0.1..10.0);
        let cout = c.w.shape()[0];
        let shifts: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let per = c.w.len() / cout;
        let moved = Tensor::new(
            c.w.shape().to_vec(),
            c.w.data().iter().enumerate().map(|(j, &v)| alpha * v + shifts[j / per]).collect(),
        )?;
        let (.., base) = transform_parts(&c.w, &c.x, &c.spec, Variant::TwoPass)?;
        let (.., other) = transform_parts(&moved, &c.x, &c.spec, Variant::TwoPass)?;
        worst = worst.max(max_rel(&base, &other));
    }
    Ok(outcome(worst <= 1e-10, format!("100 perturbations, worst w'' relative change {worst:.2e}")))
}

fn criterion_3() -> Result<Outcome> {
    let mut out_worst: f64 = 0.0;
    let mut w_worst: f64 = 0.0;
    for i in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + i);
        let c = random_case(&mut rng, PaddingMode::Cyclic, None);
        for alpha in [0.5, 2.0, 7.0] {
            let xs = c.x.scale(alpha);
            for variant in [Variant::TwoPass, Variant::SinglePass] {
                let (.., w0) = transform_parts(&c.w, &c.x, &c.spec, variant)?;
                let (.., w1) = transform_parts(&c.w, &xs, &c.spec, variant)?;
                w_worst = w_worst.max(max_rel(&w0, &w1));
                let y0 = conv2d_forward(&c.x, &w0, &c.spec)?;
                let y1 = conv2d_forward(&xs, &w1, &c.spec)?;
                let scale = y0.max_abs().max(f64::MIN_POSITIVE);
                out_worst = y0.data().iter().zip(y1.data()).fold(out_worst, |m, (&a, &b)| m.max((a - b).abs() / scale));
            }
        }
    }
    Ok(outcome(
        out_worst <= 1e-10 && w_worst <= 1e-10,
        format!("outputs worst {out_worst:.2e}; w'' worst {w_worst:.2e} (w'' scales as 1/alpha)"),
    ))
}

fn criterion_4() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    let mut tried = 0;
    while cases < 100 {
        tried += 1;
        // Magnitudes in [1, 2] with mixed signs keep the shift small next to
        // every weight; candidates where some weight still flips are skipped.
        let (cout, cin, k) = (rng.random_range(1..=3), rng.random_range(1..=3), 3);
        let n = cout * cin * k * k;
        let w: Vec<f64> = (0..n)
            .map(|j| {
                let m = rng.random_range(1.0..2.0);
                if j % 2 == 0 { m } else { -m }
            })
            .collect();
        let w = Tensor::new(vec![cout, cin, k, k], w)?;
        let x = Tensor::new(vec![2, cin, 5, 5], (0..50 * cin).map(|_| rng.random_range(0.01..1.0)).collect())?;
        let spec = ConvSpec::same(PaddingMode::Cyclic, 1, [k, k]);
        let (_, b, s2, _) = transform_parts(&w, &x, &spec, Variant::TwoPass)?;
        let per = cin * k * k;
        let flips = w
            .data()
            .iter()
            .enumerate()
            .any(|(j, &v)| (v > 0.0) != (v + b.data()[j / per] > 0.0));
        if flips {
            continue;
        }
        let (_, _, s1, _) = transform_parts(&w, &x, &spec, Variant::SinglePass)?;
        worst = worst.max(max_rel(&s1, &s2));
        cases += 1;
    }

    let w = Tensor::new(vec![1, 1, 1, 3], vec![0.2, 2.0, -1.0])?;
    let x = Tensor::ones(&[1, 1, 1, 3]);
    let spec = ConvSpec::new(PaddingMode::Cyclic, 1, [0, 1]);
    let (_, _, two, _) = transform_parts(&w, &x, &spec, Variant::TwoPass)?;
    let (_, _, one, _) = transform_parts(&w, &x, &spec, Variant::SinglePass)?;
    let gap = rel(one.data()[0], two.data()[0]);
    Ok(outcome(
        worst <= 1e-12 && gap > 1e-3,
        format!("{cases} no-flip cases ({tried} tried) worst {worst:.2e}; flip case s gap {gap:.3e}"),
    ))
}

fn criterion_5() -> Result<Outcome> {
    let start = Instant::now();
    let opts = GradCheckOptions::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for variant in [Variant::TwoPass, Variant::SinglePass] {
        for (label, report) in [
            ("layer", isolated_layer_gradcheck(variant, false, 0, &opts)?),
            ("tiny_net", tiny_net_gradcheck(variant, false, 0, &opts)?),
        ] {
            let checked: usize = report.params.iter().map(|p| p.checked).sum();
            pass &= report.passed && report.max_rel_error() <= 1e-5 && checked > 0;
            parts.push(format!("{variant:?} {label} {:.2e} ({checked} coords)", report.max_rel_error()));
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(120);
    parts.push(format!("{:.1}s", elapsed.as_secs_f64()));
    Ok(outcome(pass, parts.join("; ")))
}

fn criterion_6() -> Result<Outcome> {
    let cfg = TrainConfig {
        subset: Some(512),
        test_size: 64,
        epochs: 2,
        ..TrainConfig::default()
    };
    let (tr, te) = cfg.load_data()?;
    let mut net = train(&cfg, &tr, &te, |_| {})?.network;
    let idx: Vec<usize> = (0..64).collect();
    let (x, _) = te.gather(&idx);
    let batched = net.predict(&x)?;
    let classes = batched.shape()[1];
    let mut worst: f64 = 0.0;
    for i in 0..64 {
        let (xi, _) = te.gather(&[i]);
        let single = net.predict(&xi)?;
        for (a, b) in single.data().iter().zip(&batched.data()[i * classes..(i + 1) * classes]) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(outcome(worst <= 1e-9, format!("max |logit(batch 1) - logit(batch 64)| = {worst:.2e}")))
}

fn criterion_7() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..1000 {
        let h = rng.random_range(3..=9);
        let w = rng.random_range(3..=9);
        let k = [1, 3][rng.random_range(0..2)];
        let x = Tensor::new(vec![1, 1, h, w], (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let kernel = Tensor::new(vec![1, 1, k, k], (0..k * k).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let y = conv2d_forward(&x, &kernel, &ConvSpec::same(PaddingMode::Cyclic, 1, [k, k]))?;
        let bound = kernel.l1_norm() * x.l1_norm();
        // Equality cases (one-signed data) may round above the bound by an ulp.
        if y.l1_norm() > bound * (1.0 + 1e-12) {
            violations += 1;
        }
        tightest = tightest.min((bound - y.l1_norm()) / bound);
    }
    Ok(outcome(violations == 0, format!("1000 pairs, {violations} violations, tightest slack {tightest:.2e}")))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    Band::of(&v).p50
}

fn criterion_8() -> Result<Outcome> {
    let start = Instant::now();
    let mut curves = Vec::new();
    for norm in [NormKind::BalNormSinglePass, NormKind::None, NormKind::BatchNorm] {
        let mut runs = Vec::new();
        for seed in 0..5 {
            let cfg = TrainConfig {
                norm,
                seed,
                ..TrainConfig::default()
            };
            let (tr, te) = cfg.load_data()?;
            let metrics = train(&cfg, &tr, &te, |_| {})?.metrics;
            runs.push(metrics);
        }
        let at = |epoch: usize| median(runs.iter().map(|r| r[epoch - 1].train_loss).collect());
        curves.push((at(3), at(10)));
    }
    let [(bal3, bal10), (_, none10), (bn3, _)] = curves[..] else { unreachable!() };
    let elapsed = start.elapsed();
    Ok(outcome(
        bal10 < none10 && bal3 < bn3 && elapsed < Duration::from_secs(1800),
        format!(
            "epoch-10 median loss balnorm {bal10:.4} vs none {none10:.4}; epoch-3 balnorm {bal3:.4} vs batchnorm {bn3:.4}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn criterion_9() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (b, c, h, w) = (8, 3, 4, 4);
    let per = c * h * w;
    let mut data: Vec<f64> = (0..b * per).map(|_| rng.random_range(0.0..1.0)).collect();
    for v in &mut data[..2 * per] {
        *v *= 1000.0;
    }
    let x = Tensor::new(vec![b, c, h, w], data.clone())?;
    let v = compute_channel_sums(&x, 0.25)?;
    let mut expect = [0.0; 3];
    for (i, val) in data[..2 * per].iter().enumerate() {
        expect[(i / (h * w)) % c] += val * 4.0;
    }
    let mut worst = v.data().iter().zip(&expect).fold(0.0, |m: f64, (&a, &e)| m.max(rel(a, e)));

    // Rewriting the other three quarters leaves the statistic untouched.
    let mut other = data;
    for v in &mut other[2 * per..] {
        *v = rng.random_range(0.0..5.0);
    }
    let x2 = Tensor::new(vec![b, c, h, w], other)?;
    let unchanged = compute_channel_sums(&x2, 0.25)? == v;

    // The layer sees the same sums through its training path.
    let mut state = BalNormState::new(
        2,
        c,
        BalNormConfig {
            stat_fraction: 0.25,
            ..Default::default()
        },
    );
    let kernel = balnorm::balnorm::balanced_init(&[2, c, 3, 3], 9)?;
    state.transform_tensors(&kernel, &x, &ConvSpec::same(PaddingMode::Cyclic, 1, [3, 3]), Mode::Train)?;
    worst = worst.max(max_rel(&state.stats.v, &v));
    let quarter = stats_instances(128, 0.25)? == 32;
    Ok(outcome(
        worst <= 1e-12 && unchanged && quarter,
        format!("v vs first-quarter oracle {worst:.2e}; tail-independent {unchanged}; 128 -> 32 instances {quarter}"),
    ))
}

fn criterion_10() -> Result<Outcome> {
    let step = Schedule::step_decay(0.1, vec![150, 225], 0.9, 300);
    let lr = |s: &Schedule, e| s.lr_at(e).map(|p| p.0);
    let step_ok = lr(&step, 1)? == 0.1
        && lr(&step, 149)? == 0.1
        && lr(&step, 150)? == 0.01
        && lr(&step, 224)? == 0.01
        && lr(&step, 225)? == 0.001
        && lr(&step, 300)? == 0.001;
    let cycle = Schedule::one_cycle(30);
    let (l13, m13) = cycle.lr_at(13)?;
    let cycle_ok = l13 == 0.5 && lr(&cycle, 26)? == 0.1 && m13 == 0.85;
    Ok(outcome(
        step_ok && cycle_ok,
        format!("step milestones exact {step_ok}; lr(13)={l13} lr(26)={} momentum(13)={m13}", lr(&cycle, 26)?),
    ))
}

fn record(epoch: usize, v: f64) -> MetricsRecord {
    MetricsRecord {
        epoch,
        train_loss: v,
        train_acc: v,
        test_loss: v,
        test_acc: v,
        lr: v,
        wall_seconds: 0.0,
    }
}

fn criterion_11() -> Result<Outcome> {
    let adversarial: Vec<Vec<f64>> = vec![
        vec![f64::MAX, f64::MAX, -f64::MAX, f64::MAX, -f64::MAX],
        vec![1e308, -1e308, 1e-308, 0.0, 5e-324],
        vec![1.0, 1.0 + f64::EPSILON, 1.0, 1.0 - f64::EPSILON / 2.0, 1.0],
        vec![-0.0, 0.0, -0.0, 0.0, 0.0],
        vec![3.0, 1e300, -1e300, 7.0, 1e-300],
        vec![0.1, 0.2, 0.3, 0.7, 0.9],
    ];
    let mut contained = true;
    for values in &adversarial {
        let b = Band::of(values);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        contained &= [b.p25, b.p50, b.p75].iter().all(|q| q.is_finite() && lo <= *q && *q <= hi);
    }
    let mut constant = true;
    for c in [0.0, -3.25, 1e-300, 123456.789, f64::MAX] {
        let runs: Vec<Vec<MetricsRecord>> = (0..5).map(|_| (1..=3).map(|e| record(e, c)).collect()).collect();
        let agg = aggregate(&runs)?;
        constant &= agg.rows.iter().all(|r| r.bands[..5].iter().all(|b| b.p50 == c && b.p25 == c && b.p75 == c));
    }
    Ok(outcome(
        contained && constant,
        format!("bands within min/max {contained}; constant runs aggregate to the constant {constant}"),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 11] = [
        ("invariant suite", criterion_1),
        ("reparameterization invariance", criterion_2),
        ("input-scale invariance", criterion_3),
        ("single-pass vs two-pass", criterion_4),
        ("gradient checks", criterion_5),
        ("eval consistency", criterion_6),
        ("Young's inequality", criterion_7),
        ("desk-scale convergence", criterion_8),
        ("quarter-batch statistics", criterion_9),
        ("schedules", criterion_10),
        ("aggregation", criterion_11),
    ];
    // Numeric arguments select criteria; anything else is ignored.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let res = run().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let known = KNOWN_FAILURES.contains(&n);
        let note = if known { " [known failure]" } else { "" };
        println!("criterion {n:>2} {name}: {}{note} - {}", if res.pass { "PASS" } else { "FAIL" }, res.detail);
        if res.pass == known {
            unexpected += 1;
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} criteria deviated from the expected outcome");
        ExitCode::FAILURE
    }
}
