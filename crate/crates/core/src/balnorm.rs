//! Balanced normalization of convolution weights.
//!
//! For a kernel `w: [Cout, Cin, kh, kw]` and per-channel input sums
//! `v: [Cin]`, each output channel `d` gets a shift and a scale:
//!
//! ```text
//! w_dc   = sum_jk w_dcjk
//! b_d    = -sum_c v_c w_dc / (kh * kw * sum_c v_c)
//! P_dc   = sum_jk (w_dcjk + b_d) [w_dcjk + b_d > 0]          (two-pass)
//!        = sum_jk w_dcjk [w_dcjk > 0] + b_d * #{w_dcjk > 0}  (single-pass)
//! s_d    = r / sum_c v_c P_dc
//! w''    = s_d (w_dcjk + b_d)
//! ```
//!
//! With cyclic stride-1 padding every weight meets every input element of
//! its channel once, so the output of `conv(x, w'')` sums to zero per
//! channel and its positive weights contribute exactly `r`. The two
//! variants agree whenever the shift flips no weight's sign.
//!
//! There is no epsilon in the denominators. A vanishing input sum or
//! positive part is reported as an error instead.

use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{read_bnt1, write_bnt1, ConvSpec, Tensor};
use crate::Mode;

/// Threshold below which a scale denominator counts as degenerate.
pub const EPS_DENOM: f64 = 1e-12;
/// Threshold below which the total input sum counts as non-positive.
pub const EPS_INPUT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Positive part measured after the shift.
    TwoPass,
    /// Positive part estimated from the signs before the shift.
    SinglePass,
}

impl Variant {
    fn tag(self) -> u8 {
        match self {
            Variant::TwoPass => 0,
            Variant::SinglePass => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Variant::TwoPass),
            1 => Ok(Variant::SinglePass),
            t => Err(Error::Format(format!("unknown balanced-norm variant tag {t}"))),
        }
    }
}

/// Sizes a balanced layer needs to set its target magnitude `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormGeometry {
    pub batch: usize,
    pub height_in: usize,
    pub width_in: usize,
    pub height_out: usize,
    pub width_out: usize,
    pub stride: usize,
    pub kernel_height: usize,
    pub kernel_width: usize,
    /// `batch * height_out * width_out * stride^2`.
    pub r: f64,
}

impl NormGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec) -> Result<Self> {
        let (batch, height_in, width_in) = match x_shape {
            &[b, _, h, w] => (b, h, w),
            _ => return Err(Error::shape("NormGeometry", format!("input {x_shape:?} is not rank 4"))),
        };
        let (kernel_height, kernel_width) = match w_shape {
            &[_, _, kh, kw] => (kh, kw),
            _ => return Err(Error::shape("NormGeometry", format!("kernel {w_shape:?} is not rank 4"))),
        };
        let [height_out, width_out] = spec.output_dims([height_in, width_in], [kernel_height, kernel_width])?;
        let r = (batch * height_out * width_out * spec.stride * spec.stride) as f64;
        Ok(Self {
            batch,
            height_in,
            width_in,
            height_out,
            width_out,
            stride: spec.stride,
            kernel_height,
            kernel_width,
            r,
        })
    }

    /// Number of input positions per channel, `batch * height_in * width_in`.
    pub fn input_positions(&self) -> f64 {
        (self.batch * self.height_in * self.width_in) as f64
    }
}

/// Number of leading batch instances used for statistics: `ceil(fraction * batch)`.
pub fn stats_instances(batch: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("stat fraction {fraction} is outside (0, 1]")));
    }
    if batch == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    // The small slack keeps products like 0.1 * 30 from rounding up a whole instance.
    let m = (fraction * batch as f64 - 1e-9).ceil() as usize;
    Ok(m.clamp(1, batch))
}

/// Per-channel input sums over the first `ceil(fraction * B)` instances,
/// rescaled to estimate the full-batch sum.
pub fn compute_channel_sums(x: &Tensor, fraction: f64) -> Result<Tensor> {
    let [batch, channels, h, w] = x.dims4("compute_channel_sums")?;
    let m = stats_instances(batch, fraction)?;
    let plane = h * w;
    let mut v = vec![0.0; channels];
    for i in 0..m {
        for (c, vc) in v.iter_mut().enumerate() {
            let start = (i * channels + c) * plane;
            *vc += x.data()[start..start + plane].iter().sum::<f64>();
        }
    }
    if m != batch {
        let factor = batch as f64 / m as f64;
        v.iter_mut().for_each(|vc| *vc *= factor);
    }
    Tensor::new(vec![channels], v)
}

fn kernel_dims(w: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let [cout, cin, kh, kw] = w.dims4("balanced norm")?;
    if v.shape() != [cin] {
        return Err(Error::shape(
            "balanced norm",
            format!("kernel {:?} needs {cin} input sums, got {:?}", w.shape(), v.shape()),
        ));
    }
    Ok((cout, cin, kh * kw))
}

/// Per-(d, c) kernel sums `w_dc`.
fn kernel_sums(w: &Tensor, cout: usize, cin: usize, kk: usize) -> Vec<f64> {
    (0..cout * cin)
        .map(|dc| w.data()[dc * kk..(dc + 1) * kk].iter().sum())
        .collect()
}

/// `b_d = -sum_c v_c w_dc / (kh kw sum_c v_c)`.
pub fn compute_bias(w: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (cout, cin, kk) = kernel_dims(w, v)?;
    let total: f64 = v.data().iter().sum();
    if !(total > EPS_INPUT) {
        return Err(Error::ZeroInputSum { sum: total });
    }
    let sums = kernel_sums(w, cout, cin, kk);
    let b = (0..cout)
        .map(|d| {
            let weighted: f64 = (0..cin).map(|c| v.data()[c] * sums[d * cin + c]).sum();
            -weighted / (kk as f64 * total)
        })
        .collect();
    Tensor::new(vec![cout], b)
}

/// Intermediate quantities of the scale computation, kept for the backward pass.
#[derive(Debug, Clone)]
struct ScaleParts {
    /// `P_dc`, row-major `[Cout, Cin]`.
    positive: Vec<f64>,
    /// Number of weights counted as positive per `(d, c)`.
    counts: Vec<f64>,
    /// Which weights count as positive.
    mask: Vec<bool>,
    /// `sum_c v_c P_dc` per output channel.
    denominators: Vec<f64>,
    /// False where the single-pass variant sees a one-signed slice.
    mixed: Vec<bool>,
}

fn scale_parts(w: &Tensor, b: &Tensor, v: &Tensor, variant: Variant) -> Result<ScaleParts> {
    let (cout, cin, kk) = kernel_dims(w, v)?;
    if b.shape() != [cout] {
        return Err(Error::shape("balanced norm", format!("bias {:?} for {cout} output channels", b.shape())));
    }
    let wd = w.data();
    let mask: Vec<bool> = wd
        .iter()
        .enumerate()
        .map(|(i, &wv)| match variant {
            Variant::TwoPass => wv + b.data()[i / (cin * kk)] > 0.0,
            Variant::SinglePass => wv > 0.0,
        })
        .collect();
    let mut positive = vec![0.0; cout * cin];
    let mut counts = vec![0.0; cout * cin];
    for d in 0..cout {
        let bd = b.data()[d];
        for c in 0..cin {
            let dc = d * cin + c;
            let range = dc * kk..(dc + 1) * kk;
            let n = mask[range.clone()].iter().filter(|&&m| m).count() as f64;
            let p = match variant {
                Variant::TwoPass => range.clone().filter(|&i| mask[i]).map(|i| wd[i] + bd).sum(),
                Variant::SinglePass => range.clone().filter(|&i| mask[i]).map(|i| wd[i]).sum::<f64>() + bd * n,
            };
            positive[dc] = p;
            counts[dc] = n;
        }
    }
    let denominators = (0..cout)
        .map(|d| (0..cin).map(|c| v.data()[c] * positive[d * cin + c]).sum())
        .collect();
    // A one-signed slice makes the single-pass denominator vanish
    // analytically; catch it before rounding decides the sign.
    let mixed = wd
        .chunks(cin * kk)
        .map(|slice| variant == Variant::TwoPass || (slice.iter().any(|&x| x > 0.0) && slice.iter().any(|&x| x < 0.0)))
        .collect();
    Ok(ScaleParts {
        positive,
        counts,
        mask,
        denominators,
        mixed,
    })
}

fn scales_from(parts: &ScaleParts, r: f64) -> Result<Vec<f64>> {
    parts
        .denominators
        .iter()
        .enumerate()
        .map(|(d, &den)| {
            if den > EPS_DENOM && parts.mixed[d] {
                Ok(r / den)
            } else {
                Err(Error::DegenerateWeights {
                    channel: d,
                    denominator: den,
                })
            }
        })
        .collect()
}

/// Exact scale: positive part measured after adding `b`.
pub fn compute_scale_two_pass(w: &Tensor, b: &Tensor, v: &Tensor, geom: &NormGeometry) -> Result<Tensor> {
    let parts = scale_parts(w, b, v, Variant::TwoPass)?;
    Ok(Tensor::from_vec(scales_from(&parts, geom.r)?))
}

/// One-pass scale: assumes adding `b` flips no weight's sign.
pub fn compute_scale_single_pass(w: &Tensor, b: &Tensor, v: &Tensor, geom: &NormGeometry) -> Result<Tensor> {
    let parts = scale_parts(w, b, v, Variant::SinglePass)?;
    Ok(Tensor::from_vec(scales_from(&parts, geom.r)?))
}

/// `w''_dcjk = s_d (w_dcjk + b_d)`.
pub fn apply_shift_scale(w: &Tensor, b: &Tensor, s: &Tensor) -> Result<Tensor> {
    let [cout, ..] = w.dims4("apply_shift_scale")?;
    if b.shape() != [cout] || s.shape() != [cout] {
        return Err(Error::shape(
            "apply_shift_scale",
            format!("bias {:?} and scale {:?} for {cout} channels", b.shape(), s.shape()),
        ));
    }
    let per = w.len() / cout;
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &wv)| {
            let d = i / per;
            s.data()[d] * (wv + b.data()[d])
        })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

struct ChannelSumsOp {
    instances: usize,
    factor: f64,
}

impl CustomOp for ChannelSumsOp {
    fn name(&self) -> &'static str {
        "channel_sums"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let [_, channels, h, w] = x.dims4("channel_sums backward")?;
        let plane = h * w;
        let mut gx = vec![0.0; x.len()];
        for i in 0..self.instances {
            for c in 0..channels {
                let g = grad.data()[c] * self.factor;
                let start = (i * channels + c) * plane;
                gx[start..start + plane].iter_mut().for_each(|v| *v = g);
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), gx)?)])
    }
}

/// Records [`compute_channel_sums`] on the tape.
pub fn channel_sums(tape: &mut Tape, x: Var, fraction: f64) -> Result<Var> {
    let xv = tape.value(x);
    let batch = xv.dims4("channel_sums")?[0];
    let instances = stats_instances(batch, fraction)?;
    let value = compute_channel_sums(xv, fraction)?;
    Ok(tape.custom(
        &[x],
        value,
        Box::new(ChannelSumsOp {
            instances,
            factor: if instances == batch { 1.0 } else { batch as f64 / instances as f64 },
        }),
    ))
}

/// Backward of the shift-and-scale transform with respect to `w` and `v`.
///
/// The sign indicators are held fixed: they only move on a measure-zero set.
struct BalancedWeightsOp {
    parts: ScaleParts,
    b: Vec<f64>,
    s: Vec<f64>,
}

impl CustomOp for BalancedWeightsOp {
    fn name(&self) -> &'static str {
        "balanced_weights"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (w, v) = (inputs[0], inputs[1]);
        let (cout, cin, kk) = kernel_dims(w, v)?;
        let (wd, vd, gd) = (w.data(), v.data(), grad.data());
        let total: f64 = vd.iter().sum();
        let sums = kernel_sums(w, cout, cin, kk);
        let mut gw = vec![0.0; w.len()];
        let mut gv = vec![0.0; cin];
        for d in 0..cout {
            let (bd, sd, den) = (self.b[d], self.s[d], self.parts.denominators[d]);
            let span = d * cin * kk..(d + 1) * cin * kk;
            let g_scale: f64 = span.clone().map(|i| gd[i] * (wd[i] + bd)).sum();
            let g_shift_direct: f64 = sd * span.clone().map(|i| gd[i]).sum::<f64>();
            let g_den = -g_scale * sd / den;
            let n_weighted: f64 = (0..cin).map(|c| vd[c] * self.parts.counts[d * cin + c]).sum();
            let g_shift = g_shift_direct + g_den * n_weighted;
            for c in 0..cin {
                let dc = d * cin + c;
                let shift_per_weight = -vd[c] / (kk as f64 * total);
                for i in dc * kk..(dc + 1) * kk {
                    let m = if self.parts.mask[i] { 1.0 } else { 0.0 };
                    gw[i] = sd * gd[i] + g_den * vd[c] * m + g_shift * shift_per_weight;
                }
                let shift_per_input = -(sums[dc] / kk as f64 + bd) / total;
                gv[c] += g_den * self.parts.positive[dc] + g_shift * shift_per_input;
            }
        }
        Ok(vec![
            Some(Tensor::new(w.shape().to_vec(), gw)?),
            Some(Tensor::new(vec![cin], gv)?),
        ])
    }
}

/// Shift and scale `w` on the tape; returns `(w'', b, s)`.
pub fn balanced_weights(tape: &mut Tape, w: Var, v: Var, r: f64, variant: Variant) -> Result<(Var, Tensor, Tensor)> {
    let (wv, vv) = (tape.value(w), tape.value(v));
    let b = compute_bias(wv, vv)?;
    let parts = scale_parts(wv, &b, vv, variant)?;
    let s = Tensor::from_vec(scales_from(&parts, r)?);
    let value = apply_shift_scale(wv, &b, &s)?;
    tape.record_branches(parts.mask.clone());
    let op = BalancedWeightsOp {
        parts,
        b: b.data().to_vec(),
        s: s.data().to_vec(),
    };
    let out = tape.custom(&[w, v], value, Box::new(op));
    Ok((out, b, s))
}

/// Input statistics of a balanced layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    /// Sums of the most recent training batch.
    pub v: Tensor,
    /// Running per-element mean input per channel.
    pub v_bar_running: Tensor,
    pub momentum: f64,
    pub initialized: bool,
}

impl ChannelStats {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            v: Tensor::zeros(&[channels]),
            v_bar_running: Tensor::zeros(&[channels]),
            momentum,
            initialized: false,
        }
    }

    /// Channel sums implied by the running mean for a batch of `geom`'s shape.
    pub fn reconstruct(&self, geom: &NormGeometry) -> Result<Tensor> {
        if !self.initialized {
            return Err(Error::UninitializedStats);
        }
        Ok(self.v_bar_running.scale(geom.input_positions()))
    }
}

/// Copies `v / (B H W)` on the first call, then keeps an exponential
/// moving average `(1 - m) v_bar + m v / (B H W)`.
pub fn update_running_stats(stats: &mut ChannelStats, v: &Tensor, geom: &NormGeometry) -> Result<()> {
    stats.v_bar_running.expect_same_shape(v, "update_running_stats")?;
    let mean = v.scale(1.0 / geom.input_positions());
    if !mean.all_finite() {
        return Err(Error::NonFinite("balanced norm channel statistics".into()));
    }
    if stats.initialized {
        let m = stats.momentum;
        stats.v_bar_running = stats.v_bar_running.zip_map(&mean, |old, new| (1.0 - m) * old + m * new)?;
    } else {
        stats.v_bar_running = mean;
        stats.initialized = true;
    }
    stats.v = v.clone();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalNormConfig {
    pub variant: Variant,
    /// Fraction of each batch (leading instances) used for `v`.
    pub stat_fraction: f64,
    pub momentum: f64,
    /// Treat `v` as a constant in the backward pass.
    pub stop_grad_v: bool,
}

impl Default for BalNormConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SinglePass,
            stat_fraction: 1.0,
            momentum: 0.1,
            stop_grad_v: false,
        }
    }
}

/// Per-layer state: the latest shift and scale, input statistics and the
/// affine map applied after the convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BalNormState {
    pub b: Tensor,
    pub s: Tensor,
    pub variant: Variant,
    pub stat_fraction: f64,
    pub stop_grad_v: bool,
    pub stats: ChannelStats,
    pub post_affine_gain: Tensor,
    pub post_affine_bias: Tensor,
    /// When set, train mode uses these channel sums as constants instead of
    /// measuring the batch, and leaves the running statistics alone.
    pub frozen_v: Option<Tensor>,
}

impl BalNormState {
    pub fn new(out_channels: usize, in_channels: usize, config: BalNormConfig) -> Self {
        Self {
            b: Tensor::zeros(&[out_channels]),
            s: Tensor::ones(&[out_channels]),
            variant: config.variant,
            stat_fraction: config.stat_fraction,
            stop_grad_v: config.stop_grad_v,
            stats: ChannelStats::new(in_channels, config.momentum),
            post_affine_gain: Tensor::ones(&[out_channels]),
            post_affine_bias: Tensor::zeros(&[out_channels]),
            frozen_v: None,
        }
    }

    /// Normalized weights `w''` for convolving `x`, recorded on `tape`.
    ///
    /// Train mode measures `v` on the live batch (its leading
    /// `stat_fraction`) and folds it into the running statistics. Eval mode
    /// rebuilds `v` from the running per-element mean.
    pub fn transform(&mut self, tape: &mut Tape, w: Var, x: Var, spec: &ConvSpec, mode: Mode) -> Result<Var> {
        let geom = NormGeometry::new(tape.value(x).shape(), tape.value(w).shape(), spec)?;
        let v = match mode {
            Mode::Train if self.frozen_v.is_some() => {
                let sums = self.frozen_v.clone().expect("checked by the guard");
                if sums.shape() != [tape.value(x).shape()[1]] {
                    return Err(Error::shape("balanced norm", format!("frozen sums {:?}", sums.shape())));
                }
                tape.constant(sums)
            }
            Mode::Train => {
                let v = channel_sums(tape, x, self.stat_fraction)?;
                let v = if self.stop_grad_v { tape.detach(v) } else { v };
                let sums = tape.value(v).clone();
                update_running_stats(&mut self.stats, &sums, &geom)?;
                v
            }
            Mode::Eval => {
                let sums = self.stats.reconstruct(&geom)?;
                tape.constant(sums)
            }
        };
        let (out, b, s) = balanced_weights(tape, w, v, geom.r, self.variant)?;
        self.b = b;
        self.s = s;
        Ok(out)
    }

    /// [`BalNormState::transform`] on plain tensors.
    pub fn transform_tensors(&mut self, w: &Tensor, x: &Tensor, spec: &ConvSpec, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (wv, xv) = (tape.constant(w.clone()), tape.constant(x.clone()));
        let out = self.transform(&mut tape, wv, xv, spec, mode)?;
        Ok(tape.value(out).clone())
    }
}

/// Writes `w, b, s, v_bar, gain, bias` as BNT1 records, then the variant
/// tag and the initialized flag as one byte each.
pub fn write_state<W: Write>(out: &mut W, w: &Tensor, state: &BalNormState) -> Result<()> {
    for t in [
        w,
        &state.b,
        &state.s,
        &state.stats.v_bar_running,
        &state.post_affine_gain,
        &state.post_affine_bias,
    ] {
        write_bnt1(out, t)?;
    }
    out.write_all(&[state.variant.tag(), state.stats.initialized as u8])?;
    Ok(())
}

/// Inverse of [`write_state`]. Fraction, momentum and the gradient toggle
/// are not part of the record and come from `config`.
pub fn read_state<R: Read>(input: &mut R, config: BalNormConfig) -> Result<(Tensor, BalNormState)> {
    let w = read_bnt1(input)?;
    let b = read_bnt1(input)?;
    let s = read_bnt1(input)?;
    let v_bar = read_bnt1(input)?;
    let gain = read_bnt1(input)?;
    let bias = read_bnt1(input)?;
    let mut flags = [0u8; 2];
    input.read_exact(&mut flags)?;
    let [cout, cin, ..] = w.dims4("read_state")?;
    for (name, t, n) in [("b", &b, cout), ("s", &s, cout), ("v_bar", &v_bar, cin), ("gain", &gain, cout), ("bias", &bias, cout)] {
        if t.shape() != [n] {
            return Err(Error::Format(format!("{name} has shape {:?}, expected [{n}]", t.shape())));
        }
    }
    let initialized = match flags[1] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad initialized flag {f}"))),
    };
    let state = BalNormState {
        b,
        s,
        variant: Variant::from_tag(flags[0])?,
        stat_fraction: config.stat_fraction,
        stop_grad_v: config.stop_grad_v,
        stats: ChannelStats {
            v: Tensor::zeros(&[cin]),
            v_bar_running: v_bar,
            momentum: config.momentum,
            initialized,
        },
        post_affine_gain: gain,
        post_affine_bias: bias,
        frozen_v: None,
    };
    Ok((w, state))
}

/// He normal draws with `std = sqrt(2 / fan_out)`, `fan_out = Cout kh kw`.
pub fn he_normal_fan_out<R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let fan_out = match shape {
        &[cout, _, kh, kw] => cout * kh * kw,
        &[out, _] => out,
        _ => return Err(Error::shape("he_normal_fan_out", format!("unsupported kernel shape {shape:?}"))),
    };
    let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

/// Resamples every sign of a one-signed slice until it holds both signs.
/// Magnitudes are untouched. Returns whether the slice changed.
pub fn balance_signs<R: Rng>(slice: &mut [f64], rng: &mut R) -> Result<bool> {
    let has_pos = slice.iter().any(|&v| v > 0.0);
    let has_neg = slice.iter().any(|&v| v < 0.0);
    if has_pos && has_neg {
        return Ok(false);
    }
    if slice.iter().filter(|&&v| v != 0.0).count() < 2 {
        return Err(Error::ImpossibleBalance);
    }
    loop {
        for v in slice.iter_mut() {
            let mag = v.abs();
            *v = if rng.random_bool(0.5) { mag } else { -mag };
        }
        if slice.iter().any(|&v| v > 0.0) && slice.iter().any(|&v| v < 0.0) {
            return Ok(true);
        }
    }
}

/// He fan-out normal kernel in which every output channel has both signs.
pub fn balanced_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    balanced_init_with(shape, &mut rng)
}

pub fn balanced_init_with<R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let per_channel: usize = shape.iter().skip(1).product();
    if shape.len() != 4 || per_channel < 2 {
        return Err(Error::ImpossibleBalance);
    }
    let mut w = he_normal_fan_out(shape, rng)?;
    for slice in w.data_mut().chunks_mut(per_channel) {
        balance_signs(slice, rng)?;
    }
    Ok(w)
}
