//! Small convolutional classifiers with a pluggable normalization per
//! convolution, plus the softmax cross-entropy loss.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::balnorm::{self, BalNormConfig, BalNormState, Variant};
use crate::baselines::{self, BatchNormState};
use crate::error::{Error, Result};
use crate::tensor::{read_bnt1, write_bnt1, ConvSpec, PaddingMode, Tensor};
use crate::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    BalNormSinglePass,
    BalNormTwoPass,
    BatchNorm,
    None,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::BalNormSinglePass => "balnorm",
            NormKind::BalNormTwoPass => "balnorm-two-pass",
            NormKind::BatchNorm => "batchnorm",
            NormKind::None => "none",
        }
    }

    pub fn balnorm_variant(self) -> Option<Variant> {
        match self {
            NormKind::BalNormSinglePass => Some(Variant::SinglePass),
            NormKind::BalNormTwoPass => Some(Variant::TwoPass),
            _ => None,
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balnorm" | "balnorm-single-pass" | "balnorm_single" => Ok(NormKind::BalNormSinglePass),
            "balnorm-two-pass" | "balnorm_two" => Ok(NormKind::BalNormTwoPass),
            "batchnorm" => Ok(NormKind::BatchNorm),
            "none" => Ok(NormKind::None),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: PaddingMode,
        norm: NormKind,
    },
    Relu,
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                norm,
            } => write!(
                f,
                "conv in={in_channels} out={out_channels} kernel={kernel} stride={stride} padding={} norm={norm}",
                padding.as_str()
            ),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::GlobalAvgPool => f.write_str("global_avg_pool"),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => write!(f, "linear in={in_features} out={out_features}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let kind = words.next().unwrap_or_default();
        let fields: Vec<(&str, &str)> = words.filter_map(|w| w.split_once('=')).collect();
        let get = |key: &str| {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Format(format!("layer {s:?} lacks {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Format(format!("layer {s:?}: bad {key}")))
        };
        match kind {
            "conv" => Ok(LayerSpec::Conv {
                in_channels: num("in")?,
                out_channels: num("out")?,
                kernel: num("kernel")?,
                stride: num("stride")?,
                padding: get("padding")?.parse()?,
                norm: get("norm")?.parse()?,
            }),
            "relu" => Ok(LayerSpec::Relu),
            "global_avg_pool" => Ok(LayerSpec::GlobalAvgPool),
            "linear" => Ok(LayerSpec::Linear {
                in_features: num("in")?,
                out_features: num("out")?,
            }),
            other => Err(Error::Format(format!("unknown layer kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvNorm {
    Balanced(BalNormState),
    Batch(BatchNormState),
    /// Unnormalized: convolution plus a per-channel bias.
    Plain { bias: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub spec: ConvSpec,
    pub norm: ConvNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    GlobalAvgPool,
    Linear(LinearLayer),
}

/// What a parameter tensor is, for weight-decay scoping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or linear weights.
    Weight,
    /// Per-channel gain/bias after a convolution, or a linear bias.
    Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    input: [usize; 3],
    num_classes: usize,
    balnorm: BalNormConfig,
}

impl Network {
    /// Validates that `specs` compose on `input = [C, H, W]` inputs and
    /// initializes parameters from `seed`.
    pub fn new(specs: Vec<LayerSpec>, input: [usize; 3], balnorm: BalNormConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = Some(input);
        let mut features = None;
        let mut layers = Vec::with_capacity(specs.len());
        let mut seen_conv = false;
        for (i, spec) in specs.iter().enumerate() {
            let fail = |msg: String| Error::Config(format!("layer {i} ({spec}): {msg}"));
            let layer = match *spec {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    norm,
                } => {
                    let [c, h, w] = shape.ok_or_else(|| fail("convolution after pooling".into()))?;
                    if c != in_channels {
                        return Err(fail(format!("expects {in_channels} channels, receives {c}")));
                    }
                    if norm.balnorm_variant().is_some() && seen_conv && !matches!(specs.get(i.wrapping_sub(1)), Some(LayerSpec::Relu)) {
                        return Err(fail("balanced layers after the first must follow a ReLU".into()));
                    }
                    seen_conv = true;
                    let conv_spec = ConvSpec::same(padding, stride, [kernel, kernel]);
                    let [ho, wo] = conv_spec.output_dims([h, w], [kernel, kernel]).map_err(|e| fail(e.to_string()))?;
                    shape = Some([out_channels, ho, wo]);
                    let kshape = [out_channels, in_channels, kernel, kernel];
                    let (weight, norm) = match norm.balnorm_variant() {
                        Some(variant) => (
                            balnorm::balanced_init_with(&kshape, &mut rng)?,
                            ConvNorm::Balanced(BalNormState::new(
                                out_channels,
                                in_channels,
                                BalNormConfig { variant, ..balnorm },
                            )),
                        ),
                        None => (
                            balnorm::he_normal_fan_out(&kshape, &mut rng)?,
                            match norm {
                                NormKind::BatchNorm => ConvNorm::Batch(BatchNormState::new(out_channels)),
                                _ => ConvNorm::Plain {
                                    bias: Tensor::zeros(&[out_channels]),
                                },
                            },
                        ),
                    };
                    Layer::Conv(ConvLayer {
                        weight,
                        spec: conv_spec,
                        norm,
                    })
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::GlobalAvgPool => {
                    let [c, _, _] = shape.take().ok_or_else(|| fail("pooling twice".into()))?;
                    features = Some(c);
                    Layer::GlobalAvgPool
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    if features != Some(in_features) {
                        return Err(fail(format!("expects {in_features} features, receives {features:?}")));
                    }
                    features = Some(out_features);
                    let bound = 1.0 / (in_features as f64).sqrt();
                    let weight = Tensor::new(
                        vec![out_features, in_features],
                        (0..out_features * in_features)
                            .map(|_| rng.random_range(-bound..bound))
                            .collect(),
                    )?;
                    Layer::Linear(LinearLayer {
                        weight,
                        bias: Tensor::zeros(&[out_features]),
                    })
                }
            };
            layers.push(layer);
        }
        let num_classes = match (shape, features) {
            (None, Some(k)) => k,
            _ => return Err(Error::Config("network must end in pooling followed by linear layers".into())),
        };
        Ok(Self {
            specs,
            layers,
            input,
            num_classes,
            balnorm,
        })
    }

    /// conv3x3(C->16) relu conv3x3(16->32, stride 2) relu conv3x3(32->32)
    /// relu global-avg-pool linear(32->K), with `norm` on every convolution.
    pub fn tiny_net(
        input: [usize; 3],
        num_classes: usize,
        norm: NormKind,
        padding: PaddingMode,
        balnorm: BalNormConfig,
        seed: u64,
    ) -> Result<Self> {
        let conv = |i, o, stride| LayerSpec::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            padding,
            norm,
        };
        let specs = vec![
            conv(input[0], 16, 1),
            LayerSpec::Relu,
            conv(16, 32, 2),
            LayerSpec::Relu,
            conv(32, 32, 1),
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 32,
                out_features: num_classes,
            },
        ];
        Self::new(specs, input, balnorm, seed)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.weight);
                    match &c.norm {
                        ConvNorm::Balanced(s) => out.extend([&s.post_affine_gain, &s.post_affine_bias]),
                        ConvNorm::Batch(s) => out.extend([&s.gamma, &s.beta]),
                        ConvNorm::Plain { bias } => out.push(bias),
                    }
                }
                Layer::Linear(l) => out.extend([&l.weight, &l.bias]),
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    match &mut c.norm {
                        ConvNorm::Balanced(s) => out.extend([&mut s.post_affine_gain, &mut s.post_affine_bias]),
                        ConvNorm::Batch(s) => out.extend([&mut s.gamma, &mut s.beta]),
                        ConvNorm::Plain { bias } => out.push(bias),
                    }
                }
                Layer::Linear(l) => out.extend([&mut l.weight, &mut l.bias]),
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
        }
        out
    }

    /// Names and kinds, aligned with [`Network::parameters`].
    pub fn parameter_info(&self) -> Vec<(String, ParamKind)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("layer{i}.conv.weight"), ParamKind::Weight));
                    let names: &[&str] = match c.norm {
                        ConvNorm::Balanced(_) => &["gain", "bias"],
                        ConvNorm::Batch(_) => &["gamma", "beta"],
                        ConvNorm::Plain { .. } => &["bias"],
                    };
                    out.extend(names.iter().map(|n| (format!("layer{i}.conv.{n}"), ParamKind::Affine)));
                }
                Layer::Linear(_) => {
                    out.push((format!("layer{i}.linear.weight"), ParamKind::Weight));
                    out.push((format!("layer{i}.linear.bias"), ParamKind::Affine));
                }
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
        }
        out
    }

    /// Records the forward pass on `tape`. `params` are tape handles for
    /// [`Network::parameters`], in order. Train mode updates normalization
    /// statistics.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, params: &[Var], mode: Mode) -> Result<Var> {
        let expected = self.parameters().len();
        if params.len() != expected {
            return Err(Error::Config(format!("forward got {} parameters, network has {expected}", params.len())));
        }
        let [c, h, w] = self.input;
        let xs = tape.value(x).shape();
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::shape("Network::forward", format!("input {xs:?}, network expects [B, {c}, {h}, {w}]")));
        }
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter count checked above");
        let mut act = x;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let name = || format!("{i} ({})", layer_kind(i, &self.specs));
            act = match layer {
                Layer::Conv(conv) => {
                    let w = next();
                    let mut run = |tape: &mut Tape, next: &mut dyn FnMut() -> Var| -> Result<Var> {
                        match &mut conv.norm {
                            ConvNorm::Balanced(state) => {
                                let normalized = state.transform(tape, w, act, &conv.spec, mode)?;
                                let y = tape.conv2d(act, normalized, conv.spec)?;
                                let (g, b) = (next(), next());
                                tape.channel_affine(y, Some(g), Some(b))
                            }
                            ConvNorm::Batch(state) => {
                                let y = tape.conv2d(act, w, conv.spec)?;
                                let (g, b) = (next(), next());
                                state.forward(tape, y, g, b, mode)
                            }
                            ConvNorm::Plain { .. } => {
                                let y = tape.conv2d(act, w, conv.spec)?;
                                let y = baselines::identity_forward(y);
                                let b = next();
                                tape.channel_affine(y, None, Some(b))
                            }
                        }
                    };
                    run(tape, &mut next).map_err(|e| e.in_layer(name()))?
                }
                Layer::Relu => tape.relu(act),
                Layer::GlobalAvgPool => tape.global_avg_pool(act).map_err(|e| e.in_layer(name()))?,
                Layer::Linear(_) => {
                    let (w, b) = (next(), next());
                    tape.linear(act, w, b).map_err(|e| e.in_layer(name()))?
                }
            };
        }
        Ok(act)
    }

    /// Places the parameters on `tape` as leaves and runs [`Network::forward`].
    pub fn forward_leaves(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, Vec<Var>)> {
        let params: Vec<Var> = self.parameters().into_iter().map(|t| tape.leaf(t.clone())).collect();
        let logits = self.forward(tape, x, &params, mode)?;
        Ok((logits, params))
    }

    /// Eval-mode logits for a batch, without gradients.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.parameters().into_iter().map(|t| tape.constant(t.clone())).collect();
        let xv = tape.constant(x.clone());
        let logits = self.forward(&mut tape, xv, &params, Mode::Eval)?;
        Ok(tape.value(logits).clone())
    }

    /// Writes parameters and normalization state as BNT1 records to `path`
    /// and the layer manifest to `path` + `.manifest`.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = BufWriter::new(File::create(path)?);
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => match &c.norm {
                    ConvNorm::Balanced(s) => balnorm::write_state(&mut out, &c.weight, s)?,
                    ConvNorm::Batch(s) => {
                        write_bnt1(&mut out, &c.weight)?;
                        baselines::write_state(&mut out, s)?;
                    }
                    ConvNorm::Plain { bias } => {
                        write_bnt1(&mut out, &c.weight)?;
                        write_bnt1(&mut out, bias)?;
                    }
                },
                Layer::Linear(l) => {
                    write_bnt1(&mut out, &l.weight)?;
                    write_bnt1(&mut out, &l.bias)?;
                }
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
        }
        out.flush()?;
        fs::write(manifest_path(path), self.manifest())?;
        Ok(())
    }

    fn manifest(&self) -> String {
        let [c, h, w] = self.input;
        let mut m = format!(
            "format=balnorm-checkpoint-1\ninput={c},{h},{w}\nclasses={}\nstat_fraction={}\nmomentum={}\nstop_grad_v={}\nlayers={}\n",
            self.num_classes,
            self.balnorm.stat_fraction,
            self.balnorm.momentum,
            self.balnorm.stop_grad_v,
            self.specs.len()
        );
        for (i, spec) in self.specs.iter().enumerate() {
            m.push_str(&format!("layer.{i}={spec}\n"));
        }
        m
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(manifest_path(path))?;
        let entries: Vec<(&str, &str)> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |key: &str| {
            entries
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Format(format!("manifest lacks {key}")))
        };
        let bad = |key: &str| Error::Format(format!("manifest has a malformed {key}"));
        if get("format")? != "balnorm-checkpoint-1" {
            return Err(Error::Format("unknown checkpoint format".into()));
        }
        let dims: Vec<usize> = get("input")?
            .split(',')
            .map(|d| d.parse().map_err(|_| bad("input")))
            .collect::<Result<_>>()?;
        let input: [usize; 3] = dims.try_into().map_err(|_| bad("input"))?;
        let balnorm = BalNormConfig {
            variant: Variant::SinglePass,
            stat_fraction: get("stat_fraction")?.parse().map_err(|_| bad("stat_fraction"))?,
            momentum: get("momentum")?.parse().map_err(|_| bad("momentum"))?,
            stop_grad_v: get("stop_grad_v")?.parse().map_err(|_| bad("stop_grad_v"))?,
        };
        let count: usize = get("layers")?.parse().map_err(|_| bad("layers"))?;
        let specs = (0..count)
            .map(|i| get(&format!("layer.{i}"))?.parse())
            .collect::<Result<Vec<LayerSpec>>>()?;
        let mut net = Network::new(specs, input, balnorm, 0)?;
        let mut input_file = BufReader::new(File::open(path)?);
        for layer in &mut net.layers {
            match layer {
                Layer::Conv(c) => {
                    let expected = c.weight.shape().to_vec();
                    match &mut c.norm {
                        ConvNorm::Balanced(s) => {
                            let cfg = BalNormConfig { variant: s.variant, ..balnorm };
                            let (w, state) = balnorm::read_state(&mut input_file, cfg)?;
                            c.weight = w;
                            *s = state;
                        }
                        ConvNorm::Batch(s) => {
                            c.weight = read_bnt1(&mut input_file)?;
                            *s = baselines::read_state(&mut input_file)?;
                        }
                        ConvNorm::Plain { bias } => {
                            c.weight = read_bnt1(&mut input_file)?;
                            *bias = read_bnt1(&mut input_file)?;
                        }
                    }
                    if c.weight.shape() != expected {
                        return Err(Error::Format(format!("kernel {:?} does not match manifest {expected:?}", c.weight.shape())));
                    }
                }
                Layer::Linear(l) => {
                    l.weight = read_bnt1(&mut input_file)?;
                    l.bias = read_bnt1(&mut input_file)?;
                }
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
        }
        Ok(net)
    }
}

fn layer_kind(i: usize, specs: &[LayerSpec]) -> String {
    match &specs[i] {
        LayerSpec::Conv { norm, .. } => format!("conv/{norm}"),
        other => other.to_string(),
    }
}

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// `[B, K]` one-hot rows.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Config(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Row-wise softmax with max subtraction. Also returns each row's maximum
/// and the log of its shifted normalizer.
fn softmax_rows(logits: &Tensor) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let (b, k) = match logits.shape() {
        &[b, k] => (b, k),
        s => return Err(Error::shape("cross_entropy", format!("logits {s:?} are not [B, K]"))),
    };
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut probs = vec![0.0; b * k];
    let mut log_norm = vec![(0.0, 0.0); b];
    for i in 0..b {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        log_norm[i] = (max, z.ln());
        for (p, &l) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (l - max).exp() / z;
        }
    }
    Ok((Tensor::new(vec![b, k], probs)?, log_norm))
}

fn check_targets(logits: &Tensor, targets: &Tensor) -> Result<()> {
    logits.expect_same_shape(targets, "cross_entropy")?;
    let k = targets.shape()[1];
    for (i, row) in targets.data().chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&t| t < 0.0) {
            return Err(Error::Config(format!("target row {i} is not a distribution (sums to {s})")));
        }
    }
    Ok(())
}

/// Mean over the batch of `-sum_k t_k log softmax(logits)_k`.
pub fn cross_entropy_loss(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    let (_, log_norm) = softmax_rows(logits)?;
    check_targets(logits, targets)?;
    let k = logits.shape()[1];
    let b = log_norm.len();
    let total: f64 = (0..b)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let t = targets.data()[i * k + j];
                    if t == 0.0 {
                        0.0
                    } else {
                        let (max, log_z) = log_norm[i];
                        -t * ((logits.data()[i * k + j] - max) - log_z)
                    }
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / b as f64)
}

struct CrossEntropyOp {
    probs: Tensor,
    targets: Tensor,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let b = self.probs.shape()[0] as f64;
        let g = grad.data()[0] / b;
        Ok(vec![Some(self.probs.zip_map(&self.targets, |p, t| g * (p - t))?)])
    }
}

/// [`cross_entropy_loss`] on the tape.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    let lv = tape.value(logits);
    let loss = cross_entropy_loss(lv, targets)?;
    let (probs, _) = softmax_rows(lv)?;
    let op = CrossEntropyOp {
        probs,
        targets: targets.clone(),
    };
    Ok(tape.custom(&[logits], Tensor::scalar(loss), Box::new(op)))
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        for k in [2usize, 5, 10] {
            let logits = Tensor::full(&[3, k], 0.7);
            let targets = one_hot(&[0, 1, k - 1], k).unwrap();
            let loss = cross_entropy_loss(&logits, &targets).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn confident_correct_prediction_beats_uniform() {
        let logits = Tensor::new(vec![1, 3], vec![3.0, 0.0, -1.0]).unwrap();
        let loss = cross_entropy_loss(&logits, &one_hot(&[0], 3).unwrap()).unwrap();
        assert!(loss < 3f64.ln());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap();
        let loss = cross_entropy_loss(&logits, &one_hot(&[1], 2).unwrap()).unwrap();
        assert!((loss - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_targets_and_logits() {
        let logits = Tensor::zeros(&[1, 2]);
        let bad = Tensor::new(vec![1, 2], vec![0.5, 0.6]).unwrap();
        assert!(cross_entropy_loss(&logits, &bad).is_err());
        let nan = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            cross_entropy_loss(&nan, &one_hot(&[0], 2).unwrap()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn layer_spec_text_round_trip() {
        let specs = [
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 8,
                kernel: 3,
                stride: 2,
                padding: PaddingMode::Zero,
                norm: NormKind::BalNormTwoPass,
            },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 8,
                out_features: 4,
            },
        ];
        for s in specs {
            assert_eq!(s.to_string().parse::<LayerSpec>().unwrap(), s);
        }
    }

    #[test]
    fn balanced_layer_must_follow_relu() {
        let conv = |i, o| LayerSpec::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            padding: PaddingMode::Cyclic,
            norm: NormKind::BalNormSinglePass,
        };
        let specs = vec![
            conv(3, 4),
            conv(4, 4),
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 4,
                out_features: 2,
            },
        ];
        let err = Network::new(specs, [3, 8, 8], BalNormConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("ReLU"), "{err}");
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let specs = vec![
            LayerSpec::Conv {
                in_channels: 1,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: PaddingMode::Zero,
                norm: NormKind::None,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 4,
                out_features: 2,
            },
        ];
        assert!(Network::new(specs, [3, 8, 8], BalNormConfig::default(), 0).is_err());
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let t = Tensor::new(vec![2, 3], vec![0.1, 0.9, 0.9, -1.0, -2.0, -0.5]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 2]);
    }
}
