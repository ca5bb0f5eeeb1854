//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only arena of nodes. Every node stores its
//! forward value and the operation that produced it; because inputs are
//! always recorded before outputs, the arena order is a topological order
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! `backward` does not mutate the tape: calling it twice from the same root
//! returns identical gradients.
//!
//! Operations with a non-differentiable locus (ReLU, the sign indicators of
//! balanced normalization) fold their branch decisions into a running
//! signature, which the finite-difference checker uses to exclude
//! coordinates whose perturbation switches branches.

mod gradcheck;

pub use gradcheck::{
    difference_resolution, grad_check, relative_error, resolved_relative_error, GradCheckOptions, GradCheckReport, ParamReport,
};

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, ConvSpec, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` means
    /// the input receives no gradient from this op.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Sum(Var),
    Dot(Var, Tensor),
    Relu(Var),
    Conv2d { x: Var, w: Var, spec: ConvSpec },
    ChannelAffine { x: Var, gain: Option<Var>, bias: Option<Var> },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::Relu(_) => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    branches: DefaultHasher,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros when `var` does not
    /// influence the root.
    pub fn get(&self, var: Var) -> Tensor {
        match self.grads.get(var.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn try_get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branches: DefaultHasher::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    /// Hash of every branch decision recorded so far.
    pub fn branch_signature(&self) -> u64 {
        self.branches.finish()
    }

    pub fn record_branches(&mut self, decisions: impl IntoIterator<Item = bool>) {
        for d in decisions {
            self.branches.write_u8(d as u8);
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// A constant copy of `var`'s current value; gradients stop here.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let rg = self.needs(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(Op::Sum(a), value, rg)
    }

    /// `sum(a * weights)` for a fixed `weights` tensor.
    pub fn dot(&mut self, a: Var, weights: &Tensor) -> Result<Var> {
        self.value(a).expect_same_shape(weights, "dot")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(x, w)| x * w)
            .sum();
        let rg = self.needs(a);
        Ok(self.push(Op::Dot(a, weights.clone()), Tensor::scalar(s), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = x.map(|v| if v > 0.0 { v } else { 0.0 });
        let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
        self.record_branches(mask);
        let rg = self.needs(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(w), &spec)?;
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(Op::Conv2d { x, w, spec }, value, rg))
    }

    /// Per-channel `gain[c] * x[:, c] + bias[c]` on `[B, C, ...]` inputs.
    pub fn channel_affine(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::shape("channel_affine", format!("input {:?} has no channel axis", xv.shape())));
        }
        let channels = xv.shape()[1];
        for p in gain.iter().chain(bias.iter()) {
            if self.value(*p).shape() != [channels] {
                return Err(Error::shape(
                    "channel_affine",
                    format!("parameter {:?} for {channels} channels", self.value(*p).shape()),
                ));
            }
        }
        let inner: usize = xv.shape()[2..].iter().product();
        let g = gain.map(|g| self.value(g).data().to_vec());
        let b = bias.map(|b| self.value(b).data().to_vec());
        let mut out = xv.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let c = i % channels;
            let (gc, bc) = (g.as_ref().map_or(1.0, |g| g[c]), b.as_ref().map_or(0.0, |b| b[c]));
            for v in chunk {
                *v = gc * *v + bc;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(x) || gain.is_some_and(|g| self.needs(g)) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(Op::ChannelAffine { x, gain, bias }, value, rg))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let n = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / n)
            .collect();
        let rg = self.needs(x);
        Ok(self.push(Op::GlobalAvgPool(x), Tensor::new(vec![b, c], data)?, rg))
    }

    /// `x [B, F] · wᵀ [F, K] + b [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, fin, k) = match (xv.shape(), wv.shape(), bv.shape()) {
            (&[batch, fin], &[k, wf], &[bk]) if wf == fin && bk == k => (batch, fin, k),
            (xs, ws, bs) => {
                return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}, bias {bs:?}")))
            }
        };
        let mut out = vec![0.0; batch * k];
        for i in 0..batch {
            let row = &xv.data()[i * fin..(i + 1) * fin];
            for o in 0..k {
                let wrow = &wv.data()[o * fin..(o + 1) * fin];
                out[i * k + o] = row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>() + bv.data()[o];
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x, w, b }, Tensor::new(vec![batch, k], out)?, rg))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.needs(v));
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
            rg,
        )
    }

    /// Gradients of the scalar `root` with respect to every node before it.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone())?;
                    self.accumulate(&mut grads, *b, g)?;
                }
                Op::Scale(a, factor) => {
                    self.accumulate(&mut grads, *a, g.scale(*factor))?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        self.accumulate(&mut grads, *a, g.zip_map(bv, |g, y| g * y)?)?;
                    }
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, g.zip_map(av, |g, x| g * x)?)?;
                    }
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(&mut grads, *a, Tensor::full(&shape, s))?;
                }
                Op::Dot(a, weights) => {
                    self.accumulate(&mut grads, *a, weights.scale(g.data()[0]))?;
                }
                Op::Relu(a) => {
                    let gx = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                    self.accumulate(&mut grads, *a, gx)?;
                }
                Op::Conv2d { x, w, spec } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.needs(*x) {
                        let gx = conv2d_backward_input(&g, xv.shape(), wv, spec)?;
                        self.accumulate(&mut grads, *x, gx)?;
                    }
                    if self.needs(*w) {
                        let gw = conv2d_backward_weight(&g, xv, wv.shape(), spec)?;
                        self.accumulate(&mut grads, *w, gw)?;
                    }
                }
                Op::ChannelAffine { x, gain, bias } => {
                    self.channel_affine_backward(&mut grads, &g, *x, *gain, *bias)?;
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let plane = shape[2] * shape[3];
                    let inv = 1.0 / plane as f64;
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v * inv, plane))
                        .collect();
                    self.accumulate(&mut grads, *x, Tensor::new(shape, data)?)?;
                }
                Op::Linear { x, w, b } => {
                    self.linear_backward(&mut grads, &g, *x, *w, *b)?;
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let input_grads = op.backward(&values, &node.value, &g)?;
                    if input_grads.len() != inputs.len() {
                        return Err(Error::shape(
                            "custom backward",
                            format!("{} returned {} gradients for {} inputs", op.name(), input_grads.len(), inputs.len()),
                        ));
                    }
                    for (&input, ig) in inputs.iter().zip(input_grads) {
                        if let Some(ig) = ig {
                            self.accumulate(&mut grads, input, ig)?;
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) -> Result<()> {
        if !self.needs(var) {
            return Ok(());
        }
        if g.shape() != self.value(var).shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "gradient {:?} for {} node of shape {:?}",
                    g.shape(),
                    self.op_name(var),
                    self.value(var).shape()
                ),
            ));
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn channel_affine_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
    ) -> Result<()> {
        let xv = self.value(x);
        let channels = xv.shape()[1];
        let inner: usize = xv.shape()[2..].iter().product();
        let gain_values = gain.map(|v| self.value(v).data().to_vec());
        let mut g_gain = vec![0.0; channels];
        let mut g_bias = vec![0.0; channels];
        let mut g_x = vec![0.0; xv.len()];
        for (i, (gc, xc)) in g.data().chunks(inner).zip(xv.data().chunks(inner)).enumerate() {
            let c = i % channels;
            let gv = gain_values.as_ref().map_or(1.0, |v| v[c]);
            for (t, (&gi, &xi)) in gc.iter().zip(xc).enumerate() {
                g_gain[c] += gi * xi;
                g_bias[c] += gi;
                g_x[i * inner + t] = gi * gv;
            }
        }
        if let Some(gn) = gain {
            self.accumulate(grads, gn, Tensor::new(vec![channels], g_gain)?)?;
        }
        if let Some(bs) = bias {
            self.accumulate(grads, bs, Tensor::new(vec![channels], g_bias)?)?;
        }
        if self.needs(x) {
            self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), g_x)?)?;
        }
        Ok(())
    }

    fn linear_backward(&self, grads: &mut [Option<Tensor>], g: &Tensor, x: Var, w: Var, b: Var) -> Result<()> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (batch, fin) = (xv.shape()[0], xv.shape()[1]);
        let k = wv.shape()[0];
        let gd = g.data();
        if self.needs(x) {
            let mut gx = vec![0.0; batch * fin];
            for i in 0..batch {
                for o in 0..k {
                    let go = gd[i * k + o];
                    for f in 0..fin {
                        gx[i * fin + f] += go * wv.data()[o * fin + f];
                    }
                }
            }
            self.accumulate(grads, x, Tensor::new(vec![batch, fin], gx)?)?;
        }
        if self.needs(w) {
            let mut gw = vec![0.0; k * fin];
            for i in 0..batch {
                for o in 0..k {
                    let go = gd[i * k + o];
                    for f in 0..fin {
                        gw[o * fin + f] += go * xv.data()[i * fin + f];
                    }
                }
            }
            self.accumulate(grads, w, Tensor::new(vec![k, fin], gw)?)?;
        }
        if self.needs(b) {
            let mut gb = vec![0.0; k];
            for i in 0..batch {
                for o in 0..k {
                    gb[o] += gd[i * k + o];
                }
            }
            self.accumulate(grads, b, Tensor::new(vec![k], gb)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PaddingMode;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 3.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(s)) if s == vec![2]));
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let y = tape.leaf(Tensor::ones(&[3]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y), Tensor::zeros(&[3]));
        assert!(g.try_get(y).is_none());
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.3, -1.2, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let r = tape.relu(y);
        let s = tape.sum(r);
        let g1 = tape.backward(s).unwrap().get(x);
        let g2 = tape.backward(s).unwrap().get(x);
        assert_eq!(g1, g2);
        assert_eq!(g1.data(), &[0.6, -2.4, 4.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_weight_gradient_is_channel_input_sum() {
        // d/dw_dcjk sum(conv(x, w)) = v_c under cyclic stride-1 padding.
        let x = Tensor::new(
            vec![2, 2, 3, 3],
            (0..36).map(|i| ((i * 7) % 11) as f64 * 0.25).collect(),
        )
        .unwrap();
        let v = x.reduce_sum(&[0, 2, 3]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let w = tape.leaf(Tensor::ones(&[3, 2, 3, 3]));
        let y = tape.conv2d(xv, w, ConvSpec::same(PaddingMode::Cyclic, 1, [3, 3])).unwrap();
        let s = tape.sum(y);
        let gw = tape.backward(s).unwrap().get(w);
        for d in 0..3 {
            for c in 0..2 {
                for jk in 0..9 {
                    let got = gw.data()[(d * 2 + c) * 9 + jk];
                    assert!((got - v.data()[c]).abs() < 1e-12, "{got} vs {}", v.data()[c]);
                }
            }
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let a = tape.scale(x, 3.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[4.0, 4.0]);
    }
}
