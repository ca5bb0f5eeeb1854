//! Comparison arms: batch normalization over `[B, C, H, W]` activations and
//! the identity.

use std::io::{Read, Write};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{read_bnt1, write_bnt1, Tensor};
use crate::Mode;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `x` with `gamma`/`beta` taken from the tape.
    ///
    /// Train mode uses the biased batch variance and updates the running
    /// estimates (unbiased variance); eval mode uses the running estimates.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, gamma: Var, beta: Var, mode: Mode) -> Result<Var> {
        let xv = tape.value(x);
        let [b, c, h, w] = xv.dims4("batchnorm")?;
        if c != self.channels() || tape.value(gamma).shape() != [c] || tape.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!("input {:?} for a {}-channel layer", xv.shape(), self.channels()),
            ));
        }
        let n = b * h * w;
        let plane = h * w;
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::InsufficientBatch(n));
                }
                let (mean, var) = channel_moments(xv, c, plane);
                let unbiased = n as f64 / (n as f64 - 1.0);
                let m = self.momentum;
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (1.0 - m) * *rm + m * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (1.0 - m) * *rv + m * var[ch] * unbiased;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (gd, bd) = (tape.value(gamma).data(), tape.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (xc, (hc, oc))) in xv
            .data()
            .chunks(plane)
            .zip(xhat.chunks_mut(plane).zip(out.chunks_mut(plane)))
            .enumerate()
        {
            let ch = i % c;
            for ((&xi, hi), oi) in xc.iter().zip(hc.iter_mut()).zip(oc.iter_mut()) {
                *hi = (xi - mean[ch]) * inv_std[ch];
                *oi = gd[ch] * *hi + bd[ch];
            }
        }
        let shape = xv.shape().to_vec();
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("batchnorm output".into()));
        }
        let op = BatchNormOp {
            xhat,
            inv_std,
            channels: c,
            plane,
            batch_stats: mode == Mode::Train,
        };
        Ok(tape.custom(&[x, gamma, beta], Tensor::new(shape, out)?, Box::new(op)))
    }

    /// [`BatchNormState::forward`] on plain tensors with the state's own affine parameters.
    pub fn forward_tensors(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(self.gamma.clone());
        let b = tape.constant(self.beta.clone());
        let y = self.forward(&mut tape, xv, g, b, mode)?;
        Ok(tape.value(y).clone())
    }
}

/// Per-channel mean and biased variance over batch and spatial positions.
fn channel_moments(x: &Tensor, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / channels) as f64;
    let mut mean = vec![0.0; channels];
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        mean[i % channels] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; channels];
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        let m = mean[i % channels];
        var[i % channels] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

struct BatchNormOp {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    plane: usize,
    batch_stats: bool,
}

impl CustomOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = self.channels;
        let n = (x.len() / c) as f64;
        let mut g_gamma = vec![0.0; c];
        let mut g_beta = vec![0.0; c];
        for (i, (gc, hc)) in grad.data().chunks(self.plane).zip(self.xhat.chunks(self.plane)).enumerate() {
            let ch = i % c;
            for (&g, &h) in gc.iter().zip(hc) {
                g_gamma[ch] += g * h;
                g_beta[ch] += g;
            }
        }
        let mut gx = vec![0.0; x.len()];
        for (i, ((gc, hc), oc)) in grad
            .data()
            .chunks(self.plane)
            .zip(self.xhat.chunks(self.plane))
            .zip(gx.chunks_mut(self.plane))
            .enumerate()
        {
            let ch = i % c;
            let k = gamma.data()[ch] * self.inv_std[ch];
            if self.batch_stats {
                let (mean_g, mean_gh) = (g_beta[ch] / n, g_gamma[ch] / n);
                for ((&g, &h), o) in gc.iter().zip(hc).zip(oc.iter_mut()) {
                    *o = k * (g - mean_g - h * mean_gh);
                }
            } else {
                for (&g, o) in gc.iter().zip(oc.iter_mut()) {
                    *o = k * g;
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(x.shape().to_vec(), gx)?),
            Some(Tensor::new(vec![c], g_gamma)?),
            Some(Tensor::new(vec![c], g_beta)?),
        ])
    }
}

/// The unnormalized control arm.
pub fn identity_forward(x: Var) -> Var {
    x
}

/// Writes `running_mean, running_var, gamma, beta` as BNT1 records.
pub fn write_state<W: Write>(out: &mut W, state: &BatchNormState) -> Result<()> {
    for t in [&state.running_mean, &state.running_var, &state.gamma, &state.beta] {
        write_bnt1(out, t)?;
    }
    Ok(())
}

pub fn read_state<R: Read>(input: &mut R) -> Result<BatchNormState> {
    let running_mean = read_bnt1(input)?;
    let running_var = read_bnt1(input)?;
    let gamma = read_bnt1(input)?;
    let beta = read_bnt1(input)?;
    let c = gamma.len();
    if [&running_mean, &running_var, &beta].iter().any(|t| t.shape() != [c]) {
        return Err(Error::Format("batch norm record has inconsistent channel counts".into()));
    }
    Ok(BatchNormState {
        running_mean,
        running_var,
        gamma,
        beta,
        eps: DEFAULT_EPS,
        momentum: DEFAULT_MOMENTUM,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_three_values() {
        let mut bn = BatchNormState::new(1);
        bn.eps = 0.0;
        let y = bn
            .forward_tensors(&Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap(), Mode::Train)
            .unwrap();
        let e = 1.5f64.sqrt();
        for (got, want) in y.data().iter().zip([-e, 0.0, e]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let mut bn = BatchNormState::new(1);
        let y = bn.forward_tensors(&Tensor::full(&[2, 1, 2, 2], 3.5), Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverse_affine_restores_input() {
        let x = Tensor::new(vec![2, 2, 1, 2], vec![1.0, 4.0, -2.0, 0.5, 3.0, 2.0, 7.0, -1.0]).unwrap();
        let mut bn = BatchNormState::new(2);
        let (mean, var) = channel_moments(&x, 2, 2);
        bn.gamma = Tensor::from_vec(var.iter().map(|v| (v + bn.eps).sqrt()).collect());
        bn.beta = Tensor::from_vec(mean);
        let y = bn.forward_tensors(&x, Mode::Train).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_value_batch_is_rejected_in_train_mode() {
        let mut bn = BatchNormState::new(1);
        assert!(matches!(
            bn.forward_tensors(&Tensor::ones(&[1, 1, 1, 1]), Mode::Train),
            Err(Error::InsufficientBatch(1))
        ));
        assert!(bn.forward_tensors(&Tensor::ones(&[1, 1, 1, 1]), Mode::Eval).is_ok());
    }

    #[test]
    fn running_variance_is_unbiased() {
        let mut bn = BatchNormState::new(1);
        bn.momentum = 1.0;
        bn.forward_tensors(&Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap(), Mode::Train)
            .unwrap();
        assert!((bn.running_mean.data()[0] - 2.0).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_is_transparent_to_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap());
        let y = identity_forward(x);
        assert_eq!(tape.value(y), tape.value(x));
        let s = tape.sum(y);
        assert_eq!(tape.backward(s).unwrap().get(x), Tensor::ones(&[1, 2, 2, 2]));
    }
}
