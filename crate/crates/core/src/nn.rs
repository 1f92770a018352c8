//! Reusable layers: linear, batch norm, layer norm, dropout and the causal
//! convolution branch. Every layer keeps its tensors in a [`ParamStore`]
//! and records its forward pass on a caller-supplied [`Tape`].

use rand::RngCore;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::SeededRng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut SeededRng) -> Result<Tensor> {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Weight `[out, in]` and bias `[out]`, both uniform in `±1/√in`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = uniform_tensor(&[out_dim, in_dim], bound, rng)?;
        let b = uniform_tensor(&[out_dim], bound, rng)?;
        Ok(Self {
            weight: store.add_param(format!("{name}.weight"), w, group, true),
            bias: store.add_param(format!("{name}.bias"), b, group, false),
            in_dim,
            out_dim,
        })
    }

    /// `x · Wᵀ + b` for `x` of shape `[B, in]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::dim(format!(
                "linear layer expects [B, {}], got {shape:?}",
                self.in_dim
            )));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup, momentum: f64, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[channels])?, group, false),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels])?, group, false),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])?, group),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])?, group),
            channels,
            momentum,
            eps,
        })
    }

    /// Normalises over every axis but axis 1 of `[N, Ch]` or `[N, Ch, L]`.
    /// Training mode uses batch statistics and updates the running
    /// estimates (unbiased variance); eval mode uses the running estimates.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if !(shape.len() == 2 || shape.len() == 3) || shape[1] != self.channels {
            return Err(Error::dim(format!(
                "batch norm over {} channels got input {shape:?}",
                self.channels
            )));
        }
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
                let rm = store.get_mut(self.running_mean).data_mut();
                for (r, b) in rm.iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                let rv = store.get_mut(self.running_var).data_mut();
                for (r, b) in rv.iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * b * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let inv: Vec<f64> = store.get(self.running_var).data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let inv = tape.constant(Tensor::new(vec![self.channels], inv)?);
                let mean = tape.constant(store.get(self.running_mean).clone());
                let scale = tape.mul(gamma, inv)?;
                let centre = tape.mul(mean, scale)?;
                let shift = tape.sub(beta, centre)?;
                tape.channel_affine(x, scale, shift)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub features: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, group: ParamGroup, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[features])?, group, false),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[features])?, group, false),
            features,
            eps,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout: survivors are scaled by `1/(1−rate)`; identity in
/// eval mode or at rate 0.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.shape(x).to_vec();
    let cut = (rate * 2f64.powi(64)) as u64;
    let mask = Tensor::from_fn(&shape, |_| if rng.next_u64() < cut { 0.0 } else { keep })?;
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Left-padded causal convolution followed by batch norm, ELU and dropout.
/// Channel count is preserved.
#[derive(Clone, Debug)]
pub struct CausalBranch {
    pub kernel_size: usize,
    pub kernels: ParamId,
    pub bias: ParamId,
    pub bn: BatchNorm,
    pub dropout: f64,
    pub channels: usize,
}

impl CausalBranch {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel_size: usize,
        dropout: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if kernel_size == 0 {
            return Err(Error::Config("kernel size must be ≥ 1".into()));
        }
        check_dropout_rate(dropout)?;
        let group = ParamGroup::Head;
        let bound = 1.0 / ((channels * kernel_size) as f64).sqrt();
        let k = uniform_tensor(&[channels, channels, kernel_size], bound, rng)?;
        let b = uniform_tensor(&[channels], bound, rng)?;
        Ok(Self {
            kernel_size,
            kernels: store.add_param(format!("{name}.conv.weight"), k, group, true),
            bias: store.add_param(format!("{name}.conv.bias"), b, group, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels, group, BN_MOMENTUM, BN_EPS)?,
            dropout,
            channels,
        })
    }

    /// `x` is `[N, D, S]` with `D` the convolution channels and `S` time.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(Error::dim(format!(
                "causal branch expects [N, {}, S], got {shape:?}",
                self.channels
            )));
        }
        let xt = tape.permute(x, &[0, 2, 1])?;
        let y = self.forward_nlc(tape, store, xt, mode, rng)?;
        tape.permute(y, &[0, 2, 1])
    }

    /// Channels-last form of [`CausalBranch::forward`]: `x` is `[N, S, D]`.
    pub fn forward_nlc(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::dim(format!(
                "causal branch expects [N, S, {}], got {shape:?}",
                self.channels
            )));
        }
        let k = tape.param(store, self.kernels);
        let b = tape.param(store, self.bias);
        let conv = tape.causal_conv1d_nlc(x, k, Some(b))?;
        let rows = tape.reshape(conv, &[shape[0] * shape[1], self.channels])?;
        let normed = self.bn.forward(tape, store, rows, mode)?;
        let act = tape.elu(normed)?;
        let out = dropout(tape, act, self.dropout, mode, rng)?;
        tape.reshape(out, &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded;
    use approx::assert_abs_diff_eq;

    fn elu(v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            v.exp_m1()
        }
    }

    fn identity_branch(store: &mut ParamStore, d: usize, k: usize) -> CausalBranch {
        let mut rng = seeded(0);
        let mut br = CausalBranch::new(store, "b", d, k, 0.0, &mut rng).unwrap();
        br.bn.eps = 0.0;
        let mut kern = vec![0.0; d * d * k];
        for c in 0..d {
            kern[(c * d + c) * k + (k - 1)] = 1.0;
        }
        store.assign(br.kernels, &kern).unwrap();
        store.assign(br.bias, &vec![0.0; d]).unwrap();
        br
    }

    #[test]
    fn identity_branch_is_elu() {
        let mut store = ParamStore::new();
        let br = identity_branch(&mut store, 3, 3);
        let mut rng = seeded(1);
        let x = uniform_tensor(&[2, 3, 6], 2.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = br.forward(&mut tape, &mut store, xv, Mode::Eval, &mut rng).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert_abs_diff_eq!(*a, elu(*b), epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_branch_is_zero_and_length_preserved() {
        let mut store = ParamStore::new();
        let mut rng = seeded(2);
        let br = CausalBranch::new(&mut store, "b", 16, 5, 0.1, &mut rng).unwrap();
        store.assign(br.kernels, &vec![0.0; 16 * 16 * 5]).unwrap();
        store.assign(br.bias, &[0.0; 16]).unwrap();
        let x = uniform_tensor(&[4, 16, 10], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = br.forward(&mut tape, &mut store, xv, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.shape(y), &[4, 16, 10]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let wrong = tape.constant(Tensor::zeros(&[4, 8, 10]).unwrap());
        assert!(br.forward(&mut tape, &mut store, wrong, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn batch_norm_train_standardises_channels() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, ParamGroup::Head, 0.1, 1e-5).unwrap();
        // channel 0: mean 5, var 4 ; channel 1: mean -1, var 1
        let x = Tensor::new(vec![2, 2, 2], vec![3.0, 7.0, -2.0, 0.0, 7.0, 3.0, 0.0, -2.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = bn.forward(&mut tape, &mut store, xv, Mode::Train).unwrap();
        let y = tape.value(y);
        let ch0: Vec<f64> = [0, 1, 4, 5].iter().map(|&i| y.data()[i]).collect();
        let mean: f64 = ch0.iter().sum::<f64>() / 4.0;
        let var: f64 = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert_abs_diff_eq!(var, 4.0 / (4.0 + 1e-5), epsilon = 1e-12);
        // running stats moved by momentum toward batch stats (unbiased var 16/3)
        assert_abs_diff_eq!(store.get(bn.running_mean).data()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(store.get(bn.running_var).data()[0], 0.9 + 0.1 * 16.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn batch_norm_gamma_zero_gives_beta() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, ParamGroup::Head, 0.1, 1e-5).unwrap();
        store.assign(bn.gamma, &[0.0, 0.0]).unwrap();
        store.assign(bn.beta, &[0.5, -1.5]).unwrap();
        let mut rng = seeded(3);
        let x = uniform_tensor(&[3, 2, 4], 2.0, &mut rng).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = bn.forward(&mut tape, &mut store, xv, mode).unwrap();
            for (i, v) in tape.value(y).data().iter().enumerate() {
                let c = (i / 4) % 2;
                assert_eq!(*v, [0.5, -1.5][c]);
            }
        }
    }

    #[test]
    fn batch_norm_eval_with_unit_running_stats_is_affine() {
        let mut store = ParamStore::new();
        let mut bn = BatchNorm::new(&mut store, "bn", 2, ParamGroup::Head, 0.1, 1e-5).unwrap();
        bn.eps = 0.0;
        store.assign(bn.gamma, &[2.0, -1.0]).unwrap();
        store.assign(bn.beta, &[0.25, 3.0]).unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = bn.forward(&mut tape, &mut store, xv, Mode::Eval).unwrap();
        assert_eq!(tape.value(y).data(), &[2.25, -3.75, 2.5, -1.0]);
    }

    #[test]
    fn train_batch_norm_needs_two_values() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, ParamGroup::Head, 0.1, 1e-5).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[1, 2, 1]).unwrap());
        assert!(matches!(bn.forward(&mut tape, &mut store, xv, Mode::Train), Err(Error::Validation(_))));
    }

    #[test]
    fn layer_norm_anchors() {
        let mut store = ParamStore::new();
        let mut ln = LayerNorm::new(&mut store, "ln", 2, ParamGroup::Head, 0.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let y = ln.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

        ln.eps = 1e-5;
        store.assign(ln.beta, &[0.7, -0.2]).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::new(vec![1, 2], vec![4.0, 4.0]).unwrap());
        let y = ln.forward(&mut tape, &store, c).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, -0.2]);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 7, ParamGroup::Head, 1e-5).unwrap();
        let mut rng = seeded(4);
        let mut tape = Tape::new();
        let x = tape.constant(uniform_tensor(&[5, 7], 3.0, &mut rng).unwrap());
        let y = ln.forward(&mut tape, &store, x).unwrap();
        for row in tape.value(y).data().chunks(7) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_modes() {
        let mut rng = seeded(5);
        let x = uniform_tensor(&[100], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let e = dropout(&mut tape, xv, 0.5, Mode::Eval, &mut rng).unwrap();
        assert!(tape.value(e).bit_eq(&x));
        let z = dropout(&mut tape, xv, 0.0, Mode::Train, &mut rng).unwrap();
        assert!(tape.value(z).bit_eq(&x));
        assert!(matches!(dropout(&mut tape, xv, 1.0, Mode::Train, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn inverted_dropout_preserves_mean() {
        let mut rng = seeded(6);
        let n = 100_000;
        let x = Tensor::from_fn(&[n], |i| 1.0 + (i % 7) as f64 * 0.1).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = dropout(&mut tape, xv, 0.5, Mode::Train, &mut rng).unwrap();
        let mean_in = x.sum() / n as f64;
        let mean_out = tape.value(y).sum() / n as f64;
        assert!((mean_out - mean_in).abs() / mean_in < 0.05);
    }

    #[test]
    fn linear_shape_checks() {
        let mut store = ParamStore::new();
        let mut rng = seeded(7);
        let lin = LinearLayer::new(&mut store, "fc", 3, 2, ParamGroup::Head, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]).unwrap());
        let y = lin.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[4, 2]);
        assert_eq!(tape.value(y).data()[..2], store.get(lin.bias).data()[..]);
        let bad = tape.constant(Tensor::zeros(&[4, 2]).unwrap());
        assert!(lin.forward(&mut tape, &store, bad).is_err());
    }
}
