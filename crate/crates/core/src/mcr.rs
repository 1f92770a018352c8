//! Multi-scale causal residual graph-convolution block.
//!
//! Temporal modelling runs on a `(B·C) × D × S` view (window features as
//! convolution channels, windows as time); graph propagation runs on a
//! `B × C × (D·S)` view of the same values. Branch outputs are summed, mixed
//! across EEG channels with a learned normalised adjacency, added back to
//! the input and post-normalised.
//!
//! The adjacency degree uses absolute row sums clamped below by
//! `eps_deg`, because `elu(A) + I` can carry negative off-diagonal entries.
//! Clamping `elu(A) + I` to be nonnegative would be the other possible
//! repair; it is not implemented.

use crate::error::{Error, Result, StageContext};
use crate::nn::{dropout, BatchNorm, CausalBranch, Mode, BN_EPS, BN_MOMENTUM};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{ReduceKind, Tape, Tensor, Var};
use crate::SeededRng;

pub const EPS_DEG: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct AdjacencyParams {
    pub a: ParamId,
    pub channels: usize,
    pub eps_deg: f64,
}

impl AdjacencyParams {
    /// `A` starts at zero, so the initial normalised adjacency is `I`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            a: store.add_param(format!("{name}.adjacency"), Tensor::zeros(&[channels, channels])?, ParamGroup::Head, true),
            channels,
            eps_deg: EPS_DEG,
        })
    }
}

/// `D^{-1/2} (elu(A) + I) D^{-1/2}` with `d_i = max(Σ_j |Ã_ij|, eps_deg)`.
pub fn normalize_adjacency(tape: &mut Tape, a: Var, eps_deg: f64) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    let [c, c2] = shape[..] else {
        return Err(Error::dim(format!("adjacency must be square, got {shape:?}")));
    };
    if c != c2 {
        return Err(Error::dim(format!("adjacency must be square, got {shape:?}")));
    }
    if !tape.value(a).is_finite() {
        return Err(Error::Validation("adjacency parameters are not finite".into()));
    }
    let eye = tape.constant(Tensor::eye(c)?);
    let e = tape.elu(a)?;
    let tilde = tape.add(e, eye)?;
    let abs = tape.abs(tilde)?;
    let deg = tape.reduce(abs, &[1], ReduceKind::Sum, false)?;
    let deg = tape.clamp_min(deg, eps_deg)?;
    let inv_sqrt = tape.powf(deg, -0.5)?;
    let rows = tape.reshape(inv_sqrt, &[c, 1])?;
    let cols = tape.reshape(inv_sqrt, &[1, c])?;
    let left = tape.mul(tilde, rows)?;
    tape.mul(left, cols)
}

/// Eager evaluation of [`normalize_adjacency`] through the same tape path.
pub fn normalized_adjacency_tensor(a: &Tensor, eps_deg: f64) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let v = tape.constant(a.clone());
    let out = normalize_adjacency(&mut tape, v, eps_deg)?;
    Ok(tape.value(out).clone())
}

/// `Z[b] = Â · o[b]` for `o` of shape `[B, C, F]`.
pub fn graph_propagate(tape: &mut Tape, o: Var, a_hat: Var) -> Result<Var> {
    let (os, ash) = (tape.shape(o).to_vec(), tape.shape(a_hat).to_vec());
    if os.len() != 3 || ash.len() != 2 || ash[0] != ash[1] || ash[1] != os[1] {
        return Err(Error::dim(format!(
            "graph propagation of {os:?} by adjacency {ash:?}"
        )));
    }
    tape.matmul(a_hat, o)
}

/// Sum of every branch applied to `x` of shape `[N, D, S]`.
pub fn multiscale_fuse(
    tape: &mut Tape,
    store: &mut ParamStore,
    branches: &[CausalBranch],
    x: Var,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<Var> {
    fuse_with(tape, branches, |tape, br| br.forward(tape, store, x, mode, rng))
}

/// [`multiscale_fuse`] on a channels-last `[N, S, D]` input.
pub fn multiscale_fuse_nlc(
    tape: &mut Tape,
    store: &mut ParamStore,
    branches: &[CausalBranch],
    x: Var,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<Var> {
    fuse_with(tape, branches, |tape, br| br.forward_nlc(tape, store, x, mode, rng))
}

fn fuse_with<F>(tape: &mut Tape, branches: &[CausalBranch], mut run: F) -> Result<Var>
where
    F: FnMut(&mut Tape, &CausalBranch) -> Result<Var>,
{
    let mut acc: Option<Var> = None;
    for br in branches {
        let o = run(tape, br)?;
        acc = Some(match acc {
            None => o,
            Some(prev) => {
                if tape.shape(prev) != tape.shape(o) {
                    return Err(Error::dim(format!(
                        "branch output {:?} does not match {:?}",
                        tape.shape(o),
                        tape.shape(prev)
                    )));
                }
                tape.add(prev, o)?
            }
        });
    }
    acc.ok_or_else(|| Error::Config("multi-scale fusion needs at least one branch".into()))
}

/// `Dropout(ELU(BN(Z + x)))` with batch norm over axis 1 of `[B, C, F]`.
pub fn residual_postnorm(
    tape: &mut Tape,
    store: &mut ParamStore,
    z: Var,
    x: Var,
    bn: &BatchNorm,
    dropout_rate: f64,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<Var> {
    if tape.shape(z) != tape.shape(x) {
        return Err(Error::dim(format!(
            "residual of {:?} and {:?}",
            tape.shape(z),
            tape.shape(x)
        )));
    }
    let sum = tape.add(z, x)?;
    let normed = bn.forward(tape, store, sum, mode)?;
    let act = tape.elu(normed)?;
    dropout(tape, act, dropout_rate, mode, rng)
}

#[derive(Clone, Debug)]
pub struct McrBlock {
    pub branches: Vec<CausalBranch>,
    pub adjacency: AdjacencyParams,
    pub post_bn: BatchNorm,
    pub dropout: f64,
    pub channels: usize,
    pub features: usize,
}

/// Values recorded by one block forward.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    /// `[B, C, S, D]`, same layout as the input.
    pub h: Var,
    /// The normalised adjacency used for propagation.
    pub a_hat: Var,
    /// Fused temporal output on the `[B·C, S, D]` view.
    pub fused: Var,
}

impl McrBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        features: usize,
        kernels: &[usize],
        dropout: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::Config("kernel set must be nonempty".into()));
        }
        let branches = kernels
            .iter()
            .map(|&k| CausalBranch::new(store, &format!("{name}.branch_k{k}"), features, k, dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            branches,
            adjacency: AdjacencyParams::new(store, name, channels)?,
            post_bn: BatchNorm::new(store, &format!("{name}.post_bn"), channels, ParamGroup::Head, BN_MOMENTUM, BN_EPS)?,
            dropout,
            channels,
            features,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, f: Var, mode: Mode, rng: &mut SeededRng) -> Result<BlockOutput> {
        let shape = tape.shape(f).to_vec();
        let [b, c, s, d] = shape[..] else {
            return Err(Error::dim(format!("block input must be [B, C, S, D], got {shape:?}")));
        };
        if c != self.channels || d != self.features {
            return Err(Error::dim(format!(
                "block built for C={}, D={}, got {shape:?}",
                self.channels, self.features
            )));
        }
        // Channels-last throughout: each (b, c) row is an [S, D] sequence and
        // the flattened feature axis is S·D. Propagation and the post-norm
        // treat that axis as a set, so the result matches a D·S layout.
        let x = tape.reshape(f, &[b * c, s, d])?;
        let fused = multiscale_fuse_nlc(tape, store, &self.branches, x, mode, rng).stage("multiscale_fuse")?;
        let o = tape.reshape(fused, &[b, c, s * d])?;
        let residual = tape.reshape(f, &[b, c, s * d])?;
        let a = tape.param(store, self.adjacency.a);
        let a_hat = normalize_adjacency(tape, a, self.adjacency.eps_deg)?;
        let z = graph_propagate(tape, o, a_hat)?;
        let h = residual_postnorm(tape, store, z, residual, &self.post_bn, self.dropout, mode, rng).stage("residual_postnorm")?;
        let h = tape.reshape(h, &[b, c, s, d])?;
        Ok(BlockOutput { h, a_hat, fused })
    }
}
