//! Finite-difference verification of every differentiable op and layer.
//!
//! Each check builds a scalar from fixed pseudo-random inputs in `[-2, 2]`
//! (kept positive where the op needs it) and compares the tape gradient to
//! central differences. A named check can be run with a corrupted backward
//! pass to confirm the harness notices.

use crate::error::Result;
use crate::kan::{basis_expand, ClassifierHead, KanConfig, KanLayer};
use crate::mcr::{graph_propagate, multiscale_fuse, normalize_adjacency, residual_postnorm, McrBlock, EPS_DEG};
use crate::model::{ModelConfig, MscgcKanModel, Variant};
use crate::nn::{dropout, uniform_tensor, BatchNorm, CausalBranch, LayerNorm, LinearLayer, Mode, BN_EPS, LN_EPS};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::gradcheck::{finite_diff_check_faulty, finite_diff_check_params_faulty};
use crate::tensor::{ReduceKind, Tape, Tensor, UnaryKind, Var};
use crate::{seeded, SeededRng};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const FD_EPS: f64 = 1e-6;
/// Relative scale applied to leaf gradients of a corrupted check.
const FAULT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }
}

type Check = fn(Option<f64>) -> Result<f64>;

fn input(shape: &[usize], seed: u64) -> Tensor {
    uniform_tensor(shape, 2.0, &mut seeded(seed)).expect("nonempty shape")
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = input(shape, seed);
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 0.5 + 0.75 * (v + 2.0)).collect()).expect("same shape")
}

/// `Σ w ⊙ y` with fixed weights, so no output direction cancels.
fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(input(&shape, 99));
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn check_input(x: Tensor, fault: Option<f64>, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    finite_diff_check_faulty(|tape, v| { let y = f(tape, v)?; weighted_sum(tape, y) }, &x, FD_EPS, fault)
}

fn check_store(store: &mut ParamStore, fault: Option<f64>, mut f: impl FnMut(&mut Tape, &mut ParamStore) -> Result<Var>) -> Result<f64> {
    finite_diff_check_params_faulty(store, |tape, s| { let y = f(tape, s)?; weighted_sum(tape, y) }, FD_EPS, fault)
}

fn param(store: &mut ParamStore, name: &str, t: Tensor) -> ParamId {
    store.add_param(name, t, ParamGroup::Head, true)
}

fn unary(kind: UnaryKind, fault: Option<f64>) -> Result<f64> {
    let x = match kind {
        UnaryKind::Powf(_) => positive(&[3, 4], 1),
        _ => input(&[3, 4], 1),
    };
    check_input(x, fault, |t, v| t.unary(v, kind))
}

fn binary(fault: Option<f64>, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut store = ParamStore::new();
    let a = param(&mut store, "a", input(&[3, 4], 2));
    let b = param(&mut store, "b", positive(&[4], 3));
    check_store(&mut store, fault, |t, s| {
        let (av, bv) = (t.param(s, a), t.param(s, b));
        op(t, av, bv)
    })
}

fn rng() -> SeededRng {
    seeded(5)
}

const CHECKS: &[(&str, Check)] = &[
    ("op.elu", |f| unary(UnaryKind::Elu, f)),
    ("op.silu", |f| unary(UnaryKind::Silu, f)),
    ("op.tanh", |f| unary(UnaryKind::Tanh, f)),
    ("op.sin", |f| unary(UnaryKind::Sin, f)),
    ("op.cos", |f| unary(UnaryKind::Cos, f)),
    ("op.square", |f| unary(UnaryKind::Square, f)),
    ("op.relu", |f| unary(UnaryKind::Relu, f)),
    ("op.abs", |f| unary(UnaryKind::Abs, f)),
    ("op.exp", |f| unary(UnaryKind::Exp, f)),
    ("op.neg", |f| unary(UnaryKind::Neg, f)),
    ("op.scale", |f| unary(UnaryKind::Scale(-1.5), f)),
    ("op.add_scalar", |f| unary(UnaryKind::AddScalar(0.7), f)),
    ("op.powf", |f| unary(UnaryKind::Powf(-0.5), f)),
    ("op.clamp_min", |f| unary(UnaryKind::ClampMin(0.1), f)),
    ("op.add", |f| binary(f, Tape::add)),
    ("op.sub", |f| binary(f, Tape::sub)),
    ("op.mul", |f| binary(f, Tape::mul)),
    ("op.div", |f| binary(f, Tape::div)),
    ("op.matmul", |f| {
        let mut store = ParamStore::new();
        let a = param(&mut store, "a", input(&[2, 3, 4], 4));
        let b = param(&mut store, "b", input(&[4, 5], 5));
        check_store(&mut store, f, |t, s| {
            let (av, bv) = (t.param(s, a), t.param(s, b));
            t.matmul(av, bv)
        })
    }),
    ("op.permute", |f| check_input(input(&[2, 3, 4], 6), f, |t, v| t.permute(v, &[2, 0, 1]))),
    ("op.reshape", |f| check_input(input(&[2, 3, 4], 7), f, |t, v| t.reshape(v, &[4, 6]))),
    ("op.reduce_sum", |f| check_input(input(&[2, 3, 4], 8), f, |t, v| t.reduce(v, &[0, 2], ReduceKind::Sum, false))),
    ("op.reduce_mean", |f| check_input(input(&[2, 3, 4], 9), f, |t, v| t.reduce(v, &[1], ReduceKind::Mean, true))),
    ("op.conv1d", |f| {
        let mut store = ParamStore::new();
        let x = param(&mut store, "x", input(&[2, 3, 7], 10));
        let k = param(&mut store, "k", input(&[4, 3, 3], 11));
        let b = param(&mut store, "b", input(&[4], 12));
        check_store(&mut store, f, |t, s| {
            let (xv, kv, bv) = (t.param(s, x), t.param(s, k), t.param(s, b));
            t.conv1d(xv, kv, Some(bv))
        })
    }),
    ("op.causal_conv1d", |f| {
        let mut store = ParamStore::new();
        let x = param(&mut store, "x", input(&[2, 6, 3], 13));
        let k = param(&mut store, "k", input(&[4, 3, 3], 14));
        let b = param(&mut store, "b", input(&[4], 15));
        check_store(&mut store, f, |t, s| {
            let (xv, kv, bv) = (t.param(s, x), t.param(s, k), t.param(s, b));
            t.causal_conv1d_nlc(xv, kv, Some(bv))
        })
    }),
    ("op.pad_left", |f| check_input(input(&[2, 3, 4], 16), f, |t, v| t.pad_left(v, 2))),
    ("op.concat", |f| {
        check_input(input(&[2, 3], 17), f, |t, v| {
            let sq = t.square(v)?;
            t.concat(&[v, sq, v], 1)
        })
    }),
    ("op.softmax_cross_entropy", |f| {
        finite_diff_check_faulty(|t, v| t.softmax_cross_entropy(v, &[0, 2, 1, 2]), &input(&[4, 3], 18), FD_EPS, f)
    }),
    ("op.batch_norm_train", |f| {
        let mut store = ParamStore::new();
        let x = param(&mut store, "x", input(&[4, 3, 2], 19));
        let g = param(&mut store, "g", positive(&[3], 20));
        let b = param(&mut store, "b", input(&[3], 21));
        check_store(&mut store, f, |t, s| {
            let (xv, gv, bv) = (t.param(s, x), t.param(s, g), t.param(s, b));
            Ok(t.batch_norm_train(xv, gv, bv, BN_EPS)?.0)
        })
    }),
    ("op.channel_affine", |f| {
        let mut store = ParamStore::new();
        let x = param(&mut store, "x", input(&[4, 3, 2], 22));
        let g = param(&mut store, "g", input(&[3], 23));
        let b = param(&mut store, "b", input(&[3], 24));
        check_store(&mut store, f, |t, s| {
            let (xv, gv, bv) = (t.param(s, x), t.param(s, g), t.param(s, b));
            t.channel_affine(xv, gv, bv)
        })
    }),
    ("op.layer_norm", |f| {
        let mut store = ParamStore::new();
        let x = param(&mut store, "x", input(&[3, 5], 25));
        let g = param(&mut store, "g", positive(&[5], 26));
        let b = param(&mut store, "b", input(&[5], 27));
        check_store(&mut store, f, |t, s| {
            let (xv, gv, bv) = (t.param(s, x), t.param(s, g), t.param(s, b));
            t.layer_norm(xv, gv, bv, LN_EPS)
        })
    }),
    ("layer.linear", |f| {
        let mut store = ParamStore::new();
        let lin = LinearLayer::new(&mut store, "lin", 4, 3, ParamGroup::Head, &mut rng())?;
        let x = param(&mut store, "x", input(&[2, 4], 28));
        check_store(&mut store, f, |t, s| {
            let xv = t.param(s, x);
            lin.forward(t, s, xv)
        })
    }),
    ("layer.batch_norm_train", |f| {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3, ParamGroup::Head, 0.1, BN_EPS)?;
        let x = param(&mut store, "x", input(&[5, 3], 29));
        check_store(&mut store, f, |t, s| {
            let xv = t.param(s, x);
            bn.forward(t, s, xv, Mode::Train)
        })
    }),
    ("layer.batch_norm_eval", |f| {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3, ParamGroup::Head, 0.1, BN_EPS)?;
        store.assign(bn.running_mean, &[0.3, -0.2, 0.1])?;
        store.assign(bn.running_var, &[0.5, 1.5, 2.0])?;
        let x = param(&mut store, "x", input(&[2, 3, 4], 30));
        check_store(&mut store, f, |t, s| {
            let xv = t.param(s, x);
            bn.forward(t, s, xv, Mode::Eval)
        })
    }),
    ("layer.layer_norm", |f| {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4, ParamGroup::Head, LN_EPS)?;
        let x = param(&mut store, "x", input(&[3, 4], 31));
        check_store(&mut store, f, |t, s| {
            let xv = t.param(s, x);
            ln.forward(t, s, xv)
        })
    }),
    ("layer.dropout", |f| {
        check_input(input(&[4, 5], 32), f, |t, v| dropout(t, v, 0.3, Mode::Train, &mut rng()))
    }),
    ("layer.causal_branch", |f| {
        let mut store = ParamStore::new();
        let br = CausalBranch::new(&mut store, "br", 2, 3, 0.2, &mut rng())?;
        let x = param(&mut store, "x", input(&[3, 2, 5], 33));
        check_store(&mut store, f, |t, s| {
            let xv = t.param(s, x);
            br.forward(t, s, xv, Mode::Train, &mut rng())
        })
    }),
    ("layer.normalize_adjacency", |f| check_input(input(&[3, 3], 34), f, |t, v| normalize_adjacency(t, v, EPS_DEG))),
    ("layer.graph_propagate", |f| {
        let mut store = ParamStore::new();
        let o = param(&mut store, "o", input(&[2, 3, 4], 35));
        let a = param(&mut store, "a", input(&[3, 3], 36));
        check_store(&mut store, f, |t, s| {
            let (ov, av) = (t.param(s, o), t.param(s, a));
            graph_propagate(t, ov, av)
        })
    }),
    ("layer.multiscale_fuse", |f| {
        let mut store = ParamStore::new();
        let branches = vec![
            CausalBranch::new(&mut store, "b3", 2, 3, 0.0, &mut rng())?,
            CausalBranch::new(&mut store, "b5", 2, 5, 0.0, &mut rng())?,
        ];
        let x = param(&mut store, "x", input(&[3, 2, 6], 37));
        check_store(&mut store, f, |t, s| {
            let xv = t.param(s, x);
            multiscale_fuse(t, s, &branches, xv, Mode::Train, &mut rng())
        })
    }),
    ("layer.residual_postnorm", |f| {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3, ParamGroup::Head, 0.1, BN_EPS)?;
        let z = param(&mut store, "z", input(&[2, 3, 4], 38));
        let x = param(&mut store, "x", input(&[2, 3, 4], 39));
        check_store(&mut store, f, |t, s| {
            let (zv, xv) = (t.param(s, z), t.param(s, x));
            residual_postnorm(t, s, zv, xv, &bn, 0.2, Mode::Train, &mut rng())
        })
    }),
    ("layer.mcr_block", |f| {
        let mut store = ParamStore::new();
        let block = McrBlock::new(&mut store, "mcr", 3, 2, &[3, 5], 0.1, &mut rng())?;
        store.assign(block.adjacency.a, input(&[3, 3], 40).data())?;
        let x = param(&mut store, "x", input(&[2, 3, 4, 2], 41));
        check_store(&mut store, f, |t, s| {
            let xv = t.param(s, x);
            Ok(block.forward(t, s, xv, Mode::Train, &mut rng())?.h)
        })
    }),
    ("layer.basis_expand", |f| check_input(input(&[2, 3], 42), f, |t, v| basis_expand(t, v, 2))),
    ("layer.kan", |f| {
        let mut store = ParamStore::new();
        let kan = KanLayer::new(&mut store, "kan", 6, KanConfig { hidden: 4, out_dim: 3, harmonics: 0 }, &mut rng())?;
        let x = param(&mut store, "x", input(&[2, 6], 43));
        check_store(&mut store, f, |t, s| {
            let xv = t.param(s, x);
            kan.forward(t, s, xv)
        })
    }),
    ("layer.classifier", |f| {
        let mut store = ParamStore::new();
        let clf = ClassifierHead::new(&mut store, "clf", 4, 3, &mut rng())?;
        let x = param(&mut store, "x", input(&[2, 4], 44));
        check_store(&mut store, f, |t, s| {
            let xv = t.param(s, x);
            clf.forward(t, s, xv)
        })
    }),
    ("model.baseline", |f| model(Variant::Baseline, f)),
    ("model.kan_only", |f| model(Variant::KanOnly, f)),
    ("model.block_only", |f| model(Variant::BlockOnly, f)),
    ("model.full", |f| model(Variant::Full, f)),
];

/// The composed model at C=3, S=4, D=2, hidden=8, M=3 with cross-entropy
/// on a fixed batch, checked over every trainable parameter.
fn model(variant: Variant, fault: Option<f64>) -> Result<f64> {
    let config = ModelConfig {
        channels: 3,
        windows: 4,
        raw_width: 3,
        features: 2,
        classes: 3,
        kan: KanConfig { hidden: 8, out_dim: 6, harmonics: 0 },
        variant,
        ..ModelConfig::default()
    };
    let mut m = MscgcKanModel::new(config)?;
    if let Some(block) = &m.block {
        let a = block.adjacency.a;
        m.store.assign(a, input(&[3, 3], 45).data())?;
    }
    let x = input(&[4, 3, 4, 3], 46);
    let labels = [0, 1, 2, 1];
    let mut store = std::mem::take(&mut m.store);
    finite_diff_check_params_faulty(
        &mut store,
        |tape, s| {
            std::mem::swap(&mut m.store, s);
            let xv = tape.constant(x.clone());
            let out = m.forward(tape, xv, Mode::Train, &mut rng());
            std::mem::swap(&mut m.store, s);
            tape.softmax_cross_entropy(out?.logits, &labels)
        },
        FD_EPS,
        fault,
    )
}

/// Names of every check, in report order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check; `corrupt` names one whose backward pass is perturbed.
pub fn run_gradcheck_suite(corrupt: Option<&str>) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for (name, check) in CHECKS {
        let fault = (corrupt == Some(*name)).then_some(FAULT);
        let max_rel_error = check(fault)?;
        report.results.push(CheckResult { name: name.to_string(), max_rel_error });
    }
    Ok(report)
}
