//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn scalar_of(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::Numerical("gradient check: non-finite function value".into()));
    }
    Ok(s)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_faulty(f, x, eps, None)
}

pub(crate) fn finite_diff_check_faulty<F>(f: F, x: &Tensor, eps: f64, fault: Option<f64>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.set_backward_fault(fault);
    let v = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, v)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .map(|g| g.into_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let leaf = t.constant(Tensor::new(x.shape().to_vec(), values)?);
        let out = f(&mut t, leaf)?;
        scalar_of(&t, out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Like [`finite_diff_check`], over every trainable scalar of `store`.
/// `f` builds the scalar on the tape it is handed, binding parameters via
/// [`Tape::param`].
pub fn finite_diff_check_params<F>(store: &mut ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    finite_diff_check_params_faulty(store, f, eps, None)
}

pub(crate) fn finite_diff_check_params_faulty<F>(
    store: &mut ParamStore,
    mut f: F,
    eps: f64,
    fault: Option<f64>,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    tape.set_backward_fault(fault);
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    tape.accumulate_param_grads(store)?;

    let mut worst: f64 = 0.0;
    for id in store.trainable() {
        let analytic: Vec<f64> = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for i in 0..analytic.len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let mut t = Tape::inference();
            let o = f(&mut t, store)?;
            let fp = scalar_of(&t, o)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let mut t = Tape::inference();
            let o = f(&mut t, store)?;
            let fm = scalar_of(&t, o)?;
            store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * eps)));
        }
    }
    store.zero_grad();
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn t(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn sin_sum_passes() {
        let err = finite_diff_check(
            |tape, x| {
                let s = tape.sin(x)?;
                tape.sum_all(s)
            },
            &t(&[0.3, -1.2, 1.9, 0.0]),
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let err = finite_diff_check(
            |tape, x| {
                let y = tape.scale(x, 3.0)?;
                let y = tape.add_scalar(y, 1.0)?;
                tape.sum_all(y)
            },
            &t(&[0.5, -0.25, 2.0]),
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn square_at_zero() {
        let err = finite_diff_check(
            |tape, x| {
                let y = tape.square(x)?;
                tape.sum_all(y)
            },
            &t(&[0.0, 0.0]),
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn fault_is_detected() {
        let err = finite_diff_check_faulty(
            |tape, x| {
                let y = tape.square(x)?;
                tape.sum_all(y)
            },
            &t(&[1.0, 2.0]),
            DEFAULT_FD_EPS,
            Some(0.5),
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let r = finite_diff_check(|tape, x| tape.sin(x), &t(&[1.0, 2.0]), DEFAULT_FD_EPS);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn param_check_covers_store() {
        let mut store = ParamStore::new();
        let w = store.add_param("w", t(&[0.4, -0.7, 1.3]), ParamGroup::Head, true);
        let err = finite_diff_check_params(
            &mut store,
            |tape, s| {
                let v = tape.param(s, w);
                let y = tape.tanh(v)?;
                let y = tape.mul(y, v)?;
                tape.sum_all(y)
            },
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
