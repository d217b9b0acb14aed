use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Relative discrepancy used by the checkers.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::lit(1e-8));
    (analytic - numeric).abs() / denom
}

fn finite<T: Scalar>(v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            op: "check_gradients",
            detail: format!("function value {v} is not finite"),
        })
    }
}

/// Compares reverse-mode gradients of `f` at `x` with central differences.
///
/// Returns the largest relative error over all coordinates of `x`.
pub fn check_gradients<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<'static, T>, Var) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    finite(tape.item(y))?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe, false);
        let y = f(&mut tape, v)?;
        finite(tape.item(y))
    };
    let two = T::lit(2.0);
    let mut worst = T::zero();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (two * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same comparison for stored parameters: every coordinate of every id in `ids`.
pub fn check_param_gradients<T, F>(store: &ParamStore<T>, ids: &[ParamId], f: F, step: T) -> Result<T>
where
    T: Scalar,
    F: for<'p> Fn(&mut Tape<'p, T>) -> Result<Var>,
{
    let mut trainable = vec![false; store.len()];
    for id in ids {
        trainable[id.index()] = true;
    }
    let grads = {
        let mut tape = Tape::with_trainable(store, &trainable);
        let y = f(&mut tape)?;
        finite(tape.item(y))?;
        tape.backward(y)?.into_param_grads()
    };
    let eval = |s: &ParamStore<T>| -> Result<T> {
        let mut tape = Tape::with_params(s);
        let y = f(&mut tape)?;
        finite(tape.item(y))
    };
    let two = T::lit(2.0);
    let mut probe = store.clone();
    let mut worst = T::zero();
    for &id in ids {
        let n = store.value(id).len();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (two * step);
            let analytic = grads[id.index()]
                .as_ref()
                .map_or(T::zero(), |g| g.data()[i]);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}
