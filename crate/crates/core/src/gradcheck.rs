//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Var};

/// Compares analytic gradients of a scalar objective against central
/// differences over every parameter entry of `store`.
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)`. The objective is
/// evaluated twice at the base point; differing results are rejected as
/// non-deterministic. Gradient slots are zeroed before and left holding the
/// analytic gradient afterwards.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(alloc::format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    fn eval<F>(f: &mut F, store: &ParamStore) -> Result<f64>
    where
        F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok(tape.scalar(out))
    }

    store.zero_grad();
    let first = eval(&mut f, store)?;
    let second = eval(&mut f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        tape.backward(out, store)?;
    }

    let mut worst: f64 = 0.0;
    let ids: alloc::vec::Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).tensor.numel() {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let plus = eval(&mut f, store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let minus = eval(&mut f, store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = store.get(id).tensor.grad().map_or(0.0, |g| g[i]);
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;
    use core::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap())
            .unwrap();
        let err = grad_check(&mut store, 1e-5, |tape, s| {
            let v = tape.param(s, w);
            let sq = tape.mul(v, v)?;
            let sc = tape.scale(sq, 3.0);
            Ok(tape.sum_all(sc))
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn step_outside_range_rejected() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0)).unwrap();
        let r = grad_check(&mut store, 0.0, |tape, s| Ok(tape.param(s, w)));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn nondeterminism_detected() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let r = grad_check(&mut store, 1e-5, |tape, s| {
            calls.set(calls.get() + 1.0);
            let v = tape.param(s, w);
            Ok(tape.scale(v, calls.get()))
        });
        assert!(matches!(r, Err(Error::NonDeterministic { .. })));
    }
}
