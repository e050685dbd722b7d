//! Central-finite-difference oracle for tape gradients.

use super::tape::{Tape, TensorId};
use super::Tensor;
use crate::error::{Error, Result};

/// Compare the tape gradient of a scalar-valued function against central
/// differences over every input coordinate; returns the max relative error
/// `|a − b| / max(1, |a|, |b|)`.
///
/// `f` is re-invoked on fresh tapes for each probe, so it must be a pure
/// function of its tensor inputs.
pub fn grad_check_inputs<F>(mut f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &ids)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::contract("grad_check", "function output must be scalar"));
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // Numeric probes.
    let mut eval = |pert: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = pert.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let root = f(&mut tape, &ids)?;
        Ok(tape.value(root).data()[0])
    };

    let mut max_rel = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for c in 0..input.numel() {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut pert: Vec<Tensor> = inputs.to_vec();
                let mut d = input.data().to_vec();
                d[c] += delta;
                pert[i].set_data(d)?;
                eval(&pert)
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            let a = analytic[i][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Single-input convenience wrapper; `h` is typically 1e-5.
pub fn grad_check<F>(mut f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, TensorId) -> Result<TensorId>,
{
    grad_check_inputs(|tape, ids| f(tape, ids[0]), std::slice::from_ref(x), h)
}
