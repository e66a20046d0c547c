//! Finite-difference gradient oracle.

use super::{Tape, Var};
use crate::error::Result;
use crate::rng::SeedStream;
use crate::tensor::Tensor;

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

/// Relative error `|a - n| / max(|a|, |n|)` over whole gradient vectors.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nn = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a as f64 - n).powi(2);
        na += (a as f64).powi(2);
        nn += n * n;
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom < 1e-7 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    }
}

/// Projects the op output onto fixed random weights and compares the
/// analytic input gradients against central differences.
#[cfg(test)]
pub(crate) fn check_grad<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_grad_masked(inputs, &vec![true; inputs.len()], f);
}

/// Relative error between analytic and central-difference input gradients
/// for every trainable input of `f`. The op output is projected onto fixed
/// random weights so that one scalar covers every output element.
pub fn gradient_errors<F>(inputs: &[Tensor], trainable: &[bool], f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(Tensor, Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .zip(trainable)
            .map(|(x, &t)| if t { tape.leaf(x.clone()) } else { tape.constant(x.clone()) })
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).clone(), tape, vars, out))
    };
    let (out0, mut tape, vars, out) = eval(inputs)?;
    let proj = Tensor::randn(out0.shape().to_vec(), &mut SeedStream::new(99).rng());
    let project = |t: &Tensor| -> f64 {
        t.data()
            .iter()
            .zip(proj.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };
    let p = tape.constant(proj.clone());
    let prod = tape.mul(out, p)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;

    let mut errors = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        if !trainable[k] {
            continue;
        }
        let analytic = grads.get_or_zeros(vars[k], x.shape());
        let mut numeric = vec![0.0f64; x.numel()];
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let fp = project(&eval(&plus)?.0);
            let fm = project(&eval(&minus)?.0);
            numeric[i] = (fp - fm) / (2.0 * FD_STEP as f64);
        }
        errors.push(relative_error(analytic.data(), &numeric));
    }
    Ok(errors)
}

#[cfg(test)]
pub(crate) fn check_grad_masked<F>(inputs: &[Tensor], trainable: &[bool], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let errors = gradient_errors(inputs, trainable, f).expect("op failed");
    for (k, err) in errors.iter().enumerate() {
        assert!(*err < FD_TOL, "input {k}: relative gradient error {err:.2e}");
    }
}
