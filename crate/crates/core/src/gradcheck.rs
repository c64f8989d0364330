//! Central finite-difference gradient checks.
//!
//! The error reported for one input is the vector relative error
//! `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂)` over the
//! checked coordinates.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::nn::seeded_rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    /// Inputs with more elements than this are checked on a random subset.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: FD_STEP,
            max_entries: usize::MAX,
            seed: 0,
        }
    }
}

/// Relative errors, one per input.
pub fn check<F>(inputs: &[Tensor], loss: F, opts: FdOptions) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = loss(&tape, &vars)?;
        let mut grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(loss(&tape, &vars)?.value().item())
    };

    let mut rng = seeded_rng(opts.seed);
    let mut work = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let n = inputs[i].numel();
        let entries: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_entries).into_vec()
        };
        let (mut diff2, mut an2, mut num2) = (0.0, 0.0, 0.0);
        for &j in &entries {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[j];
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            num2 += numeric * numeric;
        }
        let scale = an2.sqrt().max(num2.sqrt());
        errors.push(if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale });
    }
    Ok(errors)
}

/// `sum(x ⊙ w)` with fixed pseudo-random weights in `[-1, 1]`, so that every
/// output element contributes a distinct gradient.
pub fn random_projection<'t>(x: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let w = Tensor::from_fn(x.shape(), |_| rng.random_range(-1.0..1.0));
    x.mul(x.tape().constant(w))?.sum()
}

pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
}

/// Random values in `[-1, 1]` kept at least `margin` away from zero, for ops
/// with a kink at the origin.
pub fn random_input_away_from_zero(shape: &[usize], seed: u64, margin: f64) -> Tensor {
    random_input(shape, seed).map(|v| {
        if v.abs() < margin {
            v.signum() * margin + v
        } else {
            v
        }
    })
}
