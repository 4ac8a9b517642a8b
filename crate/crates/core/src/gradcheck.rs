//! Central finite-difference gradient checking.
//!
//! The check builds the computation afresh for every perturbed input, so it
//! never reuses anything from the reverse pass it is validating.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a kink.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Floor for the relative-error denominator.
    pub floor: f64,
    /// At most this many coordinates are probed per input tensor.
    pub max_coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            max_coords_per_input: usize::MAX,
            seed: 0,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar produced by `f` against
/// central differences, for every tensor in `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).data()[0], tape.kink_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let base_signature = tape.kink_signature();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let n = inputs[which].len();
        let analytic = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= opts.max_coords_per_input {
            (0..n).collect()
        } else {
            (0..opts.max_coords_per_input).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let original = inputs[which].data()[i];
            perturbed[which].data_mut()[i] = original + opts.eps;
            let (plus, sig_plus) = eval(&perturbed)?;
            perturbed[which].data_mut()[i] = original - opts.eps;
            let (minus, sig_minus) = eval(&perturbed)?;
            perturbed[which].data_mut()[i] = original;
            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic[i], numeric, opts.floor);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces any tensor to a scalar through a fixed random projection, so every
/// output element contributes a distinct weight to the checked gradient.
pub fn random_projection(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0bad);
    let weights = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("consistent shape")
}
