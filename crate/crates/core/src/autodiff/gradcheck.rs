//! Central finite-difference checks for tape gradients.
//!
//! The checker only ever runs forward passes to build its numeric estimate,
//! so it stays independent of every backward rule it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of one finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: (usize, usize, f64, f64),
    /// Entries whose `+-eps` probes crossed a relu, max or l1 branch, where
    /// a central difference does not estimate the derivative.
    pub skipped: usize,
}

impl GradReport {
    /// Every compared entry is within `tol` and at least three quarters of
    /// all entries were compared rather than skipped at a branch boundary.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol && self.skipped * 4 <= self.checked + self.skipped
    }
}

/// Compares tape gradients of `build` against central differences.
///
/// `build` receives one trainable leaf per entry of `inputs` and returns the
/// output. Non-scalar outputs are reduced with a fixed random projection so
/// every output element contributes. The projection is evaluated in `f64`
/// on the numeric side to keep rounding noise below the comparison floor.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f32, seed: u64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<(Vec<f32>, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape.value(out).data().to_vec(), tape.branch_signature()))
    };

    let (probe, base_signature) = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f32> = if probe.len() == 1 {
        vec![1.0]
    } else {
        (0..probe.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let project = |out: &[f32]| -> f64 {
        out.iter()
            .zip(&weights)
            .map(|(&o, &w)| o as f64 * w as f64)
            .sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = tape.weighted_sum(out, &weights)?;
    tape.backward(loss)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (0, 0, 0.0, 0.0),
        skipped: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, &var) in vars.iter().enumerate() {
        let analytic = tape.grad(var);
        for ei in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ei];
            let (hi, lo) = (orig + eps, orig - eps);
            work[ti].data_mut()[ei] = hi;
            let (plus, sig_plus) = eval(&work)?;
            work[ti].data_mut()[ei] = lo;
            let (minus, sig_minus) = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped += 1;
                continue;
            }
            // divide by the step actually representable in f32
            let numeric = (project(&plus) - project(&minus)) / (hi as f64 - lo as f64);
            let a = analytic.data()[ei] as f64;
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ei, a, numeric);
            }
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[-1, 1]`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}
