//! Central finite-difference verification of tape gradients.
//!
//! The numeric side re-evaluates the loss through a no-grad tape, so it stays
//! independent of the backward path it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::{Result, Tensor, TensorError};

/// Relative-error denominators are floored here so that near-zero gradients
/// compare absolutely instead of blowing up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// How many coordinates were perturbed.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Checks the tape gradient of `f` with respect to `x` against central
/// differences with step 1e-5 * max(1, |x_i|), over every coordinate.
///
/// `f` must build a scalar loss from its argument and be deterministic.
pub fn finite_diff_check<F>(f: &F, x: &Tensor<f64>, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_coords(f, x, tol, &coords)
}

/// Same as [`finite_diff_check`] but perturbing at most `max_coords`
/// coordinates, chosen deterministically from `seed`. Used for parameter
/// blocks too large for a full sweep.
pub fn finite_diff_check_sampled<F>(
    f: &F,
    x: &Tensor<f64>,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let n = x.numel();
    if n <= max_coords {
        return finite_diff_check(f, x, tol);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = vec![false; n];
    let mut coords = Vec::with_capacity(max_coords);
    while coords.len() < max_coords {
        let i = rng.random_range(0..n);
        if !picked[i] {
            picked[i] = true;
            coords.push(i);
        }
    }
    coords.sort_unstable();
    finite_diff_check_coords(f, x, tol, &coords)
}

fn finite_diff_check_coords<F>(
    f: &F,
    x: &Tensor<f64>,
    _tol: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    // analytic gradient
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let loss = f(&mut tape, xv)?;
    let lt = tape.value(loss);
    if lt.numel() != 1 {
        return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
    }
    if !lt.data()[0].is_finite() {
        return Err(TensorError::NonFinite("finite_diff_check loss"));
    }
    tape.backward(loss)?;
    let analytic: Vec<f64> = tape
        .grad(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let xv = tape.leaf(t.clone());
        let loss = f(&mut tape, xv)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite("finite_diff_check perturbed loss"));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: coords.len(),
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        let h = 1e-5 * orig.abs().max(1.0);
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = rel_err(analytic[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
