//! Gradient verification against central finite differences.
//!
//! The checker is deliberately independent of the backward pass: it only ever
//! calls the forward evaluation of the function under test, perturbing one
//! parameter coordinate at a time. 64-bit floats are required; at 32-bit the
//! difference-quotient noise is larger than the tolerances being verified.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A differentiable scalar function of a parameter set: given a fresh tape
/// and the registered parameter vars, builds the loss and returns its var.
pub trait ScalarFn: Sync {
    fn eval(&self, tape: &mut Tape<f64>, params: &[Var]) -> Result<Var>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    fn eval(&self, tape: &mut Tape<f64>, params: &[Var]) -> Result<Var> {
        self(tape, params)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub eps: f64,
    /// Upper bound on sampled coordinates; all coordinates are probed when
    /// the parameter set is smaller than this.
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            eps: 1e-5,
            max_probes: 256,
            seed: 0x5eed,
        }
    }
}

/// Forward value of `f` at the given parameters.
pub fn eval_scalar(f: &dyn ScalarFn, params: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f.eval(&mut tape, &vars)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss value {v}")));
    }
    Ok(v)
}

/// Central finite difference of `f` along one coordinate of one parameter.
pub fn finite_diff(
    f: &dyn ScalarFn,
    params: &[Tensor<f64>],
    param_idx: usize,
    coord: usize,
    eps: f64,
) -> Result<f64> {
    let mut plus = params.to_vec();
    plus[param_idx].data_mut()[coord] += eps;
    let mut minus = params.to_vec();
    minus[param_idx].data_mut()[coord] -= eps;
    Ok((eval_scalar(f, &plus)? - eval_scalar(f, &minus)?) / (2.0 * eps))
}

/// Analytic gradients of `f` via one backward pass, one tensor per parameter
/// (zeros where no gradient flowed).
pub fn analytic_grads(f: &dyn ScalarFn, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f.eval(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
}

/// Compares a supplied gradient against finite differences of `f`, returning
/// the max over probed coordinates of
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
///
/// Exposed separately from [`grad_check`] so tests can feed it a deliberately
/// corrupted gradient and confirm the detector fires.
pub fn compare_to_finite_diff(
    f: &dyn ScalarFn,
    params: &[Tensor<f64>],
    grads: &[Tensor<f64>],
    opts: &GradCheckOpts,
) -> Result<f64> {
    let coords = probe_coords(params, opts);
    let errs = map_probes(&coords, |&(pi, ci)| {
        let fd = finite_diff(f, params, pi, ci, opts.eps)?;
        let ad = grads[pi].data()[ci];
        Ok(rel_error(ad, fd))
    })?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Runs [`analytic_grads`] and verifies them against central differences.
/// Returns the max relative error over sampled coordinates.
pub fn grad_check(f: &dyn ScalarFn, params: &[Tensor<f64>], opts: &GradCheckOpts) -> Result<f64> {
    let grads = analytic_grads(f, params)?;
    compare_to_finite_diff(f, params, &grads, opts)
}

fn rel_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1.0f64.max(ad.abs()).max(fd.abs())
}

/// Every coordinate when the parameter set is small, otherwise a seeded
/// sample without replacement of `max_probes` coordinates.
fn probe_coords(params: &[Tensor<f64>], opts: &GradCheckOpts) -> Vec<(usize, usize)> {
    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |ci| (pi, ci)))
        .collect();
    if coords.len() > opts.max_probes {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        coords.shuffle(&mut rng);
        coords.truncate(opts.max_probes);
    }
    coords
}

#[cfg(feature = "parallel")]
fn map_probes<T: Send>(
    coords: &[(usize, usize)],
    f: impl Fn(&(usize, usize)) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    coords.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_probes<T>(
    coords: &[(usize, usize)],
    f: impl Fn(&(usize, usize)) -> Result<T>,
) -> Result<Vec<T>> {
    coords.iter().map(f).collect()
}
