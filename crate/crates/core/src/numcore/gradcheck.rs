//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Result};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Seed of the random cotangent used when `f` returns a non-scalar.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: FD_EPS,
            tol: FD_TOL,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputCheck {
    pub input: usize,
    pub max_rel_error: f64,
    /// Flat index of the element with the largest error.
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

/// Neumaier summation.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_output<F>(
    f: &F,
    inputs: &[Tensor],
    cotangent: &mut Option<Tensor>,
    seed: u64,
) -> Result<(Tape, Var, Vec<Var>)>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if tape.value(out).is_scalar() {
        return Ok((tape, out, vars));
    }
    let shape = tape.shape(out);
    let r = cotangent
        .get_or_insert_with(|| Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)))
        .clone();
    if r.shape() != shape.as_slice() {
        return Err(contract("function output shape changed between evaluations"));
    }
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod)?;
    Ok((tape, loss, vars))
}

/// Compare tape gradients of `f` at `inputs` against central differences.
/// Non-scalar outputs are contracted with a fixed random cotangent first.
pub fn check_gradients<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    check_gradients_with(f, inputs, GradCheckOptions::default())
}

pub fn check_gradients_with<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let mut cot = None;
    let (tape, loss, vars) = scalar_output(&f, inputs, &mut cot, opts.seed)?;
    let analytic = tape.grad(loss, &vars)?;
    drop(tape);

    // Differences are taken on the raw outputs before contracting, which keeps
    // cancellation in the contraction sum out of the numeric estimate.
    let raw = |probe: &[Tensor]| -> Result<Tensor> {
        let tape = Tape::new().with_finite_checks(true);
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out).clone();
        Ok(v)
    };
    let weights = match &cot {
        Some(r) => r.data().to_vec(),
        None => vec![1.0],
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst = InputCheck {
            input: i,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            let (hi, lo) = (orig + opts.eps, orig - opts.eps);
            probe[i].data_mut()[e] = hi;
            let plus = raw(&probe)?;
            probe[i].data_mut()[e] = lo;
            let minus = raw(&probe)?;
            probe[i].data_mut()[e] = orig;
            if plus.len() != weights.len() {
                return Err(contract("function output shape changed between evaluations"));
            }
            let diffs = plus
                .data()
                .iter()
                .zip(minus.data())
                .zip(&weights)
                .map(|((p, m), w)| (p - m) * w);
            let numeric = compensated_sum(diffs) / (hi - lo);
            let a = grad.data()[e];
            let err = rel_error(a, numeric);
            if err > worst.max_rel_error || e == 0 {
                worst = InputCheck {
                    input: i,
                    max_rel_error: err,
                    worst_element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
        checks.push(worst);
    }
    Ok(GradCheckReport {
        inputs: checks,
        tol: opts.tol,
    })
}
