//! Central finite-difference gradient checks.

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Use the fourth-order central stencil
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h` instead of
    /// `(f(x+h) - f(x-h)) / 2h`.
    pub fourth_order: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-6,
            fourth_order: false,
        }
    }
}

/// Comparison at one input coordinate.
#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    /// Inputs skipped because they do not require gradients.
    pub frozen_inputs: Vec<usize>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<N, F>(f: &F, inputs: &[Tensor<N>]) -> Result<f64>
where
    N: Scalar,
    F: Fn(&mut Tape<N>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item().as_f64())
}

/// Checks the tape gradient of `f` against central differences of `f`, both
/// in precision `T`. Inputs with `requires_grad == false` are excluded.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let wide: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    grad_check_mixed(&f, &f, &wide, opts)
}

/// Checks the tape gradient of `analytic` (precision `A`) against central
/// differences of `numeric` (precision `N`). Both closures must compute the
/// same function; running the reference in `f64` keeps difference noise
/// out of an `f32` check.
pub fn grad_check_mixed<A, N, FA, FN>(
    analytic: &FA,
    numeric: &FN,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    A: Scalar,
    N: Scalar,
    FA: Fn(&mut Tape<A>, &[Var]) -> Result<Var>,
    FN: Fn(&mut Tape<N>, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }

    let mut tape = Tape::<A>::new();
    let a_inputs: Vec<Tensor<A>> = inputs.iter().map(Tensor::cast).collect();
    let vars: Vec<Var> = a_inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = analytic(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut n_inputs: Vec<Tensor<N>> = inputs.iter().map(Tensor::cast).collect();
    let mut coords = Vec::new();
    let mut frozen_inputs = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            frozen_inputs.push(i);
            continue;
        }
        let g = grads.get(vars[i]);
        for j in 0..input.len() {
            let x = input.data()[j];
            let mut diff = |h: f64| -> Result<(f64, f64)> {
                let plus = N::lit(x + h);
                let minus = N::lit(x - h);
                n_inputs[i].data_mut()[j] = plus;
                let fp = evaluate(numeric, &n_inputs)?;
                n_inputs[i].data_mut()[j] = minus;
                let fm = evaluate(numeric, &n_inputs)?;
                n_inputs[i].data_mut()[j] = N::lit(x);
                Ok((fp - fm, plus.as_f64() - minus.as_f64()))
            };
            let (d1, w1) = diff(opts.step)?;
            let num = if opts.fourth_order {
                let (d2, w2) = diff(2.0 * opts.step)?;
                // 12h from the widths actually realised after rounding.
                (8.0 * d1 - d2) / (3.0 * w1 + 1.5 * w2)
            } else {
                d1 / w1
            };
            let ana = g.map_or(0.0, |g| g[j].as_f64());
            coords.push(CoordCheck {
                input: i,
                index: j,
                analytic: ana,
                numeric: num,
                rel_error: relative_error(ana, num),
            });
        }
    }
    let max_rel_error = coords.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= opts.tol,
        max_rel_error,
        tol: opts.tol,
        coords,
        frozen_inputs,
    })
}
