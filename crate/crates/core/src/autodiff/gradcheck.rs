//! Central finite-difference oracle for tape gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Denominator floor of the relative error, so coordinates whose true gradient is
/// zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Kink-safe sampling rejects a point whose distance to the nearest kink is below
/// this multiple of the step size.
pub const KINK_MARGIN_STEPS: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    /// Maximum relative error per parameter tensor.
    pub per_param: Vec<T>,
    pub max_rel_error: T,
    pub coords_checked: usize,
    pub tol: T,
    pub passed: bool,
}

pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::of(REL_ERROR_FLOOR));
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Copy, Debug)]
pub struct FiniteDiff<T> {
    pub h: T,
    pub tol: T,
    /// Check at most this many evenly spaced coordinates of each parameter.
    pub max_coords_per_param: Option<usize>,
}

fn eval_value<T, F>(f: &F, params: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let v = f(&tape, &vars)?.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "finite-difference objective".into(),
        });
    }
    Ok(v)
}

impl<T: Scalar> FiniteDiff<T> {
    pub fn new(h: T, tol: T) -> Self {
        Self {
            h,
            tol,
            max_coords_per_param: None,
        }
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords_per_param = Some(n);
        self
    }

    /// Compares tape gradients of `f` against `(f(p+h) − f(p−h)) / 2h`, coordinate by
    /// coordinate.
    pub fn check<F>(&self, f: F, params: &[Tensor<T>]) -> Result<GradCheckReport<T>>
    where
        F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
    {
        if self.h <= T::zero() {
            return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
        }
        let analytic: Vec<Tensor<T>> = {
            let tape = Tape::new();
            let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
            let loss = f(&tape, &vars)?;
            if !loss.item().is_finite() {
                return Err(Error::NonFinite {
                    context: "finite-difference objective".into(),
                });
            }
            tape.backward(loss)?;
            vars.iter()
                .map(|v| v.grad().expect("param gradient populated"))
                .collect()
        };

        let two_h = self.h + self.h;
        let mut work: Vec<Tensor<T>> = params.to_vec();
        let mut per_param = Vec::with_capacity(params.len());
        let mut coords_checked = 0;
        for (pi, grad) in analytic.iter().enumerate() {
            let n = params[pi].numel();
            let stride = match self.max_coords_per_param {
                Some(m) if m > 0 && m < n => n.div_ceil(m),
                _ => 1,
            };
            let mut worst = T::zero();
            for j in (0..n).step_by(stride) {
                let orig = params[pi].data()[j];
                work[pi].data_mut()[j] = orig + self.h;
                let fp = eval_value(&f, &work)?;
                work[pi].data_mut()[j] = orig - self.h;
                let fm = eval_value(&f, &work)?;
                work[pi].data_mut()[j] = orig;
                let numeric = (fp - fm) / two_h;
                worst = worst.max(relative_error(grad.data()[j], numeric));
                coords_checked += 1;
            }
            per_param.push(worst);
        }
        let max_rel_error = per_param.iter().copied().fold(T::zero(), T::max);
        Ok(GradCheckReport {
            per_param,
            max_rel_error,
            coords_checked,
            tol: self.tol,
            passed: max_rel_error <= self.tol,
        })
    }
}

/// Full-coordinate check of `f` at `params`.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], h: T, tol: T) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    FiniteDiff::new(h, tol).check(f, params)
}

/// Draws samples until one sits at least `10·h` away from every kink.
///
/// `sample` returns a candidate and its kink margin (smallest distance from any
/// pre-activation to a kink). Returns the accepted sample and the number of
/// rejected draws.
pub fn kink_safe_sample<S, T: Scalar>(
    h: T,
    max_tries: usize,
    mut sample: impl FnMut() -> Result<(S, T)>,
) -> Result<(S, usize)> {
    let need = T::of(KINK_MARGIN_STEPS) * h;
    for rejected in 0..max_tries {
        let (s, margin) = sample()?;
        if margin >= need {
            return Ok((s, rejected));
        }
    }
    Err(Error::Degenerate(format!(
        "no kink-safe sample in {max_tries} draws"
    )))
}
