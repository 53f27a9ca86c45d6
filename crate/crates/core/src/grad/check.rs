//! Central-difference gradient checking, used as a test oracle.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub h: f64,
    /// Coordinates to check; `None` checks all of them.
    pub coords: Option<Vec<usize>>,
    /// Skip coordinates whose input magnitude is below this radius. Set to
    /// `10·h` when the function applies relu directly to its input.
    pub kink_radius: Option<f64>,
}

impl FdOptions {
    pub fn new(h: f64) -> Self {
        FdOptions {
            h,
            coords: None,
            kink_radius: None,
        }
    }

    pub fn with_relu_kinks(mut self) -> Self {
        self.kink_radius = Some(10.0 * self.h);
        self
    }

    pub fn with_coords(mut self, coords: Vec<usize>) -> Self {
        self.coords = Some(coords);
        self
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Max over coordinates of `|analytic − central| / (|central| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    finite_diff_check_with(f, x, &FdOptions::new(h)).map(|r| r.max_rel_error)
}

pub fn finite_diff_check_with<F>(f: F, x: &Tensor, opts: &FdOptions) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let loss = f(&tape, leaf)?;
        tape.backward(loss)?;
        tape.grad(leaf).unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&tape, v)?;
        let y = out.item();
        if !y.is_finite() {
            return Err(Error::NonFinite {
                context: "finite-difference evaluation".into(),
            });
        }
        Ok(y)
    };
    let coords: Vec<usize> = match &opts.coords {
        Some(c) => c.clone(),
        None => (0..x.len()).collect(),
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in coords {
        if i >= x.len() {
            return Err(Error::invalid(format!("coordinate {i} out of range")));
        }
        if let Some(r) = opts.kink_radius {
            if x.data()[i].abs() < r {
                report.skipped += 1;
                continue;
            }
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * opts.h);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
