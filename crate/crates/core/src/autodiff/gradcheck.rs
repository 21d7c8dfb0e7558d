use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative discrepancy between an analytic and a finite-difference derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let t = tape.value(out);
    if t.len() != 1 {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Max relative error between the tape gradient of scalar `f` at `x` and central
/// differences with the given `step`, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, step, &coords)
}

/// As [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor<f64>, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    if tape.value(out).len() != 1 {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let analytic = tape.backward(out)?.get(v);
    drop(tape);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
