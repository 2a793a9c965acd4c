use super::{Tape, Tensor, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("non-finite function value at coordinate {coordinate} (offset {offset:+e})")]
    NonFinite { coordinate: usize, offset: f64 },
    #[error("non-finite analytic gradient at coordinate {coordinate}")]
    NonFiniteGradient { coordinate: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn evaluate<F>(f: &F, point: &Tensor) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), false);
    let y = f(&mut tape, x)?;
    let value = tape.value(y);
    if !value.is_scalar() {
        return Err(TensorError::Contract(format!(
            "grad_check function must be scalar-valued, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences of step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    let y0 = tape.value(y).data().first().copied().unwrap_or(f64::NAN);
    if !y0.is_finite() {
        return Err(GradCheckError::NonFinite {
            coordinate: 0,
            offset: 0.0,
        });
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        if !analytic[i].is_finite() {
            return Err(GradCheckError::NonFiniteGradient { coordinate: i });
        }
        let original = probe.data()[i];
        let mut side = |offset: f64| -> Result<f64, GradCheckError> {
            probe.data_mut()[i] = original + offset;
            let v = evaluate(&f, &probe)?;
            if !v.is_finite() {
                return Err(GradCheckError::NonFinite {
                    coordinate: i,
                    offset,
                });
            }
            Ok(v)
        };
        let plus = side(h)?;
        let minus = side(-h)?;
        probe.data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
