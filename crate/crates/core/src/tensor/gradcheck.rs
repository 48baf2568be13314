//! Central-difference gradient verification, run at 64-bit precision.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Checks the analytic gradients of a scalar-valued closure against central
/// differences at the given `point`s.
///
/// Returns the max over all input elements of
/// `|analytic − numeric| / max(1, |numeric|)`.
///
/// The closure must be a pure function of its inputs: anything stochastic
/// inside (dropout masks) has to be replayed from a fixed stream so that
/// every invocation sees the same draw.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Parameter("grad_check step must be > 0".into()));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Dimension(
            "grad_check closure must produce a scalar".into(),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts
            .iter()
            .map(|p| t.leaf(p.clone(), false))
            .collect::<Result<_>>()?;
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor<f64>> = points.to_vec();
    for (ti, point) in points.iter().enumerate() {
        for ei in 0..point.numel() {
            let x = point.data()[ei];
            perturbed[ti].data_mut()[ei] = x + step;
            let plus = eval(&perturbed)?;
            perturbed[ti].data_mut()[ei] = x - step;
            let minus = eval(&perturbed)?;
            perturbed[ti].data_mut()[ei] = x;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(
                    "non-finite value during finite-difference evaluation".into(),
                ));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti].data()[ei];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
