use nalgebra::DVector;

use crate::error::{Error, Result};

/// One classical fourth-order Runge-Kutta step of `x' = f(t, x)`.
///
/// Fails with [`Error::NonFinite`] if any stage or the result is not finite.
pub fn rk4_step<F>(mut f: F, t: f64, x: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let half = 0.5 * dt;
    let mut stage = |t: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
        let d = f(t, x)?;
        if d.iter().all(|v| v.is_finite()) {
            Ok(d)
        } else {
            Err(Error::NonFinite { t })
        }
    };
    let k1 = stage(t, x)?;
    let k2 = stage(t + half, &(x + &k1 * half))?;
    let k3 = stage(t + half, &(x + &k2 * half))?;
    let k4 = stage(t + dt, &(x + &k3 * dt))?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFinite { t: t + dt })
    }
}
