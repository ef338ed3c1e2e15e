use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A time-dependent velocity field `v(x, t)` on `t` in `[0, 1]`.
pub trait VectorField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VectorField for F {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

fn euler_step(field: &dyn VectorField, x: &mut Tensor, t: f64, dt: f64) -> Result<()> {
    let v = field.velocity(x, t)?;
    if v.shape() != x.shape() {
        return Err(Error::shape("euler_solve", format!("velocity {:?} vs state {:?}", v.shape(), x.shape())));
    }
    for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
        *xi += dt * vi;
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "euler_solve" });
    }
    Ok(())
}

/// Explicit Euler from `t = 0` (noise) to `t = 1` (data):
/// `x_{k+1} = x_k + v(x_k, k / steps) / steps`.
pub fn euler_solve(field: &dyn VectorField, x0: &Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("solver steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        euler_step(field, &mut x, k as f64 * dt, dt)?;
    }
    Ok(x)
}

/// Same as [`euler_solve`] but keeps every intermediate state, `steps + 1` in total.
pub fn euler_trajectory(field: &dyn VectorField, x0: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("solver steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut path = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    path.push(x.clone());
    for k in 0..steps {
        euler_step(field, &mut x, k as f64 * dt, dt)?;
        path.push(x.clone());
    }
    Ok(path)
}
