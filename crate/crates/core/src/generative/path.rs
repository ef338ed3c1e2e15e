use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Conditional optimal-transport interpolant and its target velocity:
/// `x_t = (1 - (1 - sigma_min) t) x0 + t x1`, `u = x1 - (1 - sigma_min) x0`.
pub fn ot_path(x0: f64, x1: f64, t: f64, sigma_min: f64) -> (f64, f64) {
    let k = 1.0 - sigma_min;
    ((1.0 - k * t) * x0 + t * x1, x1 - k * x0)
}

/// Element-wise [`ot_path`] over equally shaped tensors, with one `t` per
/// leading batch element.
pub fn ot_path_batch(x0: &Tensor, x1: &Tensor, ts: &[f64], sigma_min: f64) -> Result<(Tensor, Tensor)> {
    if x0.shape() != x1.shape() || x0.shape().first() != Some(&ts.len()) {
        return Err(Error::shape(
            "ot_path",
            format!("x0 {:?}, x1 {:?}, {} times", x0.shape(), x1.shape(), ts.len()),
        ));
    }
    let per = x0.numel() / ts.len().max(1);
    let mut xt = Vec::with_capacity(x0.numel());
    let mut u = Vec::with_capacity(x0.numel());
    for (i, (&a, &b)) in x0.data().iter().zip(x1.data()).enumerate() {
        let (p, v) = ot_path(a, b, ts[i / per], sigma_min);
        xt.push(p);
        u.push(v);
    }
    Ok((
        Tensor::new(x0.shape().to_vec(), xt)?,
        Tensor::new(x0.shape().to_vec(), u)?,
    ))
}

fn group(noise_dim: usize, out_dim: usize) -> Result<usize> {
    if out_dim == 0 || noise_dim % out_dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "noise_dim {noise_dim} is not divisible by out_dim {out_dim}"
        )));
    }
    Ok(noise_dim / out_dim)
}

/// Replicates each of the `out_dim` scalars of the last axis into a group of
/// `noise_dim / out_dim` adjacent channels.
pub fn lift_contour(contour: &Tensor, noise_dim: usize) -> Result<Tensor> {
    let out_dim = *contour.shape().last().ok_or_else(|| Error::shape("lift", "scalar contour"))?;
    let r = group(noise_dim, out_dim)?;
    let mut data = Vec::with_capacity(contour.numel() * r);
    for &v in contour.data() {
        data.extend(std::iter::repeat_n(v, r));
    }
    let mut shape = contour.shape().to_vec();
    *shape.last_mut().unwrap() = noise_dim;
    Tensor::new(shape, data)
}

/// Averages each channel group back to one scalar. Offsets are taken from
/// the first channel so a group of identical values maps back exactly.
pub fn unlift_contour(lifted: &Tensor, out_dim: usize) -> Result<Tensor> {
    let noise_dim = *lifted.shape().last().ok_or_else(|| Error::shape("unlift", "scalar input"))?;
    let r = group(noise_dim, out_dim)?;
    let data = lifted
        .data()
        .chunks(r)
        .map(|c| c[0] + c.iter().map(|v| v - c[0]).sum::<f64>() / r as f64)
        .collect();
    let mut shape = lifted.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn endpoints() {
        assert_eq!(ot_path(0.7, -1.3, 0.0, 1e-4).0, 0.7);
        assert_eq!(ot_path(0.7, -1.3, 1.0, 0.0).0, -1.3);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(ot_path(0.0, 2.5, t, 0.0).1, 2.5);
        }
    }

    #[test]
    fn lift_replicates() {
        let c = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let l = lift_contour(&c, 8).unwrap();
        assert_eq!(l.shape(), &[3, 8]);
        assert!(l.data()[8..16].iter().all(|&v| v == -2.0));
        assert!(lift_contour(&Tensor::zeros(&[2, 3]), 8).is_err());
    }

    #[test]
    fn unlift_of_noise_has_reduced_variance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let noise = Tensor::from_fn(&[n, 8], |_| StandardNormal.sample(&mut rng));
        let u = unlift_contour(&noise, 1).unwrap();
        let mean = u.data().iter().sum::<f64>() / n as f64;
        let var = u.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 0.125).abs() < 0.125 * 0.02, "{var}");
    }

    proptest! {
        #[test]
        fn unlift_inverts_lift(vals in proptest::collection::vec(-50.0f64..50.0, 1..30), joint in any::<bool>()) {
            let out_dim = if joint { 3 } else { 1 };
            let n = vals.len() / out_dim;
            prop_assume!(n > 0);
            let c = Tensor::new(vec![n, out_dim], vals[..n * out_dim].to_vec()).unwrap();
            let noise_dim = if joint { 12 } else { 8 };
            let back = unlift_contour(&lift_contour(&c, noise_dim).unwrap(), out_dim).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
