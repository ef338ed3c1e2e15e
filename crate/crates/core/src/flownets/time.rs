use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Multiplier applied to `t` before the sinusoids.
pub const TIME_SCALE: f64 = 100.0;

/// Sinusoidal embedding of a flow time `t` in `[0, 1]`: `dim / 2` sines
/// followed by `dim / 2` cosines over geometrically spaced frequencies.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("time embedding dim {dim} must be even and >= 2")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = TIME_SCALE * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

/// Embeds one time per batch element into a `[batch, dim]` tensor.
pub fn time_embed_batch(ts: &[f64], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embed(t, dim)?);
    }
    Tensor::new(vec![ts.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time_is_sin_zero_cos_one() {
        let e = time_embed(0.0, 16).unwrap();
        assert!(e[..8].iter().all(|&v| v == 0.0));
        assert!(e[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deterministic_and_continuous() {
        assert_eq!(time_embed(0.37, 16).unwrap(), time_embed(0.37, 16).unwrap());
        let a = time_embed(0.5, 16).unwrap();
        let b = time_embed(0.5 + 1e-9, 16).unwrap();
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(time_embed(-0.01, 8).is_err());
        assert!(time_embed(1.01, 8).is_err());
        assert!(time_embed(0.5, 7).is_err());
    }
}
