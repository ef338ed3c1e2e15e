use rand::Rng;

use crate::autodiff::{xavier_uniform, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Zeros,
}

/// `y = x W + b` over the last axis. `W` is stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Xavier => xavier_uniform(&[in_dim, out_dim], in_dim, out_dim, rng),
            Init::Zeros => Tensor::zeros(&[in_dim, out_dim]),
        };
        let w = store.add(format!("{name}.weight"), w);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(self.w))?;
        match self.b {
            Some(b) => g.add(y, p.get(b)),
            None => Ok(y),
        }
    }
}

/// Grouped conv over the token axis of a `[batch, tokens, channels]` input,
/// with "same" zero padding (odd kernel).
#[derive(Clone, Debug)]
pub struct TokenConv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub groups: usize,
    pub out_channels: usize,
}

impl TokenConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let cpg = in_channels / groups;
        let fan_in = cpg * kernel;
        let fan_out = out_channels / groups * kernel;
        let w = store.add(
            format!("{name}.weight"),
            xavier_uniform(&[out_channels, cpg, kernel], fan_in, fan_out, rng),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels, 1]));
        TokenConv {
            w,
            b,
            kernel,
            groups,
            out_channels,
        }
    }

    pub fn depthwise<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(store, name, channels, channels, kernel, channels, rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let xt = g.transpose_last2(x)?;
        let y = g.conv1d(xt, p.get(self.w), self.kernel / 2, self.groups)?;
        let y = g.add(y, p.get(self.b))?;
        g.transpose_last2(y)
    }
}

/// `layernorm(x) * (1 + scale) + shift`
pub fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layernorm(x, 1e-5)?;
    let s = g.add_scalar(scale, 1.0)?;
    let n = g.mul(n, s)?;
    g.add(n, shift)
}
