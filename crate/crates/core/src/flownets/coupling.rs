//! Conditional affine coupling layers for the normalizing flow.
//!
//! The forward direction maps data to the base distribution:
//! `y_b = x_b * exp(s(x_a, c)) + t(x_a, c)` with `x_a` passed through,
//! and `s` bounded by `s_max * tanh(. / s_max)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Init, Linear, TokenConv};
use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub noise_dim: usize,
    pub condition_dim: usize,
    pub s_max: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        CouplingConfig {
            n_layers: 6,
            hidden: 8,
            kernel: 5,
            noise_dim: 8,
            condition_dim: 32,
            s_max: 5.0,
        }
    }
}

impl CouplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim < 2 || self.noise_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("noise_dim {} must be even", self.noise_dim)));
        }
        if self.n_layers == 0 || self.kernel % 2 == 0 || self.hidden == 0 || self.s_max <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid coupling config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CouplingLayer {
    /// When true the first half of the channels passes through unchanged.
    pub keep_first: bool,
    half: usize,
    s_max: f64,
    in_a: Linear,
    in_cond: Linear,
    conv: TokenConv,
    mid: Linear,
    out: Linear,
}

impl CouplingLayer {
    pub fn new<R: Rng + ?Sized>(
        config: &CouplingConfig,
        keep_first: bool,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let half = config.noise_dim / 2;
        let h = config.hidden;
        Ok(CouplingLayer {
            keep_first,
            half,
            s_max: config.s_max,
            in_a: Linear::new(store, &format!("{prefix}in_a"), half, h, true, Init::Xavier, rng),
            in_cond: Linear::new(store, &format!("{prefix}in_cond"), config.condition_dim, h, false, Init::Xavier, rng),
            conv: TokenConv::depthwise(store, &format!("{prefix}conv"), h, config.kernel, rng),
            mid: Linear::new(store, &format!("{prefix}mid"), h, h, true, Init::Xavier, rng),
            out: Linear::new(store, &format!("{prefix}out"), h, 2 * half, true, Init::Zeros, rng),
        })
    }

    fn split(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let d = 2 * self.half;
        let first = g.slice(x, 2, 0, self.half)?;
        let second = g.slice(x, 2, self.half, d)?;
        Ok(if self.keep_first { (first, second) } else { (second, first) })
    }

    fn join(&self, g: &mut Graph, kept: Var, moved: Var) -> Result<Var> {
        if self.keep_first {
            g.concat(&[kept, moved], 2)
        } else {
            g.concat(&[moved, kept], 2)
        }
    }

    /// Bounded log-scale and shift, both `[batch, tokens, half]`, zero on padding.
    fn scale_shift(&self, g: &mut Graph, p: &Bound, kept: Var, cond: Var, mask: Var) -> Result<(Var, Var)> {
        let a = self.in_a.forward(g, p, kept)?;
        let c = self.in_cond.forward(g, p, cond)?;
        let h = g.add(a, c)?;
        let h = g.mul(h, mask)?;
        let h = self.conv.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.mid.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let o = self.out.forward(g, p, h)?;
        let raw_s = g.slice(o, 2, 0, self.half)?;
        let shift = g.slice(o, 2, self.half, 2 * self.half)?;
        let s = g.scale(raw_s, 1.0 / self.s_max)?;
        let s = g.tanh(s)?;
        let s = g.scale(s, self.s_max)?;
        let s = g.mul(s, mask)?;
        let shift = g.mul(shift, mask)?;
        Ok((s, shift))
    }

    fn check(&self, g: &Graph, x: Var, cond: Var) -> Result<()> {
        let (xs, cs) = (g.shape(x), g.shape(cond));
        if xs.len() != 3 || cs.len() != 3 || xs[..2] != cs[..2] || xs[2] != 2 * self.half {
            return Err(Error::shape("coupling", format!("x {xs:?} vs cond {cs:?}")));
        }
        Ok(())
    }

    /// Returns `y` and the per-entry log-scales (sum them for the log-det).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, cond: Var, mask: Var) -> Result<(Var, Var)> {
        self.check(g, x, cond)?;
        let (kept, moved) = self.split(g, x)?;
        let (s, shift) = self.scale_shift(g, p, kept, cond, mask)?;
        let e = g.exp(s)?;
        let moved = g.mul(moved, e)?;
        let moved = g.add(moved, shift)?;
        let y = self.join(g, kept, moved)?;
        Ok((y, s))
    }

    pub fn inverse(&self, g: &mut Graph, p: &Bound, y: Var, cond: Var, mask: Var) -> Result<Var> {
        self.check(g, y, cond)?;
        let (kept, moved) = self.split(g, y)?;
        let (s, shift) = self.scale_shift(g, p, kept, cond, mask)?;
        let neg = g.scale(s, -1.0)?;
        let e = g.exp(neg)?;
        let moved = g.sub(moved, shift)?;
        let moved = g.mul(moved, e)?;
        self.join(g, kept, moved)
    }
}

/// Stack of couplings with alternating halves.
#[derive(Clone, Debug)]
pub struct CouplingStack {
    pub config: CouplingConfig,
    pub layers: Vec<CouplingLayer>,
}

impl CouplingStack {
    pub fn new<R: Rng + ?Sized>(config: CouplingConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|i| CouplingLayer::new(&config, i % 2 == 0, store, &format!("{prefix}couplings.{i}."), rng))
            .collect::<Result<_>>()?;
        Ok(CouplingStack { config, layers })
    }

    /// Data to base. Returns `z` and the summed log-scales of every layer.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, cond: Var, mask: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut log_scales = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, s) = layer.forward(g, p, h, cond, mask)?;
            h = y;
            log_scales.push(s);
        }
        Ok((h, log_scales))
    }

    /// Base to data.
    pub fn inverse(&self, g: &mut Graph, p: &Bound, z: Var, cond: Var, mask: Var) -> Result<Var> {
        let mut h = z;
        for layer in self.layers.iter().rev() {
            h = layer.inverse(g, p, h, cond, mask)?;
        }
        Ok(h)
    }
}

/// Log-det per batch element from the per-entry log-scales `[batch, tokens, half]`.
pub fn log_det_per_sequence(g: &Graph, log_scales: &[Var]) -> Vec<f64> {
    let Some(first) = log_scales.first() else {
        return Vec::new();
    };
    let batch = g.shape(*first)[0];
    let mut out = vec![0.0; batch];
    for &s in log_scales {
        let t: &Tensor = g.value(s);
        let per = t.numel() / batch;
        for (b, o) in out.iter_mut().enumerate() {
            *o += t.data()[b * per..(b + 1) * per].iter().sum::<f64>();
        }
    }
    out
}
