//! Time-conditioned convolutional transformer stack used as the vector field
//! of the flow-matching models.
//!
//! Each layer has two residual branches, both modulated by adaptive layer
//! norm driven by the time embedding: a depthwise token convolution, then a
//! pointwise feed-forward. Self-attention is left out (see `DitConfig`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{modulate, Init, Linear, TokenConv};
use super::time::time_embed_batch;
use crate::autodiff::{Bound, Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub noise_dim: usize,
    pub condition_dim: usize,
    pub time_dim: usize,
    pub ff_mult: usize,
    /// Re-inject the projected condition at the start of every layer.
    pub cond_every_layer: bool,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            n_layers: 6,
            hidden: 8,
            kernel: 5,
            noise_dim: 8,
            condition_dim: 32,
            time_dim: 16,
            ff_mult: 2,
            cond_every_layer: true,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidArgument("n_layers must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel {} must be odd", self.kernel)));
        }
        if self.noise_dim == 0 || self.noise_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("noise_dim {} must be even", self.noise_dim)));
        }
        if self.hidden == 0 || self.condition_dim == 0 || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::InvalidArgument("hidden, condition_dim and time_dim must be positive (time_dim even)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DitLayer {
    cond: Option<Linear>,
    modulation: Linear,
    conv: TokenConv,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug)]
pub struct DitStack {
    pub config: DitConfig,
    in_x: Linear,
    in_cond: Linear,
    time_in: Linear,
    time_out: Linear,
    layers: Vec<DitLayer>,
    final_modulation: Linear,
    out: Linear,
}

impl DitStack {
    pub fn new<R: Rng + ?Sized>(config: DitConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let in_x = Linear::new(store, &format!("{prefix}in_x"), config.noise_dim, h, true, Init::Xavier, rng);
        let in_cond = Linear::new(store, &format!("{prefix}in_cond"), config.condition_dim, h, false, Init::Xavier, rng);
        let time_in = Linear::new(store, &format!("{prefix}time_in"), config.time_dim, h, true, Init::Xavier, rng);
        let time_out = Linear::new(store, &format!("{prefix}time_out"), h, h, true, Init::Xavier, rng);
        let layers = (0..config.n_layers)
            .map(|i| {
                let name = |s: &str| format!("{prefix}layers.{i}.{s}");
                DitLayer {
                    cond: config
                        .cond_every_layer
                        .then(|| Linear::new(store, &name("cond"), config.condition_dim, h, false, Init::Xavier, rng)),
                    modulation: Linear::new(store, &name("modulation"), h, 6 * h, true, Init::Xavier, rng),
                    conv: TokenConv::depthwise(store, &name("conv"), h, config.kernel, rng),
                    ff_in: Linear::new(store, &name("ff_in"), h, config.ff_mult * h, true, Init::Xavier, rng),
                    ff_out: Linear::new(store, &name("ff_out"), config.ff_mult * h, h, true, Init::Xavier, rng),
                }
            })
            .collect();
        let final_modulation = Linear::new(store, &format!("{prefix}final_modulation"), h, 2 * h, true, Init::Xavier, rng);
        let out = Linear::new(store, &format!("{prefix}out"), h, config.noise_dim, true, Init::Zeros, rng);
        Ok(DitStack {
            config,
            in_x,
            in_cond,
            time_in,
            time_out,
            layers,
            final_modulation,
            out,
        })
    }

    /// `x: [batch, tokens, noise_dim]`, `cond: [batch, tokens, condition_dim]`,
    /// `mask: [batch, tokens, 1]`, one flow time per batch element.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, cond: Var, ts: &[f64], mask: Var) -> Result<Var> {
        let (xs, cs) = (g.shape(x).to_vec(), g.shape(cond).to_vec());
        if xs.len() != 3 || cs.len() != 3 || xs[..2] != cs[..2] {
            return Err(Error::shape("dit_forward", format!("x {xs:?} vs cond {cs:?}")));
        }
        if xs[2] != self.config.noise_dim || cs[2] != self.config.condition_dim || ts.len() != xs[0] {
            return Err(Error::shape(
                "dit_forward",
                format!("x {xs:?}, cond {cs:?}, {} times; config {:?}", ts.len(), self.config),
            ));
        }
        let h_dim = self.config.hidden;
        let batch = xs[0];

        let temb = g.constant(time_embed_batch(ts, self.config.time_dim)?);
        let te = self.time_in.forward(g, p, temb)?;
        let te = g.silu(te)?;
        let te = self.time_out.forward(g, p, te)?;
        let te = g.silu(te)?;

        let hx = self.in_x.forward(g, p, x)?;
        let hc = self.in_cond.forward(g, p, cond)?;
        let mut h = g.add(hx, hc)?;
        h = g.mul(h, mask)?;

        for layer in &self.layers {
            if let Some(c) = &layer.cond {
                let hc = c.forward(g, p, cond)?;
                h = g.add(h, hc)?;
            }
            let m = layer.modulation.forward(g, p, te)?;
            let m = g.reshape(m, &[batch, 1, 6 * h_dim])?;
            let chunk = |g: &mut Graph, i: usize| g.slice(m, 2, i * h_dim, (i + 1) * h_dim);
            let (shift1, scale1, gate1) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
            let (shift2, scale2, gate2) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);

            let a = modulate(g, h, shift1, scale1)?;
            let a = g.mul(a, mask)?;
            let a = layer.conv.forward(g, p, a)?;
            let a = g.mul(a, gate1)?;
            h = g.add(h, a)?;

            let b = modulate(g, h, shift2, scale2)?;
            let b = layer.ff_in.forward(g, p, b)?;
            let b = g.gelu(b)?;
            let b = layer.ff_out.forward(g, p, b)?;
            let b = g.mul(b, gate2)?;
            h = g.add(h, b)?;
            h = g.mul(h, mask)?;
        }

        let m = self.final_modulation.forward(g, p, te)?;
        let m = g.reshape(m, &[batch, 1, 2 * h_dim])?;
        let shift = g.slice(m, 2, 0, h_dim)?;
        let scale = g.slice(m, 2, h_dim, 2 * h_dim)?;
        let o = modulate(g, h, shift, scale)?;
        let o = self.out.forward(g, p, o)?;
        g.mul(o, mask)
    }
}
