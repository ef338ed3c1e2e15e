use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Init, Linear, TokenConv};
use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub condition_dim: usize,
    pub out_dim: usize,
    pub dropout: f64,
}

impl Default for DetConfig {
    fn default() -> Self {
        DetConfig {
            hidden: 16,
            kernel: 3,
            condition_dim: 32,
            out_dim: 1,
            dropout: 0.1,
        }
    }
}

/// Convolutional variance predictor: two conv/relu/layer-norm/dropout
/// blocks followed by a per-token linear head.
#[derive(Clone, Debug)]
pub struct DetPredictor {
    pub config: DetConfig,
    conv1: TokenConv,
    conv2: TokenConv,
    head: Linear,
}

impl DetPredictor {
    pub fn new<R: Rng + ?Sized>(config: DetConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        if config.kernel % 2 == 0 || config.hidden == 0 || config.out_dim == 0 || !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::InvalidArgument(format!("invalid predictor config {config:?}")));
        }
        let h = config.hidden;
        let conv1 = TokenConv::new(store, &format!("{prefix}conv1"), config.condition_dim, h, config.kernel, 1, rng);
        let conv2 = TokenConv::new(store, &format!("{prefix}conv2"), h, h, config.kernel, 1, rng);
        let head = Linear::new(store, &format!("{prefix}head"), h, config.out_dim, true, Init::Xavier, rng);
        Ok(DetPredictor { config, conv1, conv2, head })
    }

    fn dropout<R: Rng + ?Sized>(&self, g: &mut Graph, x: Var, rng: Option<&mut R>) -> Result<Var> {
        match rng {
            Some(rng) if self.config.dropout > 0.0 => {
                let keep = 1.0 - self.config.dropout;
                let shape = g.shape(x).to_vec();
                let m = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                let m = g.constant(m);
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    /// `cond: [batch, tokens, condition_dim]` to `[batch, tokens, out_dim]`.
    /// Dropout is applied only when a training rng is supplied.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, p: &Bound, cond: Var, mask: Var, mut rng: Option<&mut R>) -> Result<Var> {
        let cs = g.shape(cond);
        if cs.len() != 3 || cs[2] != self.config.condition_dim {
            return Err(Error::shape("det_predict", format!("cond {cs:?}")));
        }
        let mut h = g.mul(cond, mask)?;
        for conv in [&self.conv1, &self.conv2] {
            h = conv.forward(g, p, h)?;
            h = g.relu(h)?;
            h = g.layernorm(h, 1e-5)?;
            h = self.dropout(g, h, rng.as_deref_mut())?;
            h = g.mul(h, mask)?;
        }
        let o = self.head.forward(g, p, h)?;
        g.mul(o, mask)
    }
}
