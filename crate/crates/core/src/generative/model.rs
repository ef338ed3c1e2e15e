use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::path::{lift_contour, ot_path_batch, unlift_contour};
use super::solver::{euler_solve, VectorField};
use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::flownets::{CouplingConfig, CouplingStack, DetConfig, DetPredictor, DitConfig, DitStack};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "NF")]
    Nf,
    #[serde(rename = "CFM")]
    Cfm,
    #[serde(rename = "RF")]
    Rf,
    #[serde(rename = "DET")]
    Det,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Nf, ModelKind::Cfm, ModelKind::Rf, ModelKind::Det];

    pub fn is_stochastic(self) -> bool {
        self != ModelKind::Det
    }

    pub fn is_ode(self) -> bool {
        matches!(self, ModelKind::Cfm | ModelKind::Rf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Nf => "NF",
            ModelKind::Cfm => "CFM",
            ModelKind::Rf => "RF",
            ModelKind::Det => "DET",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NF" => Ok(ModelKind::Nf),
            "CFM" => Ok(ModelKind::Cfm),
            "RF" => Ok(ModelKind::Rf),
            "DET" => Ok(ModelKind::Det),
            _ => Err(Error::InvalidArgument(format!("unknown model kind `{s}`"))),
        }
    }
}

/// Architecture and sampling hyperparameters shared by all back-ends. Fields
/// that do not apply to a kind are ignored by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub out_dim: usize,
    pub noise_dim: usize,
    pub condition_dim: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub kernel: usize,
    pub time_dim: usize,
    pub ff_mult: usize,
    pub cond_every_layer: bool,
    pub sigma_min: f64,
    pub solver_steps: usize,
    pub nf_layers: usize,
    pub s_max: f64,
    /// Std of the Gaussian jitter added to lifted targets during NF training.
    pub nf_jitter: f64,
    pub det_hidden: usize,
    pub det_kernel: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Cfm,
            out_dim: 1,
            noise_dim: 8,
            condition_dim: 32,
            hidden: 8,
            n_layers: 6,
            kernel: 5,
            time_dim: 16,
            ff_mult: 2,
            cond_every_layer: true,
            sigma_min: 1e-4,
            solver_steps: 12,
            nf_layers: 6,
            s_max: 5.0,
            nf_jitter: 0.05,
            det_hidden: 16,
            det_kernel: 3,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.1).contains(&self.sigma_min) {
            return Err(Error::InvalidArgument(format!("sigma_min {} outside [0, 0.1]", self.sigma_min)));
        }
        if self.solver_steps == 0 {
            return Err(Error::InvalidArgument("solver_steps must be >= 1".into()));
        }
        if self.out_dim == 0 || self.noise_dim % self.out_dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "noise_dim {} not divisible by out_dim {}",
                self.noise_dim, self.out_dim
            )));
        }
        if self.nf_jitter < 0.0 {
            return Err(Error::InvalidArgument("nf_jitter must be >= 0".into()));
        }
        Ok(())
    }

    pub fn dit(&self) -> DitConfig {
        DitConfig {
            n_layers: self.n_layers,
            hidden: self.hidden,
            kernel: self.kernel,
            noise_dim: self.noise_dim,
            condition_dim: self.condition_dim,
            time_dim: self.time_dim,
            ff_mult: self.ff_mult,
            cond_every_layer: self.cond_every_layer,
        }
    }

    pub fn coupling(&self) -> CouplingConfig {
        CouplingConfig {
            n_layers: self.nf_layers,
            hidden: self.hidden,
            kernel: self.kernel,
            noise_dim: self.noise_dim,
            condition_dim: self.condition_dim,
            s_max: self.s_max,
        }
    }

    pub fn det(&self) -> DetConfig {
        DetConfig {
            hidden: self.det_hidden,
            kernel: self.det_kernel,
            condition_dim: self.condition_dim,
            out_dim: self.out_dim,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingMeta {
    pub steps: u64,
    pub seed: u64,
    pub corpus_hash: Option<String>,
    /// Checkpoint hash of the flow-matching model a rectified model came from.
    pub teacher_hash: Option<String>,
    pub teacher_ode_steps: Option<usize>,
    pub reflow_steps: u64,
    /// Hash of the run configuration that produced the checkpoint.
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug)]
pub enum Network {
    Dit(DitStack),
    Coupling(CouplingStack),
    Det(DetPredictor),
}

/// Temperature and solver settings for one sampling call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// Overrides the model's default Euler step count.
    pub solver_steps: Option<usize>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(temperature: f64, seed: u64) -> Self {
        SamplerConfig {
            temperature,
            solver_steps: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.solver_steps == Some(0) {
            return Err(Error::InvalidArgument("solver steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One trained back-end: network, parameters and provenance.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub config: ModelConfig,
    pub meta: TrainingMeta,
    net: Network,
    params: ParamStore,
}

pub(crate) fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn valid_count(mask: &Tensor) -> f64 {
    mask.data().iter().sum::<f64>().max(1.0)
}

/// `sum(mask * (a - b)^2) / (valid tokens * channels)`
pub(crate) fn masked_mse(g: &mut Graph, pred: Var, target: Var, mask: Var) -> Result<Var> {
    let channels = *g.shape(pred).last().unwrap_or(&1) as f64;
    let n = valid_count(g.value(mask));
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    let sq = g.mul(sq, mask)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / (n * channels))
}

impl FlowModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = match config.kind {
            ModelKind::Cfm | ModelKind::Rf => Network::Dit(DitStack::new(config.dit(), &mut params, "", &mut rng)?),
            ModelKind::Nf => Network::Coupling(CouplingStack::new(config.coupling(), &mut params, "", &mut rng)?),
            ModelKind::Det => Network::Det(DetPredictor::new(config.det(), &mut params, "", &mut rng)?),
        };
        Ok(FlowModel {
            config,
            meta: TrainingMeta::default(),
            net,
            params,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Turns a flow-matching model into its rectified continuation.
    pub(crate) fn set_kind_rectified(&mut self) {
        self.config.kind = ModelKind::Rf;
    }

    fn check_batch(&self, g: &Graph, cond: Var, mask: Var) -> Result<(usize, usize)> {
        let (cs, ms) = (g.shape(cond), g.shape(mask));
        if cs.len() != 3 || cs[2] != self.config.condition_dim || ms != [cs[0], cs[1], 1] {
            return Err(Error::shape("flow_model", format!("cond {cs:?}, mask {ms:?}")));
        }
        Ok((cs[0], cs[1]))
    }

    /// Flow-matching regression loss for given endpoints and times.
    #[allow(clippy::too_many_arguments)]
    pub fn cfm_loss_pair(
        &self,
        g: &mut Graph,
        p: &Bound,
        cond: Var,
        mask: Var,
        x0: &Tensor,
        x1: &Tensor,
        ts: &[f64],
    ) -> Result<Var> {
        let Network::Dit(net) = &self.net else {
            return Err(Error::InvalidArgument(format!("{} model has no vector field", self.kind())));
        };
        let (xt, u) = ot_path_batch(x0, x1, ts, self.config.sigma_min)?;
        let xt = g.constant(xt);
        let u = g.constant(u);
        let v = net.forward(g, p, xt, cond, ts, mask)?;
        masked_mse(g, v, u, mask)
    }

    /// Change-of-variables negative log-likelihood per token and channel.
    pub fn nf_nll(&self, g: &mut Graph, p: &Bound, cond: Var, mask: Var, x: &Tensor) -> Result<Var> {
        let Network::Coupling(net) = &self.net else {
            return Err(Error::InvalidArgument(format!("{} model is not a normalizing flow", self.kind())));
        };
        let n = valid_count(g.value(mask)) * self.config.noise_dim as f64;
        let xv = g.constant(x.clone());
        let (z, log_scales) = net.forward(g, p, xv, cond, mask)?;
        let zz = g.mul(z, z)?;
        let zz = g.mul(zz, mask)?;
        let energy = g.sum(zz)?;
        let mut nll = g.scale(energy, 0.5)?;
        nll = g.add_scalar(nll, n * HALF_LN_2PI)?;
        for s in log_scales {
            let ld = g.sum(s)?;
            nll = g.sub(nll, ld)?;
        }
        g.scale(nll, 1.0 / n)
    }

    /// Training objective on a padded batch. `target: [batch, tokens, out_dim]`.
    pub fn loss(&self, g: &mut Graph, p: &Bound, cond: Var, mask: Var, target: &Tensor, rng: &mut impl Rng) -> Result<Var> {
        let (b, t) = self.check_batch(g, cond, mask)?;
        if target.shape() != [b, t, self.config.out_dim] {
            return Err(Error::shape(
                "loss",
                format!("target {:?} for batch [{b}, {t}] and out_dim {}", target.shape(), self.config.out_dim),
            ));
        }
        match &self.net {
            Network::Dit(_) => {
                let x1 = lift_contour(target, self.config.noise_dim)?;
                let x0 = standard_normal(x1.shape(), rng);
                let ts: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
                self.cfm_loss_pair(g, p, cond, mask, &x0, &x1, &ts)
            }
            Network::Coupling(_) => {
                let mut x = lift_contour(target, self.config.noise_dim)?;
                let jitter = self.config.nf_jitter;
                if jitter > 0.0 {
                    let noise = standard_normal(x.shape(), rng);
                    x.data_mut().iter_mut().zip(noise.data()).for_each(|(a, e)| *a += jitter * e);
                }
                self.nf_nll(g, p, cond, mask, &x)
            }
            Network::Det(net) => {
                let pred = net.forward(g, p, cond, mask, Some(rng))?;
                let target = g.constant(target.clone());
                masked_mse(g, pred, target, mask)
            }
        }
    }

    /// Value of the flow-matching loss on lifted data, with fresh noise and times.
    pub fn cfm_loss(&self, cond: &Tensor, mask: &Tensor, x1: &Tensor, rng: &mut impl Rng) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c = g.constant(cond.clone());
        let m = g.constant(mask.clone());
        let (b, _) = self.check_batch(&g, c, m)?;
        let x0 = standard_normal(x1.shape(), rng);
        let ts: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let l = self.cfm_loss_pair(&mut g, &p, c, m, &x0, x1, &ts)?;
        g.value(l).item()
    }

    /// Value of the NF negative log-likelihood on lifted data.
    pub fn nf_loss(&self, cond: &Tensor, mask: &Tensor, x: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c = g.constant(cond.clone());
        let m = g.constant(mask.clone());
        self.check_batch(&g, c, m)?;
        let l = self.nf_nll(&mut g, &p, c, m, x)?;
        g.value(l).item()
    }

    /// Evaluates `v(x, t)` for a whole batch at a single time.
    pub fn velocity(&self, cond: &Tensor, mask: &Tensor, x: &Tensor, t: f64) -> Result<Tensor> {
        let Network::Dit(net) = &self.net else {
            return Err(Error::InvalidArgument(format!("{} model has no vector field", self.kind())));
        };
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c = g.constant(cond.clone());
        let m = g.constant(mask.clone());
        let xv = g.constant(x.clone());
        let ts = vec![t; x.shape()[0]];
        let v = net.forward(&mut g, &p, xv, c, &ts, m)?;
        Ok(g.value(v).clone())
    }

    /// Vector field bound to a fixed condition, for the ODE solver.
    pub fn field<'a>(&'a self, cond: &'a Tensor, mask: &'a Tensor) -> ModelField<'a> {
        ModelField { model: self, cond, mask }
    }

    /// Maps a base sample (noise, or the NF latent) to lifted data space.
    pub fn transport(&self, cond: &Tensor, mask: &Tensor, x0: &Tensor, steps: usize) -> Result<Tensor> {
        match &self.net {
            Network::Dit(_) => euler_solve(&self.field(cond, mask), x0, steps),
            Network::Coupling(net) => {
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, false);
                let c = g.constant(cond.clone());
                let m = g.constant(mask.clone());
                let z = g.constant(x0.clone());
                let x = net.inverse(&mut g, &p, z, c, m)?;
                Ok(g.value(x).clone())
            }
            Network::Det(_) => Err(Error::InvalidArgument("DET model has no transport map".into())),
        }
    }

    /// Samples contours for a padded batch of conditions: `[batch, tokens, out_dim]`.
    ///
    /// Base noise is `N(0, temperature^2 I)`; the deterministic predictor
    /// ignores both the temperature and the rng.
    pub fn sample(&self, cond: &Tensor, mask: &Tensor, sampler: &SamplerConfig, rng: &mut impl Rng) -> Result<Tensor> {
        sampler.validate()?;
        let cs = cond.shape();
        if cs.len() != 3 || cs[2] != self.config.condition_dim || mask.shape() != [cs[0], cs[1], 1] {
            return Err(Error::shape("sample", format!("cond {cs:?}, mask {:?}", mask.shape())));
        }
        if let Network::Det(net) = &self.net {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let c = g.constant(cond.clone());
            let m = g.constant(mask.clone());
            let y = net.forward::<ChaCha8Rng>(&mut g, &p, c, m, None)?;
            return Ok(g.value(y).clone());
        }
        let (b, t) = (cs[0], cs[1]);
        let d = self.config.noise_dim;
        let mut x0 = standard_normal(&[b, t, d], rng);
        let tau = sampler.temperature;
        for (i, v) in x0.data_mut().iter_mut().enumerate() {
            *v *= tau * mask.data()[i / d];
        }
        let steps = sampler.solver_steps.unwrap_or(self.config.solver_steps);
        let x1 = self.transport(cond, mask, &x0, steps)?;
        unlift_contour(&x1, self.config.out_dim)
    }

    /// `n` independent draws for one utterance: `cond: [tokens, condition_dim]`
    /// gives `[n, tokens, out_dim]`.
    pub fn sample_draws(&self, cond: &Tensor, n: usize, sampler: &SamplerConfig, rng: &mut impl Rng) -> Result<Tensor> {
        let (batch_cond, mask) = repeat_condition(cond, n)?;
        self.sample(&batch_cond, &mask, sampler, rng)
    }
}

/// Tiles a `[tokens, dim]` condition into `[n, tokens, dim]` with a full mask.
pub fn repeat_condition(cond: &Tensor, n: usize) -> Result<(Tensor, Tensor)> {
    if cond.rank() != 2 {
        return Err(Error::shape("repeat_condition", format!("{:?}", cond.shape())));
    }
    let (t, c) = (cond.shape()[0], cond.shape()[1]);
    let mut data = Vec::with_capacity(n * t * c);
    for _ in 0..n {
        data.extend_from_slice(cond.data());
    }
    Ok((Tensor::new(vec![n, t, c], data)?, Tensor::full(&[n, t, 1], 1.0)))
}

pub struct ModelField<'a> {
    model: &'a FlowModel,
    cond: &'a Tensor,
    mask: &'a Tensor,
}

impl VectorField for ModelField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.model.velocity(self.cond, self.mask, x, t)
    }
}
