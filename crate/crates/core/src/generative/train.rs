use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::FlowModel;
use crate::autodiff::{AdamConfig, AdamState, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};

/// One conditioning sequence with its aligned targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[tokens, condition_dim]`
    pub cond: Tensor,
    /// `[tokens, out_dim]`
    pub target: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5_000,
            batch_size: 32,
            adam: AdamConfig::default(),
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Means over consecutive non-overlapping windows.
    pub fn windowed(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks(window.max(1))
            .filter(|c| c.len() == window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Zero-pads `[tokens_i, dim]` tensors to `[n, max_tokens, dim]` and returns
/// the matching `[n, max_tokens, 1]` validity mask.
pub fn pad_batch(items: &[&Tensor]) -> Result<(Tensor, Tensor)> {
    let first = items.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let dim = *first.shape().last().ok_or_else(|| Error::shape("pad_batch", "scalar item"))?;
    let max_t = items.iter().map(|t| t.shape()[0]).max().unwrap_or(0);
    let mut data = vec![0.0; items.len() * max_t * dim];
    let mut mask = vec![0.0; items.len() * max_t];
    for (i, t) in items.iter().enumerate() {
        if t.rank() != 2 || t.shape()[1] != dim {
            return Err(Error::shape("pad_batch", format!("{:?} vs dim {dim}", t.shape())));
        }
        let n = t.shape()[0];
        data[i * max_t * dim..(i * max_t + n) * dim].copy_from_slice(t.data());
        mask[i * max_t..i * max_t + n].iter_mut().for_each(|m| *m = 1.0);
    }
    Ok((
        Tensor::new(vec![items.len(), max_t, dim], data)?,
        Tensor::new(vec![items.len(), max_t, 1], mask)?,
    ))
}

/// Scales all gradients in the stores so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(stores: &mut [&mut ParamStore], max_norm: f64) -> f64 {
    let norm = stores
        .iter()
        .flat_map(|s| s.iter())
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for s in stores.iter_mut() {
            for p in s.iter_mut() {
                if let Some(g) = &mut p.grad {
                    g.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
        }
    }
    norm
}

pub(crate) fn sample_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

/// Trains a single model on independent examples with Adam.
pub fn train_model(model: &mut FlowModel, data: &[Example], cfg: &TrainConfig) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let idx = sample_indices(&mut rng, data.len(), cfg.batch_size);
        let conds: Vec<&Tensor> = idx.iter().map(|&i| &data[i].cond).collect();
        let targets: Vec<&Tensor> = idx.iter().map(|&i| &data[i].target).collect();
        let (cond, mask) = pad_batch(&conds)?;
        let (target, _) = pad_batch(&targets)?;
        let target = target.reshape(&[idx.len(), mask.shape()[1], model.config.out_dim])?;

        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let c = g.constant(cond);
        let m = g.constant(mask);
        let loss = model
            .loss(&mut g, &p, c, m, &target, &mut rng)
            .map_err(|e| Error::Diverged(format!("step {step}: {e}")))?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("step {step}: loss {value}")));
        }
        g.backward(loss)?;
        model.params_mut().collect_grads(&g, &p);
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut [model.params_mut()], max);
        }
        adam.step(model.params_mut())?;
        log.losses.push(value);
    }
    model.meta.steps += cfg.steps as u64;
    model.meta.seed = cfg.seed;
    Ok(log)
}
