use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{standard_normal, FlowModel, ModelKind};
use super::train::{clip_grad_norm, pad_batch, sample_indices, TrainLog};
use crate::autodiff::{AdamConfig, AdamState, Graph, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflowConfig {
    /// Euler steps the frozen teacher uses to produce the coupling.
    pub teacher_steps: usize,
    /// Additional optimizer steps on the coupled pairs.
    pub extra_steps: usize,
    /// Size of the precomputed (noise, teacher output) pool.
    pub n_pairs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for ReflowConfig {
    fn default() -> Self {
        ReflowConfig {
            teacher_steps: 100,
            extra_steps: 500,
            n_pairs: 512,
            batch_size: 32,
            adam: AdamConfig::default(),
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl ReflowConfig {
    /// Extra-step budget as a tenth of the base training run.
    pub fn for_base_steps(base_steps: usize) -> Self {
        ReflowConfig {
            extra_steps: base_steps / 10,
            ..ReflowConfig::default()
        }
    }
}

struct Pair {
    cond: Tensor,
    x0: Tensor,
    x1: Tensor,
}

const POOL_CHUNK: usize = 64;

/// Generates the deterministic coupling `(x0, teacher(x0))` for each condition.
/// Teacher solves run on padded chunks; padding does not reach valid tokens.
fn coupling_pool(teacher: &FlowModel, conds: &[Tensor], cfg: &ReflowConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Pair>> {
    let d = teacher.config.noise_dim;
    let idx = sample_indices(rng, conds.len(), cfg.n_pairs);
    let noise: Vec<Tensor> = idx.iter().map(|&i| standard_normal(&[conds[i].shape()[0], d], rng)).collect();
    let mut pool = Vec::with_capacity(idx.len());
    for (chunk, x0s) in idx.chunks(POOL_CHUNK).zip(noise.chunks(POOL_CHUNK)) {
        let (c, mask) = pad_batch(&chunk.iter().map(|&i| &conds[i]).collect::<Vec<_>>())?;
        let (x0, _) = pad_batch(&x0s.iter().collect::<Vec<_>>())?;
        let x1 = teacher.transport(&c, &mask, &x0, cfg.teacher_steps)?;
        let max_t = x1.shape()[1];
        for (k, (&i, x0)) in chunk.iter().zip(x0s).enumerate() {
            let t = conds[i].shape()[0];
            let start = k * max_t * d;
            pool.push(Pair {
                cond: conds[i].clone(),
                x0: x0.clone(),
                x1: Tensor::new(vec![t, d], x1.data()[start..start + t * d].to_vec())?,
            });
        }
    }
    Ok(pool)
}

/// Rectifies a frozen flow-matching teacher: the student starts from the
/// teacher's weights and keeps training with the flow-matching loss on the
/// teacher's own noise-to-data coupling. The teacher is not modified.
///
/// If `expected_teacher_hash` is given it must equal the teacher's
/// checkpoint hash.
pub fn reflow(
    teacher: &FlowModel,
    conds: &[Tensor],
    cfg: &ReflowConfig,
    expected_teacher_hash: Option<&str>,
) -> Result<(FlowModel, TrainLog)> {
    if teacher.kind() != ModelKind::Cfm {
        return Err(Error::InvalidArgument(format!("reflow needs a CFM teacher, got {}", teacher.kind())));
    }
    if conds.is_empty() || cfg.teacher_steps == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "reflow needs conditions, teacher_steps >= 1 and batch_size >= 1".into(),
        ));
    }
    let teacher_hash = teacher.checkpoint_hash()?;
    if let Some(expected) = expected_teacher_hash {
        if expected != teacher_hash {
            return Err(Error::HashMismatch {
                expected: expected.to_string(),
                found: teacher_hash,
            });
        }
    }

    let mut student = teacher.clone();
    student.set_kind_rectified();
    student.meta.teacher_hash = Some(teacher_hash);
    student.meta.teacher_ode_steps = Some(cfg.teacher_steps);
    let mut log = TrainLog::default();
    if cfg.extra_steps == 0 {
        return Ok((student, log));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = coupling_pool(teacher, conds, cfg, &mut rng)?;
    let mut adam = AdamState::new(cfg.adam);
    for step in 0..cfg.extra_steps {
        let idx = sample_indices(&mut rng, pool.len(), cfg.batch_size);
        let pick = |f: fn(&Pair) -> &Tensor| idx.iter().map(|&i| f(&pool[i])).collect::<Vec<_>>();
        let (cond, mask) = pad_batch(&pick(|p| &p.cond))?;
        let (x0, _) = pad_batch(&pick(|p| &p.x0))?;
        let (x1, _) = pad_batch(&pick(|p| &p.x1))?;
        let ts: Vec<f64> = (0..idx.len()).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();

        let mut g = Graph::new();
        let p = student.params().bind(&mut g, true);
        let c = g.constant(cond);
        let m = g.constant(mask);
        let loss = student
            .cfm_loss_pair(&mut g, &p, c, m, &x0, &x1, &ts)
            .map_err(|e| Error::Diverged(format!("reflow step {step}: {e}")))?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("reflow step {step}: loss {value}")));
        }
        g.backward(loss)?;
        student.params_mut().collect_grads(&g, &p);
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut [student.params_mut()], max);
        }
        adam.step(student.params_mut())?;
        log.losses.push(value);
    }
    student.meta.reflow_steps += cfg.extra_steps as u64;
    Ok((student, log))
}
