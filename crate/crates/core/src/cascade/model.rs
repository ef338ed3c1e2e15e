use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{variable_stream, CascadeMode, CascadeSpec, JOINT_STREAM};
use crate::autodiff::{AdamState, Bound, Graph, ParamStore, Tensor, Var};
use crate::checkpoint::{self, sha256_hex};
use crate::error::{Error, Result};
use crate::flownets::Linear;
use crate::generative::{
    clip_grad_norm, load_named, named_params, pad_batch, reflow, repeat_condition, sample_indices, FlowModel,
    ModelConfig, ModelKind, ReflowConfig, SamplerConfig, TrainConfig, TrainingMeta,
};
use crate::synthdata::{duration_from_log, ContourSet, Corpus, Variable};

/// What one stage predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTarget {
    Single(Variable),
    Joint,
}

impl StageTarget {
    pub fn label(&self) -> &'static str {
        match self {
            StageTarget::Single(v) => v.as_str(),
            StageTarget::Joint => "joint",
        }
    }

    fn stream(&self) -> u64 {
        match self {
            StageTarget::Single(v) => variable_stream(*v),
            StageTarget::Joint => JOINT_STREAM,
        }
    }

    /// `[tokens, out_dim]` training target.
    fn target(&self, c: &ContourSet) -> Tensor {
        match self {
            StageTarget::Single(v) => c.target(*v),
            StageTarget::Joint => c.joint_target(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub target: StageTarget,
    pub model: FlowModel,
    /// Residual projection of this stage's contour into the condition space;
    /// absent for the last stage.
    projection: Option<Linear>,
}

/// A (condition, ground-truth prosody) training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeExample {
    /// `[tokens, condition_dim]`
    pub cond: Tensor,
    pub contours: ContourSet,
}

/// Every realization of every record, paired with the record's condition.
pub fn corpus_examples(corpus: &Corpus) -> Vec<CascadeExample> {
    corpus
        .records
        .iter()
        .flat_map(|r| {
            let cond = r.cond();
            r.realizations.iter().map(move |c| CascadeExample {
                cond: cond.clone(),
                contours: c.clone(),
            })
        })
        .collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-stage random sources, independent of the stage order.
pub struct StageRngs(Vec<ChaCha8Rng>);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CascadeLog {
    pub labels: Vec<&'static str>,
    /// One loss series per stage.
    pub losses: Vec<Vec<f64>>,
}

impl CascadeLog {
    pub fn series(&self, label: &str) -> Option<&[f64]> {
        self.labels.iter().position(|l| *l == label).map(|i| self.losses[i].as_slice())
    }
}

/// Optimizer state for all stages and the projections.
pub struct CascadeOptimizer {
    stages: Vec<AdamState>,
    projections: AdamState,
}

/// Intermediate results of one cascade inference.
#[derive(Clone, Debug)]
pub struct InferenceTrace {
    /// Condition seen by each stage, `[batch, tokens, condition_dim]`.
    pub latents: Vec<Tensor>,
    pub contours: Vec<ContourSet>,
}

#[derive(Clone, Debug)]
pub struct Cascade {
    pub spec: CascadeSpec,
    stages: Vec<Stage>,
    projections: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageHeader {
    target: StageTarget,
    config: ModelConfig,
    meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CascadeHeader {
    spec: CascadeSpec,
    stages: Vec<StageHeader>,
}

impl Cascade {
    pub fn new(spec: CascadeSpec) -> Result<Self> {
        spec.validate()?;
        if spec.model.kind == ModelKind::Rf {
            return Err(Error::InvalidArgument(
                "RF predictors come from reflow of a CFM cascade, not direct training".into(),
            ));
        }
        Cascade::build(spec)
    }

    fn build(spec: CascadeSpec) -> Result<Self> {
        let targets: Vec<StageTarget> = match spec.mode {
            CascadeMode::Cascade => spec.order.iter().map(|&v| StageTarget::Single(v)).collect(),
            CascadeMode::Joint => vec![StageTarget::Joint],
        };
        let mut projections = ParamStore::new();
        let mut proj_rng = stream_rng(spec.seed, 10);
        let n = targets.len();
        let mut stages = Vec::with_capacity(n);
        for (i, (target, config)) in targets.into_iter().zip(spec.stage_configs()).enumerate() {
            let model = FlowModel::new(config, spec.seed.wrapping_add(target.stream()))?;
            let projection = (i + 1 < n).then(|| {
                Linear::new(
                    &mut projections,
                    &format!("proj.{}", target.label()),
                    1,
                    spec.model.condition_dim,
                    false,
                    spec.projection_init.into(),
                    &mut proj_rng,
                )
            });
            stages.push(Stage {
                target,
                model,
                projection,
            });
        }
        Ok(Cascade {
            spec,
            stages,
            projections,
        })
    }

    pub fn spec(&self) -> &CascadeSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage] {
        &mut self.stages
    }

    pub fn projections(&self) -> &ParamStore {
        &self.projections
    }

    pub fn projections_mut(&mut self) -> &mut ParamStore {
        &mut self.projections
    }

    pub fn kind(&self) -> ModelKind {
        self.stages[0].model.kind()
    }

    pub fn labels(&self) -> Vec<&'static str> {
        self.stages.iter().map(|s| s.target.label()).collect()
    }

    pub fn stage_rngs(&self, seed: u64) -> StageRngs {
        StageRngs(self.stages.iter().map(|s| stream_rng(seed, s.target.stream())).collect())
    }

    pub fn optimizer(&self, cfg: &TrainConfig) -> CascadeOptimizer {
        CascadeOptimizer {
            stages: self.stages.iter().map(|_| AdamState::new(cfg.adam)).collect(),
            projections: AdamState::new(cfg.adam),
        }
    }

    fn project(&self, g: &mut Graph, pp: &Bound, stage: usize, cond: Var, contour: Var) -> Result<Var> {
        match &self.stages[stage].projection {
            Some(lin) => {
                let e = lin.forward(g, pp, contour)?;
                g.add(cond, e)
            }
            None => Ok(cond),
        }
    }

    /// Builds every stage loss on one graph. Downstream stages see the
    /// condition plus projections of the ground-truth upstream contours.
    #[allow(clippy::too_many_arguments)]
    fn build_losses(
        &self,
        g: &mut Graph,
        bounds: &[Bound],
        pp: &Bound,
        cond: &Tensor,
        mask: &Tensor,
        targets: &[&ContourSet],
        rngs: &mut StageRngs,
    ) -> Result<Vec<Var>> {
        let (b, t) = (cond.shape()[0], cond.shape()[1]);
        if targets.len() != b || mask.shape() != [b, t, 1] {
            return Err(Error::shape(
                "cascade_train_step",
                format!("cond {:?}, mask {:?}, {} targets", cond.shape(), mask.shape(), targets.len()),
            ));
        }
        let valid: Vec<usize> = (0..b)
            .map(|i| mask.data()[i * t..(i + 1) * t].iter().filter(|&&m| m > 0.0).count())
            .collect();
        if let Some(i) = (0..b).find(|&i| targets[i].len() != valid[i]) {
            return Err(Error::shape(
                "cascade_train_step",
                format!("item {i}: {} contour tokens, {} condition tokens", targets[i].len(), valid[i]),
            ));
        }
        let mut cur = g.constant(cond.clone());
        let m = g.constant(mask.clone());
        let mut losses = Vec::with_capacity(self.stages.len());
        for (k, stage) in self.stages.iter().enumerate() {
            let items: Vec<Tensor> = targets.iter().map(|c| stage.target.target(c)).collect();
            let refs: Vec<&Tensor> = items.iter().collect();
            let (mut target, _) = pad_batch(&refs)?;
            if target.shape()[1] != t {
                let out = target.shape()[2];
                let mut data = vec![0.0; b * t * out];
                let tt = target.shape()[1];
                for i in 0..b {
                    data[i * t * out..(i * t + tt) * out].copy_from_slice(&target.data()[i * tt * out..(i + 1) * tt * out]);
                }
                target = Tensor::new(vec![b, t, out], data)?;
            }
            let loss = stage.model.loss(g, &bounds[k], cur, m, &target, &mut rngs.0[k])?;
            losses.push(loss);
            if stage.projection.is_some() {
                let tv = g.constant(target);
                cur = self.project(g, pp, k, cur, tv)?;
            }
        }
        Ok(losses)
    }

    /// Per-stage loss values without updating anything.
    pub fn evaluate_losses(&self, cond: &Tensor, mask: &Tensor, targets: &[&ContourSet], rngs: &mut StageRngs) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bounds: Vec<Bound> = self.stages.iter().map(|s| s.model.params().bind(&mut g, false)).collect();
        let pp = self.projections.bind(&mut g, false);
        let losses = self.build_losses(&mut g, &bounds, &pp, cond, mask, targets, rngs)?;
        losses.iter().map(|&l| g.value(l).item()).collect()
    }

    /// One optimizer step on the summed stage losses with teacher forcing;
    /// returns the loss of each stage. Gradient clipping applies per stage.
    pub fn train_step(
        &mut self,
        cond: &Tensor,
        mask: &Tensor,
        targets: &[&ContourSet],
        rngs: &mut StageRngs,
        opt: &mut CascadeOptimizer,
        grad_clip: Option<f64>,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bounds: Vec<Bound> = self.stages.iter().map(|s| s.model.params().bind(&mut g, true)).collect();
        let pp = self.projections.bind(&mut g, true);
        let losses = self.build_losses(&mut g, &bounds, &pp, cond, mask, targets, rngs)?;
        let values: Vec<f64> = losses.iter().map(|&l| g.value(l).item()).collect::<Result<_>>()?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("loss {v}")));
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        g.backward(total)?;
        for (k, stage) in self.stages.iter_mut().enumerate() {
            let store = stage.model.params_mut();
            store.collect_grads(&g, &bounds[k]);
            if let Some(max) = grad_clip {
                clip_grad_norm(&mut [&mut *store], max);
            }
            opt.stages[k].step(store)?;
        }
        if !self.projections.is_empty() {
            self.projections.collect_grads(&g, &pp);
            if let Some(max) = grad_clip {
                clip_grad_norm(&mut [&mut self.projections], max);
            }
            opt.projections.step(&mut self.projections)?;
        }
        Ok(values)
    }

    /// Trains all stages jointly on random minibatches.
    pub fn train(&mut self, data: &[CascadeExample], cfg: &TrainConfig) -> Result<CascadeLog> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no training examples".into()));
        }
        let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut rngs = self.stage_rngs(cfg.seed);
        let mut opt = self.optimizer(cfg);
        let mut log = CascadeLog {
            labels: self.labels(),
            losses: vec![Vec::with_capacity(cfg.steps); self.stages.len()],
        };
        for step in 0..cfg.steps {
            let idx = sample_indices(&mut batch_rng, data.len(), cfg.batch_size);
            let conds: Vec<&Tensor> = idx.iter().map(|&i| &data[i].cond).collect();
            let targets: Vec<&ContourSet> = idx.iter().map(|&i| &data[i].contours).collect();
            let (cond, mask) = pad_batch(&conds)?;
            let values = self
                .train_step(&cond, &mask, &targets, &mut rngs, &mut opt, cfg.grad_clip)
                .map_err(|e| Error::Diverged(format!("step {step}: {e}")))?;
            for (series, v) in log.losses.iter_mut().zip(values) {
                series.push(v);
            }
        }
        for stage in &mut self.stages {
            stage.model.meta.steps += cfg.steps as u64;
            stage.model.meta.seed = cfg.seed;
        }
        Ok(log)
    }

    pub fn set_corpus_hash(&mut self, hash: &str) {
        for s in &mut self.stages {
            s.model.meta.corpus_hash = Some(hash.to_string());
        }
    }

    pub fn set_config_hash(&mut self, hash: &str) {
        for s in &mut self.stages {
            s.model.meta.config_hash = Some(hash.to_string());
        }
    }

    /// Corpus hash shared by all stages, if training recorded one.
    pub fn corpus_hash(&self) -> Option<&str> {
        self.stages.first().and_then(|s| s.model.meta.corpus_hash.as_deref())
    }

    /// Adds projections of `contour: [batch, tokens, 1]` to `cond` for stage `k`.
    fn apply_projection(&self, k: usize, cond: &Tensor, contour: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pp = self.projections.bind(&mut g, false);
        let c = g.constant(cond.clone());
        let v = g.constant(contour.clone());
        let out = self.project(&mut g, &pp, k, c, v)?;
        Ok(g.value(out).clone())
    }

    /// Sequential sampling for a padded batch. Each non-final stage's sample
    /// is projected and added to the condition of the stages after it.
    pub fn infer_trace(&self, cond: &Tensor, mask: &Tensor, sampler: &SamplerConfig) -> Result<InferenceTrace> {
        if let Some(s) = self.stages.iter().find(|s| s.model.meta.steps == 0 && s.model.meta.reflow_steps == 0) {
            return Err(Error::Untrained(format!("{} predictor has no training steps", s.target.label())));
        }
        let (b, t) = (cond.shape()[0], cond.shape()[1]);
        let mut cur = cond.clone();
        let mut latents = Vec::with_capacity(self.stages.len());
        let mut values: Vec<Option<Tensor>> = vec![None; 3];
        for (k, stage) in self.stages.iter().enumerate() {
            latents.push(cur.clone());
            let mut rng = stream_rng(sampler.seed, stage.target.stream());
            let y = stage.model.sample(&cur, mask, sampler, &mut rng)?;
            match stage.target {
                StageTarget::Single(v) => {
                    if stage.projection.is_some() {
                        cur = self.apply_projection(k, &cur, &y)?;
                    }
                    values[v as usize] = Some(y);
                }
                StageTarget::Joint => {
                    for (ch, var) in Variable::ALL.iter().enumerate() {
                        let data = y.data().iter().skip(ch).step_by(3).copied().collect();
                        values[*var as usize] = Some(Tensor::new(vec![b, t, 1], data)?);
                    }
                }
            }
        }
        let get = |v: Variable| values[v as usize].as_ref().expect("every variable predicted");
        let (p, e, d) = (get(Variable::Pitch), get(Variable::Energy), get(Variable::Duration));
        let mut contours = Vec::with_capacity(b);
        for i in 0..b {
            let n = mask.data()[i * t..(i + 1) * t].iter().filter(|&&m| m > 0.0).count();
            let r = i * t..i * t + n;
            contours.push(ContourSet {
                pitch: p.data()[r.clone()].to_vec(),
                energy: e.data()[r.clone()].to_vec(),
                duration: d.data()[r].iter().map(|&x| duration_from_log(x)).collect(),
            });
        }
        Ok(InferenceTrace { latents, contours })
    }

    /// `n` realizations for one utterance condition `[tokens, condition_dim]`.
    pub fn sample(&self, cond: &Tensor, n: usize, sampler: &SamplerConfig) -> Result<Vec<ContourSet>> {
        let (c, m) = repeat_condition(cond, n)?;
        Ok(self.infer_trace(&c, &m, sampler)?.contours)
    }

    /// Condition seen by each stage under teacher forcing.
    pub fn teacher_forced_conditions(&self, ex: &CascadeExample) -> Result<Vec<Tensor>> {
        let t = ex.cond.shape()[0];
        let mut cur = ex.cond.clone().reshape(&[1, t, self.spec.model.condition_dim])?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (k, stage) in self.stages.iter().enumerate() {
            out.push(cur.clone().reshape(&[t, self.spec.model.condition_dim])?);
            if stage.projection.is_some() {
                let y = stage.target.target(&ex.contours).reshape(&[1, t, 1])?;
                cur = self.apply_projection(k, &cur, &y)?;
            }
        }
        Ok(out)
    }

    /// Rectifies every stage of a flow-matching cascade. Stage `k` is
    /// rectified on its teacher-forced conditions; projections are kept.
    pub fn reflow(&self, data: &[CascadeExample], cfg: &ReflowConfig) -> Result<Cascade> {
        if self.kind() != ModelKind::Cfm {
            return Err(Error::InvalidArgument(format!("reflow needs a CFM cascade, got {}", self.kind())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pool = sample_indices(&mut rng, data.len(), cfg.n_pairs.min(data.len()).max(1));
        let mut per_stage: Vec<Vec<Tensor>> = vec![Vec::with_capacity(pool.len()); self.stages.len()];
        for &i in &pool {
            for (k, c) in self.teacher_forced_conditions(&data[i])?.into_iter().enumerate() {
                per_stage[k].push(c);
            }
        }
        let mut out = self.clone();
        out.spec.model.kind = ModelKind::Rf;
        for (k, stage) in out.stages.iter_mut().enumerate() {
            let stage_cfg = ReflowConfig {
                seed: cfg.seed.wrapping_add(stage.target.stream()),
                ..cfg.clone()
            };
            let (student, _) = reflow(&self.stages[k].model, &per_stage[k], &stage_cfg, None)?;
            stage.model = student;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CascadeHeader {
            spec: self.spec.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| StageHeader {
                    target: s.target,
                    config: s.model.config.clone(),
                    meta: s.model.meta.clone(),
                })
                .collect(),
        };
        let mut params = Vec::new();
        for (k, s) in self.stages.iter().enumerate() {
            for (name, t) in named_params(s.model.params()) {
                params.push((format!("stage{k}/{name}"), t));
            }
        }
        params.extend(named_params(&self.projections));
        checkpoint::encode(serde_json::json!({ "cascade": header }), &params)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (content, params) = checkpoint::decode(bytes, origin)?;
        let value = content.get("cascade").cloned().ok_or_else(|| Error::Corrupt {
            path: origin.to_path_buf(),
            reason: "not a cascade checkpoint".into(),
        })?;
        let header: CascadeHeader = serde_json::from_value(value)?;
        let mut cascade = Cascade::build(header.spec)?;
        if header.stages.len() != cascade.stages.len() {
            return Err(Error::Corrupt {
                path: origin.to_path_buf(),
                reason: "stage count disagrees with spec".into(),
            });
        }
        let mut per_stage: Vec<Vec<(String, Tensor)>> = vec![Vec::new(); cascade.stages.len()];
        let mut proj = Vec::new();
        for (name, t) in params {
            match name.split_once('/') {
                Some((s, rest)) if s.starts_with("stage") => {
                    let k: usize = s[5..].parse().map_err(|_| Error::Corrupt {
                        path: origin.to_path_buf(),
                        reason: format!("bad parameter name `{name}`"),
                    })?;
                    per_stage
                        .get_mut(k)
                        .ok_or_else(|| Error::Corrupt {
                            path: origin.to_path_buf(),
                            reason: format!("stage {k} out of range"),
                        })?
                        .push((rest.to_string(), t));
                }
                _ => proj.push((name, t)),
            }
        }
        for ((stage, sh), named) in cascade.stages.iter_mut().zip(header.stages).zip(per_stage) {
            if sh.target != stage.target {
                return Err(Error::Corrupt {
                    path: origin.to_path_buf(),
                    reason: "stage order disagrees with spec".into(),
                });
            }
            let mut model = FlowModel::new(sh.config, 0)?;
            model.meta = sh.meta;
            load_named(model.params_mut(), named, origin)?;
            stage.model = model;
        }
        load_named(&mut cascade.projections, proj, origin)?;
        Ok(cascade)
    }

    pub fn checkpoint_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Cascade::from_bytes(&checkpoint::read_file(path)?, path)
    }

    pub fn quantize_to_f32(&mut self) {
        for s in &mut self.stages {
            s.model.quantize_to_f32();
        }
        for p in self.projections.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}
