use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::AdamConfig;
use crate::error::Error;
use crate::generative::{pad_batch, ModelKind, SamplerConfig, TrainConfig};
use crate::synthdata::{generate_corpus, generate_heldout, ContourSet, Corpus, ToyCorpusSpec, Variable};

fn corpus() -> Corpus {
    generate_corpus(&ToyCorpusSpec {
        n_utterances: 16,
        n_realizations: 4,
        seed: 5,
        ..ToyCorpusSpec::default()
    })
    .unwrap()
}

fn small(kind: ModelKind, order: &[Variable]) -> CascadeSpec {
    let mut s = CascadeSpec::cascade(kind, order);
    s.model.n_layers = 2;
    s.model.nf_layers = 2;
    s
}

fn batch(data: &[CascadeExample], n: usize) -> (crate::autodiff::Tensor, crate::autodiff::Tensor, Vec<&ContourSet>) {
    let conds: Vec<_> = data[..n].iter().map(|e| &e.cond).collect();
    let (c, m) = pad_batch(&conds).unwrap();
    (c, m, data[..n].iter().map(|e| &e.contours).collect())
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        steps: 30,
        batch_size: 8,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn spec_validation() {
    let bad = CascadeSpec::cascade(ModelKind::Cfm, &[Variable::Duration, Variable::Pitch, Variable::Energy]);
    assert!(Cascade::new(bad).is_err());
    let dup = CascadeSpec::cascade(ModelKind::Cfm, &[Variable::Pitch, Variable::Pitch, Variable::Duration]);
    assert!(Cascade::new(dup).is_err());
    assert!(Cascade::new(CascadeSpec::cascade(ModelKind::Rf, &CascadeSpec::energy_first())).is_err());
    let mut joint = CascadeSpec::joint(ModelKind::Cfm);
    joint.joint_noise_dim = 8;
    assert!(Cascade::new(joint).is_err());
    assert_eq!(CascadeSpec::default().order, CascadeSpec::energy_first());
}

#[test]
fn loss_structure_per_mode() {
    let data = corpus_examples(&corpus());
    let (c, m, t) = batch(&data, 4);
    let cascade = Cascade::new(small(ModelKind::Cfm, &CascadeSpec::pitch_first())).unwrap();
    assert_eq!(cascade.labels(), ["pitch", "energy", "duration"]);
    let l = cascade.evaluate_losses(&c, &m, &t, &mut cascade.stage_rngs(0)).unwrap();
    assert_eq!(l.len(), 3);
    let joint = Cascade::new(CascadeSpec::joint(ModelKind::Cfm)).unwrap();
    assert_eq!(joint.labels(), ["joint"]);
    assert_eq!(joint.stages()[0].model.config.out_dim, 3);
    let l = joint.evaluate_losses(&c, &m, &t, &mut joint.stage_rngs(0)).unwrap();
    assert_eq!(l.len(), 1);
}

#[test]
fn zero_projections_make_orders_equivalent() {
    let data = corpus_examples(&corpus());
    let (c, m, t) = batch(&data, 6);
    for kind in [ModelKind::Cfm, ModelKind::Nf, ModelKind::Det] {
        let a = Cascade::new(small(kind, &CascadeSpec::pitch_first())).unwrap();
        let b = Cascade::new(small(kind, &CascadeSpec::energy_first())).unwrap();
        let la = a.evaluate_losses(&c, &m, &t, &mut a.stage_rngs(3)).unwrap();
        let lb = b.evaluate_losses(&c, &m, &t, &mut b.stage_rngs(3)).unwrap();
        // pitch-first: [p, e, d]; energy-first: [e, p, d]
        assert_eq!(la[0], lb[1], "{kind}");
        assert_eq!(la[1], lb[0], "{kind}");
        assert_eq!(la[2], lb[2], "{kind}");
    }
}

#[test]
fn teacher_forcing_isolates_upstream_losses() {
    let data = corpus_examples(&corpus());
    let (c, m, t) = batch(&data, 5);
    let mut spec = small(ModelKind::Cfm, &CascadeSpec::energy_first());
    spec.projection_init = ProjectionInit::Xavier;
    let clean = Cascade::new(spec).unwrap();
    let mut corrupted = clean.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in corrupted.stages_mut()[1].model.params_mut().iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-3.0..3.0));
    }
    let a = clean.evaluate_losses(&c, &m, &t, &mut clean.stage_rngs(1)).unwrap();
    let b = corrupted.evaluate_losses(&c, &m, &t, &mut corrupted.stage_rngs(1)).unwrap();
    assert_eq!(a[0], b[0]);
    assert_ne!(a[1], b[1]);
    assert_eq!(a[2], b[2]);
}

#[test]
fn misaligned_targets_rejected() {
    let data = corpus_examples(&corpus());
    let (c, m, mut t) = batch(&data, 3);
    let mut short = t[1].clone();
    short.pitch.pop();
    short.energy.pop();
    short.duration.pop();
    t[1] = &short;
    let cascade = Cascade::new(small(ModelKind::Det, &CascadeSpec::energy_first())).unwrap();
    let err = cascade.evaluate_losses(&c, &m, &t, &mut cascade.stage_rngs(0));
    assert!(matches!(err, Err(Error::Shape { .. })));
}

#[test]
fn untrained_inference_rejected() {
    let cascade = Cascade::new(small(ModelKind::Cfm, &CascadeSpec::energy_first())).unwrap();
    let cond = corpus().records[0].cond();
    let err = cascade.sample(&cond, 2, &SamplerConfig::new(1.0, 0));
    assert!(matches!(err, Err(Error::Untrained(_))));
}

#[test]
fn training_and_inference_contracts() {
    let corpus = corpus();
    let data = corpus_examples(&corpus);
    for kind in [ModelKind::Det, ModelKind::Cfm, ModelKind::Nf] {
        let mut cascade = Cascade::new(small(kind, &CascadeSpec::energy_first())).unwrap();
        let log = cascade.train(&data, &quick_train()).unwrap();
        assert_eq!(log.losses.len(), 3);
        assert_eq!(log.series("pitch").unwrap().len(), 30);
        let cond = corpus.records[2].cond();
        let s0 = SamplerConfig::new(0.0, 1);
        let a = cascade.sample(&cond, 3, &s0).unwrap();
        let b = cascade.sample(&cond, 3, &s0).unwrap();
        assert_eq!(a, b);
        let noisy = cascade.sample(&cond, 5, &SamplerConfig::new(1.5, 2)).unwrap();
        for set in a.iter().chain(&noisy) {
            assert_eq!(set.len(), corpus.records[2].tokens.len());
            assert!(set.duration.iter().all(|&d| d >= 1));
        }
        if kind == ModelKind::Det {
            let other = cascade.sample(&cond, 3, &SamplerConfig::new(0.9, 77)).unwrap();
            assert_eq!(a, other);
        }
    }
}

#[test]
fn order_changes_latents_with_nonzero_projections() {
    let corpus = corpus();
    let data = corpus_examples(&corpus);
    let mut latents = Vec::new();
    for order in [CascadeSpec::pitch_first(), CascadeSpec::energy_first()] {
        let mut spec = small(ModelKind::Det, &order);
        spec.projection_init = ProjectionInit::Xavier;
        let mut c = Cascade::new(spec).unwrap();
        c.train(&data, &quick_train()).unwrap();
        let cond = corpus.records[0].cond();
        let (bc, bm) = crate::generative::repeat_condition(&cond, 1).unwrap();
        latents.push(c.infer_trace(&bc, &bm, &SamplerConfig::new(0.0, 0)).unwrap().latents);
    }
    assert_eq!(latents[0][0], latents[1][0]);
    assert!(latents[0][1].max_abs_diff(&latents[1][1]) > 1e-6);
    assert!(latents[0][2].max_abs_diff(&latents[1][2]) > 1e-9);
}

#[test]
fn checkpoint_round_trip() {
    let corpus = corpus();
    let data = corpus_examples(&corpus);
    let dir = tempfile::tempdir().unwrap();
    for spec in [small(ModelKind::Nf, &CascadeSpec::energy_first()), CascadeSpec::joint(ModelKind::Cfm)] {
        let mut c = Cascade::new(spec).unwrap();
        c.train(&data, &TrainConfig { steps: 3, ..quick_train() }).unwrap();
        c.quantize_to_f32();
        let path = dir.path().join("c.ckpt");
        c.save(&path).unwrap();
        let back = Cascade::load(&path).unwrap();
        assert_eq!(back.checkpoint_hash().unwrap(), c.checkpoint_hash().unwrap());
        let cond = corpus.records[1].cond();
        let s = SamplerConfig::new(0.8, 4);
        assert_eq!(back.sample(&cond, 2, &s).unwrap(), c.sample(&cond, 2, &s).unwrap());
    }
}

#[test]
fn reflow_cascade_keeps_projections_and_records_teacher() {
    let corpus = corpus();
    let data = corpus_examples(&corpus);
    let mut c = Cascade::new(small(ModelKind::Cfm, &CascadeSpec::energy_first())).unwrap();
    c.train(&data, &TrainConfig { steps: 5, ..quick_train() }).unwrap();
    let cfg = crate::generative::ReflowConfig {
        teacher_steps: 8,
        extra_steps: 3,
        n_pairs: 8,
        batch_size: 4,
        ..Default::default()
    };
    let rf = c.reflow(&data, &cfg).unwrap();
    assert_eq!(rf.kind(), ModelKind::Rf);
    for (s, t) in rf.stages().iter().zip(c.stages()) {
        assert_eq!(s.model.meta.teacher_hash, Some(t.model.checkpoint_hash().unwrap()));
        assert_eq!(s.model.meta.reflow_steps, 3);
    }
    assert_eq!(rf.projections().iter().count(), c.projections().iter().count());
    let nf = Cascade::new(small(ModelKind::Nf, &CascadeSpec::energy_first())).unwrap();
    assert!(nf.reflow(&data, &cfg).is_err());
}

#[test]
fn order_experiment_shape_and_reproducibility() {
    let corpus = corpus();
    let heldout = generate_heldout(&corpus.spec, 3).unwrap();
    let mut template = CascadeSpec::default();
    template.model.n_layers = 1;
    let train = TrainConfig { steps: 4, ..quick_train() };
    let eval = EvalConfig {
        n_utterances: 3,
        n_draws: 4,
        ..EvalConfig::default()
    };
    let a = order_experiment(&corpus, &heldout, ModelKind::Det, &template, &train, &eval, 1).unwrap();
    let b = order_experiment(&corpus, &heldout, ModelKind::Det, &template, &train, &eval, 3).unwrap();
    assert_eq!(a.rows.len(), 3);
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.to_csv().lines().count(), 4);
    for name in ORDER_CONFIGURATIONS {
        let r = a.row(name).unwrap();
        for v in [r.pitch_js, r.energy_js, r.duration_js] {
            assert!((0.0..=std::f64::consts::LN_2).contains(&v));
        }
    }
}
