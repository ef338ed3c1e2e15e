use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::Tensor;
use crate::error::Error;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        condition_dim: 4,
        ..ModelConfig::default()
    }
}

/// Two condition classes with targets `±1 + 0.3 * noise` per token.
fn toy_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let tokens = rng.random_range(3..8);
            let class = rng.random_range(0..2usize);
            let sign = if class == 0 { -1.0 } else { 1.0 };
            let cond = Tensor::from_fn(&[tokens, 4], |i| if i % 4 == class { 1.0 } else { 0.0 });
            let target = Tensor::from_fn(&[tokens, 1], |_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                sign + 0.3 * e
            });
            Example { cond, target }
        })
        .collect()
}

#[test]
fn zero_init_cfm_loss_is_two_per_channel() {
    let mut cfg = config(ModelKind::Cfm);
    cfg.sigma_min = 0.0;
    let model = FlowModel::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // 2500 * 5 tokens * 8 channels = 1e5 (noise, data) pairs
    let (b, t) = (2500, 5);
    let cond = Tensor::from_fn(&[b, t, 4], |_| StandardNormal.sample(&mut rng));
    let mask = Tensor::full(&[b, t, 1], 1.0);
    let x1 = Tensor::from_fn(&[b, t, 8], |_| StandardNormal.sample(&mut rng));
    let loss = model.cfm_loss(&cond, &mask, &x1, &mut rng).unwrap();
    assert!((loss - 2.0).abs() < 0.1, "{loss}");
}

#[test]
fn identity_flow_nll() {
    let model = FlowModel::new(config(ModelKind::Nf), 3).unwrap();
    let cond = Tensor::full(&[2, 6, 4], 0.5);
    let mask = Tensor::full(&[2, 6, 1], 1.0);
    let at_mode = model.nf_loss(&cond, &mask, &Tensor::zeros(&[2, 6, 8])).unwrap();
    assert!((at_mode - HALF_LN_2PI).abs() < 1e-12, "{at_mode}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, t) = (1250, 10);
    let cond = Tensor::zeros(&[b, t, 4]);
    let mask = Tensor::full(&[b, t, 1], 1.0);
    let x = Tensor::from_fn(&[b, t, 8], |_| StandardNormal.sample(&mut rng));
    let nll = model.nf_loss(&cond, &mask, &x).unwrap();
    let expected = HALF_LN_2PI + 0.5;
    assert!((nll - expected).abs() < 0.02 * expected, "{nll}");
}

#[test]
fn nll_ignores_padding() {
    let model = FlowModel::new(config(ModelKind::Nf), 3).unwrap();
    let cond = Tensor::zeros(&[1, 4, 4]);
    let mask = Tensor::new(vec![1, 4, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let x = Tensor::from_fn(&[1, 4, 8], |i| if i < 16 { 0.0 } else { 9.0 });
    let nll = model.nf_loss(&cond, &mask, &x).unwrap();
    assert!((nll - HALF_LN_2PI).abs() < 1e-12);
}

#[test]
fn zero_temperature_is_deterministic() {
    let cond = Tensor::from_fn(&[6, 4], |i| (i as f64 * 0.37).sin());
    for kind in [ModelKind::Cfm, ModelKind::Nf] {
        let model = FlowModel::new(config(kind), 5).unwrap();
        let s = SamplerConfig::new(0.0, 0);
        let a = model.sample_draws(&cond, 3, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = model.sample_draws(&cond, 3, &s, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b, "{kind}");
        assert_eq!(a.shape(), &[3, 6, 1]);
    }
}

#[test]
fn det_ignores_temperature_and_seed() {
    let model = FlowModel::new(config(ModelKind::Det), 6).unwrap();
    let cond = Tensor::from_fn(&[5, 4], |i| i as f64 * 0.1);
    let a = model
        .sample_draws(&cond, 2, &SamplerConfig::new(0.0, 0), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let b = model
        .sample_draws(&cond, 2, &SamplerConfig::new(1.0, 7), &mut ChaCha8Rng::seed_from_u64(7))
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn negative_temperature_rejected() {
    let model = FlowModel::new(config(ModelKind::Cfm), 0).unwrap();
    let cond = Tensor::zeros(&[3, 4]);
    let err = model.sample_draws(&cond, 1, &SamplerConfig::new(-0.1, 0), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn config_validation() {
    let mut cfg = config(ModelKind::Cfm);
    cfg.sigma_min = 0.2;
    assert!(FlowModel::new(cfg.clone(), 0).is_err());
    cfg.sigma_min = 1e-4;
    cfg.solver_steps = 0;
    assert!(FlowModel::new(cfg.clone(), 0).is_err());
    cfg.solver_steps = 12;
    cfg.out_dim = 3;
    assert!(FlowModel::new(cfg, 0).is_err());
    assert!("xyz".parse::<ModelKind>().is_err());
    assert_eq!("rf".parse::<ModelKind>().unwrap(), ModelKind::Rf);
}

#[test]
fn training_reduces_loss() {
    let data = toy_examples(64, 7);
    for kind in ModelKind::ALL {
        if kind == ModelKind::Rf {
            continue;
        }
        let mut model = FlowModel::new(config(kind), 8).unwrap();
        let cfg = TrainConfig {
            steps: 400,
            batch_size: 16,
            adam: crate::autodiff::AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let log = train_model(&mut model, &data, &cfg).unwrap();
        let w = log.windowed(100);
        assert!(w[3] < w[0], "{kind}: {w:?}");
        assert_eq!(model.meta.steps, 400);
    }
}

#[test]
fn reflow_without_extra_steps_copies_teacher() {
    let teacher = FlowModel::new(config(ModelKind::Cfm), 9).unwrap();
    let conds: Vec<Tensor> = toy_examples(4, 1).into_iter().map(|e| e.cond).collect();
    let cfg = ReflowConfig {
        extra_steps: 0,
        ..ReflowConfig::default()
    };
    let hash = teacher.checkpoint_hash().unwrap();
    let (student, log) = reflow(&teacher, &conds, &cfg, Some(&hash)).unwrap();
    assert!(log.losses.is_empty());
    assert_eq!(student.kind(), ModelKind::Rf);
    assert_eq!(student.meta.teacher_hash.as_deref(), Some(hash.as_str()));
    for (a, b) in student.params().iter().zip(teacher.params().iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn reflow_checks_teacher() {
    let teacher = FlowModel::new(config(ModelKind::Cfm), 9).unwrap();
    let conds = vec![Tensor::zeros(&[3, 4])];
    let err = reflow(&teacher, &conds, &ReflowConfig::default(), Some("deadbeef"));
    assert!(matches!(err, Err(Error::HashMismatch { .. })));
    let nf = FlowModel::new(config(ModelKind::Nf), 9).unwrap();
    assert!(reflow(&nf, &conds, &ReflowConfig::default(), None).is_err());
}

#[test]
fn reflow_trains_student_and_leaves_teacher() {
    let teacher = FlowModel::new(config(ModelKind::Cfm), 10).unwrap();
    let before = teacher.checkpoint_hash().unwrap();
    let conds: Vec<Tensor> = toy_examples(8, 2).into_iter().map(|e| e.cond).collect();
    let cfg = ReflowConfig {
        teacher_steps: 10,
        extra_steps: 5,
        n_pairs: 16,
        batch_size: 4,
        ..ReflowConfig::default()
    };
    let (student, log) = reflow(&teacher, &conds, &cfg, None).unwrap();
    assert_eq!(log.losses.len(), 5);
    assert_eq!(student.meta.reflow_steps, 5);
    assert_eq!(teacher.checkpoint_hash().unwrap(), before);
    assert_ne!(student.checkpoint_hash().unwrap(), before);
}

#[test]
fn checkpoint_round_trip_preserves_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cond = Tensor::from_fn(&[5, 4], |i| (i as f64).cos());
    for kind in ModelKind::ALL {
        let mut model = FlowModel::new(config(kind), 11).unwrap();
        // perturb the zero-initialized heads so sampling is non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for p in model.params_mut().iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.random::<f64>());
        }
        model.quantize_to_f32();
        model.meta.corpus_hash = Some("abc".into());
        let path = dir.path().join(format!("{kind}.ckpt"));
        model.save(&path).unwrap();
        let loaded = FlowModel::load(&path).unwrap();
        assert_eq!(loaded.kind(), kind);
        assert_eq!(loaded.meta, model.meta);
        let s = SamplerConfig::new(0.7, 0);
        let a = model.sample_draws(&cond, 2, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = loaded.sample_draws(&cond, 2, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b, "{kind}");
    }
}

#[test]
fn load_rejects_mismatched_parameters() {
    let model = FlowModel::new(config(ModelKind::Cfm), 0).unwrap();
    let mut other = ModelConfig {
        hidden: 12,
        ..config(ModelKind::Cfm)
    };
    other.kind = ModelKind::Cfm;
    let mut store = FlowModel::new(other, 0).unwrap().params().clone();
    let named = model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    let err = load_named(&mut store, named, std::path::Path::new("m"));
    assert!(matches!(err, Err(Error::Corrupt { .. })));
}
