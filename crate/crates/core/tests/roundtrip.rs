use std::path::Path;

use flowprosody::cascade::{corpus_examples, Cascade, CascadeMode, CascadeSpec};
use flowprosody::generative::{ModelKind, ReflowConfig, SamplerConfig, TrainConfig};
use flowprosody::synthdata::{generate_corpus, Corpus, ToyCorpusSpec};

fn tiny_corpus() -> Corpus {
    generate_corpus(&ToyCorpusSpec {
        n_utterances: 10,
        n_realizations: 3,
        max_tokens: 8,
        ..ToyCorpusSpec::default()
    })
    .unwrap()
}

fn tiny_cascade(kind: ModelKind, mode: CascadeMode, corpus: &Corpus) -> Cascade {
    let mut spec = CascadeSpec {
        mode,
        ..CascadeSpec::default()
    };
    spec.model.kind = kind;
    spec.model.n_layers = 1;
    spec.model.nf_layers = 2;
    let mut cascade = Cascade::new(spec).unwrap();
    let cfg = TrainConfig {
        steps: 4,
        batch_size: 4,
        ..TrainConfig::default()
    };
    cascade.train(&corpus_examples(corpus), &cfg).unwrap();
    cascade.set_corpus_hash(&corpus.hash().unwrap());
    cascade
}

#[test]
fn corpus_file_round_trips_bit_exactly() {
    let corpus = tiny_corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    corpus.save(&path).unwrap();
    let back = Corpus::load(&path).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(back.hash().unwrap(), corpus.hash().unwrap());
    assert_eq!(tiny_corpus().to_jsonl().unwrap(), corpus.to_jsonl().unwrap());
}

#[test]
fn every_kind_survives_a_checkpoint_round_trip() {
    let corpus = tiny_corpus();
    let cond = corpus.records[0].cond();
    let dir = tempfile::tempdir().unwrap();
    for (kind, mode) in [
        (ModelKind::Nf, CascadeMode::Cascade),
        (ModelKind::Cfm, CascadeMode::Cascade),
        (ModelKind::Det, CascadeMode::Cascade),
        (ModelKind::Cfm, CascadeMode::Joint),
    ] {
        let mut cascade = tiny_cascade(kind, mode, &corpus);
        cascade.quantize_to_f32();
        let path = dir.path().join(format!("{kind:?}-{mode:?}.ckpt"));
        cascade.save(&path).unwrap();
        let back = Cascade::load(&path).unwrap();
        assert_eq!(back.checkpoint_hash().unwrap(), cascade.checkpoint_hash().unwrap());
        assert_eq!(back.corpus_hash(), cascade.corpus_hash());
        let sampler = SamplerConfig::new(0.7, 11);
        assert_eq!(
            back.sample(&cond, 3, &sampler).unwrap(),
            cascade.sample(&cond, 3, &sampler).unwrap(),
            "{kind:?} {mode:?}"
        );
    }
}

#[test]
fn reflowed_student_is_a_rectified_flow() {
    let corpus = tiny_corpus();
    let teacher = tiny_cascade(ModelKind::Cfm, CascadeMode::Cascade, &corpus);
    let cfg = ReflowConfig {
        teacher_steps: 4,
        n_pairs: 8,
        ..ReflowConfig::for_base_steps(20)
    };
    let student = teacher.reflow(&corpus_examples(&corpus), &cfg).unwrap();
    assert_eq!(student.kind(), ModelKind::Rf);
    assert_eq!(student.corpus_hash(), teacher.corpus_hash());
    let draws = student.sample(&corpus.records[1].cond(), 2, &SamplerConfig::new(1.0, 3)).unwrap();
    assert_eq!(draws[0].len(), corpus.records[1].tokens.len());
}

#[test]
fn damaged_checkpoint_is_rejected() {
    let corpus = tiny_corpus();
    let bytes = tiny_cascade(ModelKind::Det, CascadeMode::Cascade, &corpus).to_bytes().unwrap();
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0x40;
    let err = Cascade::from_bytes(&bad, Path::new("bad.ckpt")).unwrap_err();
    assert!(matches!(err.category(), "corrupt-file" | "hash-mismatch"), "{err}");
    let err = Cascade::from_bytes(&bytes[..bytes.len() / 2], Path::new("short.ckpt")).unwrap_err();
    assert!(matches!(err.category(), "corrupt-file" | "hash-mismatch"), "{err}");
}
