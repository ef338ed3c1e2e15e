//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test --release -p flowprosody-cli --test acceptance`.
//! Positional arguments restrict the run to criteria whose names contain one of them.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use flowprosody::autodiff::gradcheck::check_all_ops;
use flowprosody::autodiff::{AdamConfig, Graph, ParamStore, Tensor};
use flowprosody::cascade::{
    corpus_examples, evaluate_js, sweep_cascade, Cascade, CascadeExample, CascadeSpec, EvalConfig, JsEvaluation,
};
use flowprosody::evalsuite::{
    js_divergence, js_samples, loglinear_fit, model_path_curvature, spearman, DensityEstimate, SweepTable,
    DEFAULT_TAU_GRID,
};
use flowprosody::flownets::{log_det_per_sequence, CouplingConfig, CouplingStack};
use flowprosody::generative::{
    euler_solve, reflow, repeat_condition, train_model, unlift_contour, Example, FlowModel, ModelConfig, ModelKind,
    ReflowConfig, TrainConfig,
};
use flowprosody::synthdata::{generate_corpus, generate_heldout, Corpus, ToyCorpusSpec, UtteranceRecord, Variable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<(bool, String), String>;

const TRAIN_STEPS: usize = 2_000;
const TRAIN_BUDGET: Duration = Duration::from_secs(300);
const UNIMODAL_JS_MAX: f64 = 0.15;
const SWEEP_UTTERANCES: usize = 8;
const SWEEP_DRAWS: usize = 200;
const PIPELINE_BUDGET: Duration = Duration::from_secs(15 * 60);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], scale: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(r);
        scale * z
    })
}

fn ones_mask(b: usize, t: usize) -> Tensor {
    Tensor::full(&[b, t, 1], 1.0)
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1

fn gradient_integrity() -> Outcome {
    let started = Instant::now();
    let errors = check_all_ops(0).map_err(err)?;
    let elapsed = started.elapsed();
    let (worst_op, worst) = errors
        .iter()
        .copied()
        .fold(("", 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(10);
    Ok((
        pass,
        format!(
            "{} ops, worst relative error {worst:.2e} ({worst_op}), {:.2}s",
            errors.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 2

fn randomize(store: &mut ParamStore, scale: f64, r: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
}

fn stack_forward(stack: &CouplingStack, store: &ParamStore, x: &Tensor, c: &Tensor) -> (Tensor, Vec<f64>) {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let (b, t) = (x.shape()[0], x.shape()[1]);
    let xv = g.constant(x.clone());
    let cv = g.constant(c.clone());
    let m = g.constant(ones_mask(b, t));
    let (z, s) = stack.forward(&mut g, &p, xv, cv, m).expect("forward");
    (g.value(z).clone(), log_det_per_sequence(&g, &s))
}

fn stack_inverse(stack: &CouplingStack, store: &ParamStore, z: &Tensor, c: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let (b, t) = (z.shape()[0], z.shape()[1]);
    let zv = g.constant(z.clone());
    let cv = g.constant(c.clone());
    let m = g.constant(ones_mask(b, t));
    let x = stack.inverse(&mut g, &p, zv, cv, m).expect("inverse");
    g.value(x).clone()
}

/// log|det| by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(piv, col);
        acc += a[col][col].abs().ln();
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    acc
}

fn nf_invertibility() -> Outcome {
    let mut r = rng(2);
    let cfg = CouplingConfig {
        n_layers: 6,
        noise_dim: 8,
        condition_dim: 4,
        ..CouplingConfig::default()
    };
    let mut store = ParamStore::new();
    let stack = CouplingStack::new(cfg.clone(), &mut store, "", &mut r).map_err(err)?;
    randomize(&mut store, 0.5, &mut r);
    let x = randn(&[1000, 1, 8], 2.0, &mut r);
    let c = randn(&[1000, 1, 4], 1.0, &mut r);
    let (z, _) = stack_forward(&stack, &store, &x, &c);
    let round_trip = stack_inverse(&stack, &store, &z, &c).max_abs_diff(&x);

    let cfg4 = CouplingConfig {
        noise_dim: 4,
        condition_dim: 3,
        ..cfg
    };
    let mut store4 = ParamStore::new();
    let stack4 = CouplingStack::new(cfg4, &mut store4, "", &mut r).map_err(err)?;
    randomize(&mut store4, 0.5, &mut r);
    let h = 1e-5;
    let mut worst_ld = 0.0f64;
    for _ in 0..20 {
        let x = randn(&[1, 1, 4], 1.0, &mut r);
        let c = randn(&[1, 1, 3], 1.0, &mut r);
        let (_, ld) = stack_forward(&stack4, &store4, &x, &c);
        let mut jac = vec![vec![0.0; 4]; 4];
        for j in 0..4 {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let (yp, _) = stack_forward(&stack4, &store4, &xp, &c);
            let (ym, _) = stack_forward(&stack4, &store4, &xm, &c);
            for (i, row) in jac.iter_mut().enumerate() {
                row[j] = (yp.data()[i] - ym.data()[i]) / (2.0 * h);
            }
        }
        worst_ld = worst_ld.max((log_abs_det(jac) - ld[0]).abs());
    }
    Ok((
        round_trip < 1e-5 && worst_ld < 1e-3,
        format!("round trip {round_trip:.2e} over 1000 inputs, log-det vs finite differences {worst_ld:.2e}"),
    ))
}

// ---------------------------------------------------------------------------
// 3

fn cfm_loss_sanity() -> Outcome {
    let cfg = ModelConfig {
        kind: ModelKind::Cfm,
        condition_dim: 4,
        sigma_min: 0.0,
        ..ModelConfig::default()
    };
    let model = FlowModel::new(cfg, 3).map_err(err)?;
    let mut r = rng(3);
    // 2500 sequences * 5 tokens * 8 channels = 1e5 pairs
    let (b, t, d) = (2500, 5, 8);
    let cond = randn(&[b, t, 4], 1.0, &mut r);
    let x1 = randn(&[b, t, d], 1.0, &mut r);
    let engine = model.cfm_loss(&cond, &ones_mask(b, t), &x1, &mut r).map_err(err)?;

    // Zero field: the loss is E|x1 - x0|^2 per channel.
    let mut sim = rng(33);
    let n = 100_000;
    let oracle = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut sim);
            let b: f64 = StandardNormal.sample(&mut sim);
            (b - a).powi(2)
        })
        .sum::<f64>()
        / n as f64;
    let pass = (engine - 2.0).abs() <= 0.05 * 2.0 && (oracle - 2.0).abs() <= 0.05 * 2.0;
    Ok((pass, format!("engine {engine:.4}, simulation {oracle:.4}, analytic 2")))
}

// ---------------------------------------------------------------------------
// shared fixtures for 4, 5, 6

struct Trained {
    model: Cascade,
    seconds: f64,
}

struct Fixtures {
    corpus: Corpus,
    heldout: Vec<UtteranceRecord>,
    data: Vec<CascadeExample>,
    models: BTreeMap<String, Trained>,
    evals: BTreeMap<String, JsEvaluation>,
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: TRAIN_STEPS,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

impl Fixtures {
    fn new() -> Result<Self, String> {
        let corpus = generate_corpus(&ToyCorpusSpec::default()).map_err(err)?;
        let heldout = generate_heldout(&corpus.spec, EvalConfig::default().n_utterances).map_err(err)?;
        let data = corpus_examples(&corpus);
        Ok(Fixtures {
            corpus,
            heldout,
            data,
            models: BTreeMap::new(),
            evals: BTreeMap::new(),
        })
    }

    fn train(&mut self, key: &str, mut spec: CascadeSpec, seed: u64) -> Result<(), String> {
        if self.models.contains_key(key) {
            return Ok(());
        }
        spec.seed = seed;
        let started = Instant::now();
        let mut model = Cascade::new(spec).map_err(err)?;
        model.train(&self.data, &train_config(seed)).map_err(err)?;
        let seconds = started.elapsed().as_secs_f64();
        self.models.insert(key.to_string(), Trained { model, seconds });
        Ok(())
    }

    fn cascade(&mut self, kind: ModelKind, order: &[Variable], seed: u64) -> Result<String, String> {
        let tag = if order[0] == Variable::Energy { "energy-first" } else { "pitch-first" };
        let key = format!("{kind}/{tag}/{seed}");
        if kind == ModelKind::Rf {
            let teacher = self.cascade(ModelKind::Cfm, order, seed)?;
            if !self.models.contains_key(&key) {
                let base = &self.models[&teacher];
                let cfg = ReflowConfig {
                    adam: train_config(seed).adam,
                    seed,
                    ..ReflowConfig::for_base_steps(TRAIN_STEPS)
                };
                let started = Instant::now();
                let model = base.model.reflow(&self.data, &cfg).map_err(err)?;
                let seconds = base.seconds + started.elapsed().as_secs_f64();
                self.models.insert(key.clone(), Trained { model, seconds });
            }
        } else {
            self.train(&key, CascadeSpec::cascade(kind, order), seed)?;
        }
        Ok(key)
    }

    fn joint(&mut self, kind: ModelKind, seed: u64) -> Result<String, String> {
        let key = format!("{kind}/joint/{seed}");
        self.train(&key, CascadeSpec::joint(kind), seed)?;
        Ok(key)
    }

    fn eval(&mut self, key: &str) -> Result<&JsEvaluation, String> {
        if !self.evals.contains_key(key) {
            let e = evaluate_js(&self.models[key].model, &self.corpus, &self.heldout, &EvalConfig::default())
                .map_err(err)?;
            self.evals.insert(key.to_string(), e);
        }
        Ok(&self.evals[key])
    }
}

// ---------------------------------------------------------------------------
// 4

fn distribution_recovery(fx: &mut Fixtures) -> Outcome {
    let order = CascadeSpec::energy_first();
    let mut keys = Vec::new();
    for kind in [ModelKind::Nf, ModelKind::Cfm, ModelKind::Rf, ModelKind::Det] {
        keys.push((kind, fx.cascade(kind, &order, 0)?));
    }
    let mut pass = true;
    let mut notes = Vec::new();
    for (kind, key) in &keys {
        let secs = fx.models[key].seconds;
        pass &= Duration::from_secs_f64(secs) <= TRAIN_BUDGET;
        notes.push(format!("{kind} {secs:.0}s"));
    }
    let det = fx.eval(&keys[3].1)?.clone();
    for var in Variable::ALL {
        let det_js = det.get(var).mean();
        let mut parts = vec![format!("DET {det_js:.3}")];
        for (kind, key) in &keys[..3] {
            let js = fx.eval(key)?.get(var).clone();
            let ok = js.mean() < det_js && js.max_unimodal() <= UNIMODAL_JS_MAX;
            pass &= ok;
            parts.push(format!(
                "{kind} {:.3} (unimodal max {:.3}){}",
                js.mean(),
                js.max_unimodal(),
                if ok { "" } else { " !" }
            ));
        }
        notes.push(format!("{var}: {}", parts.join(", ")));
    }
    Ok((pass, notes.join("; ")))
}

// ---------------------------------------------------------------------------
// 5

fn cascade_vs_joint(fx: &mut Fixtures) -> Outcome {
    let mut js = BTreeMap::new();
    for seed in [0, 1] {
        for (name, key) in [
            ("energy-first", fx.cascade(ModelKind::Cfm, &CascadeSpec::energy_first(), seed)?),
            ("pitch-first", fx.cascade(ModelKind::Cfm, &CascadeSpec::pitch_first(), seed)?),
            ("joint", fx.joint(ModelKind::Cfm, seed)?),
        ] {
            let e = fx.eval(&key)?;
            for var in Variable::ALL {
                js.insert((name, var, seed), e.get(var).mean());
            }
        }
    }
    let mean = |name, var| (js[&(name, var, 0)] + js[&(name, var, 1)]) / 2.0;
    let mut pass = true;
    let mut notes = Vec::new();

    let (ef, joint) = (mean("energy-first", Variable::Duration), mean("joint", Variable::Duration));
    pass &= ef <= joint;
    notes.push(format!("duration: energy-first {ef:.4} vs joint {joint:.4}"));

    // Seed-to-seed spread of each order gives the noise level of a
    // two-seed average; the order difference must stay within two of it.
    for var in [Variable::Pitch, Variable::Energy] {
        let d_ef = js[&("energy-first", var, 0)] - js[&("energy-first", var, 1)];
        let d_pf = js[&("pitch-first", var, 0)] - js[&("pitch-first", var, 1)];
        let sigma = ((d_ef * d_ef + d_pf * d_pf) / 4.0).sqrt();
        let diff = mean("energy-first", var) - mean("pitch-first", var);
        pass &= diff.abs() <= 2.0 * sigma;
        notes.push(format!("{var}: order difference {diff:+.4}, band ±{:.4}", 2.0 * sigma));
    }
    Ok((pass, notes.join("; ")))
}

// ---------------------------------------------------------------------------
// 6

/// Least-squares R² of `ln v` against `tau`.
fn semilog_r2(taus: &[f64], values: &[f64]) -> f64 {
    let y: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = taus.len() as f64;
    let mx = taus.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = taus.iter().zip(&y).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = taus.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|y| (y - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn temperature_control(fx: &mut Fixtures) -> Outcome {
    let order = CascadeSpec::energy_first();
    let vars = [Variable::Pitch, Variable::Duration];
    let utts: Vec<UtteranceRecord> = fx.heldout[..SWEEP_UTTERANCES].to_vec();
    let mut pass = true;
    let mut notes = Vec::new();
    for kind in [ModelKind::Nf, ModelKind::Cfm, ModelKind::Rf, ModelKind::Det] {
        let key = fx.cascade(kind, &order, 0)?;
        let tables: Vec<SweepTable> =
            sweep_cascade(&fx.models[&key].model, &utts, &DEFAULT_TAU_GRID, SWEEP_DRAWS, &vars, 0).map_err(err)?;
        for (var, table) in vars.iter().zip(&tables) {
            let taus = table.taus();
            for (stat, values) in [("within", table.within()), ("across", table.across())] {
                if kind == ModelKind::Det {
                    let flat = values.iter().all(|v| *v == values[0]);
                    pass &= flat;
                    notes.push(format!("DET {var} {stat}: {}", if flat { "flat" } else { "NOT flat" }));
                    continue;
                }
                let rho = spearman(&taus, &values).map_err(err)?;
                let fit = loglinear_fit(&taus, &values).map_err(err)?;
                pass &= rho == 1.0 && fit.r_squared >= 0.9;
                notes.push(format!(
                    "{kind} {var} {stat}: rho {rho:.2}, R² {:.3} (ln v vs tau: {:.3})",
                    fit.r_squared,
                    semilog_r2(&taus, &values)
                ));
            }
        }
    }
    Ok((pass, notes.join("; ")))
}

// ---------------------------------------------------------------------------
// 7

fn reflow_straightening() -> Outcome {
    let mut r = rng(7);
    let cond = Tensor::from_fn(&[1, 4], |i| if i == 0 { 1.0 } else { 0.0 });
    let data: Vec<Example> = (0..1024)
        .map(|_| {
            let center = if r.random::<f64>() < 0.5 { -1.5 } else { 1.5 };
            let e: f64 = StandardNormal.sample(&mut r);
            Example {
                cond: cond.clone(),
                target: Tensor::new(vec![1, 1], vec![center + 0.3 * e]).expect("shape"),
            }
        })
        .collect();
    let cfg = ModelConfig {
        kind: ModelKind::Cfm,
        condition_dim: 4,
        ..ModelConfig::default()
    };
    let mut teacher = FlowModel::new(cfg, 7).map_err(err)?;
    let steps = 1500;
    let tc = TrainConfig {
        steps,
        batch_size: 64,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    train_model(&mut teacher, &data, &tc).map_err(err)?;
    let rc = ReflowConfig {
        batch_size: 64,
        adam: tc.adam,
        ..ReflowConfig::for_base_steps(steps)
    };
    let (student, _) = reflow(&teacher, &[cond.clone()], &rc, None).map_err(err)?;

    let n = 2000;
    let (bc, bm) = repeat_condition(&cond, n).map_err(err)?;
    let x0 = randn(&[n, 1, 8], 1.0, &mut rng(77));
    let measure = |m: &FlowModel| -> Result<(f64, f64), String> {
        let curv = model_path_curvature(m, &bc, &bm, &x0, 100).map_err(err)?;
        let mean_curv = curv.iter().map(|c| c.value).sum::<f64>() / curv.len() as f64;
        let draw = |k| -> Result<Vec<f64>, String> {
            let x = m.transport(&bc, &bm, &x0, k).map_err(err)?;
            Ok(unlift_contour(&x, 1).map_err(err)?.into_data())
        };
        let gap = js_samples(&draw(1)?, &draw(32)?).map_err(err)?.value_nats;
        Ok((mean_curv, gap))
    };
    let (c_t, g_t) = measure(&teacher)?;
    let (c_s, g_s) = measure(&student)?;
    Ok((
        c_s < c_t && g_s < g_t,
        format!("curvature CFM {c_t:.4} -> RF {c_s:.4}; JS(1 step, 32 steps) CFM {g_t:.4} -> RF {g_s:.4}"),
    ))
}

// ---------------------------------------------------------------------------
// 8

fn normal_pdf(x: f64, mu: f64) -> f64 {
    (-(x - mu).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// JS of N(0,1) and N(1,1) by trapezoid integration on 2^20 points.
fn js_oracle() -> f64 {
    let n = 1 << 20;
    let (lo, hi) = (-15.0, 16.0);
    let h = (hi - lo) / (n - 1) as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let x = lo + i as f64 * h;
        let p = normal_pdf(x, 0.0);
        let q = normal_pdf(x, 1.0);
        let m = 0.5 * (p + q);
        let mut f = 0.0;
        if p > 0.0 {
            f += 0.5 * p * (p / m).ln();
        }
        if q > 0.0 {
            f += 0.5 * q * (q / m).ln();
        }
        acc += if i == 0 || i == n - 1 { 0.5 * f } else { f };
    }
    acc * h
}

fn js_correctness() -> Outcome {
    let oracle = js_oracle();
    let p = DensityEstimate::from_fn(-8.0, 8.0, 512, |x| normal_pdf(x, 0.0)).map_err(err)?;
    let q = DensityEstimate::from_fn(-7.0, 9.0, 512, |x| normal_pdf(x, 1.0)).map_err(err)?;
    let engine = js_divergence(&p, &q).map_err(err)?.value_nats;

    let mut r = rng(8);
    let a: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut r)).collect();
    let same = js_samples(&a, &a).map_err(err)?.value_nats;
    let far: Vec<f64> = a.iter().map(|x| x + 1000.0).collect();
    let apart = js_samples(&a, &far).map_err(err)?.value_nats;

    let ln2 = std::f64::consts::LN_2;
    let pass = (engine - oracle).abs() < 1e-3 && same.abs() < 1e-9 && (apart - ln2).abs() < 1e-3;
    Ok((
        pass,
        format!("N(0,1) vs N(1,1): engine {engine:.6}, oracle {oracle:.6}; identical {same:.1e}; separated {apart:.6} (ln 2 = {ln2:.6})"),
    ))
}

// ---------------------------------------------------------------------------
// 9

fn euler_convergence() -> Outcome {
    let decay = |x: &Tensor, _t: f64| Ok(x.map(|v| -v));
    let x0 = Tensor::from_vec(vec![1.0]);
    let exact = (-1.0f64).exp();
    let error = |n| -> Result<f64, String> { Ok((euler_solve(&decay, &x0, n).map_err(err)?.data()[0] - exact).abs()) };
    let mut pass = true;
    let mut ratios = Vec::new();
    for n in [16, 32, 64] {
        let ratio = error(n)? / error(2 * n)?;
        pass &= (1.7..=2.3).contains(&ratio);
        ratios.push(format!("{n}->{}: {ratio:.3}", 2 * n));
    }
    Ok((pass, format!("error ratios {}", ratios.join(", "))))
}

// ---------------------------------------------------------------------------
// 10

fn cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_flowprosody"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(err)?;
    if !status.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&status.stderr).trim()));
    }
    Ok(())
}

fn pipeline(out: &Path) -> Result<Duration, String> {
    let started = Instant::now();
    let rf = out.join("model-rf.ckpt");
    let rf = rf.to_str().unwrap();
    let samples = out.join("samples-rf.jsonl");
    cli(out, &["gen-data"])?;
    cli(out, &["train"])?;
    cli(out, &["reflow"])?;
    cli(out, &["sweep", "--checkpoint", rf])?;
    cli(out, &["sample", "--checkpoint", rf])?;
    cli(out, &["eval-js", "--samples", samples.to_str().unwrap()])?;
    Ok(started.elapsed())
}

fn artifacts(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(err)? {
        let entry = entry.map_err(err)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name != flowprosody_cli::commands::LOG_FILE {
            files.insert(name, std::fs::read(entry.path()).map_err(err)?);
        }
    }
    Ok(files)
}

fn reproducibility() -> Outcome {
    let root = tempfile::tempdir().map_err(err)?;
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let ta = pipeline(&a)?;
    let tb = pipeline(&b)?;
    let (fa, fb) = (artifacts(&a)?, artifacts(&b)?);
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let pass = fa.len() == fb.len() && differing.is_empty() && ta < PIPELINE_BUDGET && tb < PIPELINE_BUDGET;
    Ok((
        pass,
        format!(
            "{} artifacts, {} differ {differing:?}; runs {:.0}s and {:.0}s",
            fa.len(),
            differing.len(),
            ta.as_secs_f64(),
            tb.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let fixtures: OnceCell<std::cell::RefCell<Fixtures>> = OnceCell::new();
    let with_fixtures = |f: fn(&mut Fixtures) -> Outcome| -> Outcome {
        let cell = match fixtures.get() {
            Some(c) => c,
            None => {
                let fx = Fixtures::new()?;
                fixtures.get_or_init(|| std::cell::RefCell::new(fx))
            }
        };
        f(&mut cell.borrow_mut())
    };

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("criterion_01_gradient_integrity", Box::new(gradient_integrity)),
        ("criterion_02_nf_invertibility", Box::new(nf_invertibility)),
        ("criterion_03_cfm_loss_sanity", Box::new(cfm_loss_sanity)),
        ("criterion_04_distribution_recovery", Box::new(|| with_fixtures(distribution_recovery))),
        ("criterion_05_cascade_vs_joint", Box::new(|| with_fixtures(cascade_vs_joint))),
        ("criterion_06_temperature_control", Box::new(|| with_fixtures(temperature_control))),
        ("criterion_07_reflow_straightening", Box::new(reflow_straightening)),
        ("criterion_08_js_correctness", Box::new(js_correctness)),
        ("criterion_09_euler_convergence", Box::new(euler_convergence)),
        ("criterion_10_reproducibility", Box::new(reproducibility)),
    ];

    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let (status, detail) = match run() {
            Ok((true, d)) => ("PASS", d),
            Ok((false, d)) => ("FAIL", d),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} {name} [{:.1}s] {detail}", started.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
