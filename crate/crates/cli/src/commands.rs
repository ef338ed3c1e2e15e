use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowprosody::cascade::{
    corpus_examples, order_experiment, sweep_cascade, utterance_seed, Cascade, CascadeMode, CascadeSpec, CascadeLog,
};
use flowprosody::evalsuite::{class_js, loglinear_fit, spearman, ClassJs, SweepTable};
use flowprosody::generative::{ModelKind, SamplerConfig};
use flowprosody::synthdata::{generate_corpus, generate_heldout, reference_realizations, Corpus, Variable};

use crate::config::RunConfig;
use crate::error::{lift, CliError, Result};
use crate::plot::{line_plot, Series};
use crate::samples::{SampleSet, SamplesHeader, SAMPLES_FORMAT};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
/// Wall-clock timings; the only non-reproducible output of a run.
pub const LOG_FILE: &str = "run.log";

/// Resolved configuration plus the output directory every command writes to.
pub struct Context {
    pub config: RunConfig,
    pub config_hash: String,
    pub out: PathBuf,
    pub threads: usize,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf, threads: usize) -> Result<Self> {
        let config = config.resolve()?;
        let config_hash = config.hash();
        fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        Ok(Context {
            config,
            config_hash,
            out,
            threads: threads.max(1),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// CSV with a leading comment naming the format and config hash.
    fn write_csv(&self, name: &str, format: &str, body: &str) -> Result<PathBuf> {
        self.write(
            name,
            &format!("# format={format} config_hash={}\n{body}", self.config_hash),
        )
    }

    fn log(&self, command: &str, started: Instant) -> Result<()> {
        let path = self.path(LOG_FILE);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        writeln!(f, "{command} {:.3}s", started.elapsed().as_secs_f64()).map_err(|e| CliError::io(&path, e))
    }

    fn training_corpus_path(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.config.corpus_path.clone())
            .unwrap_or_else(|| self.path(CORPUS_FILE))
    }

    fn heldout_path(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf).unwrap_or_else(|| self.path(HELDOUT_FILE))
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path).map_err(lift)
}

fn load_cascade(path: &Path) -> Result<Cascade> {
    Cascade::load(path).map_err(lift)
}

fn kind_tag(kind: ModelKind) -> String {
    kind.as_str().to_ascii_lowercase()
}

pub fn checkpoint_name(kind: ModelKind, mode: CascadeMode) -> String {
    match mode {
        CascadeMode::Cascade => format!("model-{}.ckpt", kind_tag(kind)),
        CascadeMode::Joint => format!("model-{}-joint.ckpt", kind_tag(kind)),
    }
}

fn loss_csv(log: &CascadeLog) -> String {
    let mut out = format!("step,{}\n", log.labels.join(","));
    let steps = log.losses.first().map_or(0, Vec::len);
    for i in 0..steps {
        let row: Vec<String> = log.losses.iter().map(|s| s[i].to_string()).collect();
        out.push_str(&format!("{i},{}\n", row.join(",")));
    }
    out
}

/// Writes `corpus.jsonl` and `heldout.jsonl`.
pub fn gen_data(ctx: &Context) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let corpus = generate_corpus(&ctx.config.corpus)?;
    let heldout = Corpus {
        spec: corpus.spec.clone(),
        records: generate_heldout(&corpus.spec, ctx.config.heldout_utterances)?,
    };
    let tag = Some(ctx.config_hash.as_str());
    let paths = vec![
        ctx.write(CORPUS_FILE, &corpus.to_jsonl_tagged(tag)?)?,
        ctx.write(HELDOUT_FILE, &heldout.to_jsonl_tagged(tag)?)?,
    ];
    ctx.log("gen-data", started)?;
    Ok(paths)
}

pub fn train(ctx: &Context, corpus: Option<&Path>, kind: Option<ModelKind>) -> Result<PathBuf> {
    let started = Instant::now();
    let corpus = load_corpus(&ctx.training_corpus_path(corpus))?;
    let mut spec: CascadeSpec = ctx.config.cascade.clone();
    if let Some(k) = kind {
        spec.model.kind = k;
    }
    let mut cascade = Cascade::new(spec)?;
    let log = cascade.train(&corpus_examples(&corpus), &ctx.config.train)?;
    cascade.set_corpus_hash(&corpus.hash()?);
    cascade.set_config_hash(&ctx.config_hash);
    cascade.quantize_to_f32();
    let name = checkpoint_name(cascade.kind(), cascade.spec().mode);
    let path = ctx.path(&name);
    cascade.save(&path)?;
    let stem = name.trim_end_matches(".ckpt");
    ctx.write_csv(&format!("{stem}.loss.csv"), "flowprosody-loss-v1", &loss_csv(&log))?;
    ctx.log("train", started)?;
    Ok(path)
}

pub fn reflow(ctx: &Context, teacher: Option<&Path>, teacher_hash: Option<&str>, corpus: Option<&Path>) -> Result<PathBuf> {
    let started = Instant::now();
    let teacher_path = teacher
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.path(&checkpoint_name(ModelKind::Cfm, ctx.config.cascade.mode)));
    let teacher = load_cascade(&teacher_path)?;
    if let Some(expected) = teacher_hash {
        let found = teacher.checkpoint_hash()?;
        if found != expected {
            return Err(CliError::HashMismatch {
                what: teacher_path.display().to_string(),
                expected: expected.to_string(),
                found,
            });
        }
    }
    let corpus = load_corpus(&ctx.training_corpus_path(corpus))?;
    let corpus_hash = corpus.hash()?;
    if let Some(trained_on) = teacher.corpus_hash() {
        if trained_on != corpus_hash {
            return Err(CliError::HashMismatch {
                what: "teacher training corpus".into(),
                expected: trained_on.to_string(),
                found: corpus_hash,
            });
        }
    }
    let mut student = teacher.reflow(&corpus_examples(&corpus), &ctx.config.reflow_config())?;
    student.set_config_hash(&ctx.config_hash);
    student.quantize_to_f32();
    let path = ctx.path(&checkpoint_name(ModelKind::Rf, student.spec().mode));
    student.save(&path)?;
    ctx.log("reflow", started)?;
    Ok(path)
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub corpus: Option<&'a Path>,
    pub temperature: Option<f64>,
    pub n_draws: Option<usize>,
    pub output: Option<&'a str>,
}

pub fn sample(ctx: &Context, args: &SampleArgs) -> Result<PathBuf> {
    let started = Instant::now();
    let cascade = load_cascade(args.checkpoint)?;
    let corpus = load_corpus(&ctx.heldout_path(args.corpus))?;
    let temperature = args.temperature.unwrap_or(ctx.config.sampler.temperature);
    let n_draws = args.n_draws.unwrap_or(ctx.config.sampler.n_draws);
    if n_draws == 0 {
        return Err(CliError::Usage("sample needs at least one draw".into()));
    }
    let mut utterances = Vec::with_capacity(corpus.records.len());
    for (u, rec) in corpus.records.iter().enumerate() {
        let sampler = SamplerConfig {
            temperature,
            solver_steps: Some(ctx.config.sampler.solver_steps),
            seed: utterance_seed(ctx.config.seed, u),
        };
        utterances.push((rec.utterance_id.clone(), cascade.sample(&rec.cond(), n_draws, &sampler)?));
    }
    let set = SampleSet {
        header: SamplesHeader {
            format: SAMPLES_FORMAT.to_string(),
            config_hash: ctx.config_hash.clone(),
            checkpoint_hash: cascade.checkpoint_hash()?,
            corpus_hash: corpus.hash()?,
            temperature,
            n_draws,
            seed: ctx.config.seed,
            n_utterances: utterances.len(),
        },
        utterances,
    };
    let name = args
        .output
        .map(str::to_string)
        .unwrap_or_else(|| format!("samples-{}.jsonl", kind_tag(cascade.kind())));
    let path = ctx.write(&name, &set.to_jsonl()?)?;
    ctx.log("sample", started)?;
    Ok(path)
}

fn js_csv(rows: &[ClassJs]) -> String {
    let mut out = String::from("variable,class,unimodal,js_nats,js_bits\n");
    let bits = |v: f64| v / std::f64::consts::LN_2;
    for js in rows {
        for (c, v) in js.per_class.iter().enumerate() {
            if let Some(v) = v {
                out.push_str(&format!("{},{c},{},{v},{}\n", js.variable, js.unimodal[c], bits(*v)));
            }
        }
        for (label, v) in [
            ("mean", js.mean()),
            ("mean_unimodal", js.mean_unimodal()),
            ("max_unimodal", js.max_unimodal()),
        ] {
            out.push_str(&format!("{},{label},,{v},{}\n", js.variable, bits(v)));
        }
    }
    out
}

/// Per-class JS of `samples` against `reference` draws, or against fresh
/// ground-truth draws of the same utterances when no reference is given.
pub fn eval_js(ctx: &Context, samples: &Path, reference: Option<&Path>, corpus: Option<&Path>) -> Result<PathBuf> {
    let started = Instant::now();
    let model = SampleSet::load(samples)?;
    let corpus_path = ctx.heldout_path(corpus);
    let corpus = load_corpus(&corpus_path)?;
    let check_corpus = |set: &SampleSet, origin: &Path| -> Result<()> {
        let found = corpus.hash()?;
        if set.header.corpus_hash != found {
            return Err(CliError::HashMismatch {
                what: format!("corpus of {}", origin.display()),
                expected: set.header.corpus_hash.clone(),
                found,
            });
        }
        Ok(())
    };
    check_corpus(&model, samples)?;
    let reference: Vec<_> = match reference {
        Some(path) => {
            let r = SampleSet::load(path)?;
            check_corpus(&r, path)?;
            r.utterances.into_iter().map(|(_, d)| d).collect()
        }
        None => corpus
            .records
            .iter()
            .enumerate()
            .map(|(u, rec)| reference_realizations(&corpus.spec, &rec.tokens, model.header.n_draws, u as u64))
            .collect::<flowprosody::Result<_>>()?,
    };
    let tokens: Vec<Vec<usize>> = corpus.records.iter().map(|r| r.tokens.clone()).collect();
    let draws: Vec<_> = model.utterances.into_iter().map(|(_, d)| d).collect();
    let unimodal: Vec<bool> = corpus.spec.class_laws()?.iter().map(|l| l.is_unimodal()).collect();
    let rows = Variable::ALL
        .iter()
        .map(|&v| class_js(&tokens, &draws, &reference, v, &unimodal))
        .collect::<flowprosody::Result<Vec<_>>>()?;
    let stem = samples.file_stem().and_then(|s| s.to_str()).unwrap_or("samples");
    let path = ctx.write_csv(&format!("js-{stem}.csv"), "flowprosody-js-v1", &js_csv(&rows))?;
    ctx.log("eval-js", started)?;
    Ok(path)
}

fn fit_rows(var: Variable, table: &SweepTable) -> Result<String> {
    let taus = table.taus();
    let mut out = String::new();
    for (stat, values) in [("within_utterance", table.within()), ("across_draw", table.across())] {
        let rho = spearman(&taus, &values)?;
        let fit = if taus.iter().all(|&t| t > 0.0) && taus.len() >= 3 {
            let f = loglinear_fit(&taus, &values)?;
            format!("{},{},{}", f.slope, f.intercept, f.r_squared)
        } else {
            ",,".to_string()
        };
        out.push_str(&format!("{var},{stat},{rho},{fit}\n"));
    }
    Ok(out)
}

/// Writes one CSV and SVG per variable plus a fit summary.
pub fn sweep(ctx: &Context, checkpoint: &Path, corpus: Option<&Path>) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let cascade = load_cascade(checkpoint)?;
    let corpus = load_corpus(&ctx.heldout_path(corpus))?;
    let n = ctx.config.sweep.n_utterances.min(corpus.records.len());
    let tables = sweep_cascade(
        &cascade,
        &corpus.records[..n],
        &ctx.config.tau_grid,
        ctx.config.sweep.n_draws,
        &Variable::ALL,
        ctx.config.seed,
    )?;
    let tag = kind_tag(cascade.kind());
    let comment = format!("config_hash={} checkpoint_hash={}", ctx.config_hash, cascade.checkpoint_hash()?);
    let mut paths = Vec::new();
    let mut fits = String::from("variable,statistic,spearman,slope,intercept,r_squared\n");
    for (var, table) in Variable::ALL.iter().zip(&tables) {
        paths.push(ctx.write_csv(&format!("sweep-{tag}-{var}.csv"), "flowprosody-sweep-v1", &table.to_csv())?);
        let series = [
            Series {
                label: "within-utterance variance",
                points: table.rows.iter().map(|r| (r.tau, r.within_utterance_var)).collect(),
            },
            Series {
                label: "across-draw variance",
                points: table.rows.iter().map(|r| (r.tau, r.across_draw_var)).collect(),
            },
        ];
        let svg = line_plot(
            &format!("{} {var} variance vs temperature", cascade.kind()),
            "temperature",
            "variance",
            &series,
            &comment,
        );
        paths.push(ctx.write(&format!("sweep-{tag}-{var}.svg"), &svg)?);
        fits.push_str(&fit_rows(*var, table)?);
    }
    paths.push(ctx.write_csv(&format!("sweep-{tag}-fit.csv"), "flowprosody-sweep-fit-v1", &fits)?);
    ctx.log("sweep", started)?;
    Ok(paths)
}

pub fn order_exp(ctx: &Context, corpus: Option<&Path>, heldout: Option<&Path>, kind: Option<ModelKind>) -> Result<PathBuf> {
    let started = Instant::now();
    let corpus = load_corpus(&ctx.training_corpus_path(corpus))?;
    let heldout = load_corpus(&ctx.heldout_path(heldout))?;
    let kind = kind.unwrap_or(ctx.config.kind);
    let table = order_experiment(
        &corpus,
        &heldout.records,
        kind,
        &ctx.config.cascade,
        &ctx.config.train,
        &ctx.config.eval,
        ctx.threads,
    )?;
    let path = ctx.write_csv(&format!("order-{}.csv", kind_tag(kind)), "flowprosody-order-v1", &table.to_csv())?;
    ctx.log("order-exp", started)?;
    Ok(path)
}
