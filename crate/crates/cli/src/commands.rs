use std::fmt::Display;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use distil_core::corpus::read_documents;
use distil_core::eval::{self, AlignmentMetrics, BenchOptions, MlmMetrics};
use distil_core::train::{
    self, load_checkpoint, prepare_run_data, save_checkpoint, LossLog, LossRecord, RunData,
};
use distil_core::{param_count, EncoderModel, Error, ModelConfig, RunConfig, Vocabulary};
use serde::Serialize;

use crate::manifest::{self, InputDigest, RunManifest, MANIFEST_FILE};
use crate::{BenchArgs, DistillArgs, EvalMlmArgs, F1Args, OptionalOutArgs, ParamsArgs, TrainTeacherArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Runtime,
    Usage,
}

impl ErrorKind {
    pub fn code(self) -> u8 {
        match self {
            Self::Runtime => 1,
            Self::Usage => 2,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn runtime(source: anyhow::Error) -> Self {
        Self {
            kind: ErrorKind::Runtime,
            source,
        }
    }

    pub fn usage(source: anyhow::Error) -> Self {
        Self {
            kind: ErrorKind::Usage,
            source,
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let kind = match err {
            Error::Config(_) => ErrorKind::Usage,
            _ => ErrorKind::Runtime,
        };
        Self {
            kind,
            source: err.into(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Prints one `key: value` line.
fn kv(key: &str, value: impl Display) {
    println!("{key}: {value}");
}

fn quiet() -> bool {
    std::env::var("DISTIL_LOG").is_ok_and(|v| v == "quiet")
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    Ok(RunConfig::load(path)?)
}

/// Goes through text so `f32` fields keep their short decimal form.
fn config_value(config: &RunConfig) -> serde_json::Value {
    let text = serde_json::to_string(config).expect("config serializes");
    serde_json::from_str(&text).expect("serialized config parses")
}

fn sibling_vocab(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("vocab.txt")
}

/// Millions with one decimal, e.g. `110.0M`.
fn millions(n: u64) -> String {
    format!("{:.1}M", n as f64 / 1e6)
}

fn with_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

struct Finish<'a> {
    command: &'a str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Finish<'_> {
    fn write(self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut outputs = self.outputs;
        outputs.push(path.clone());
        let manifest = RunManifest {
            command: self.command.to_owned(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        manifest::write_json(&path, &manifest)
    }
}

/// Writes `report.json` and the manifest when `--out` was given.
fn finish_optional(out: &OptionalOutArgs, finish: Finish<'_>, report: &impl Serialize) -> CliResult<()> {
    let Some(dir) = &out.out else {
        return Ok(());
    };
    manifest::prepare_out_dir(dir, out.force)?;
    let report_path = dir.join("report.json");
    manifest::write_json(&report_path, report)?;
    let mut finish = finish;
    finish.outputs.push(report_path);
    finish.write(dir)
}

fn print_mlm(prefix: &str, m: &MlmMetrics) {
    kv(&format!("{prefix}accuracy"), format!("{:.6}", m.accuracy));
    kv(&format!("{prefix}perplexity"), format!("{:.6}", m.perplexity));
    kv(&format!("{prefix}masked_tokens"), m.masked_count);
}

fn print_alignment(a: &AlignmentMetrics) {
    kv("soft_label_kl", format!("{:.6}", a.soft_label_kl));
    kv("cosine_similarity", format!("{:.6}", a.cosine_similarity));
    kv("aligned_tokens", a.token_count);
}

pub fn params(args: ParamsArgs) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(&args.config)?;
    let m = &config.model;
    let formula = param_count(m);
    let audit = EncoderModel::zeros(m)?.audit();
    kv("layers", m.num_layers);
    kv("hidden_size", m.hidden_size);
    kv("heads", m.num_heads);
    kv("ffn_size", m.ffn_size);
    kv("vocab_size", m.vocab_size);
    kv("positions", m.max_positions);
    kv("formula_count", formula);
    kv("formula_count_grouped", with_thousands(formula));
    kv("formula_count_rounded", millions(formula));
    kv("audited_count", audit.architecture);
    kv("lm_head_extras", audit.lm_head_extras);
    kv("counts_agree", audit.architecture == formula);
    #[derive(Serialize)]
    struct Report {
        model: ModelConfig,
        formula_count: u64,
        audited_count: u64,
        lm_head_extras: u64,
    }
    let report = Report {
        model: m.clone(),
        formula_count: formula,
        audited_count: audit.architecture,
        lm_head_extras: audit.lm_head_extras,
    };
    let finish = Finish {
        command: "params",
        config: config_value(&config),
        seed: None,
        inputs: vec![manifest::input(&args.config)?],
        outputs: Vec::new(),
        started,
    };
    finish_optional(&args.out, finish, &report)?;
    if audit.architecture != formula {
        return Err(CliError::runtime(anyhow!(
            "audited count {} differs from formula {formula}",
            audit.architecture
        )));
    }
    Ok(())
}

/// Loss-log sink plus stderr progress.
struct Progress {
    log: LossLog<BufWriter<File>>,
    error: Option<std::io::Error>,
    every: usize,
    label: &'static str,
}

impl Progress {
    fn new(path: &Path, steps: usize, label: &'static str) -> CliResult<Self> {
        let file = File::create(path)
            .with_context(|| format!("creating {}", path.display()))
            .map_err(CliError::runtime)?;
        Ok(Self {
            log: LossLog::new(BufWriter::new(file)),
            error: None,
            every: (steps / 10).max(1),
            label,
        })
    }

    fn observe(&mut self, record: &LossRecord) {
        if self.error.is_none() {
            self.error = self.log.append(record).err();
        }
        if record.step % self.every == 0 && !quiet() {
            eprintln!("{} step {} loss {:.6}", self.label, record.step, record.loss.total);
        }
    }

    fn finish(self, path: &Path) -> CliResult<()> {
        match self.error {
            Some(e) => Err(CliError::runtime(
                anyhow::Error::new(e).context(format!("writing {}", path.display())),
            )),
            None => Ok(()),
        }
    }
}

fn run_data(corpus: &Path, vocab: Option<Vocabulary>, config: &RunConfig, seed: u64) -> CliResult<RunData> {
    let docs = read_documents(corpus)?;
    Ok(prepare_run_data(&docs, vocab, config, seed)?)
}

pub fn train_teacher(args: TrainTeacherArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut config = load_config(&args.config)?;
    let seed = args.seed.unwrap_or(config.seed);
    config.seed = seed;
    if args.steps == 0 {
        return Err(CliError::usage(anyhow!("--steps must be at least 1")));
    }
    let mut data = run_data(&args.corpus, None, &config, seed)?;
    let inputs = vec![manifest::input(&args.config)?, manifest::input(&args.corpus)?];

    let dir = &args.out.out;
    manifest::prepare_out_dir(dir, args.out.force)?;
    let log_path = dir.join("loss.log");
    let ckpt_path = dir.join("teacher.ckpt");
    let vocab_path = dir.join("vocab.txt");
    let config_path = dir.join("config.toml");
    let mut progress = Progress::new(&log_path, args.steps, "teacher")?;
    let outcome = train::train_teacher(
        &config.model,
        &mut data.stream,
        args.steps,
        seed,
        &config.optimizer,
        &mut |r| progress.observe(r),
    )?;
    progress.finish(&log_path)?;
    let digest = save_checkpoint(&outcome.model, &outcome.meta(seed), &ckpt_path)?;
    data.vocab.save(&vocab_path)?;
    write_text(&config_path, &config.to_toml())?;

    let last = outcome.records.last().expect("at least one record");
    kv("steps", args.steps);
    kv("seed", seed);
    kv("final_loss", format!("{:.6}", last.loss.total));
    if !data.held_out.is_empty() {
        print_mlm("held_out_", &eval::mlm_eval(&outcome.model, &data.held_out)?);
    }
    kv("checkpoint", ckpt_path.display());
    kv("checkpoint_digest", format!("{digest:016x}"));
    Finish {
        command: "train-teacher",
        config: config_value(&config),
        seed: Some(seed),
        inputs,
        outputs: vec![ckpt_path, vocab_path, log_path, config_path],
        started,
    }
    .write(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::runtime)
}

pub fn distill(args: DistillArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut config = load_config(&args.config)?;
    let seed = args.seed.unwrap_or(config.seed);
    config.seed = seed;
    if let Some(a) = args.alpha {
        config.distill.alpha = a;
    }
    if let Some(b) = args.beta {
        config.distill.beta = b;
    }
    if let Some(g) = args.gamma {
        config.distill.gamma = g;
    }
    config.distill.validate()?;
    if args.steps == 0 {
        return Err(CliError::usage(anyhow!("--steps must be at least 1")));
    }
    let teacher = load_checkpoint(&args.teacher)?;
    if teacher.model.config != config.model {
        return Err(CliError::usage(anyhow!(
            "[model] in {} does not match the teacher checkpoint {}",
            args.config.display(),
            args.teacher.display()
        )));
    }
    let vocab_in = args.vocab.clone().unwrap_or_else(|| sibling_vocab(&args.teacher));
    let vocab = Vocabulary::load(&vocab_in)?;
    let mut data = run_data(&args.corpus, Some(vocab), &config, seed)?;
    let inputs = vec![
        manifest::input(&args.config)?,
        manifest::input(&args.corpus)?,
        manifest::input(&args.teacher)?,
        manifest::input(&vocab_in)?,
    ];
    let student_config = config.distill.student_config(&teacher.model.config);

    let dir = &args.out.out;
    manifest::prepare_out_dir(dir, args.out.force)?;
    let log_path = dir.join("loss.log");
    let ckpt_path = dir.join("student.ckpt");
    let vocab_path = dir.join("vocab.txt");
    let config_path = dir.join("config.toml");
    let mut progress = Progress::new(&log_path, args.steps, "distill")?;
    let outcome = train::distill(
        &teacher.model,
        &student_config,
        &mut data.stream,
        args.steps,
        &config.distill,
        &config.optimizer,
        &mut |r| progress.observe(r),
    )?;
    progress.finish(&log_path)?;
    let digest = save_checkpoint(&outcome.model, &outcome.meta(seed), &ckpt_path)?;
    data.vocab.save(&vocab_path)?;
    let mut snapshot = config.clone();
    snapshot.model = student_config.clone();
    write_text(&config_path, &snapshot.to_toml())?;

    let last = outcome.records.last().expect("at least one record").loss;
    kv("steps", args.steps);
    kv("seed", seed);
    kv("student_layers", student_config.num_layers);
    kv("alpha", config.distill.alpha);
    kv("beta", config.distill.beta);
    kv("gamma", config.distill.gamma);
    kv("final_soft_label", format!("{:.6}", last.soft_label));
    kv("final_cosine", format!("{:.6}", last.cosine));
    kv("final_mlm", format!("{:.6}", last.mlm));
    kv("final_loss", format!("{:.6}", last.total));
    if !data.held_out.is_empty() {
        print_alignment(&eval::alignment(&outcome.model, &teacher.model, &data.held_out)?);
        print_mlm("held_out_", &eval::mlm_eval(&outcome.model, &data.held_out)?);
    }
    kv("checkpoint", ckpt_path.display());
    kv("checkpoint_digest", format!("{digest:016x}"));
    Finish {
        command: "distill",
        config: config_value(&config),
        seed: Some(seed),
        inputs,
        outputs: vec![ckpt_path, vocab_path, log_path, config_path],
        started,
    }
    .write(dir)
}

pub fn eval_mlm(args: EvalMlmArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut config = load_config(&args.config)?;
    let seed = args.seed.unwrap_or(config.seed);
    config.seed = seed;
    let model = load_checkpoint(&args.checkpoint)?.model;
    config.model = model.config.clone();
    config.validate()?;
    let vocab_in = args.vocab.clone().unwrap_or_else(|| sibling_vocab(&args.checkpoint));
    let vocab = Vocabulary::load(&vocab_in)?;
    let data = run_data(&args.corpus, Some(vocab), &config, seed)?;
    if data.held_out.is_empty() {
        return Err(CliError::usage(anyhow!(
            "held-out split is empty; raise data.held_out_fraction"
        )));
    }
    let mut inputs = vec![
        manifest::input(&args.config)?,
        manifest::input(&args.corpus)?,
        manifest::input(&args.checkpoint)?,
        manifest::input(&vocab_in)?,
    ];
    let metrics = eval::mlm_eval(&model, &data.held_out)?;
    print_mlm("", &metrics);
    kv("mean_nll", format!("{:.6}", metrics.mean_nll));
    let alignment = match &args.teacher {
        Some(path) => {
            inputs.push(manifest::input(path)?);
            let teacher = load_checkpoint(path)?.model;
            let a = eval::alignment(&model, &teacher, &data.held_out)?;
            print_alignment(&a);
            Some(a)
        }
        None => None,
    };
    #[derive(Serialize)]
    struct Report {
        mlm: MlmMetrics,
        alignment: Option<AlignmentMetrics>,
    }
    let finish = Finish {
        command: "eval-mlm",
        config: config_value(&config),
        seed: Some(seed),
        inputs,
        outputs: Vec::new(),
        started,
    };
    finish_optional(
        &args.out,
        finish,
        &Report {
            mlm: metrics,
            alignment,
        },
    )
}

pub fn bench(args: BenchArgs) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(&args.config)?;
    let seed = args.seed.unwrap_or(config.seed);
    let teacher_config = config.model.clone();
    let student_config = config.distill.student_config(&teacher_config);
    student_config.validate()?;
    let (tf, sf, ratio, warning) =
        eval::flop_comparison(&teacher_config, &student_config, args.seq_len, args.batch);
    kv("teacher_layers", teacher_config.num_layers);
    kv("student_layers", student_config.num_layers);
    kv("seq_len", args.seq_len);
    kv("batch", args.batch);
    kv("teacher_stack_flops", tf);
    kv("student_stack_flops", sf);
    kv("stack_flop_ratio", ratio);
    if let Some(w) = &warning {
        kv("warning", w);
    }
    let inputs = vec![manifest::input(&args.config)?];
    let finish = Finish {
        command: "bench",
        config: config_value(&config),
        seed: Some(seed),
        inputs,
        outputs: Vec::new(),
        started,
    };
    if args.flops_only {
        #[derive(Serialize)]
        struct Report {
            teacher_stack_flops: u64,
            student_stack_flops: u64,
            stack_flop_ratio: f64,
            warning: Option<String>,
        }
        let report = Report {
            teacher_stack_flops: tf,
            student_stack_flops: sf,
            stack_flop_ratio: ratio,
            warning,
        };
        return finish_optional(&args.out, finish, &report);
    }
    if args.seq_len > teacher_config.max_sequence_len() {
        return Err(CliError::usage(anyhow!(
            "--seq-len {} exceeds the model's maximum {}",
            args.seq_len,
            teacher_config.max_sequence_len()
        )));
    }
    let teacher = EncoderModel::init_random(&teacher_config, seed)?;
    let student = EncoderModel::init_random(&student_config, seed)?;
    let options = BenchOptions {
        seq_len: args.seq_len,
        batch: args.batch,
        iters: args.iters,
        warmup: args.warmup,
        seed,
    };
    let report = eval::bench(&teacher, &student, &options)?;
    kv("iters", report.iters);
    kv("teacher_median_seconds", format!("{:.6}", report.teacher.median_seconds));
    kv("teacher_mean_seconds", format!("{:.6}", report.teacher.mean_seconds));
    kv("student_median_seconds", format!("{:.6}", report.student.median_seconds));
    kv("student_mean_seconds", format!("{:.6}", report.student.mean_seconds));
    kv("speedup", format!("{:.4}", report.speedup));
    finish_optional(&args.out, finish, &report)
}

fn read_lines(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::runtime)?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect())
}

pub fn f1(args: F1Args) -> CliResult<()> {
    let started = Instant::now();
    let predicted = read_lines(&args.predicted)?;
    let gold = read_lines(&args.gold)?;
    if predicted.len() != gold.len() {
        return Err(CliError::usage(anyhow!(
            "{} has {} lines but {} has {}",
            args.predicted.display(),
            predicted.len(),
            args.gold.display(),
            gold.len()
        )));
    }
    let pairs: Vec<_> = predicted.into_iter().zip(gold).collect();
    let report = eval::f1_report(&pairs);
    if args.per_example {
        for (i, s) in report.per_example.iter().enumerate() {
            kv(&format!("example_{i}"), format!("{:.6} {:.6} {:.6}", s.precision, s.recall, s.f1));
        }
    }
    kv("examples", pairs.len());
    kv("precision", format!("{:.6}", report.micro.precision));
    kv("recall", format!("{:.6}", report.micro.recall));
    kv("f1", format!("{:.6}", report.micro.f1));
    let mean = if pairs.is_empty() {
        0.0
    } else {
        report.per_example.iter().map(|s| s.f1).sum::<f64>() / pairs.len() as f64
    };
    kv("mean_example_f1", format!("{mean:.6}"));
    let finish = Finish {
        command: "f1",
        config: serde_json::Value::Null,
        seed: None,
        inputs: vec![manifest::input(&args.predicted)?, manifest::input(&args.gold)?],
        outputs: Vec::new(),
        started,
    };
    finish_optional(&args.out, finish, &report)
}
