//! Command-line entry point: dataset generation, training, prediction
//! strips, evaluation, the ablation trio and the gradient check.

mod config;
mod strip;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

pub use config::{set_path, FlagOverrides, RunConfig, TrainSettings, PRESETS};
pub use strip::{encode_strip, to_gray, write_strip, StripRow, SEPARATOR};

use crate::data::{read_dataset, write_dataset, BatchSpec, DataError, Generator, SequenceRecord};
use crate::gradcheck::{gradcheck, GradcheckConfig};
use crate::metrics::{evaluate, evaluate_model, CopyLast, MetricsReport};
use crate::model::{Ablation, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{train, Checkpoint, CheckpointError, TrainConfig, TrainError, TrainSource, Trainer};

/// Generated test sequences start at this index, far from any training index.
pub const TEST_INDEX_OFFSET: u64 = 1 << 40;
pub const TRAIN_FILE: &str = "train.seq0";
pub const TEST_FILE: &str = "test.seq0";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn is_missing(e: &std::io::Error) -> bool {
    e.kind() == std::io::ErrorKind::NotFound
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match &e {
            DataError::Usage(_) | DataError::Config(_) => CliError::Usage(e.to_string()),
            DataError::Io { source, .. } if is_missing(source) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match &e {
            CheckpointError::Io { source, .. } if is_missing(source) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<crate::TensorError> for CliError {
    fn from(e: crate::TensorError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "tstates",
    version,
    about = "Video frame prediction with transformational latent states"
)]
pub struct Cli {
    /// Worker threads for data-parallel work; 1 gives bitwise-reproducible runs
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON run configuration applied on top of the defaults
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. --set train.steps=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Model preset
    #[arg(long, value_parser = PRESETS)]
    pub preset: Option<String>,
    /// Architecture ablation
    #[arg(long, value_parser = ["none", "no-core", "skip-last-input", "no-residual"])]
    pub ablation: Option<String>,
    /// Seed for every random choice
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Frames per generated sequence
    #[arg(long)]
    pub frames: Option<usize>,
    /// Canvas edge in pixels
    #[arg(long)]
    pub size: Option<usize>,
    /// Sprites per sequence
    #[arg(long)]
    pub digits: Option<usize>,
    /// IDX image file to draw sprites from (e.g. MNIST digits)
    #[arg(long, value_name = "PATH", conflicts_with = "shapes")]
    pub sprites: Option<PathBuf>,
    /// Use the built-in procedural shapes as sprites
    #[arg(long)]
    pub shapes: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test datasets
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of training sequences
        #[arg(long)]
        num_train: Option<usize>,
        /// Number of test sequences
        #[arg(long)]
        num_test: Option<usize>,
    },
    /// Train a model, writing best/last checkpoints
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data_args: DataArgs,
        /// Dataset directory from `gen`; sequences are generated on the fly when absent
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Checkpoint to resume from
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Render inputs, ground truth and prediction of one sequence as a PGM strip
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file or directory
        #[arg(long)]
        data: PathBuf,
        /// Output PGM path
        #[arg(long)]
        out: PathBuf,
        /// Sequence to render
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Score a checkpoint on a test set
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file or directory
        #[arg(long)]
        data: PathBuf,
        /// Report path; printed to stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also score the copy-last-input-frame baseline
        #[arg(long)]
        baseline: bool,
    },
    /// Train and score the full model and its three ablations
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data_args: DataArgs,
        /// Dataset directory from `gen`
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report path; printed to stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient of the miniature model
    Gradcheck {
        /// Largest accepted relative error
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn flags(config: &ConfigArgs, data: &DataArgs) -> FlagOverrides {
    FlagOverrides {
        preset: config.preset.clone(),
        ablation: config.ablation.clone(),
        seed: config.seed,
        frames: data.frames,
        size: data.size,
        digits: data.digits,
        sprites: data.sprites.clone(),
        shapes: data.shapes,
        ..Default::default()
    }
}

fn resolve(config: &ConfigArgs, data: &DataArgs, extra: FlagOverrides) -> Result<RunConfig, CliError> {
    let mut f = flags(config, data);
    f.num_test = extra.num_test;
    f.num_train = extra.num_train;
    RunConfig::resolve(config.config.as_deref(), &config.sets, &f)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status. Diagnostics go to stderr, results to `out`.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                let _ = e.print();
            }
            return code;
        }
    };
    match with_threads(cli.threads, || dispatch(cli.command, out)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn with_threads<R>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<R, CliError> + Send,
) -> Result<R, CliError>
where
    R: Send,
{
    match threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        #[cfg(feature = "parallel")]
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(f),
        _ => f(),
    }
}

fn emit(out: &mut dyn Write, value: &Value) -> Result<(), CliError> {
    writeln!(out, "{value}").map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_json(path: Option<&Path>, value: &Value, out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => {
            let text = serde_json::to_string_pretty(value).expect("json value");
            std::fs::write(p, text + "\n").map_err(|e| io_err(p, e))
        }
        None => emit(out, value),
    }
}

/// Reads a SEQ0 file, or `test.seq0` inside a directory.
fn read_test_set(path: &Path) -> Result<Vec<SequenceRecord>, CliError> {
    let file = if path.is_dir() {
        path.join(TEST_FILE)
    } else {
        path.to_path_buf()
    };
    Ok(read_dataset(&file)?)
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Gen {
            config,
            data,
            out: dir,
            num_train,
            num_test,
        } => {
            let extra = FlagOverrides {
                num_train,
                num_test,
                ..Default::default()
            };
            let cfg = resolve(&config, &data, extra)?;
            gen(&cfg, &dir, out)
        }
        Command::Train {
            config,
            data_args,
            data,
            out: dir,
            ckpt,
        } => {
            let cfg = resolve(&config, &data_args, FlagOverrides::default())?;
            train_command(&cfg, data.as_deref(), &dir, ckpt.as_deref(), out)
        }
        Command::Predict {
            ckpt,
            data,
            out: path,
            index,
        } => predict(&ckpt, &data, &path, index, out),
        Command::Eval {
            ckpt,
            data,
            out: path,
            baseline,
        } => eval(&ckpt, &data, path.as_deref(), baseline, out),
        Command::Ablate {
            config,
            data_args,
            data,
            out: path,
        } => {
            let cfg = resolve(&config, &data_args, FlagOverrides::default())?;
            ablate(&cfg, data.as_deref(), path.as_deref(), out)
        }
        Command::Gradcheck { tolerance, seed } => {
            let config = GradcheckConfig {
                tolerance,
                seed,
                ..Default::default()
            };
            let report = gradcheck(&config)?;
            for g in &report.groups {
                let verdict = if g.worst_relative_error < tolerance {
                    "ok"
                } else {
                    "FAIL"
                };
                writeln!(
                    out,
                    "{:<22} {:>6} params  worst {:.3e} at {}  {verdict}",
                    g.group, g.parameters, g.worst_relative_error, g.worst_at
                )
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Runtime(format!(
                    "gradient check failed: worst relative error {:.3e} exceeds {tolerance:e}",
                    report.worst()
                )))
            }
        }
    }
}

fn generator(cfg: &RunConfig) -> Result<Generator, CliError> {
    Ok(Generator::new(cfg.data.clone())?)
}

fn gen(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let g = generator(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let train = g.generate_range(0, cfg.num_train);
    let test = g.generate_range(TEST_INDEX_OFFSET, cfg.num_test);
    write_dataset(&train, &dir.join(TRAIN_FILE))?;
    write_dataset(&test, &dir.join(TEST_FILE))?;
    emit(
        out,
        &json!({
            "train": cfg.num_train,
            "test": cfg.num_test,
            "frames": cfg.data.frames,
            "size": cfg.data.canvas,
            "seed": cfg.seed,
        }),
    )
}

/// Training and held-out sequences: from a `gen` directory, or generated.
struct DataSets {
    train: Option<Vec<SequenceRecord>>,
    generator: Option<Generator>,
    test: Vec<SequenceRecord>,
}

fn datasets(
    cfg: &RunConfig,
    dir: Option<&Path>,
    model: &ModelConfig,
    test_count: usize,
) -> Result<DataSets, CliError> {
    match dir {
        Some(d) => {
            let train = read_dataset(&d.join(TRAIN_FILE))?;
            let mut test = read_dataset(&d.join(TEST_FILE))?;
            test.truncate(test_count);
            Ok(DataSets {
                train: Some(train),
                generator: None,
                test,
            })
        }
        None => {
            cfg.check_data_fits(model)?;
            let g = generator(cfg)?;
            let test = g.generate_range(TEST_INDEX_OFFSET, test_count);
            Ok(DataSets {
                train: None,
                generator: Some(g),
                test,
            })
        }
    }
}

fn train_config(s: &TrainSettings, seed: u64, dir: Option<&Path>) -> TrainConfig {
    TrainConfig {
        steps: s.steps,
        batch_size: s.batch_size,
        seed,
        validate_every: s.validate_every,
        optimizer: s.optimizer,
        checkpoint_dir: dir.map(Path::to_path_buf),
        time_budget: s.time_budget_secs.map(Duration::from_secs_f64),
        refit_batches: s.refit_batches,
    }
}

fn run_training(
    trainer: &mut Trainer,
    sets: &DataSets,
    config: &TrainConfig,
    mut log: impl FnMut(&crate::training::LogEntry),
) -> Result<crate::training::TrainLog, CliError> {
    let source = match (&sets.train, &sets.generator) {
        (Some(t), _) => TrainSource::Fixed(t),
        (None, Some(g)) => TrainSource::Generated(g),
        (None, None) => unreachable!("datasets always provide a source"),
    };
    Ok(train(trainer, source, &sets.test, config, |_, e| {
        log(e);
        true
    })?)
}

fn train_command(
    cfg: &RunConfig,
    data: Option<&Path>,
    dir: &Path,
    ckpt: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut trainer = match ckpt {
        Some(p) => Trainer::resume(Checkpoint::load(p)?),
        None => {
            let model = Model::new(cfg.model()?, cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
            Trainer::new(model, cfg.train.optimizer)
        }
    };
    let model_config = trainer.model().config.clone();
    let sets = datasets(cfg, data, &model_config, cfg.train.validation_sequences)?;
    let tc = train_config(&cfg.train, cfg.seed, Some(dir));
    let census = trainer.model().census();
    emit(out, &json!({"parameters": census.total, "census": census}))?;
    let mut lines = Vec::new();
    let log = run_training(&mut trainer, &sets, &tc, |e| {
        if e.validation.is_some() || e.step % 100 == 0 {
            lines.push(json!({
                "step": e.step,
                "loss": e.loss,
                "learning_rate": e.learning_rate,
                "validation": e.validation,
            }));
        }
    })?;
    for l in &lines {
        emit(out, l)?;
    }
    emit(
        out,
        &json!({
            "steps": trainer.step(),
            "stopped": log.stopped,
            "best_validation": trainer.scheduler.best,
            "checkpoint": dir.join("last.tspr"),
        }),
    )
}

fn load_model(path: &Path) -> Result<Model<f32>, CliError> {
    Ok(Checkpoint::load(path)?.model)
}

fn predict(ckpt: &Path, data: &Path, path: &Path, index: usize, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(ckpt)?;
    let records = read_test_set(data)?;
    let c = &model.config;
    let record = records
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("sequence {index} out of {}", records.len())))?;
    let (t, k) = (c.input_frames, c.predict_frames);
    if record.frames < t + k || record.height != c.input_size {
        return Err(CliError::Usage(format!(
            "sequence of {} {}×{} frames does not fit a {t}+{k}-frame {}px model",
            record.frames, record.height, record.width, c.input_size
        )));
    }
    let spec = BatchSpec {
        input_frames: t,
        predict_frames: k,
        batch_size: 1,
        range: c.output.range(),
    };
    let batch = spec.assemble(&[record])?;
    let pred = model.predict(&batch.inputs, k)?;
    let (h, w) = (record.height, record.width);
    let channels = record.channels();
    let plane = |raw: &[u8]| -> Vec<u8> { raw.iter().step_by(channels).copied().collect() };
    let first_plane = |x: &Tensor<f32>| to_gray(&x.data()[..h * w], c.output.range());
    let rows = vec![
        StripRow {
            height: h,
            width: w,
            frames: (0..t).map(|i| plane(record.frame(i))).collect(),
        },
        StripRow {
            height: h,
            width: w,
            frames: (t..t + k).map(|i| plane(record.frame(i))).collect(),
        },
        StripRow {
            height: h,
            width: w,
            frames: pred.iter().map(first_plane).collect(),
        },
    ];
    write_strip(&rows, path).map_err(CliError::Runtime)?;
    emit(out, &json!({"strip": path, "rows": 3, "columns": t.max(k)}))
}

fn report_json(report: &MetricsReport, prefix: &str, into: &mut serde_json::Map<String, Value>) {
    if let Value::Object(m) = report.to_json() {
        for (k, v) in m {
            into.insert(format!("{prefix}{k}"), v);
        }
    }
}

fn eval(
    ckpt: &Path,
    data: &Path,
    path: Option<&Path>,
    baseline: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let model = load_model(ckpt)?;
    let records = read_test_set(data)?;
    let report = evaluate_model(&model, &records, 16)?;
    let mut flat = serde_json::Map::new();
    report_json(&report, "", &mut flat);
    if baseline {
        let base = CopyLast {
            input_frames: model.config.input_frames,
            range: model.config.output.range(),
        };
        let b = evaluate(&base, &records, model.config.predict_frames, 16)?;
        report_json(&b, "copy_last_", &mut flat);
    }
    write_json(path, &Value::Object(flat), out)
}

fn ablate(
    cfg: &RunConfig,
    data: Option<&Path>,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let base = cfg.model()?;
    let full_config = match &cfg.model {
        Some(m) => m.clone(),
        None => ModelConfig::preset(&cfg.preset).expect("validated preset"),
    };
    let sets = datasets(cfg, data, &base, cfg.num_test)?;
    let full = Model::<f32>::new(full_config.clone(), cfg.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?
        .census();
    let tc = train_config(&cfg.train, cfg.seed, None);
    let mut variants = Vec::new();
    for a in Ablation::ALL {
        let model = Model::<f32>::new(full_config.clone().with_ablation(a), cfg.seed)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let census = model.census();
        let mut trainer = Trainer::new(model, cfg.train.optimizer);
        let log = run_training(&mut trainer, &sets, &tc, |_| {})?;
        let report = evaluate_model(trainer.model(), &sets.test, cfg.train.batch_size)?;
        let final_loss = log.entries.last().map(|e| e.loss);
        let mut v = serde_json::Map::new();
        v.insert("ablation".into(), json!(a.name()));
        v.insert("parameters".into(), json!(census.total));
        v.insert(
            "parameter_diff".into(),
            json!(census.total as i64 - full.total as i64),
        );
        v.insert("census".into(), json!(census));
        v.insert("steps".into(), json!(trainer.step()));
        v.insert("final_loss".into(), json!(final_loss));
        v.insert(
            "finite".into(),
            json!(log.entries.iter().all(|e| e.loss.is_finite())),
        );
        report_json(&report, "", &mut v);
        variants.push(Value::Object(v));
    }
    write_json(path, &json!({ "variants": variants }), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String) {
        let mut out = Vec::new();
        let code = run(std::iter::once("tstates").chain(args.iter().copied()), &mut out);
        (code, String::from_utf8(out).unwrap())
    }

    #[test]
    fn help_lists_every_flag() {
        for (cmd, flags) in [
            (
                "gen",
                &[
                    "--out",
                    "--num-test",
                    "--num-train",
                    "--seed",
                    "--frames",
                    "--size",
                    "--digits",
                    "--sprites",
                    "--shapes",
                    "--set",
                    "--config",
                    "--preset",
                    "--ablation",
                    "--threads",
                ][..],
            ),
            (
                "train",
                &[
                    "--data",
                    "--out",
                    "--ckpt",
                    "--preset",
                    "--ablation",
                    "--seed",
                    "--set",
                    "--threads",
                ][..],
            ),
            ("predict", &["--ckpt", "--data", "--out", "--index"][..]),
            ("eval", &["--ckpt", "--data", "--out", "--baseline"][..]),
            ("ablate", &["--data", "--out", "--preset", "--set"][..]),
            ("gradcheck", &["--tolerance", "--seed"][..]),
        ] {
            let (code, text) = run_args(&[cmd, "--help"]);
            assert_eq!(code, 0);
            for f in flags {
                assert!(text.contains(f), "{cmd} --help lacks {f}");
            }
        }
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_args(&["gen"]).0, 2);
        assert_eq!(run_args(&["bogus"]).0, 2);
        assert_eq!(run_args(&["gen", "--out", "x", "--unknown"]).0, 2);
        assert_eq!(
            run_args(&["gen", "--out", "x", "--sprites", "a", "--shapes"]).0,
            2
        );
        assert_eq!(run_args(&["gen", "--out", "x", "--set", "nope=1"]).0, 2);
        assert_eq!(
            run_args(&["eval", "--ckpt", "/nonexistent.tspr", "--data", "/nonexistent"]).0,
            2
        );
    }

    #[test]
    fn gen_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        for d in [&a, &b] {
            let (code, _) = run_args(&[
                "gen",
                "--out",
                d.to_str().unwrap(),
                "--num-train",
                "5",
                "--num-test",
                "3",
                "--seed",
                "7",
            ]);
            assert_eq!(code, 0);
        }
        for f in [TRAIN_FILE, TEST_FILE] {
            assert_eq!(
                std::fs::read(a.join(f)).unwrap(),
                std::fs::read(b.join(f)).unwrap()
            );
        }
    }
}
