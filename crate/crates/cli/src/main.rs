//! `fmit`: generate synthetic corpora, train, evaluate, decode and inspect.
//!
//! Settings resolve as built-in defaults, then the `--config` TOML file,
//! then command-line flags.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fmit::config::RunConfig;
use fmit::data::{generate_corpus, read_corpus, write_corpus, write_records, Sample, Vocab};
use fmit::gradcheck::GradCheckOptions;
use fmit::labels::EntityType;
use fmit::lattice::{Cell, FlatLattice, Modality};
use fmit::model::{check_gradients, gradcheck_sample};
use fmit::posenc::distance_quad;
use fmit::tensor::{Precision, Real};
use fmit::trainer::{self, metrics_tsv, AnyModel};

#[derive(Parser, Debug)]
#[command(name = "fmit", version, about = "Multimodal named entity tagger on a flat lattice")]
struct Cli {
    /// Seed for the command's random stream (generator, initialization, shuffling).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// TOML run configuration with optional [model], [train] and [data] tables.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus: train.jsonl, dev.jsonl, test.jsonl and stats.txt.
    GenData(GenDataArgs),
    /// Train a model and save the best-dev checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Tag a corpus file, writing records with pred_labels.
    Decode(DecodeArgs),
    /// Print the flat lattice of one sample.
    InspectLattice(InspectArgs),
    /// Compare analytic and finite-difference gradients of a fresh model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Fraction of entity surfaces shared by two types.
    #[arg(long)]
    ambiguity: Option<f64>,
    /// Chance per sentence of a decoy phrase object on a non-entity token.
    #[arg(long)]
    visual_bias: Option<f64>,
    /// Entity types, comma separated (PER,LOC,ORG,MISC).
    #[arg(long, value_delimiter = ',')]
    types: Option<Vec<EntityType>>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    dev: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// Model width.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Drop relative position terms from attention.
    #[arg(long)]
    no_rel: bool,
    /// Train without the boundary tower.
    #[arg(long)]
    no_ebd: bool,
    /// Ignore visual objects.
    #[arg(long)]
    no_objects: bool,
    /// Freeze CRF transitions at zero.
    #[arg(long)]
    no_transitions: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus directory holding train.jsonl and dev.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics; defaults to <out>.metrics.tsv.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the boundary loss.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Global gradient-norm clip.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus directory or a single .jsonl file.
    #[arg(long)]
    data: PathBuf,
    /// Split name used when --data is a directory.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the scores as key=value lines.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input corpus file.
    #[arg(long)]
    input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Corpus file; without it a sample is generated from the [data] settings.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample index.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Also print the head-head distance matrix and every four-distance tuple.
    #[arg(long)]
    distances: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

/// Bad invocation that clap cannot see.
#[derive(Debug)]
struct UsageError(String);

/// A completed run whose numbers failed a check.
#[derive(Debug)]
struct NumericFailure(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for NumericFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if err.downcast_ref::<NumericFailure>().is_some() {
        return 3;
    }
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<fmit::error::Error>())
        .any(fmit::error::Error::is_numeric);
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData(a) => gen_data(&mut config, cli.seed, a),
        Command::Train(a) => train(&mut config, cli.seed, a),
        Command::Eval(a) => eval(&config, a),
        Command::Decode(a) => decode(&config, a),
        Command::InspectLattice(a) => inspect(&mut config, cli.seed, a),
        Command::Gradcheck(a) => gradcheck(&mut config, cli.seed, a),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn gen_data(config: &mut RunConfig, seed: Option<u64>, a: GenDataArgs) -> Result<()> {
    let spec = &mut config.data;
    set(&mut spec.seed, seed);
    set(&mut spec.ambiguity, a.ambiguity);
    set(&mut spec.visual_bias, a.visual_bias);
    set(&mut spec.types, a.types);
    set(&mut spec.train, a.train);
    set(&mut spec.dev, a.dev);
    set(&mut spec.test, a.test);
    let corpus = generate_corpus(spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, samples) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        write_corpus(a.out.join(format!("{name}.jsonl")), samples)?;
    }
    let stats = corpus.stats.to_string();
    fs::write(a.out.join("stats.txt"), &stats)?;
    print!("{stats}");
    Ok(())
}

fn split_path(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{split}.jsonl"))
    } else {
        data.to_path_buf()
    }
}

fn load_split(data: &Path, split: &str) -> Result<Vec<Sample>> {
    let path = split_path(data, split);
    read_corpus(&path).with_context(|| format!("reading {}", path.display()))
}

fn train(config: &mut RunConfig, seed: Option<u64>, a: TrainArgs) -> Result<()> {
    let t = &mut config.train;
    set(&mut t.seed, seed);
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.lr, a.lr);
    set(&mut t.lambda, a.lambda);
    set(&mut t.max_len, a.max_len);
    set(&mut t.precision, a.precision.map(Precision::from));
    if a.clip_norm.is_some() {
        t.clip_norm = a.clip_norm;
    }
    let m = &mut config.model;
    set(&mut m.d, a.model.d);
    set(&mut m.heads, a.model.heads);
    set(&mut m.layers, a.model.layers);
    set(&mut m.dropout, a.model.dropout);
    m.no_rel |= a.model.no_rel;
    m.no_ebd |= a.model.no_ebd;
    m.no_objects |= a.model.no_objects;
    m.no_transitions |= a.model.no_transitions;
    config.model.validate()?;
    config.train.validate()?;

    if !a.data.is_dir() {
        return Err(UsageError(format!("--data must be a corpus directory, got {}", a.data.display())).into());
    }
    let train_set = load_split(&a.data, "train")?;
    let dev_set = load_split(&a.data, "dev")?;
    let metrics = a
        .metrics
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.tsv", a.out.display())));
    match config.train.precision {
        Precision::F32 => train_as::<f32>(config, &train_set, &dev_set, &a.out, &metrics),
        Precision::F64 => train_as::<f64>(config, &train_set, &dev_set, &a.out, &metrics),
    }
}

fn train_as<T: Real>(config: &RunConfig, train: &[Sample], dev: &[Sample], out: &Path, metrics: &Path) -> Result<()> {
    let outcome = trainer::train::<T>(&config.model, &config.train, train, dev)?;
    fs::write(metrics, metrics_tsv(&outcome.log)).with_context(|| format!("writing {}", metrics.display()))?;
    let extra = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "train": config.train,
    });
    outcome
        .best
        .to_checkpoint(extra)?
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("best epoch {} of {}", outcome.best_epoch, outcome.log.len());
    if !dev.is_empty() {
        print!(
            "{}",
            trainer::evaluate(&outcome.best, dev, config.train.max_len)?.table()
        );
    }
    Ok(())
}

fn eval(config: &RunConfig, a: EvalArgs) -> Result<()> {
    let model = AnyModel::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let samples = load_split(&a.data, &a.split)?;
    let report = model.evaluate(&samples, a.max_len.unwrap_or(config.train.max_len))?;
    print!("{}", report.table());
    if let Some(out) = a.out {
        fs::write(&out, report.key_values()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn decode(config: &RunConfig, a: DecodeArgs) -> Result<()> {
    let model = AnyModel::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let samples = read_corpus(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let records = model.decode(&samples, a.max_len.unwrap_or(config.train.max_len))?;
    match a.out {
        Some(out) => write_records(&out, &records)?,
        None => {
            let mut out = io::stdout().lock();
            for r in &records {
                match writeln!(out, "{}", serde_json::to_string(r)?) {
                    Err(e) if e.kind() == io::ErrorKind::BrokenPipe => break,
                    other => other?,
                }
            }
        }
    }
    Ok(())
}

fn inspect(config: &mut RunConfig, seed: Option<u64>, a: InspectArgs) -> Result<()> {
    let samples = match &a.data {
        Some(path) => read_corpus(path).with_context(|| format!("reading {}", path.display()))?,
        None => {
            set(&mut config.data.seed, seed);
            generate_corpus(&config.data)?.train
        }
    };
    let sample = samples.get(a.index).ok_or_else(|| {
        UsageError(format!(
            "--index {} out of range for {} samples",
            a.index,
            samples.len()
        ))
    })?;
    let one = std::slice::from_ref(sample);
    let (words, objects) = (Vocab::words(one), Vocab::objects(one));
    let annotations: Vec<_> = sample
        .objects
        .iter()
        .map(|o| o.annotation(objects.id(&o.concept)))
        .collect();
    let lattice = FlatLattice::build(&words.ids(&sample.tokens), &annotations, Vocab::specials())?;
    let name = |c: &Cell| match c.modality {
        Modality::Visual => objects.name(c.content).to_string(),
        _ => words.name(c.content).to_string(),
    };
    print!("{}", lattice.render(name));
    if a.distances {
        print!("{}", distance_tables(&lattice));
    }
    Ok(())
}

fn distance_tables(lattice: &FlatLattice) -> String {
    use std::fmt::Write as _;
    let cells = lattice.cells();
    let mut out = String::from("\nhead-head distances (row i, column j)\n");
    let _ = write!(out, "{:>4}", "");
    for j in 0..cells.len() {
        let _ = write!(out, "{j:>4}");
    }
    out.push('\n');
    for (i, ci) in cells.iter().enumerate() {
        let _ = write!(out, "{i:>4}");
        for cj in cells {
            let _ = write!(out, "{:>4}", distance_quad(ci, cj).hh);
        }
        out.push('\n');
    }
    out.push_str("\n   i    j    hh    ht    th    tt\n");
    for (i, ci) in cells.iter().enumerate() {
        for (j, cj) in cells.iter().enumerate() {
            let [hh, ht, th, tt] = distance_quad(ci, cj).as_array();
            let _ = writeln!(out, "{i:>4} {j:>4} {hh:>5} {ht:>5} {th:>5} {tt:>5}");
        }
    }
    out
}

fn gradcheck(config: &mut RunConfig, seed: Option<u64>, a: GradcheckArgs) -> Result<()> {
    let m = &mut config.model;
    set(&mut m.d, a.d);
    set(&mut m.heads, a.heads);
    set(&mut m.layers, a.layers);
    m.validate()?;
    let lambda = a.lambda.unwrap_or(config.train.lambda);
    let opts = GradCheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        ..GradCheckOptions::default()
    };
    let seed = seed.unwrap_or(config.train.seed);
    let sample = gradcheck_sample();
    println!(
        "sentence of {} words with {} objects, d={} heads={} layers={}",
        sample.len(),
        sample.objects.len(),
        m.d,
        m.heads,
        m.layers
    );
    let report = check_gradients(m, seed, lambda, &opts)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let worst: Vec<&str> = report.failures().map(|p| p.name.as_str()).collect();
        Err(NumericFailure(format!("gradient check failed for {}", worst.join(", "))).into())
    }
}
