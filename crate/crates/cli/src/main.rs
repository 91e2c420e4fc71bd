use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slt_core::bleu::bleu_text;
use slt_core::checkpoint::Checkpoint;
use slt_core::compression::{compress_model, layer_budgets, load_compressed, CompressedModel};
use slt_core::config::{with_overrides, RunConfig};
use slt_core::data::{gen_synthetic_with, read_lines, write_atomic, FeatureShape, FeatureSequence, Source, Task, Vocab};
use slt_core::decoding::{decode_corpus, Averaging, BeamConfig, Decoder};
use slt_core::lwta::Phase;
use slt_core::rng::derive_seed;
use slt_core::training::train;
use slt_core::transformer::TransformerModel;
use slt_core::Error;

#[derive(Parser)]
#[command(name = "slt", version, about = "Stochastic LWTA transformer: train, translate, evaluate, compress")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration and write the best checkpoint.
    Train(TrainArgs),
    /// Decode sources with one checkpoint or an ensemble.
    Translate(TranslateArgs),
    /// Corpus BLEU of hypotheses against references.
    Evaluate(EvaluateArgs),
    /// Write a bit-reduced artifact of a checkpoint and print the budget report.
    Compress(CompressArgs),
    /// Generate a synthetic parallel corpus.
    GenData(GenDataArgs),
    /// Per-layer posterior statistics and derived bit budgets.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    config: PathBuf,
    /// Override a configuration key, e.g. `--set train.lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Checkpoint path (overrides `output.checkpoint`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Training log path (overrides `output.log`; default stderr).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    /// Checkpoint; repeat for ensemble decoding.
    #[arg(long = "checkpoint", short, required = true)]
    checkpoints: Vec<PathBuf>,
    /// Compressed artifact for each checkpoint, in the same order.
    #[arg(long = "compressed")]
    compressed: Vec<PathBuf>,
    /// Source sentences, or a list of feature files for feature models.
    #[arg(long, short)]
    input: PathBuf,
    /// Output file (default stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Beam width; 1 is greedy.
    #[arg(long)]
    beam: Option<usize>,
    /// Posterior draws per network.
    #[arg(long)]
    samples: Option<usize>,
    /// Use posterior means with no winner noise.
    #[arg(long, conflicts_with = "samples")]
    mean: bool,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
    /// Average probabilities instead of logits.
    #[arg(long)]
    average_probs: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long, short)]
    checkpoint: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Confidence multiplier on sigma (default from the checkpoint's configuration).
    #[arg(long)]
    z: Option<f64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "copy")]
    task: Task,
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    /// Number of pairs.
    #[arg(long, short)]
    n: usize,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// File stem: writes `<prefix>.src` (or `<prefix>.list`) and `<prefix>.tgt`.
    #[arg(long, default_value = "train")]
    prefix: String,
    /// Feature width for the feature task.
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, short)]
    checkpoint: PathBuf,
    #[arg(long)]
    z: Option<f64>,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(Error::io("<stdout>", e))
    }
}

type CliResult = std::result::Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 3,
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnsupportedMode(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Translate(a) => cmd_translate(a, cli.seed),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compress(a) => cmd_compress(a),
        Command::GenData(a) => cmd_gen_data(a, cli.seed.unwrap_or(1)),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> CliResult {
    let mut overrides = a.overrides;
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(m) = a.max_steps {
        overrides.push(format!("train.max_steps={m}"));
    }
    let mut run = RunConfig::load(&a.config, &overrides)?;
    if let Some(o) = a.out {
        run.output.checkpoint = o;
    }
    if let Some(l) = a.log {
        run.output.log = Some(l);
    }
    let data = run.load_data()?;
    let model_cfg = run.model_for(&data.train)?;
    let mut model = TransformerModel::new(model_cfg, derive_seed(run.seed, &[0x4d4f]))?;
    eprintln!(
        "training on {} pairs ({} dev), {} parameters",
        data.train.len(),
        data.dev.len(),
        model.params().scalar_count()
    );
    let mut sink: Box<dyn Write> = match &run.output.log {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(io::stderr()),
    };
    let outcome = train(&mut model, &data.train, &data.dev, &run.train, run.seed, &mut sink)?;
    sink.flush()?;
    let best = TransformerModel::from_params(model.config().clone(), outcome.best)?;
    let ckpt = Checkpoint::new(
        run.clone(),
        &best,
        data.train.src_vocab.clone(),
        data.train.tgt_vocab.clone(),
        outcome.best_bleu,
        outcome.best_step,
        outcome.steps,
    )?;
    ckpt.save(&run.output.checkpoint)?;
    println!(
        "best dev BLEU-4 {:.2} at step {} of {}; final lr {:.3e}; wrote {}",
        outcome.best_bleu,
        outcome.best_step,
        outcome.steps,
        outcome.final_lr,
        run.output.checkpoint.display()
    );
    Ok(())
}

fn read_sources(path: &Path, ckpt: &Checkpoint) -> slt_core::Result<Vec<Source>> {
    let lines = read_lines(path)?;
    match &ckpt.src_vocab {
        Some(v) => Ok(lines.iter().map(|l| Source::Tokens(v.encode(l))).collect()),
        None => {
            let base = path.parent().unwrap_or(Path::new("."));
            lines
                .iter()
                .map(|l| {
                    let p = Path::new(l);
                    let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
                    FeatureSequence::load(&p).map(Source::Features)
                })
                .collect()
        }
    }
}

fn cmd_translate(a: TranslateArgs, seed: Option<u64>) -> CliResult {
    if !a.compressed.is_empty() && a.compressed.len() != a.checkpoints.len() {
        return Err(Failure::Usage("give one --compressed artifact per --checkpoint".into()));
    }
    let ckpts = a
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<slt_core::Result<Vec<_>>>()?;
    let mut models = ckpts.iter().map(Checkpoint::model).collect::<slt_core::Result<Vec<_>>>()?;
    for (m, p) in models.iter_mut().zip(&a.compressed) {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        load_compressed(m, &CompressedModel::from_bytes(&bytes)?)?;
    }
    let first = &ckpts[0];
    if ckpts.iter().any(|c| c.tgt_vocab != first.tgt_vocab || c.src_vocab != first.src_vocab) {
        return Err(Failure::Usage("ensemble members use different vocabularies".into()));
    }
    let run = with_overrides(&first.run, &[])?;
    let sources = read_sources(&a.input, first)?;
    let refs: Vec<&TransformerModel> = models.iter().collect();
    let samples = a.samples.or(run.decode.samples).unwrap_or(run.model.samples);
    let seed = seed.unwrap_or(run.seed);
    let decoder = if a.mean {
        Decoder::deterministic(&refs)?
    } else {
        Decoder::new(&refs, samples, seed, Phase::Infer)?
    };
    let averaging = if a.average_probs { Averaging::Probabilities } else { run.decode.averaging };
    let decoder = decoder.with_averaging(averaging);
    let max_len = a.max_len.or(run.decode.max_len).unwrap_or(run.model.max_tgt_len - 1);
    let beam_cfg = match a.beam.or(run.decode.beam) {
        Some(0) => return Err(Failure::Usage("beam width must be positive".into())),
        Some(w) => {
            let mut c = BeamConfig::new(w, max_len);
            c.length_penalty = a.length_penalty.unwrap_or(run.decode.length_penalty);
            Some(c)
        }
        None => None,
    };
    let srcs: Vec<&Source> = sources.iter().collect();
    let hyps = decode_corpus(&decoder, &srcs, beam_cfg.as_ref(), max_len)?;
    let mut text = String::new();
    for h in &hyps {
        text.push_str(&first.tgt_vocab.decode(h));
        text.push('\n');
    }
    match &a.output {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let hyps = read_lines_allow_empty(&a.hyp)?;
    let refs = read_lines_allow_empty(&a.reference)?;
    let report = bleu_text(&hyps, &refs)?;
    println!("{report}");
    Ok(())
}

/// Hypothesis files may legitimately contain empty lines; only a file with
/// no lines at all is an error.
fn read_lines_allow_empty(path: &Path) -> slt_core::Result<Vec<String>> {
    match read_lines(path) {
        Err(Error::Empty(_)) => Ok(Vec::new()),
        other => other,
    }
}

fn cmd_compress(a: CompressArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let z = a.z.unwrap_or(ckpt.run.compress.z);
    let (artifact, report) = compress_model(&model, z)?;
    write_atomic(&a.output, &artifact.to_bytes())?;
    println!("{report}");
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let c = model.config();
    println!(
        "model: d_model={} heads={} depth={}-{} ff={} units={} activation={:?} weights={:?} samples={}",
        c.d_model, c.heads, c.enc_depth, c.dec_depth, c.ff_width, c.units, c.activation, c.weight_mode, c.samples
    );
    println!(
        "best dev BLEU-4 {:.2} at step {} of {}; {} parameters",
        ckpt.best_bleu,
        ckpt.best_step,
        ckpt.steps,
        model.params().scalar_count()
    );
    let z = a.z.unwrap_or(ckpt.run.compress.z);
    let budgets = match layer_budgets(&model, z) {
        Ok(b) => b,
        Err(Error::UnsupportedMode(_)) | Err(Error::Empty(_)) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    if budgets.is_empty() {
        println!("no variational layers");
    }
    println!("{:<22} {:>11} {:>11} {:>9} {:>9} {:>3} {:>3} {:>5}", "layer", "sigma_min", "sigma_max", "mu_min", "mu_max", "eb", "pb", "bias");
    for (name, b) in budgets {
        let s = b.stats;
        println!(
            "{:<22} {:>11.3e} {:>11.3e} {:>9.4} {:>9.4} {:>3} {:>3} {:>5}",
            name, s.sigma_min, s.sigma_max, s.mu_min, s.mu_max, b.format.eb, b.format.pb, b.format.bias
        );
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs, seed: u64) -> CliResult {
    let shape = FeatureShape {
        dim: a.feature_dim,
        ..FeatureShape::default()
    };
    let corpus = gen_synthetic_with(a.task, a.vocab, a.min_len, a.max_len, a.n, seed, shape)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let vocab = Vocab::synthetic(a.vocab);
    let mut tgt = String::new();
    for p in &corpus.pairs {
        tgt.push_str(&vocab.decode(p.payload()));
        tgt.push('\n');
    }
    write_atomic(&a.out_dir.join(format!("{}.tgt", a.prefix)), tgt.as_bytes())?;
    if a.task == Task::FeatureToLabel {
        let feat_dir = a.out_dir.join(format!("{}_features", a.prefix));
        std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut list = String::new();
        for (i, p) in corpus.pairs.iter().enumerate() {
            let Source::Features(f) = &p.source else { unreachable!() };
            let name = format!("{}_features/{i:06}.slft", a.prefix);
            f.save(&a.out_dir.join(&name))?;
            list.push_str(&name);
            list.push('\n');
        }
        write_atomic(&a.out_dir.join(format!("{}.list", a.prefix)), list.as_bytes())?;
    } else {
        let mut src = String::new();
        for p in &corpus.pairs {
            let Source::Tokens(t) = &p.source else { unreachable!() };
            src.push_str(&vocab.decode(t));
            src.push('\n');
        }
        write_atomic(&a.out_dir.join(format!("{}.src", a.prefix)), src.as_bytes())?;
    }
    eprintln!("wrote {} pairs to {}", corpus.len(), a.out_dir.display());
    Ok(())
}
