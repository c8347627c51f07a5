//! `liftlog`: one binary covering the whole workflow — simulate elevator
//! event logs, pretrain and adversarially train the log generator, sample
//! text from checkpoints, and score any log for realism.
//!
//! Every subcommand is deterministic: identical inputs and seeds produce
//! byte-identical outputs. Output files are written to a `.tmp` sibling and
//! renamed into place, so a failed run never leaves a half-written file.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use liftlog_core::codec::{
    build_vocab, decode, encode, realism_features, render_log, vocab_from_hex, RealismReport,
    Vocabulary,
};
use liftlog_core::config::KvConfig;
use liftlog_core::models::{manifest_path, GeneratorParams};
use liftlog_core::sim::{self, BuildingConfig};
use liftlog_core::train::{
    self, derive_rng, init_models, load_train_config, HistoryRow, TrainConfig, TrainHistory,
};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "liftlog",
    version,
    about = "Elevator log simulator and adversarial log generator",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the elevator simulation and write its event log
    Simulate(SimulateArgs),
    /// Pretrain the generator on a log corpus (maximum likelihood)
    PretrainGen(TrainArgs),
    /// Pretrain the discriminator against the frozen generator
    PretrainDisc(TrainArgs),
    /// Full pipeline: both pretrainings, then the adversarial epochs
    Train(TrainArgs),
    /// Sample text from a trained generator checkpoint
    Generate(GenerateArgs),
    /// Score a log file with the realism metrics
    Evaluate(EvaluateArgs),
    /// Same as evaluate: print the realism features of a log file
    Features(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Building config file (key=value), or a directory of config files to
    /// run as a batch; omitted means the default five-shaft building
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Ticks to simulate; overrides any t_max inside the config file
    /// [default: 1000000, or 10000 per config in batch mode]
    #[arg(short = 't', long = "t-max")]
    t_max: Option<u64>,
    /// Output log file, or output directory in batch mode
    /// [default: sim.log, or logs/ in batch mode]
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Override the arrival-stream seed from the config
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config file (key=value); omitted means built-in defaults
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override the config's output directory
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Override the config's master seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator checkpoint (its .manifest sidecar must sit next to it)
    checkpoint: PathBuf,
    /// Text to condition the sample on [default: "1 - New Call:", falling
    /// back to a prefix the checkpoint's vocabulary can spell]
    #[arg(long)]
    seed_text: Option<String>,
    /// Number of characters to generate
    #[arg(long, default_value_t = 10_000)]
    length: usize,
    /// Output text file
    #[arg(short, long, default_value = "sample.txt")]
    out: PathBuf,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Log file to score
    log: PathBuf,
    /// Also append one CSV row (with a header when the file is new) here
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::PretrainGen(args) => run_pretrain_gen(args),
        Command::PretrainDisc(args) => run_pretrain_disc(args),
        Command::Train(args) => run_train(args),
        Command::Generate(args) => run_generate(args),
        Command::Evaluate(args) | Command::Features(args) => run_evaluate(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

/// Writes through a `.tmp` sibling and renames into place; cleans up the
/// temporary on failure so no partial output survives.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let outcome = std::fs::write(&tmp, contents).and_then(|()| std::fs::rename(&tmp, path));
    if outcome.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    outcome.with_context(|| format!("writing {}", path.display()))
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let started = Instant::now();
    if let Some(dir) = args.config.as_deref().filter(|p| p.is_dir()) {
        return simulate_batch(&args, dir, started);
    }

    let (mut config, file_t_max) = match args.config.as_deref() {
        Some(path) => {
            sim::load_config(path).with_context(|| format!("loading config {}", path.display()))?
        }
        None => (BuildingConfig::default(), None),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let t_max = args.t_max.or(file_t_max).unwrap_or(1_000_000);
    let out = args.out.unwrap_or_else(|| PathBuf::from("sim.log"));

    let events = sim::run(&config, t_max)?;
    let text = render_log(&events);
    write_atomic(&out, &text)?;
    eprintln!(
        "wrote {} lines to {} in {:.2}s",
        events.len(),
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Batch mode: every file in the directory is one building config; each
/// produces `<config stem>.log` in the output directory. All configs are
/// parsed and all simulations run before anything is written, so a bad
/// config aborts the batch without leaving partial results.
fn simulate_batch(args: &SimulateArgs, dir: &Path, started: Instant) -> Result<()> {
    let mut config_paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading config directory {}", dir.display()))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|path| path.is_file())
        .collect();
    config_paths.sort();
    if config_paths.is_empty() {
        bail!("config directory {} contains no files", dir.display());
    }

    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("logs"));
    let mut outputs: Vec<(PathBuf, String, usize)> = Vec::with_capacity(config_paths.len());
    for path in &config_paths {
        let (mut config, file_t_max) =
            sim::load_config(path).with_context(|| format!("loading config {}", path.display()))?;
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        let t_max = args.t_max.or(file_t_max).unwrap_or(10_000);
        let stem = path
            .file_stem()
            .with_context(|| format!("config {} has no file name", path.display()))?;
        let out_path = out_dir.join(Path::new(stem).with_extension("log"));
        if outputs.iter().any(|(existing, _, _)| *existing == out_path) {
            bail!(
                "two configs would both write {}; rename one",
                out_path.display()
            );
        }
        let events = sim::run(&config, t_max)?;
        outputs.push((out_path, render_log(&events), events.len()));
    }

    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut written: Vec<PathBuf> = Vec::with_capacity(outputs.len());
    for (path, text, lines) in &outputs {
        if let Err(err) = write_atomic(path, text) {
            for done in &written {
                let _ = std::fs::remove_file(done);
            }
            return Err(err);
        }
        written.push(path.clone());
        eprintln!("wrote {} lines to {}", lines, path.display());
    }
    eprintln!(
        "{} logs in {:.2}s",
        outputs.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_config_with_overrides(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match args.config.as_deref() {
        Some(path) => {
            load_train_config(path).with_context(|| format!("loading config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_corpus(cfg: &TrainConfig) -> Result<String> {
    let corpus = std::fs::read_to_string(&cfg.corpus)
        .with_context(|| format!("reading corpus {}", cfg.corpus.display()))?;
    if corpus.is_empty() {
        bail!("corpus {} is empty", cfg.corpus.display());
    }
    Ok(corpus)
}

fn write_history(cfg: &TrainConfig, history: &TrainHistory) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write_atomic(&cfg.out_dir.join("history.csv"), &history.to_csv())
}

fn report_history(history: &[HistoryRow], cfg: &TrainConfig) {
    for row in history {
        let mut line = format!("epoch {}", row.epoch);
        for (name, value) in [
            ("g_loss", row.g_loss),
            ("mean_reward", row.mean_reward),
            ("d_loss", row.d_loss),
            ("d_acc", row.d_acc),
            ("parse_rate", row.parse_rate),
        ] {
            if let Some(value) = value {
                line.push_str(&format!(" {name}={value:.4}"));
            }
        }
        eprintln!("{line}");
    }
    eprintln!(
        "{} history rows, checkpoints in {}",
        history.len(),
        cfg.out_dir.display()
    );
}

fn run_pretrain_gen(args: TrainArgs) -> Result<()> {
    let cfg = load_config_with_overrides(&args)?;
    let corpus = read_corpus(&cfg)?;
    let vocab = build_vocab(&corpus, cfg.fold_case)?;
    let tokens = encode(&corpus, &vocab)?;
    let (mut gen, _) = init_models(&cfg, vocab.size())?;
    let history = train::pretrain_generator(&mut gen, &tokens, &cfg)?;
    write_history(&cfg, &history)?;
    gen.save(&cfg.out_dir.join("generator.ckpt"), &vocab)?;
    report_history(history.rows(), &cfg);
    Ok(())
}

fn run_pretrain_disc(args: TrainArgs) -> Result<()> {
    let cfg = load_config_with_overrides(&args)?;
    let corpus = read_corpus(&cfg)?;
    let vocab = build_vocab(&corpus, cfg.fold_case)?;
    let tokens = encode(&corpus, &vocab)?;
    let (fresh_gen, mut disc) = init_models(&cfg, vocab.size())?;
    // Train against the pretrained generator when one is already in the
    // output directory; otherwise against the fresh untrained one.
    let gen_path = cfg.out_dir.join("generator.ckpt");
    let gen = if gen_path.exists() {
        GeneratorParams::load(&gen_path, &vocab)
            .with_context(|| format!("loading {}", gen_path.display()))?
    } else {
        fresh_gen
    };
    let history = train::pretrain_discriminator(&gen, &mut disc, &tokens, &cfg)?;
    write_history(&cfg, &history)?;
    disc.save(&cfg.out_dir.join("discriminator.ckpt"), &vocab)?;
    report_history(history.rows(), &cfg);
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config_with_overrides(&args)?;
    let corpus = read_corpus(&cfg)?;
    let outcome = train::train_with_corpus(&cfg, &corpus)?;
    report_history(outcome.history.rows(), &cfg);
    Ok(())
}

fn vocab_from_checkpoint(checkpoint: &Path) -> Result<Vocabulary> {
    let manifest = manifest_path(checkpoint);
    let kv = KvConfig::load(&manifest)
        .with_context(|| format!("loading manifest {}", manifest.display()))?;
    let chars = kv
        .get("vocab_chars")
        .with_context(|| format!("manifest {} lists no vocabulary", manifest.display()))?;
    let folded: bool = kv.parsed("vocab_folded", false)?;
    Ok(vocab_from_hex(chars, folded)?)
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let vocab = vocab_from_checkpoint(&args.checkpoint)?;
    let gen = GeneratorParams::load(&args.checkpoint, &vocab)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;

    // An explicit seed text must be spellable in the checkpoint's
    // vocabulary; the default walks a fallback chain so it works for any
    // vocabulary.
    let seed_text = match args.seed_text {
        Some(text) => {
            if encode(&text, &vocab).is_err() {
                bail!("seed text {text:?} uses characters outside the checkpoint's vocabulary");
            }
            text
        }
        None => {
            let first = vocab.char_at(0)?.to_string();
            ["1 - New Call:", "1 - New call:"]
                .into_iter()
                .find(|s| encode(s, &vocab).is_ok())
                .unwrap_or(&first)
                .to_string()
        }
    };

    let started = Instant::now();
    let mut rng = derive_rng(args.seed, &[]);
    let output = gen.generate_sequence(&seed_text, args.length, &vocab, &mut rng)?;
    let text = decode(&output.tokens, &vocab)?;
    write_atomic(&args.out, &text)?;
    let elapsed = started.elapsed().as_secs_f64();
    let rate = if elapsed > 0.0 {
        args.length as f64 / elapsed
    } else {
        f64::INFINITY
    };
    eprintln!(
        "generated {} characters to {} ({rate:.0} chars/s)",
        args.length,
        args.out.display()
    );
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.log)
        .with_context(|| format!("reading log {}", args.log.display()))?;
    let report = realism_features(&text);
    print!("{}", report.to_kv());
    if let Some(csv_path) = &args.csv {
        let mut csv = match std::fs::read_to_string(csv_path) {
            Ok(existing) if !existing.is_empty() => existing,
            _ => format!("{}\n", RealismReport::CSV_HEADER),
        };
        csv.push_str(&report.to_csv_row());
        csv.push('\n');
        write_atomic(csv_path, &csv)?;
    }
    Ok(())
}
