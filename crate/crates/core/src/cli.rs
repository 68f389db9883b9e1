//! Command-line front end. Every subcommand that writes a file also writes
//! `<file>.manifest.json` recording the flags, seeds, input digests, code
//! version and timestamps of the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{augment, AugmentMode, VoiceRanges};
use crate::corpus::{load_corpus, Corpus, CorpusError, Piece, Split};
use crate::encoder::{restrict_streams, EncodeError, EncodedSequence, Stream, StreamSet};
use crate::eval::{evaluate, EvalError};
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::sample::{generate, write_midi, ForcedTrack, MidiOptions, SampleConfig, SampleError};
use crate::stats::corpus_stats;
use crate::train::{
    lr_range_test, overfit, train, OverfitConfig, RangeTestConfig, TrainConfig, TrainError,
};
use crate::vocab::Token;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(CorpusError, EncodeError, EvalError, ModelError, std::io::Error);

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::BadConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } | TrainError::NonFiniteGradient { .. } => CliError::Diverged(e.to_string()),
            TrainError::BadConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "tonicnet", version, about = "Chord-then-notes chorale modelling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Encode one piece to a token table.
    Encode(EncodeArgs),
    /// Write the augmented training set as a new interchange file.
    Augment(AugmentArgs),
    /// Train a model (or run the overfit check / LR range test).
    Train(TrainArgs),
    /// Learning-rate range test.
    LrFind(LrFindArgs),
    /// Teacher-forced evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Generate a piece and write it as MIDI.
    Sample(SampleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Full,
    Toy,
}

impl ModelSize {
    fn config(self) -> ModelConfig {
        match self {
            ModelSize::Full => ModelConfig::tonicnet(),
            ModelSize::Toy => ModelConfig::toy(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeSource {
    /// Per-voice ranges observed on the training split.
    Train,
    /// Only the vocabulary range 36..=81.
    Global,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    pub corpus: PathBuf,
    #[arg(long)]
    pub json: bool,
    /// Write the report here instead of standard output.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    pub corpus: PathBuf,
    /// Piece id, e.g. train-000.
    #[arg(long)]
    pub piece: String,
    #[arg(long, default_value = "CSBAT")]
    pub streams: StreamSet,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AugmentArgs {
    pub corpus: PathBuf,
    #[arg(long, default_value = "transpose")]
    pub mode: AugmentMode,
    #[arg(long, value_enum, default_value = "train")]
    pub ranges: RangeSource,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    pub corpus: PathBuf,
    /// Checkpoint path; the best epoch by validation Full NLL is kept here.
    #[arg(long, short)]
    pub output: PathBuf,
    /// JSON-lines epoch log (defaults to `<output>.log.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 18)]
    pub warmup_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "CSBAT")]
    pub streams: StreamSet,
    #[arg(long, default_value = "transpose")]
    pub augment: AugmentMode,
    #[arg(long, value_enum, default_value = "train")]
    pub ranges: RangeSource,
    #[arg(long, value_enum, default_value = "full")]
    pub model: ModelSize,
    /// Resample inter-layer dropout once per sequence instead of per step.
    #[arg(long)]
    pub variational_inter_layer: bool,
    /// Memorise one training piece with a fixed learning rate instead.
    #[arg(long)]
    pub overfit_one: bool,
    /// Piece for --overfit-one (default: first training piece).
    #[arg(long)]
    pub piece: Option<String>,
    #[arg(long, default_value_t = 2000)]
    pub overfit_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub overfit_lr: f64,
    /// Run the learning-rate range test instead of training.
    #[arg(long)]
    pub lr_range_test: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct LrFindArgs {
    pub corpus: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lr_max: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "CSBAT")]
    pub streams: StreamSet,
    #[arg(long, default_value = "transpose")]
    pub augment: AugmentMode,
    #[arg(long, value_enum, default_value = "train")]
    pub ranges: RangeSource,
    #[arg(long, value_enum, default_value = "full")]
    pub model: ModelSize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "valid")]
    pub split: Split,
    #[arg(long, default_value = "CSBAT")]
    pub streams: StreamSet,
    #[arg(long)]
    pub json: bool,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 3200)]
    pub max_tokens: usize,
    /// Mask tokens that do not fit the stream being predicted.
    #[arg(long)]
    pub constrain: bool,
    #[arg(long)]
    pub no_smoothing: bool,
    /// Opening chord label, e.g. "C:maj" (default: random major or minor).
    #[arg(long)]
    pub start_chord: Option<String>,
    #[arg(long, default_value_t = 80.0)]
    pub bpm: f64,
    #[arg(long)]
    pub chord_markers: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, hide = true)]
    pub force_corpus: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub force_piece: Option<String>,
    #[arg(long, hide = true)]
    pub force_stream: Option<char>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub subcommand: &'a str,
    pub argv: Vec<String>,
    pub flags: &'a Command,
    pub seeds: Vec<u64>,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub code_version: &'static str,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

struct Run<'a> {
    command: &'a Command,
    argv: Vec<String>,
    started: f64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    seeds: Vec<u64>,
}

impl<'a> Run<'a> {
    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.output(path);
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        let name = path.display().to_string();
        if !self.outputs.contains(&name) {
            self.outputs.push(name);
        }
    }

    /// Writes the manifest next to `primary`.
    fn finish(&self, name: &str, primary: &Path) -> Result<()> {
        let manifest = RunManifest {
            subcommand: name,
            argv: self.argv.clone(),
            flags: self.command,
            seeds: self.seeds.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            code_version: env!("CARGO_PKG_VERSION"),
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = manifest_path(primary);
        fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Writes `text` to `output` (with a manifest) or to standard output.
fn emit(run: &mut Run, name: &str, output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => {
            run.write(path, text.as_bytes())?;
            run.finish(name, path)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn training_sequences(
    corpus: &Corpus,
    mode: AugmentMode,
    ranges: RangeSource,
    streams: StreamSet,
) -> Result<(Vec<EncodedSequence>, Vec<EncodedSequence>)> {
    let ranges = match ranges {
        RangeSource::Train => VoiceRanges::observed(corpus.split(Split::Train)),
        RangeSource::Global => VoiceRanges([None; 4]),
    };
    let set = augment(corpus, &ranges, mode);
    let encode = |pieces: Vec<&Piece>| -> Result<Vec<EncodedSequence>> {
        Ok(pieces
            .into_iter()
            .map(|p| restrict_streams(p, streams))
            .collect::<Result<_, _>>()?)
    };
    let train = encode(set.pieces.iter().collect())?;
    let valid = encode(corpus.split(Split::Valid).collect())?;
    Ok((train, valid))
}

fn cmd_stats(run: &mut Run, args: &StatsArgs) -> Result<()> {
    run.input(&args.corpus)?;
    let corpus = load_corpus(&args.corpus)?;
    let report = corpus_stats(&corpus)?;
    let text = if args.json {
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
    } else {
        report.to_text()
    };
    emit(run, "stats", args.output.as_deref(), &text)
}

fn cmd_encode(run: &mut Run, args: &EncodeArgs) -> Result<()> {
    run.input(&args.corpus)?;
    let corpus = load_corpus(&args.corpus)?;
    let piece = corpus
        .piece(&args.piece)
        .ok_or_else(|| CliError::Data(format!("no piece with id {}", args.piece)))?;
    let seq = restrict_streams(piece, args.streams)?;
    emit(run, "encode", args.output.as_deref(), &seq.to_csv())
}

fn cmd_augment(run: &mut Run, args: &AugmentArgs) -> Result<()> {
    run.input(&args.corpus)?;
    let corpus = load_corpus(&args.corpus)?;
    let ranges = match args.ranges {
        RangeSource::Train => VoiceRanges::observed(corpus.split(Split::Train)),
        RangeSource::Global => VoiceRanges([None; 4]),
    };
    let set = augment(&corpus, &ranges, args.mode);
    let mut pieces = set.pieces.clone();
    pieces.extend(corpus.split(Split::Valid).cloned());
    pieces.extend(corpus.split(Split::Test).cloned());
    let out = Corpus::new(pieces)?;
    run.write(&args.output, out.to_interchange_json().as_bytes())?;
    let provenance = with_suffix(&args.output, ".provenance.json");
    run.write(&provenance, set.provenance_json().as_bytes())?;
    println!(
        "{} training pieces ({} dropped) from {}",
        set.len(),
        set.dropped.len(),
        corpus.count(Split::Train)
    );
    run.finish("augment", &args.output)
}

fn cmd_train(run: &mut Run, args: &TrainArgs) -> Result<()> {
    run.input(&args.corpus)?;
    run.seeds.push(args.seed);
    let corpus = load_corpus(&args.corpus)?;
    let mut model = args.model.config();
    model.variational_inter_layer = args.variational_inter_layer;
    let params = ModelParams::init(model, args.streams, args.seed);

    if args.lr_range_test {
        let (train_set, _) = training_sequences(&corpus, args.augment, args.ranges, args.streams)?;
        let config = RangeTestConfig {
            seed: args.seed,
            ..RangeTestConfig::default()
        };
        let report = lr_range_test(params, &train_set, &config)?;
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        run.write(&args.output, text.as_bytes())?;
        print_range_summary(&report);
        return run.finish("train", &args.output);
    }

    if args.overfit_one {
        let piece = match &args.piece {
            Some(id) => corpus
                .piece(id)
                .ok_or_else(|| CliError::Data(format!("no piece with id {id}")))?,
            None => corpus
                .split(Split::Train)
                .next()
                .ok_or_else(|| CliError::Data("training split is empty".into()))?,
        };
        let seq = restrict_streams(piece, args.streams)?;
        let mut params = params;
        let config = OverfitConfig {
            steps: args.overfit_steps,
            lr: args.overfit_lr,
            ..OverfitConfig::default()
        };
        let report = overfit(&mut params, &seq, &config, None)?;
        println!("overfit {}: final NLL {:.5} after {} steps", piece.id, report.final_nll, report.steps);
        params.save(&args.output)?;
        run.output(&args.output);
        let log = args.log.clone().unwrap_or_else(|| with_suffix(&args.output, ".log.jsonl"));
        let text: String = report
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{{\"step\":{i},\"loss\":{l}}}\n"))
            .collect();
        run.write(&log, text.as_bytes())?;
        return run.finish("train", &args.output);
    }

    let config = TrainConfig {
        epochs: args.epochs,
        warmup_epochs: args.warmup_epochs,
        seed: args.seed,
        augment: args.augment,
        streams: args.streams,
        model,
        ..TrainConfig::default()
    };
    config.validate()?;
    let (train_set, valid_set) = training_sequences(&corpus, args.augment, args.ranges, args.streams)?;
    eprintln!(
        "training on {} sequences ({} streams), validating on {}",
        train_set.len(),
        args.streams,
        valid_set.len()
    );
    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.output, ".log.jsonl"));
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    run.output(&log_path);
    run.output(&args.output);
    let mut io_error = None;
    let result = train(params, &train_set, &valid_set, &config, |record, best| {
        let line = serde_json::to_string(record).expect("record serializes");
        eprintln!("{line}");
        let saved = writeln!(log, "{line}")
            .map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))
            .and_then(|_| best.save(&args.output).map_err(CliError::from));
        if let Err(e) = saved {
            io_error.get_or_insert(e);
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    match result {
        Ok(outcome) => {
            outcome.best.save(&args.output)?;
            eprintln!("best epoch {}", outcome.best_epoch);
            run.finish("train", &args.output)
        }
        Err(TrainError::Divergence {
            epoch,
            step,
            reason,
            last_good,
        }) => {
            let path = with_suffix(&args.output, ".last-good");
            last_good.save(&path)?;
            run.output(&path);
            run.finish("train", &args.output)?;
            Err(CliError::Diverged(format!(
                "diverged at epoch {epoch}, step {step}: {reason}; last good parameters in {}",
                path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn print_range_summary(report: &crate::train::RangeTestReport) {
    match report.suggested_lr {
        Some(lr) => println!("suggested max lr {lr:.4} ({} points)", report.curve.len()),
        None => println!("no descent found ({} points)", report.curve.len()),
    }
}

fn cmd_lr_find(run: &mut Run, args: &LrFindArgs) -> Result<()> {
    run.input(&args.corpus)?;
    run.seeds.push(args.seed);
    let corpus = load_corpus(&args.corpus)?;
    let params = ModelParams::init(args.model.config(), args.streams, args.seed);
    let (train_set, _) = training_sequences(&corpus, args.augment, args.ranges, args.streams)?;
    let config = RangeTestConfig {
        lr_min: args.lr_min,
        lr_max: args.lr_max,
        num_steps: args.steps,
        seed: args.seed,
        ..RangeTestConfig::default()
    };
    let report = lr_range_test(params, &train_set, &config)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    run.write(&args.output, text.as_bytes())?;
    print_range_summary(&report);
    run.finish("lr-find", &args.output)
}

fn cmd_eval(run: &mut Run, args: &EvalArgs) -> Result<()> {
    run.input(&args.corpus)?;
    run.input(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let params = ModelParams::load(&args.checkpoint)?;
    let report = evaluate(&params, &corpus, args.split, args.streams)?;
    let text = if args.json {
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
    } else {
        report.to_text()
    };
    emit(run, "eval", args.output.as_deref(), &text)
}

fn forced_track(args: &SampleArgs) -> Result<Option<ForcedTrack>> {
    let (Some(path), Some(id), Some(letter)) = (&args.force_corpus, &args.force_piece, args.force_stream) else {
        return Ok(None);
    };
    let stream = Stream::STEP_ORDER
        .into_iter()
        .find(|s| s.letter() == letter.to_ascii_uppercase())
        .ok_or_else(|| CliError::Usage(format!("unknown stream {letter}")))?;
    let corpus = load_corpus(path)?;
    let piece = corpus
        .piece(id)
        .ok_or_else(|| CliError::Data(format!("no piece with id {id}")))?;
    let seq = crate::encoder::encode(piece);
    let tokens = seq
        .tokens()
        .zip(&seq.stream)
        .filter(|(_, s)| **s == stream)
        .map(|(t, _)| t)
        .collect();
    Ok(Some(ForcedTrack { stream, tokens }))
}

fn cmd_sample(run: &mut Run, args: &SampleArgs) -> Result<()> {
    run.input(&args.checkpoint)?;
    run.seeds.push(args.seed);
    if let Some(path) = &args.force_corpus {
        run.input(path)?;
    }
    let params = ModelParams::load(&args.checkpoint)?;
    let start_chord = args
        .start_chord
        .as_deref()
        .map(Token::parse_chord)
        .transpose()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let config = SampleConfig {
        seed: args.seed,
        temperature: args.temperature,
        max_tokens: args.max_tokens,
        constrain_kinds: args.constrain,
        smoothing: !args.no_smoothing,
        start_chord,
        forced: forced_track(args)?,
    };
    let score = generate(&params, &config)?;
    let options = MidiOptions {
        bpm: args.bpm,
        chord_markers: args.chord_markers,
        ..MidiOptions::default()
    };
    if !(options.bpm > 0.0) {
        return Err(CliError::Usage("bpm must be positive".into()));
    }
    write_midi(&score, &args.out, &options)?;
    run.output(&args.out);
    println!(
        "{} steps, {} tokens, {} kind violations, {}",
        score.steps.len(),
        score.sequence.len(),
        score.violations.len(),
        if score.ended { "ended" } else { "hit token cap" }
    );
    run.finish("sample", &args.out)
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let mut run = Run {
        command: &cli.command,
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        started: unix_now(),
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
        seeds: Vec::new(),
    };
    let result = match &cli.command {
        Command::Stats(a) => cmd_stats(&mut run, a),
        Command::Encode(a) => cmd_encode(&mut run, a),
        Command::Augment(a) => cmd_augment(&mut run, a),
        Command::Train(a) => cmd_train(&mut run, a),
        Command::LrFind(a) => cmd_lr_find(&mut run, a),
        Command::Eval(a) => cmd_eval(&mut run, a),
        Command::Sample(a) => cmd_sample(&mut run, a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
