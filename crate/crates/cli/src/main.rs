//! `s2st`: corpus generation, training, synthesis, evaluation and self-checks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use s2st_core::config::{AuxMode, ModelConfig, Preset};
use s2st_core::corpus::{gen_corpus, CorpusManifest, CorpusOptions, NoiseSpec, Reorder, Split};
use s2st_core::dsp::FeatureExtractor;
use s2st_core::evalkit::{self, AblationOptions, TestSet, VoiceChoice};
use s2st_core::speaker::speaker_embed;
use s2st_core::trainer::{self, Checkpoint, TrainOptions};
use s2st_core::{model, pgm, selfcheck, wav};

#[derive(Parser, Debug)]
#[command(name = "s2st", version, about = "Direct speech-to-speech translation at toy scale")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic parallel corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a translation model.
    Train(TrainArgs),
    /// Pre-train encoder layers on translated phonemes.
    PretrainEncoder(PretrainArgs),
    /// Translate one waveform with a trained model.
    Synthesize(SynthesizeArgs),
    /// Score a checkpoint on a corpus test split.
    Evaluate(EvaluateArgs),
    /// Train and score every auxiliary-task variant.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a spectrogram of a waveform as a PGM image.
    DumpSpec(DumpSpecArgs),
}

/// Model configuration: preset, then config file, then individual flags.
#[derive(Args, Debug)]
struct ModelArgs {
    /// Built-in hyperparameter preset (CONVERSATIONAL, FISHER or TOY).
    #[arg(long, default_value = "TOY")]
    preset: Preset,
    /// JSON object overriding preset fields; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Examples per training step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Heads of the decoder attention.
    #[arg(long)]
    attention_heads: Option<usize>,
    /// Condition the decoder on the target speaker's embedding.
    #[arg(long)]
    speaker_conditioning: bool,
}

/// Errors in the invocation itself rather than in the work it asked for.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = self.preset.config();
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            cfg = cfg.merged(&v).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        }
        let mut flags = serde_json::Map::new();
        if let Some(v) = self.batch_size {
            flags.insert("batch_size".into(), v.into());
        }
        if let Some(v) = self.learning_rate {
            flags.insert("learning_rate".into(), v.into());
        }
        if let Some(v) = self.attention_heads {
            flags.insert("attention_heads".into(), v.into());
        }
        if self.speaker_conditioning {
            flags.insert("speaker_conditioning".into(), true.into());
        }
        cfg.merged(&serde_json::Value::Object(flags)).map_err(|e| usage(e.to_string()))
    }
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed for every random draw.
    #[arg(long)]
    seed: u64,
    /// Training pairs.
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    /// Test pairs.
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    /// Word-order rule of the target language: none, swap or reverse.
    #[arg(long, default_value = "swap")]
    reorder: Reorder,
    /// Words in each language.
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    /// Targets are spoken by a speaker other than the source's.
    #[arg(long)]
    voice_transfer: bool,
    /// Add noise to sources at an SNR drawn from MIN,MAX dB.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    snr_range: Option<Vec<f64>>,
    /// Worker threads; output does not depend on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Corpus directory written by `gen-corpus`.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for checkpoints and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Auxiliary phoneme decoders: none, source, target or both.
    #[arg(long, default_value = "both")]
    aux: AuxMode,
    /// Training steps.
    #[arg(long)]
    steps: u64,
    /// Seed for every random draw.
    #[arg(long)]
    seed: u64,
    /// Encoder checkpoint written by `pretrain-encoder`.
    #[arg(long)]
    init_encoder: Option<PathBuf>,
    /// Loss logging interval in steps.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Corpus directory written by `gen-corpus`.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory receiving encoder.s2st.
    #[arg(long)]
    out: PathBuf,
    /// Number of bottom encoder layers to keep.
    #[arg(long)]
    layers: usize,
    /// Training steps.
    #[arg(long)]
    steps: u64,
    /// Seed for every random draw.
    #[arg(long)]
    seed: u64,
    /// Loss logging interval in steps.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input WAV file.
    #[arg(long)]
    input: PathBuf,
    /// Output WAV file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the predicted log spectrogram as a PGM image.
    #[arg(long)]
    dump_spec: Option<PathBuf>,
    /// Registry speaker id to speak as (speaker-conditioned models only).
    #[arg(long)]
    speaker: Option<u32>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus directory written by `gen-corpus`.
    #[arg(long)]
    corpus: PathBuf,
    /// Score only the first N test items.
    #[arg(long)]
    limit: Option<usize>,
    /// Speak every item as this registry speaker instead of its target speaker.
    #[arg(long)]
    speaker: Option<u32>,
    /// Worker threads; output does not depend on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Write the metrics as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Corpus directory written by `gen-corpus`.
    #[arg(long)]
    corpus: PathBuf,
    /// Training steps.
    #[arg(long)]
    steps: u64,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Output CSV, appended to as runs finish.
    #[arg(long)]
    out: PathBuf,
    /// Score only the first N test items.
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Skip the 1-head comparison run.
    #[arg(long)]
    no_one_head: bool,
    /// Worker threads; output does not depend on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for every random draw.
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DumpSpecArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input WAV file.
    #[arg(long)]
    input: PathBuf,
    /// Output PGM image.
    #[arg(long)]
    out: PathBuf,
    /// Dump the model's input features (log-mel) instead of the output
    /// log-magnitude spectrogram.
    #[arg(long)]
    mel: bool,
}

fn gen_corpus_cmd(a: &GenCorpusArgs) -> Result<()> {
    let noise = match &a.snr_range {
        Some(v) if v[0] > v[1] => return Err(usage(format!("--snr-range {},{} is empty", v[0], v[1]))),
        Some(v) => Some(NoiseSpec { snr_min_db: v[0], snr_max_db: v[1] }),
        None => None,
    };
    let o = CorpusOptions {
        vocab_size: a.vocab,
        reorder: a.reorder,
        voice_transfer: a.voice_transfer,
        noise,
        n_train: a.n_train,
        n_test: a.n_test,
        seed: a.seed,
        ..Default::default()
    };
    let m = CorpusManifest::build(&o).map_err(|e| usage(e.to_string()))?;
    gen_corpus(&m, &a.out, a.workers)?;
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let data = trainer::load_dataset(&a.corpus, &cfg, Split::Train)?;
    info!("{} training pairs", data.examples.len());
    let init_from = match &a.init_encoder {
        Some(p) => Some(Checkpoint::load(p)?.params),
        None => None,
    };
    let opts =
        TrainOptions { out_dir: Some(a.out.clone()), init_from, log_every: a.log_every, ..TrainOptions::new(a.aux, a.steps, a.seed) };
    let report = trainer::train(&data, &cfg, &opts)?;
    if let Some((step, l)) = report.metrics.last() {
        info!("final: {}", trainer::metrics_line(*step, l));
    }
    Ok(())
}

fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let data = trainer::load_dataset(&a.corpus, &cfg, Split::Train)?;
    let opts = TrainOptions { out_dir: Some(a.out.clone()), log_every: a.log_every, ..TrainOptions::new(AuxMode::None, a.steps, a.seed) };
    let ck = trainer::pretrain_encoder(&data, &cfg, a.layers, &opts)?;
    info!("kept {} encoder tensors in {}", ck.params.len(), a.out.join("encoder.s2st").display());
    Ok(())
}

fn synthesize_cmd(a: &SynthesizeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let cfg = &ck.config;
    let speaker = match (cfg.speaker_conditioning, a.speaker) {
        (true, id) => {
            let spec = s2st_core::speaker::default_registry()
                .into_iter()
                .find(|s| s.speaker_id == id.unwrap_or(0))
                .ok_or_else(|| usage(format!("speaker {} is not in the registry", id.unwrap_or(0))))?;
            Some(speaker_embed(&spec)?)
        }
        (false, Some(_)) => return Err(usage("--speaker needs a speaker-conditioned checkpoint")),
        (false, None) => None,
    };
    let input = wav::read(&a.input)?;
    let (out, dec) = model::synthesize(&input, speaker.as_ref(), cfg, &ck.params)?;
    wav::write(&a.out, &out)?;
    if let Some(p) = &a.dump_spec {
        pgm::write(p, &dec.post)?;
    }
    info!("{} frames, {:.2} s", dec.post.rows, out.duration());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let test = TestSet::load(&a.corpus, &ck.config, a.limit)?;
    let voice = a.speaker.map_or(VoiceChoice::Target, VoiceChoice::Speaker);
    let ev = evalkit::evaluate(&ck.params, &ck.config, &test, voice, a.workers)?;
    let json = serde_json::json!({
        "items": test.items.len(),
        "bleu": ev.bleu,
        "src_per": ev.src_per,
        "tgt_per": ev.tgt_per,
        "voice_match_rate": ev.voice_match_rate,
        "hit_max_decode": ev.hit_max,
    });
    println!("{}", serde_json::to_string_pretty(&json)?);
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&json)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let o = AblationOptions {
        steps: a.steps,
        seeds: a.seeds.clone(),
        out_csv: Some(a.out.clone()),
        eval_limit: a.eval_limit,
        one_head: !a.no_one_head,
        workers: a.workers,
    };
    let rows = evalkit::run_ablation(&a.corpus, &cfg, &o)?;
    println!("{}", evalkit::ABLATION_HEADER);
    for r in rows {
        println!("{}", r.csv());
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    let results = selfcheck::suite(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{verdict:4} {:<52} {:.3e} (< {:.0e})", r.name, r.error, r.tolerance);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    Ok(())
}

fn dump_spec_cmd(a: &DumpSpecArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let w = wav::read(&a.input)?;
    let m = if a.mel {
        FeatureExtractor::new(cfg.input_stft, cfg.n_mels, cfg.feature_recipe)?.features(&w)?
    } else {
        FeatureExtractor::new(cfg.output_stft, cfg.n_mels, cfg.feature_recipe)?.log_spectrogram(&w)?
    };
    pgm::write(&a.out, &m)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::PretrainEncoder(a) => pretrain_cmd(a),
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::DumpSpec(a) => dump_spec_cmd(a),
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
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
