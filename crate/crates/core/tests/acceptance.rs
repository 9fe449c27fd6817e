//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs criteria 1-4 and 9 (about ten
//! minutes). Criteria 5-8 train TOY models for tens of thousands of steps each
//! and only run with `-- --full` (or `--only 5,6,...`). Corpora and results for
//! those runs are cached under `$S2ST_ACCEPTANCE_DIR` (default: cargo's target
//! tmp dir).

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use s2st_core::config::{AuxMode, ModelConfig, Preset};
use s2st_core::corpus::{add_noise, gen_corpus, render_utterance, sample_sentence, CorpusManifest, CorpusOptions, Reorder, Split};
use s2st_core::dsp::{griffin_lim, istft, stft, StftConfig, Waveform};
use s2st_core::evalkit::recognize::{recognize, Templates};
use s2st_core::evalkit::{bleu, bleu_tokens, evaluate, per, run_ablation, AblationOptions, MetricsRow, TestSet, VoiceChoice};
use s2st_core::model::{forward, init_params, Batch};
use s2st_core::nn::Pass;
use s2st_core::selfcheck::{block_checks, model_check, op_checks};
use s2st_core::speaker::SpeakerSpec;
use s2st_core::trainer::{load_dataset, pretrain_encoder, train, AdafactorState, Checkpoint, TrainOptions};
use s2st_tensor::{Graph, ParamStore};

type Check = Result<(bool, String), String>;

const LONG_STEPS: u64 = 20_000;
const SEEDS: [u64; 3] = [1, 2, 3];
/// Encoder pre-training comparison: steps of pre-training and of fine-tuning.
const PRETRAIN_STEPS: u64 = 5_000;
const FINETUNE_STEPS: u64 = 5_000;
const PRETRAIN_LAYERS: usize = 3;

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn work_dir() -> PathBuf {
    std::env::var_os("S2ST_ACCEPTANCE_DIR").map(PathBuf::from).unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn majority(flags: &[bool]) -> bool {
    2 * flags.iter().filter(|&&f| f).count() > flags.len()
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let el = t.elapsed();
    (el < limit, format!("{:.1} s of {} s", el.as_secs_f64(), limit.as_secs()))
}

// ------------------------------------------------------------------ 1

fn gradients() -> Check {
    let t = Instant::now();
    let mut results = op_checks(7).map_err(e)?;
    for seed in [1, 7] {
        results.extend(block_checks(seed).map_err(e)?);
    }
    results.push(model_check(7).map_err(e)?);
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| format!("{} {:.2e}", r.name, r.error)).collect();
    let worst_op = results.iter().filter(|r| r.name.starts_with("op ")).map(|r| r.error).fold(0.0, f64::max);
    let model = results.last().map(|r| r.error).unwrap_or(f64::NAN);
    let (fast, time) = within(t, Duration::from_secs(120));
    Ok((
        failed.is_empty() && fast,
        format!(
            "{} checks, worst op {worst_op:.2e}, model {model:.2e}, {time}{}",
            results.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    ))
}

// ------------------------------------------------------------------ 2

fn dsp() -> Check {
    use rand::Rng;
    let t = Instant::now();
    let mut worst = 0.0f64;
    for (i, cfg) in [StftConfig::toy(), StftConfig::full_scale()].into_iter().enumerate() {
        let mut r = s2st_tensor::rng::stream(i as u64, "acceptance.dsp", 0, 0);
        let x: Vec<f64> = (0..cfg.window_length * 20 + 13).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = istft(&stft(&Waveform::new(x.clone(), cfg.sample_rate).map_err(e)?, &cfg).map_err(e)?).map_err(e)?;
        let edge = cfg.window_length - cfg.hop_length;
        let range = edge..x.len() - edge;
        let num: f64 = range.clone().map(|k| (y.samples[k] - x[k]).powi(2)).sum();
        let den: f64 = range.map(|k| x[k] * x[k]).sum();
        worst = worst.max((num / den).sqrt());
    }
    // Consistent magnitudes: the STFT of a real 0.25 s tone.
    let cfg = StftConfig::toy();
    let tone: Vec<f64> = (0..2000).map(|k| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * k as f64 / 8000.0).sin()).collect();
    let mag = stft(&Waveform::new(tone, 8000).map_err(e)?, &cfg).map_err(e)?.magnitude();
    let trace = griffin_lim(&mag, &cfg, 100, None).map_err(e)?.consistency;
    let monotone = trace.windows(2).all(|w| w[1] <= w[0] + 1e-9);
    let ratio = trace[100] / trace[0];
    let (fast, time) = within(t, Duration::from_secs(60));
    Ok((
        worst < 1e-6 && monotone && ratio < 0.01 && fast,
        format!("round trip {worst:.2e}, GL monotone {monotone}, final/initial {:.3}%, {time}", 100.0 * ratio),
    ))
}

// ------------------------------------------------------------------ 3

fn recognizer() -> Check {
    let t = Templates::for_vocab(16, 8000).map_err(e)?;
    let spk = SpeakerSpec::canonical();
    let (mut clean, mut noisy) = (0, 0);
    for i in 0..200u64 {
        let mut r = s2st_tensor::rng::stream(i, "acceptance.recognizer", 0, 0);
        let s = sample_sentence(&mut r, 16);
        let w = render_utterance(&s, &spk, 16, 8000, i).map_err(e)?;
        clean += usize::from(recognize(&w, &t).map_err(e)? == s);
        noisy += usize::from(recognize(&add_noise(&w, 20.0, 10_000 + i).map_err(e)?, &t).map_err(e)? == s);
    }
    Ok((clean == 200 && noisy >= 190, format!("clean {clean}/200, 20 dB {noisy}/200")))
}

// ------------------------------------------------------------------ 4

fn spec_loss(params: &ParamStore<f32>, cfg: &ModelConfig, batch: &Batch<f32>) -> Result<f64, String> {
    let mut g = Graph::inference();
    Ok(forward(&mut g, params, cfg, batch, AuxMode::Both, 0, &Pass::infer()).map_err(e)?.breakdown.spec)
}

fn overfit() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let m = CorpusManifest::build(&CorpusOptions { n_train: 16, n_test: 1, seed: 4, ..Default::default() }).map_err(e)?;
    gen_corpus(&m, dir.path(), workers()).map_err(e)?;
    let cfg = ModelConfig { batch_size: 16, ..ModelConfig::toy() };
    let data = load_dataset(dir.path(), &cfg, Split::Train).map_err(e)?;
    let batch: Batch<f32> = Batch::new(&data.examples, &cfg).map_err(e)?;
    let initial = spec_loss(&init_params(&cfg, AuxMode::Both, 1).map_err(e)?, &cfg, &batch)?;
    let t = Instant::now();
    let rep = train(&data, &cfg, &TrainOptions { log_every: 0, ..TrainOptions::new(AuxMode::Both, 1000, 1) }).map_err(e)?;
    let (fast, time) = within(t, Duration::from_secs(600));
    let last = spec_loss(&rep.checkpoint.params, &cfg, &batch)?;
    Ok((last < 0.1 * initial && fast, format!("spectrogram loss {initial:.4} -> {last:.4} ({:.3}x), {time}", last / initial)))
}

// ------------------------------------------------------------------ 9

fn units() -> Check {
    let mut notes = Vec::new();
    let w = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let hand = bleu_tokens(&[w("a b c d")], &[w("a b c d e")], 4).map_err(e)?;
    let hand_ok = (hand - 77.88).abs() <= 0.01;
    notes.push(format!("hand BLEU {hand:.4}"));
    let mut r = s2st_tensor::rng::stream(1, "acceptance.units", 0, 0);
    let corpus: Vec<_> = (0..50).map(|_| sample_sentence(&mut r, 16)).collect();
    let self_ok = bleu(&corpus, &corpus, 4).map_err(e)? == 100.0;
    let per_ok = per(&[3, 1, 4], &[3, 1, 4]).map_err(e)? == 0.0
        && per(&[], &[3, 1, 4, 1]).map_err(e)? == 100.0
        && per(&[3, 9, 4, 1], &[3, 1, 4, 1]).map_err(e)? == 25.0
        && per(&[3, 1, 4, 1, 5], &[3, 1, 4, 1]).map_err(e)? == 25.0;

    let cfg = ModelConfig::toy();
    let params: ParamStore<f32> = init_params(&cfg, AuxMode::Both, 3).map_err(e)?;
    let ck = Checkpoint { config: cfg, optimizer: AdafactorState::new(&params), params, step: 7 };
    let dir = tempfile::tempdir().map_err(e)?;
    let p = dir.path().join("ck.s2st");
    ck.save(&p).map_err(e)?;
    let bytes = std::fs::read(&p).map_err(e)?;
    let back = Checkpoint::load(&p).map_err(e)?;
    let ck_ok = back == ck && back.to_bytes().map_err(e)? == bytes;
    notes.push(format!("checkpoint {} bytes", bytes.len()));

    let c = Preset::Conversational.config().aux_weight;
    let f = Preset::Fisher.config().aux_weight;
    let lambda_ok = c.at(0) == 1.0 && c.at(160_000) == 1.0 && f.at(0) == 0.3 && f.at(160_000) == 0.001;
    notes.push(format!("bleu(x,x)=100 {self_ok}, PER {per_ok}, round trip {ck_ok}, schedules {lambda_ok}"));
    Ok((hand_ok && self_ok && per_ok && ck_ok && lambda_ok, notes.join(", ")))
}

// ------------------------------------------------------------------ 5-8

/// Generates (once) a default-size corpus with the given options under the work dir.
fn corpus(name: &str, o: CorpusOptions) -> Result<PathBuf, String> {
    let dir = work_dir().join(name);
    let m = CorpusManifest::build(&o).map_err(e)?;
    let fresh = CorpusManifest::load(dir.join("manifest.json")).map(|old| old == m).unwrap_or(false);
    if !fresh {
        eprintln!("generating corpus {}", dir.display());
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(e)?;
        }
        gen_corpus(&m, &dir, workers()).map_err(e)?;
    }
    Ok(dir)
}

fn eval_bleu(ck: &Checkpoint, test: &TestSet, voice: VoiceChoice) -> Result<f64, String> {
    Ok(evaluate(&ck.params, &ck.config, test, voice, workers()).map_err(e)?.bleu)
}

fn ablation() -> Check {
    let dir = corpus("swap", CorpusOptions::default())?;
    let cfg = ModelConfig::toy();
    let o = AblationOptions {
        steps: LONG_STEPS,
        seeds: SEEDS.to_vec(),
        out_csv: Some(work_dir().join("ablation.csv")),
        eval_limit: None,
        one_head: false,
        workers: workers(),
    };
    let rows = run_ablation(&dir, &cfg, &o).map_err(e)?;
    let get = |seed: u64, aux: AuxMode| -> Result<&MetricsRow, String> {
        rows.iter().find(|r| r.seed == seed && r.aux_mode == aux).ok_or_else(|| format!("no row for {aux} seed {seed}"))
    };
    let mut checks = vec![vec![]; 5];
    let mut detail = Vec::new();
    for &s in &SEEDS {
        let (none, src, tgt, both) = (get(s, AuxMode::None)?, get(s, AuxMode::Source)?, get(s, AuxMode::Target)?, get(s, AuxMode::Both)?);
        checks[0].push(none.bleu < 5.0);
        checks[1].push(both.bleu >= tgt.bleu);
        checks[2].push(tgt.bleu >= src.bleu);
        checks[3].push(both.bleu - none.bleu >= 30.0);
        checks[4].push(matches!((both.src_per, both.tgt_per), (Some(a), Some(b)) if a < b));
        detail.push(format!(
            "seed {s}: none {:.1} src {:.1} tgt {:.1} both {:.1}, PER {:.1}/{:.1}",
            none.bleu,
            src.bleu,
            tgt.bleu,
            both.bleu,
            both.src_per.unwrap_or(f64::NAN),
            both.tgt_per.unwrap_or(f64::NAN)
        ));
    }
    Ok((checks.iter().all(|c| majority(c)), detail.join("; ")))
}

fn heads() -> Check {
    let dir = corpus("reverse", CorpusOptions { reorder: Reorder::Reverse, ..Default::default() })?;
    let data = load_dataset(&dir, &ModelConfig::toy(), Split::Train).map_err(e)?;
    let test = TestSet::load(&dir, &ModelConfig::toy(), None).map_err(e)?;
    let mut wins = Vec::new();
    let mut detail = Vec::new();
    for &s in &SEEDS {
        let mut b = [0.0; 2];
        for (k, h) in [4usize, 1].into_iter().enumerate() {
            let cfg = ModelConfig { attention_heads: h, ..ModelConfig::toy() };
            let rep =
                train(&data, &cfg, &TrainOptions { log_every: 1000, ..TrainOptions::new(AuxMode::Both, LONG_STEPS, s) }).map_err(e)?;
            b[k] = eval_bleu(&rep.checkpoint, &test, VoiceChoice::Target)?;
        }
        wins.push(b[0] >= b[1]);
        detail.push(format!("seed {s}: 4-head {:.1} 1-head {:.1}", b[0], b[1]));
    }
    Ok((majority(&wins), detail.join("; ")))
}

fn pretraining() -> Check {
    let dir = corpus("swap", CorpusOptions::default())?;
    let cfg = ModelConfig::toy();
    let data = load_dataset(&dir, &cfg, Split::Train).map_err(e)?;
    let test = TestSet::load(&dir, &cfg, None).map_err(e)?;
    let mut wins = Vec::new();
    let mut detail = Vec::new();
    for &s in &SEEDS {
        let opts = TrainOptions { log_every: 1000, ..TrainOptions::new(AuxMode::Both, PRETRAIN_STEPS, s) };
        let enc = pretrain_encoder(&data, &cfg, PRETRAIN_LAYERS, &opts).map_err(e)?;
        let tuned = TrainOptions { init_from: Some(enc.params), ..TrainOptions::new(AuxMode::Both, FINETUNE_STEPS, s) };
        let scratch = TrainOptions { init_from: None, ..tuned.clone() };
        let bp =
            eval_bleu(&train(&data, &cfg, &TrainOptions { log_every: 1000, ..tuned }).map_err(e)?.checkpoint, &test, VoiceChoice::Target)?;
        let bs = eval_bleu(
            &train(&data, &cfg, &TrainOptions { log_every: 1000, ..scratch }).map_err(e)?.checkpoint,
            &test,
            VoiceChoice::Target,
        )?;
        wins.push(bp - bs >= 2.0);
        detail.push(format!("seed {s}: pretrained {bp:.1} scratch {bs:.1}"));
    }
    Ok((majority(&wins), detail.join("; ")))
}

fn voice_transfer() -> Check {
    let dir = corpus("voice", CorpusOptions { voice_transfer: true, ..Default::default() })?;
    let cfg = ModelConfig { speaker_conditioning: true, ..ModelConfig::toy() };
    let data = load_dataset(&dir, &cfg, Split::Train).map_err(e)?;
    let test = TestSet::load(&dir, &cfg, Some(100)).map_err(e)?;
    let rep = train(&data, &cfg, &TrainOptions { log_every: 1000, ..TrainOptions::new(AuxMode::Both, LONG_STEPS, SEEDS[0]) }).map_err(e)?;
    let k = evaluate(&rep.checkpoint.params, &cfg, &test, VoiceChoice::Target, workers()).map_err(e)?;
    let canonical = eval_bleu(&rep.checkpoint, &test, VoiceChoice::Speaker(SpeakerSpec::canonical().speaker_id))?;
    let drop = canonical - k.bleu;
    Ok((
        k.voice_match_rate >= 0.9 && drop <= 5.0,
        format!(
            "voice match {:.1}%, BLEU target voice {:.1} vs canonical {canonical:.1} (drop {drop:.1})",
            100.0 * k.voice_match_rate,
            k.bleu
        ),
    ))
}

// ------------------------------------------------------------------ driver

struct Criterion {
    id: u8,
    name: &'static str,
    long: bool,
    run: fn() -> Check,
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, name: "gradient suite", long: false, run: gradients },
    Criterion { id: 2, name: "DSP identities", long: false, run: dsp },
    Criterion { id: 3, name: "oracle recognizer", long: false, run: recognizer },
    Criterion { id: 4, name: "overfit sanity", long: false, run: overfit },
    Criterion { id: 5, name: "aux-loss ablation ordering", long: true, run: ablation },
    Criterion { id: 6, name: "4-head vs 1-head attention", long: true, run: heads },
    Criterion { id: 7, name: "encoder pre-training", long: true, run: pretraining },
    Criterion { id: 8, name: "voice transfer", long: true, run: voice_transfer },
    Criterion { id: 9, name: "metric and checkpoint units", long: false, run: units },
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let full = args.iter().any(|a| a == "--full" || a == "--ignored" || a == "--include-ignored");
    let only: Option<Vec<u8>> = args
        .iter()
        .position(|a| a == "--only")
        .and_then(|i| args.get(i + 1))
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    if args.iter().any(|a| a == "--list") {
        for c in &CRITERIA {
            println!("criterion {}: test", c.id);
        }
        return;
    }
    let selected = |c: &Criterion| match &only {
        Some(ids) => ids.contains(&c.id),
        None => full || !c.long,
    };
    let mut failed = 0;
    for c in &CRITERIA {
        if !selected(c) {
            let why = if c.long && only.is_none() { "multi-hour; run with --full" } else { "not selected" };
            println!("criterion {} {}: NOT RUN ({why})", c.id, c.name);
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match (c.run)() {
            Ok(r) => r,
            Err(err) => (false, format!("error: {err}")),
        };
        failed += usize::from(!ok);
        println!("criterion {} {}: {} ({detail}) [{:.0} s]", c.id, c.name, if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
