//! Evaluation: toy-BLEU through the template recognizer, phoneme error rate,
//! voice identity, and the auxiliary-task ablation runner.

pub mod recognize;

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;
use std::path::{Path, PathBuf};

use s2st_tensor::Graph;
use serde::{Deserialize, Serialize};

use crate::config::{AuxMode, ModelConfig};
use crate::corpus::{load_split, CorpusManifest, LoadedItem, Split, SymbolSequence};
use crate::dsp::Waveform;
use crate::error::{io_err, Error, Result};
use crate::model::{self, Batch, Example, SOURCE_AUX, TARGET_AUX};
use crate::nn::Pass;
use crate::speaker::{estimate_f0, speaker_embed, SpeakerSpec};
use crate::trainer::{self, Dataset, TrainOptions};
use recognize::{recognize, Templates};

/// Relative f0 tolerance of a voice match.
pub const VOICE_TOLERANCE: f64 = 0.10;

// ------------------------------------------------------------------ metrics

/// Corpus BLEU over arbitrary tokens, in `[0, 100]`.
///
/// Modified n-gram precisions for `n = 1..=max_n` are pooled over the corpus;
/// a zero match count for `n >= 2` is smoothed to `1 / (total + 1)`.
pub fn bleu_tokens<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if refs.is_empty() {
        return Err(Error::Invalid("bleu needs at least one reference".into()));
    }
    if max_n == 0 {
        return Err(Error::Invalid("bleu needs max_n >= 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if c == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..max_n {
        let p = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else if totals[n] == 0 {
            1.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += p.ln() / max_n as f64;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok((100.0 * bp * log_p.exp()).clamp(0.0, 100.0))
}

fn ngram_counts<T: Eq + Hash + Clone>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Toy-BLEU: words of the toy language are the tokens.
pub fn bleu(hyps: &[SymbolSequence], refs: &[SymbolSequence], max_n: usize) -> Result<f64> {
    let words = |v: &[SymbolSequence]| v.iter().map(|s| s.words.clone()).collect::<Vec<_>>();
    bleu_tokens(&words(hyps), &words(refs), max_n)
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Phoneme error rate in percent.
pub fn per(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("phoneme error rate needs a non-empty reference".into()));
    }
    Ok(100.0 * levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus PER: total edits over total reference length.
pub fn corpus_per(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| levenshtein(h, r)).sum();
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Invalid("phoneme error rate needs a non-empty reference".into()));
    }
    Ok(100.0 * edits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoiceMatch {
    pub matched: bool,
    pub f0: f64,
}

/// Median pitch within 10% of the expected speaker's f0.
pub fn voice_match(w: &Waveform, expected: &SpeakerSpec) -> Result<VoiceMatch> {
    let f0 = estimate_f0(w)?;
    Ok(VoiceMatch { matched: (f0 / expected.f0 - 1.0).abs() <= VOICE_TOLERANCE, f0 })
}

// ------------------------------------------------------------------ model evaluation

pub const ABLATION_HEADER: &str = "aux_mode,heads,seed,steps,bleu,src_per,tgt_per,voice_match_rate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub aux_mode: AuxMode,
    pub heads: usize,
    pub seed: u64,
    pub steps: u64,
    pub bleu: f64,
    /// Absent when the model has no source decoder.
    pub src_per: Option<f64>,
    pub tgt_per: Option<f64>,
    pub voice_match_rate: Option<f64>,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:.4},{},{},{}",
            self.aux_mode,
            self.heads,
            self.seed,
            self.steps,
            self.bleu,
            o(self.src_per),
            o(self.tgt_per),
            o(self.voice_match_rate)
        )
    }
}

/// Test split in both waveform and feature form.
pub struct TestSet {
    pub manifest: CorpusManifest,
    pub items: Vec<LoadedItem>,
    pub data: Dataset,
    pub templates: Templates,
}

impl TestSet {
    pub fn load(dir: &Path, cfg: &ModelConfig, limit: Option<usize>) -> Result<Self> {
        let manifest = CorpusManifest::load(dir.join("manifest.json"))?;
        let mut items = load_split(dir, &manifest, Split::Test)?;
        let mut data = trainer::load_dataset(dir, cfg, Split::Test)?;
        if let Some(n) = limit {
            items.truncate(n);
            data.examples.truncate(n);
            data.ids.truncate(n);
        }
        let templates = Templates::for_corpus(dir, &manifest)?;
        Ok(TestSet { manifest, items, data, templates })
    }
}

/// Which speaker a conditioned model is asked to speak as.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoiceChoice {
    /// The item's target speaker.
    Target,
    /// A fixed registry speaker for every item.
    Speaker(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub bleu: f64,
    pub src_per: Option<f64>,
    pub tgt_per: Option<f64>,
    /// Fraction of outputs whose pitch matches the requested voice; outputs
    /// without voiced content count as mismatches.
    pub voice_match_rate: f64,
    pub hypotheses: Vec<SymbolSequence>,
    /// Items whose decoder never emitted a stop decision.
    pub hit_max: usize,
}

/// Per-item outcome of synthesis and recognition.
struct ItemResult {
    hypothesis: SymbolSequence,
    voice_matched: bool,
    hit_max: bool,
}

fn score_item(
    params: &s2st_tensor::ParamStore<f32>,
    cfg: &ModelConfig,
    test: &TestSet,
    it: &LoadedItem,
    voice: VoiceChoice,
) -> Result<ItemResult> {
    let spk = match voice {
        VoiceChoice::Target => test.manifest.speaker(it.record.tgt_speaker)?,
        VoiceChoice::Speaker(id) => test.manifest.speaker(id)?,
    };
    let emb = if cfg.speaker_conditioning { Some(speaker_embed(&spk)?) } else { None };
    let (wav, out) = model::synthesize(&it.src_wav, emb.as_ref(), cfg, params)?;
    Ok(ItemResult {
        hypothesis: recognize(&wav, &test.templates)?,
        voice_matched: voice_match(&wav, &spk).map(|v| v.matched).unwrap_or(false),
        hit_max: out.hit_max,
    })
}

/// Synthesizes every test item and scores it with the recognizer; aux
/// decoders present in `params` are scored teacher-forced. Items are split
/// over `workers` threads; results do not depend on the worker count.
pub fn evaluate(
    params: &s2st_tensor::ParamStore<f32>,
    cfg: &ModelConfig,
    test: &TestSet,
    voice: VoiceChoice,
    workers: usize,
) -> Result<Evaluation> {
    let chunk = test.items.len().div_ceil(workers.max(1)).max(1);
    let results: Vec<ItemResult> = std::thread::scope(|scope| {
        let handles: Vec<_> = test
            .items
            .chunks(chunk)
            .map(|items| scope.spawn(move || items.iter().map(|it| score_item(params, cfg, test, it, voice)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect::<Result<Vec<Vec<_>>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let refs: Vec<SymbolSequence> = test.items.iter().map(|i| i.target.clone()).collect();
    let hyps: Vec<SymbolSequence> = results.iter().map(|r| r.hypothesis.clone()).collect();
    let bleu = bleu(&hyps, &refs, 4)?;
    let (src_per, tgt_per) = aux_per(params, cfg, &test.data.examples)?;
    Ok(Evaluation {
        bleu,
        src_per,
        tgt_per,
        voice_match_rate: results.iter().filter(|r| r.voice_matched).count() as f64 / results.len().max(1) as f64,
        hypotheses: hyps,
        hit_max: results.iter().filter(|r| r.hit_max).count(),
    })
}

/// Teacher-forced PER of whichever auxiliary decoders `params` contains.
pub fn aux_per(params: &s2st_tensor::ParamStore<f32>, cfg: &ModelConfig, examples: &[Example]) -> Result<(Option<f64>, Option<f64>)> {
    let has = |prefix: &str| params.get(&format!("{prefix}.out.W")).is_some();
    let decoders: Vec<(&str, usize, bool)> =
        [(SOURCE_AUX, cfg.aux_source_tap, false), (TARGET_AUX, cfg.aux_target_tap, true)].into_iter().filter(|(p, _, _)| has(p)).collect();
    if decoders.is_empty() || examples.is_empty() {
        return Ok((None, None));
    }
    let mut hyp: [Vec<Vec<usize>>; 2] = Default::default();
    let mut refs: [Vec<Vec<usize>>; 2] = Default::default();
    let pass = Pass::infer();
    for chunk in examples.chunks(cfg.batch_size.max(1)) {
        let batch: Batch<f32> = Batch::new(chunk, cfg)?;
        let mut g = Graph::inference();
        let x = g.constant(batch.features.clone());
        let enc = model::encode(&mut g, params, cfg, x, &batch.src_lengths, &pass)?;
        for &(prefix, tap, is_target) in &decoders {
            let symbols = if is_target { &batch.target_symbols } else { &batch.source_symbols };
            let t = enc.tap(&mut g, tap)?;
            let out = model::decode_phonemes(&mut g, params, cfg, prefix, t, &batch.src_lengths, symbols, &pass)?;
            let k = usize::from(is_target);
            hyp[k].extend(model::phoneme_predictions(&g, &out, batch.size, cfg.symbol_vocab));
            refs[k].extend(symbols.iter().cloned());
        }
    }
    let score = |k: usize| -> Result<Option<f64>> {
        if refs[k].is_empty() {
            Ok(None)
        } else {
            corpus_per(&hyp[k], &refs[k]).map(Some)
        }
    };
    Ok((score(0)?, score(1)?))
}

// ------------------------------------------------------------------ ablation

#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub steps: u64,
    pub seeds: Vec<u64>,
    /// Rows are appended here as soon as each run finishes.
    pub out_csv: Option<PathBuf>,
    /// Evaluate on at most this many test items.
    pub eval_limit: Option<usize>,
    /// Also train a 1-head model with both auxiliary tasks.
    pub one_head: bool,
    /// Evaluation threads.
    pub workers: usize,
}

/// Trains one model per aux mode (and optionally a 1-head model) per seed on
/// the corpus at `corpus`, evaluating each on its test split.
pub fn run_ablation(corpus: &Path, cfg: &ModelConfig, o: &AblationOptions) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let train_set = trainer::load_dataset(corpus, cfg, Split::Train)?;
    let test = TestSet::load(corpus, cfg, o.eval_limit)?;
    let mut csv = match &o.out_csv {
        Some(p) => {
            let mut f = std::fs::File::create(p).map_err(io_err(p))?;
            writeln!(f, "{ABLATION_HEADER}").map_err(io_err(p))?;
            Some((f, p.clone()))
        }
        None => None,
    };
    let mut runs: Vec<(AuxMode, ModelConfig)> = AuxMode::ALL.iter().map(|&a| (a, cfg.clone())).collect();
    if o.one_head {
        runs.push((AuxMode::Both, ModelConfig { attention_heads: 1, ..cfg.clone() }));
    }
    let mut rows = Vec::new();
    for &seed in &o.seeds {
        for (aux, c) in &runs {
            log::info!("ablation: aux {aux}, {} head(s), seed {seed}, {} steps", c.attention_heads, o.steps);
            let report = trainer::train(&train_set, c, &TrainOptions { log_every: 1000, ..TrainOptions::new(*aux, o.steps, seed) })?;
            let ev = evaluate(&report.checkpoint.params, c, &test, VoiceChoice::Target, o.workers)?;
            let row = MetricsRow {
                aux_mode: *aux,
                heads: c.attention_heads,
                seed,
                steps: o.steps,
                bleu: ev.bleu,
                src_per: ev.src_per,
                tgt_per: ev.tgt_per,
                voice_match_rate: Some(ev.voice_match_rate),
            };
            log::info!("ablation row: {}", row.csv());
            if let Some((f, p)) = csv.as_mut() {
                writeln!(f, "{}", row.csv()).map_err(io_err(&*p))?;
                f.flush().map_err(io_err(&*p))?;
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_examples() {
        let b = bleu_tokens(&[toks("a b c d")], &[toks("a b c d e")], 4).unwrap();
        assert!((b - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
        assert!((b - 77.88).abs() < 0.01);
        assert_eq!(bleu_tokens(&[toks("a b")], &[toks("a b")], 4).unwrap(), 100.0);
        assert_eq!(bleu_tokens(&[toks("x y z")], &[toks("a b c")], 4).unwrap(), 0.0);
        assert!(bleu_tokens(&[toks("a")], &[], 4).is_err());
        assert!(bleu_tokens::<String>(&[], &[], 4).is_err());
    }

    #[test]
    fn per_examples() {
        assert_eq!(per(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(per(&[1, 2, 9, 4], &[1, 2, 3, 4]).unwrap(), 25.0);
        assert_eq!(per(&[], &[1, 2, 3]).unwrap(), 100.0);
        assert!(per(&[1], &[]).is_err());
    }

    #[test]
    fn row_csv_leaves_absent_fields_empty() {
        let r = MetricsRow {
            aux_mode: AuxMode::None,
            heads: 4,
            seed: 2,
            steps: 10,
            bleu: 1.5,
            src_per: None,
            tgt_per: Some(20.0),
            voice_match_rate: None,
        };
        assert_eq!(r.csv(), "none,4,2,10,1.5000,,20.0000,");
        assert_eq!(ABLATION_HEADER.split(',').count(), r.csv().split(',').count());
    }
}
