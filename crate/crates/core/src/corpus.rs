//! Synthetic parallel corpus: a toy symbolic language, a reordering
//! translation and harmonic "speech" rendering.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{io_err, Error, Result};
use crate::speaker::SpeakerSpec;
use crate::wav;

pub const SYMBOL_SECONDS: f64 = 0.06;
pub const GAP_SECONDS: f64 = 0.02;
pub const PEAK: f64 = 0.7;
pub const MIN_WORDS: usize = 2;
pub const MAX_WORDS: usize = 8;
pub const MAX_WORD_LEN: usize = 3;

/// A sentence: words of symbol ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SymbolSequence {
    pub words: Vec<Vec<usize>>,
}

impl SymbolSequence {
    pub fn new(words: Vec<Vec<usize>>) -> Result<Self> {
        if words.is_empty() || words.iter().any(|w| w.is_empty()) {
            return Err(Error::Invalid("sentences need at least one non-empty word".into()));
        }
        Ok(SymbolSequence { words })
    }

    pub fn symbols(&self) -> Vec<usize> {
        self.words.concat()
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.words.iter().flatten().find(|&&s| s >= vocab) {
            Some(s) => Err(Error::Invalid(format!("symbol {s} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }
}

impl fmt::Display for SymbolSequence {
    /// Space-separated ids with `|` between words.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<String> = self.words.iter().map(|w| w.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")).collect();
        f.write_str(&words.join(" | "))
    }
}

impl FromStr for SymbolSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(SymbolSequence::default());
        }
        let words = s
            .split('|')
            .map(|w| {
                w.split_whitespace()
                    .map(|t| t.parse::<usize>().map_err(|_| Error::Invalid(format!("bad symbol `{t}`"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        SymbolSequence::new(words)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reorder {
    None,
    /// Swap adjacent word pairs: (w1 w2 w3 w4 w5) -> (w2 w1 w4 w3 w5).
    Swap,
    Reverse,
}

impl FromStr for Reorder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Reorder::None),
            "swap" => Ok(Reorder::Swap),
            "reverse" => Ok(Reorder::Reverse),
            _ => Err(Error::Invalid(format!("unknown reorder mode `{s}`"))),
        }
    }
}

fn reorder_words<T: Clone>(words: &[T], mode: Reorder) -> Vec<T> {
    match mode {
        Reorder::None => words.to_vec(),
        Reorder::Reverse => words.iter().rev().cloned().collect(),
        Reorder::Swap => {
            let mut out = words.to_vec();
            for pair in out.chunks_exact_mut(2) {
                pair.swap(0, 1);
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Everything needed to regenerate one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
    pub src_speaker: u32,
    pub tgt_speaker: u32,
    pub snr_db: Option<f64>,
}

impl ItemRecord {
    pub fn stem(&self) -> String {
        format!("{:06}", self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub vocab_size: usize,
    /// `lexicon[s]` is the translation of source symbol `s`.
    pub lexicon: Vec<usize>,
    pub reorder: Reorder,
    pub speakers: Vec<SpeakerSpec>,
    /// Targets take a (different) registry voice instead of the canonical one.
    pub voice_transfer: bool,
    pub noise: Option<NoiseSpec>,
    pub sample_rate: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub items: Vec<ItemRecord>,
}

/// Options for building a manifest.
#[derive(Debug, Clone)]
pub struct CorpusOptions {
    pub vocab_size: usize,
    pub reorder: Reorder,
    pub speakers: Vec<SpeakerSpec>,
    pub voice_transfer: bool,
    pub noise: Option<NoiseSpec>,
    pub sample_rate: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            vocab_size: 16,
            reorder: Reorder::Swap,
            speakers: crate::speaker::default_registry(),
            voice_transfer: false,
            noise: None,
            sample_rate: 8000,
            n_train: 2000,
            n_test: 200,
            seed: 1,
        }
    }
}

fn item_seed(seed: u64, split: Split, index: usize) -> u64 {
    // Train and test occupy disjoint halves of a per-corpus seed range.
    let base = s2st_tensor::rng::splitmix64(seed) & !0xFFFF_FFFF;
    base | match split {
        Split::Train => index as u64,
        Split::Test => (1 << 31) | index as u64,
    }
}

impl CorpusManifest {
    pub fn build(o: &CorpusOptions) -> Result<Self> {
        if o.n_train == 0 || o.n_test == 0 {
            return Err(Error::Invalid("corpus splits must be non-empty".into()));
        }
        if o.vocab_size < 2 {
            return Err(Error::Invalid("vocabulary needs at least two symbols".into()));
        }
        if o.speakers.is_empty() || (o.voice_transfer && o.speakers.len() < 2) {
            return Err(Error::Invalid("speaker registry too small".into()));
        }
        for s in &o.speakers {
            s.validate()?;
        }
        if !o.speakers.iter().any(|s| *s == SpeakerSpec::canonical()) {
            return Err(Error::Invalid("registry must contain the canonical speaker".into()));
        }
        let mut r = s2st_tensor::rng::stream(o.seed, "corpus.lexicon", 0, 0);
        let mut lexicon: Vec<usize> = (0..o.vocab_size).collect();
        for i in (1..lexicon.len()).rev() {
            lexicon.swap(i, r.random_range(0..=i));
        }
        let mut items = Vec::with_capacity(o.n_train + o.n_test);
        for (split, n) in [(Split::Train, o.n_train), (Split::Test, o.n_test)] {
            for i in 0..n {
                let seed = item_seed(o.seed, split, i);
                let mut r = s2st_tensor::rng::stream(seed, "corpus.item", 0, 0);
                let src = o.speakers[r.random_range(0..o.speakers.len())].speaker_id;
                let tgt = if o.voice_transfer {
                    let others: Vec<u32> = o.speakers.iter().map(|s| s.speaker_id).filter(|&id| id != src).collect();
                    others[r.random_range(0..others.len())]
                } else {
                    SpeakerSpec::canonical().speaker_id
                };
                let snr_db = o.noise.map(|n| r.random_range(n.snr_min_db..=n.snr_max_db));
                let id = items.len();
                items.push(ItemRecord { id, split, seed, src_speaker: src, tgt_speaker: tgt, snr_db });
            }
        }
        Ok(CorpusManifest {
            vocab_size: o.vocab_size,
            lexicon,
            reorder: o.reorder,
            speakers: o.speakers.clone(),
            voice_transfer: o.voice_transfer,
            noise: o.noise,
            sample_rate: o.sample_rate,
            n_train: o.n_train,
            n_test: o.n_test,
            seed: o.seed,
            items,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.vocab_size];
        for &s in &self.lexicon {
            if s >= self.vocab_size || std::mem::replace(&mut seen[s], true) {
                return Err(Error::Invalid("lexicon is not a permutation".into()));
            }
        }
        if self.lexicon.len() != self.vocab_size {
            return Err(Error::Invalid("lexicon size differs from vocabulary".into()));
        }
        Ok(())
    }

    pub fn speaker(&self, id: u32) -> Result<SpeakerSpec> {
        self.speakers.iter().find(|s| s.speaker_id == id).copied().ok_or_else(|| Error::Invalid(format!("speaker {id} not in registry")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ItemRecord> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn inverse_lexicon(&self) -> Vec<usize> {
        let mut inv = vec![0; self.vocab_size];
        for (s, &t) in self.lexicon.iter().enumerate() {
            inv[t] = s;
        }
        inv
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let m: CorpusManifest = serde_json::from_str(&std::fs::read_to_string(path).map_err(io_err(path))?)?;
        m.validate()?;
        Ok(m)
    }
}

/// Random sentence of 2-8 words of 1-3 symbols; no symbol repeats inside a
/// word, so runs in the rendered audio always mark distinct symbols.
pub fn sample_sentence<R: Rng + ?Sized>(r: &mut R, vocab: usize) -> SymbolSequence {
    let n_words = r.random_range(MIN_WORDS..=MAX_WORDS);
    let words = (0..n_words)
        .map(|_| {
            let len = r.random_range(1..=MAX_WORD_LEN);
            let mut w: Vec<usize> = Vec::with_capacity(len);
            while w.len() < len {
                let s = r.random_range(0..vocab);
                if w.last() != Some(&s) {
                    w.push(s);
                }
            }
            w
        })
        .collect();
    SymbolSequence { words }
}

pub fn translate_sentence(src: &SymbolSequence, m: &CorpusManifest) -> Result<SymbolSequence> {
    src.check_vocab(m.vocab_size)?;
    let mapped: Vec<Vec<usize>> = src.words.iter().map(|w| w.iter().map(|&s| m.lexicon[s]).collect()).collect();
    Ok(SymbolSequence { words: reorder_words(&mapped, m.reorder) })
}

/// Inverse of [`translate_sentence`].
pub fn untranslate_sentence(tgt: &SymbolSequence, m: &CorpusManifest) -> Result<SymbolSequence> {
    tgt.check_vocab(m.vocab_size)?;
    let inv = m.inverse_lexicon();
    // Swap and reverse are involutions.
    let words = reorder_words(&tgt.words, m.reorder);
    Ok(SymbolSequence { words: words.iter().map(|w| w.iter().map(|&s| inv[s]).collect()).collect() })
}

/// Formant centers (F1, F2) of symbol `s` on a grid of multiples of the
/// canonical f0.
pub fn formants(s: usize, vocab: usize) -> (f64, f64) {
    let n1 = (vocab as f64).sqrt().ceil() as usize;
    let n2 = vocab.div_ceil(n1);
    let step = |lo: f64, hi: f64, n: usize, i: usize| if n <= 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
    (step(440.0, 1100.0, n1, s % n1), step(1540.0, 2860.0, n2, s / n1))
}

const F1_WIDTH: f64 = 120.0;
const F2_WIDTH: f64 = 200.0;
const F2_GAIN: f64 = 0.6;

fn render_symbol(s: usize, vocab: usize, spk: &SpeakerSpec, sr: f64, phases: &mut impl Rng, out: &mut Vec<f64>) {
    let n = (SYMBOL_SECONDS * sr).round() as usize;
    let (f1, f2) = formants(s, vocab);
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|k| k as f64 * spk.f0)
        .take_while(|&f| f < 0.5 * sr - 50.0)
        .map(|f| {
            let bump =
                (-(f - f1).powi(2) / (2.0 * F1_WIDTH * F1_WIDTH)).exp() + F2_GAIN * (-(f - f2).powi(2) / (2.0 * F2_WIDTH * F2_WIDTH)).exp();
            let tilt = 10f64.powf(spk.tilt * (f / spk.f0).log2() / 20.0);
            (f, bump * tilt, phases.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let w = std::f64::consts::TAU / sr;
    for i in 0..n {
        let env = (std::f64::consts::PI * i as f64 / n as f64).sin().powi(2);
        let v: f64 = harmonics.iter().map(|&(f, a, p)| a * (w * f * i as f64 + p).sin()).sum();
        out.push(env * v);
    }
}

/// Deterministic waveform for `seq` spoken by `spk`.
pub fn render_utterance(seq: &SymbolSequence, spk: &SpeakerSpec, vocab: usize, sr: u32, seed: u64) -> Result<Waveform> {
    spk.validate()?;
    seq.check_vocab(vocab)?;
    let srf = sr as f64;
    let gap = (GAP_SECONDS * srf).round() as usize;
    let mut phases = s2st_tensor::rng::stream(seed, "corpus.phase", spk.speaker_id as u64, 0);
    let mut out = Vec::new();
    for (i, w) in seq.words.iter().enumerate() {
        if i > 0 {
            out.resize(out.len() + gap, 0.0);
        }
        for &s in w {
            render_symbol(s, vocab, spk, srf, &mut phases, &mut out);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|x| *x *= PEAK / peak);
    }
    Waveform::new(out, sr)
}

/// Adds white noise scaled to exactly `snr_db` relative to the signal energy.
pub fn add_noise(w: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = s2st_tensor::rng::stream(seed, "corpus.noise", 0, 0);
    let noise: Vec<f64> = (0..w.samples.len()).map(|_| StandardNormal.sample(&mut r)).collect();
    let ne: f64 = noise.iter().map(|x| x * x).sum();
    let scale = if ne > 0.0 { (w.energy() / ne / 10f64.powf(snr_db / 10.0)).sqrt() } else { 0.0 };
    let samples = w.samples.iter().zip(&noise).map(|(s, n)| (s + scale * n).clamp(-1.0, 1.0)).collect();
    Waveform::new(samples, w.sample_rate)
}

/// One fully materialized corpus item.
#[derive(Debug, Clone)]
pub struct UtterancePair {
    pub record: ItemRecord,
    pub source: SymbolSequence,
    pub target: SymbolSequence,
    pub src_wav: Waveform,
    pub tgt_wav: Waveform,
}

pub fn item_sentences(m: &CorpusManifest, rec: &ItemRecord) -> Result<(SymbolSequence, SymbolSequence)> {
    let mut r = s2st_tensor::rng::stream(rec.seed, "corpus.sentence", 0, 0);
    let src = sample_sentence(&mut r, m.vocab_size);
    let tgt = translate_sentence(&src, m)?;
    Ok((src, tgt))
}

pub fn render_item(m: &CorpusManifest, rec: &ItemRecord) -> Result<UtterancePair> {
    let (source, target) = item_sentences(m, rec)?;
    let mut src_wav = render_utterance(&source, &m.speaker(rec.src_speaker)?, m.vocab_size, m.sample_rate, rec.seed)?;
    if let Some(snr) = rec.snr_db {
        src_wav = add_noise(&src_wav, snr, rec.seed)?;
    }
    let tgt_wav = render_utterance(&target, &m.speaker(rec.tgt_speaker)?, m.vocab_size, m.sample_rate, rec.seed ^ 0x7467)?;
    Ok(UtterancePair { record: rec.clone(), source, target, src_wav, tgt_wav })
}

fn write_item(dir: &Path, p: &UtterancePair) -> Result<()> {
    let stem = dir.join(p.record.split.dir()).join(p.record.stem());
    let with = |ext: &str| PathBuf::from(format!("{}.{ext}", stem.display()));
    wav::write(with("src.wav"), &p.src_wav)?;
    wav::write(with("tgt.wav"), &p.tgt_wav)?;
    let txt = |path: PathBuf, s: &SymbolSequence| std::fs::write(&path, format!("{s}\n")).map_err(io_err(path));
    txt(with("src.txt"), &p.source)?;
    txt(with("tgt.txt"), &p.target)
}

/// Writes the corpus layout under `out_dir`; `workers > 1` renders items in
/// parallel with identical output.
pub fn gen_corpus(m: &CorpusManifest, out_dir: &Path, workers: usize) -> Result<()> {
    m.validate()?;
    for split in [Split::Train, Split::Test] {
        let d = out_dir.join(split.dir());
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    m.save(out_dir.join("manifest.json"))?;
    let workers = workers.max(1);
    let chunk = m.items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = m
            .items
            .chunks(chunk.max(1))
            .map(|items| {
                scope.spawn(move || -> Result<()> {
                    for rec in items {
                        write_item(out_dir, &render_item(m, rec)?)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("corpus worker panicked"))
    })?;
    let templates = crate::evalkit::recognize::Templates::build(m)?;
    templates.save(out_dir.join(crate::evalkit::recognize::TEMPLATE_FILE))?;
    log::info!("wrote {} pairs to {}", m.items.len(), out_dir.display());
    Ok(())
}

/// Corpus item as read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedItem {
    pub record: ItemRecord,
    pub source: SymbolSequence,
    pub target: SymbolSequence,
    pub src_wav: Waveform,
    pub tgt_wav: Waveform,
}

pub fn load_split(dir: &Path, m: &CorpusManifest, split: Split) -> Result<Vec<LoadedItem>> {
    m.split(split)
        .map(|rec| {
            let stem = dir.join(split.dir()).join(rec.stem());
            let with = |ext: &str| PathBuf::from(format!("{}.{ext}", stem.display()));
            let txt = |p: PathBuf| -> Result<SymbolSequence> { std::fs::read_to_string(&p).map_err(io_err(&p))?.parse() };
            Ok(LoadedItem {
                record: rec.clone(),
                source: txt(with("src.txt"))?,
                target: txt(with("tgt.txt"))?,
                src_wav: wav::read(with("src.wav"))?,
                tgt_wav: wav::read(with("tgt.wav"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(reorder: Reorder) -> CorpusManifest {
        CorpusManifest::build(&CorpusOptions { reorder, n_train: 3, n_test: 2, ..Default::default() }).unwrap()
    }

    #[test]
    fn text_round_trip() {
        let s: SymbolSequence = "3 5 | 7 | 1 2 4".parse().unwrap();
        assert_eq!(s.words, vec![vec![3, 5], vec![7], vec![1, 2, 4]]);
        assert_eq!(s.to_string(), "3 5 | 7 | 1 2 4");
        assert!("1 | | 2".parse::<SymbolSequence>().is_err());
    }

    #[test]
    fn swap_reorder() {
        let mut m = manifest(Reorder::Swap);
        m.lexicon = (0..16).collect();
        let s = SymbolSequence::new(vec![vec![1], vec![2, 3], vec![4], vec![5, 6]]).unwrap();
        let t = translate_sentence(&s, &m).unwrap();
        assert_eq!(t.words, vec![vec![2, 3], vec![1], vec![5, 6], vec![4]]);
        m.reorder = Reorder::None;
        assert_eq!(translate_sentence(&s, &m).unwrap(), s);
        let bad = SymbolSequence::new(vec![vec![16]]).unwrap();
        assert!(translate_sentence(&bad, &m).is_err());
    }

    #[test]
    fn duration_matches_layout() {
        let s = SymbolSequence::new(vec![vec![1, 2], vec![3], vec![4, 5, 6]]).unwrap();
        let w = render_utterance(&s, &SpeakerSpec::canonical(), 16, 8000, 5).unwrap();
        let expect = 0.06 * 6.0 + 0.02 * 2.0;
        assert!((w.duration() - expect).abs() <= 0.01);
        let peak = w.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!((peak - PEAK).abs() < 1e-12);
    }

    #[test]
    fn lexicon_is_permutation_and_splits_disjoint() {
        let m = manifest(Reorder::Reverse);
        m.validate().unwrap();
        let seeds: std::collections::HashSet<u64> = m.items.iter().map(|i| i.seed).collect();
        assert_eq!(seeds.len(), 5);
        let max_train = m.split(Split::Train).map(|i| i.seed).max().unwrap();
        let min_test = m.split(Split::Test).map(|i| i.seed).min().unwrap();
        assert!(max_train < min_test);
    }
}
