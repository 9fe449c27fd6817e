use std::collections::HashSet;
use std::path::Path;

use proptest::prelude::*;
use s2st_core::corpus::*;
use s2st_core::dsp::{hz_to_mel, Waveform};
use s2st_core::speaker::{default_registry, SpeakerSpec};

fn manifest(o: CorpusOptions) -> CorpusManifest {
    CorpusManifest::build(&o).unwrap()
}

fn small(reorder: Reorder, seed: u64) -> CorpusManifest {
    manifest(CorpusOptions { reorder, n_train: 5, n_test: 3, seed, ..Default::default() })
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "train", "test"] {
        let d = dir.join(sub);
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Magnitude of the direct DFT of `x` at `f` Hz.
fn dft_mag(x: &[f64], f: f64, sr: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f / sr;
    let (re, im) =
        x.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &v)| (re + v * (w * i as f64).cos(), im - v * (w * i as f64).sin()));
    (re * re + im * im).sqrt()
}

fn spectral_peak(w: &Waveform) -> f64 {
    // 5 Hz grid up to Nyquist, evaluated with the direct DFT.
    (1..800).map(|k| k as f64 * 5.0).max_by(|&a, &b| dft_mag(&w.samples, a, 8000.0).total_cmp(&dft_mag(&w.samples, b, 8000.0))).unwrap()
}

#[test]
fn canonical_symbol_peak_is_within_one_mel_channel_of_f1() {
    // One toy mel channel: the centre spacing of 32 filters over 0-4 kHz.
    let channel = hz_to_mel(4000.0) / 33.0;
    for s in 0..16 {
        let seq = SymbolSequence::new(vec![vec![s]]).unwrap();
        let w = render_utterance(&seq, &SpeakerSpec::canonical(), 16, 8000, 7).unwrap();
        let (f1, _) = formants(s, 16);
        let peak = spectral_peak(&w);
        assert!((hz_to_mel(peak) - hz_to_mel(f1)).abs() <= channel, "symbol {s}: peak {peak} Hz, F1 {f1} Hz");
    }
}

#[test]
fn other_voices_peak_on_a_harmonic_next_to_a_formant() {
    // A harmonic source has energy only at multiples of f0, so the peak is a
    // harmonic bracketing F1 (or F2, when f0 is high and no harmonic lands
    // close to F1).
    for spk in &default_registry()[1..] {
        for s in 0..16 {
            let seq = SymbolSequence::new(vec![vec![s]]).unwrap();
            let w = render_utterance(&seq, spk, 16, 8000, 7).unwrap();
            let (f1, f2) = formants(s, 16);
            let peak = spectral_peak(&w);
            let next_to = |f: f64| {
                let (below, above) = ((f / spk.f0).floor() * spk.f0, (f / spk.f0).ceil() * spk.f0);
                (peak - below).abs() <= 5.0 || (peak - above).abs() <= 5.0
            };
            assert!(next_to(f1) || next_to(f2), "speaker {} symbol {s}: peak {peak} Hz, F1 {f1}, F2 {f2}", spk.speaker_id);
        }
    }
}

#[test]
fn rendering_is_bit_identical_and_has_declared_duration() {
    let seq: SymbolSequence = "3 4 | 5 | 0 1 2".parse().unwrap();
    let spk = default_registry()[1];
    let a = render_utterance(&seq, &spk, 16, 8000, 11).unwrap();
    assert_eq!(a, render_utterance(&seq, &spk, 16, 8000, 11).unwrap());
    let expected = SYMBOL_SECONDS * 6.0 + GAP_SECONDS * 2.0;
    assert!((a.duration() - expected).abs() <= 0.01, "{} vs {expected}", a.duration());
    let peak = a.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!((peak - PEAK).abs() < 1e-12);
}

#[test]
fn noise_is_added_at_the_requested_snr() {
    let seq: SymbolSequence = "1 2 3 | 4 5".parse().unwrap();
    let clean = render_utterance(&seq, &SpeakerSpec::canonical(), 16, 8000, 2).unwrap();
    for (snr, seed) in [(20.0, 1), (10.0, 2), (30.0, 3)] {
        let noisy = add_noise(&clean, snr, seed).unwrap();
        let n: f64 = noisy.samples.iter().zip(&clean.samples).map(|(a, b)| (a - b).powi(2)).sum();
        let measured = 10.0 * (clean.energy() / n).log10();
        assert!((measured - snr).abs() <= 1.0, "asked {snr} dB, measured {measured}");
    }
}

#[test]
fn swap_example() {
    let m = small(Reorder::Swap, 1);
    let src = SymbolSequence::new(vec![vec![0], vec![1, 2], vec![3], vec![4, 5, 6]]).unwrap();
    let l = &m.lexicon;
    let expected = SymbolSequence::new(vec![vec![l[1], l[2]], vec![l[0]], vec![l[4], l[5], l[6]], vec![l[3]]]).unwrap();
    assert_eq!(translate_sentence(&src, &m).unwrap(), expected);
}

#[test]
fn identity_lexicon_without_reorder_is_identity() {
    let mut m = small(Reorder::None, 1);
    m.lexicon = (0..m.vocab_size).collect();
    let mut r = s2st_tensor::rng::stream(1, "test.identity", 0, 0);
    for _ in 0..50 {
        let s = sample_sentence(&mut r, m.vocab_size);
        assert_eq!(translate_sentence(&s, &m).unwrap(), s);
    }
}

#[test]
fn translation_is_a_bijection_on_sentences() {
    for (i, mode) in [Reorder::None, Reorder::Swap, Reorder::Reverse].into_iter().enumerate() {
        let m = small(mode, 10 + i as u64);
        let mut r = s2st_tensor::rng::stream(i as u64, "test.bijection", 0, 0);
        let mut seen = HashSet::new();
        let mut images = HashSet::new();
        for _ in 0..1000 {
            let s = sample_sentence(&mut r, m.vocab_size);
            let t = translate_sentence(&s, &m).unwrap();
            assert_eq!(untranslate_sentence(&t, &m).unwrap(), s);
            if seen.insert(s) {
                assert!(images.insert(t), "two sentences share a translation");
            }
        }
    }
    let m = small(Reorder::Swap, 1);
    assert!(translate_sentence(&SymbolSequence::new(vec![vec![16]]).unwrap(), &m).is_err());
}

#[test]
fn default_manifest_has_2200_disjoint_items() {
    let m = manifest(CorpusOptions::default());
    assert_eq!(m.items.len(), 2200);
    assert_eq!(m.split(Split::Train).count(), 2000);
    assert_eq!(m.split(Split::Test).count(), 200);
    let ids: HashSet<usize> = m.items.iter().map(|r| r.id).collect();
    assert_eq!(ids.len(), 2200);
    let train: HashSet<u64> = m.split(Split::Train).map(|r| r.seed).collect();
    let test: HashSet<u64> = m.split(Split::Test).map(|r| r.seed).collect();
    assert_eq!(train.len(), 2000);
    assert!(train.is_disjoint(&test));
    assert!(m.items.iter().all(|r| r.tgt_speaker == 0));
    let src: HashSet<u32> = m.items.iter().map(|r| r.src_speaker).collect();
    assert_eq!(src.len(), default_registry().len());
}

#[test]
fn voice_transfer_targets_use_another_registered_voice() {
    let m = manifest(CorpusOptions { voice_transfer: true, n_train: 200, n_test: 20, ..Default::default() });
    assert!(m.items.iter().all(|r| r.tgt_speaker != r.src_speaker));
    let tgt: HashSet<u32> = m.items.iter().map(|r| r.tgt_speaker).collect();
    assert_eq!(tgt.len(), 4);
}

#[test]
fn invalid_options_are_rejected() {
    assert!(CorpusManifest::build(&CorpusOptions { n_train: 0, ..Default::default() }).is_err());
    assert!(CorpusManifest::build(&CorpusOptions { vocab_size: 1, ..Default::default() }).is_err());
    let bad = CorpusOptions { speakers: vec![SpeakerSpec { speaker_id: 5, f0: 90.0, tilt: 0.0 }], ..Default::default() };
    assert!(CorpusManifest::build(&bad).is_err());
}

#[test]
fn corpus_is_reproducible_from_its_manifest_with_any_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(CorpusOptions {
        n_train: 6,
        n_test: 3,
        seed: 4,
        noise: Some(NoiseSpec { snr_min_db: 10.0, snr_max_db: 30.0 }),
        ..Default::default()
    });
    let a = dir.path().join("a");
    gen_corpus(&m, &a, 1).unwrap();
    let reloaded = CorpusManifest::load(a.join("manifest.json")).unwrap();
    assert_eq!(reloaded, m);
    let b = dir.path().join("b");
    gen_corpus(&reloaded, &b, 4).unwrap();
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta.len(), 2 + 9 * 4);
    assert_eq!(ta, tb);

    let items = load_split(&a, &m, Split::Train).unwrap();
    assert_eq!(items.len(), 6);
    for it in &items {
        let (src, tgt) = item_sentences(&m, &it.record).unwrap();
        assert_eq!((&it.source, &it.target), (&src, &tgt));
        let snr = it.record.snr_db.unwrap();
        assert!((10.0..=30.0).contains(&snr));
        // WAV storage quantizes to 16 bits.
        let fresh = render_item(&m, &it.record).unwrap();
        let err = fresh.src_wav.samples.iter().zip(&it.src_wav.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1.0 / 32767.0 + 1e-12);
    }
}

#[test]
fn silence_between_words_is_silent() {
    let seq: SymbolSequence = "1 | 2".parse().unwrap();
    let w: Waveform = render_utterance(&seq, &SpeakerSpec::canonical(), 16, 8000, 1).unwrap();
    let n = (SYMBOL_SECONDS * 8000.0).round() as usize;
    let gap = (GAP_SECONDS * 8000.0).round() as usize;
    assert!(w.samples[n..n + gap].iter().all(|&x| x == 0.0));
}

proptest! {
    #[test]
    fn sampled_sentences_respect_declared_ranges(seed in 0u64..10_000, vocab in 2usize..40) {
        let mut r = s2st_tensor::rng::stream(seed, "test.ranges", 0, 0);
        let s = sample_sentence(&mut r, vocab);
        prop_assert!((MIN_WORDS..=MAX_WORDS).contains(&s.words.len()));
        prop_assert!(s.words.iter().all(|w| (1..=MAX_WORD_LEN).contains(&w.len())));
        prop_assert!(s.check_vocab(vocab).is_ok());
        let text = s.to_string();
        prop_assert_eq!(text.parse::<SymbolSequence>().unwrap(), s);
    }

    #[test]
    fn lexicon_is_a_permutation(seed in 0u64..1000, vocab in 2usize..64) {
        let m = manifest(CorpusOptions { vocab_size: vocab, n_train: 1, n_test: 1, seed, ..Default::default() });
        let mut l = m.lexicon.clone();
        l.sort_unstable();
        prop_assert_eq!(l, (0..vocab).collect::<Vec<_>>());
        let inv = m.inverse_lexicon();
        prop_assert!((0..vocab).all(|s| inv[m.lexicon[s]] == s));
    }
}
