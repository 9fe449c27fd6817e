use s2st_core::corpus::{add_noise, render_utterance, sample_sentence, SymbolSequence};
use s2st_core::dsp::Waveform;
use s2st_core::evalkit::recognize::{recognize, Templates};
use s2st_core::speaker::{default_registry, SpeakerSpec};

fn sentence(i: u64) -> SymbolSequence {
    let mut r = s2st_tensor::rng::stream(i, "test.recognizer", 0, 0);
    sample_sentence(&mut r, 16)
}

fn accuracy(spk: &SpeakerSpec, n: u64, snr_db: Option<f64>) -> usize {
    let t = Templates::for_vocab(16, 8000).unwrap();
    (0..n)
        .filter(|&i| {
            let s = sentence(i);
            let mut w = render_utterance(&s, spk, 16, 8000, i).unwrap();
            if let Some(db) = snr_db {
                w = add_noise(&w, db, 1000 + i).unwrap();
            }
            recognize(&w, &t).unwrap() == s
        })
        .count()
}

#[test]
fn clean_renders_are_recognized_in_every_voice() {
    for spk in default_registry() {
        assert_eq!(accuracy(&spk, 40, None), 40, "speaker {}", spk.speaker_id);
    }
}

#[test]
fn noisy_canonical_renders_are_mostly_recognized() {
    let ok = accuracy(&SpeakerSpec::canonical(), 60, Some(20.0));
    assert!(ok >= 57, "{ok}/60 at 20 dB");
}

#[test]
fn silence_yields_no_symbols() {
    let t = Templates::for_vocab(16, 8000).unwrap();
    let h = recognize(&Waveform::new(vec![0.0; 4000], 8000).unwrap(), &t).unwrap();
    assert!(h.is_empty());
}

#[test]
fn recognition_is_deterministic() {
    let t = Templates::for_vocab(16, 8000).unwrap();
    let w = add_noise(&render_utterance(&sentence(3), &default_registry()[2], 16, 8000, 3).unwrap(), 15.0, 9).unwrap();
    assert_eq!(recognize(&w, &t).unwrap(), recognize(&w, &t).unwrap());
}

#[test]
fn mismatched_sample_rate_is_rejected() {
    let t = Templates::for_vocab(16, 8000).unwrap();
    assert!(recognize(&Waveform::new(vec![0.0; 4000], 16000).unwrap(), &t).is_err());
}

#[test]
fn templates_round_trip_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("templates.json");
    let t = Templates::for_vocab(16, 8000).unwrap();
    t.save(&p).unwrap();
    let u = Templates::load(&p).unwrap();
    let w = render_utterance(&sentence(5), &SpeakerSpec::canonical(), 16, 8000, 5).unwrap();
    assert_eq!(recognize(&w, &t).unwrap(), recognize(&w, &u).unwrap());
}
