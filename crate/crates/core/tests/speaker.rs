use proptest::prelude::*;
use s2st_core::corpus::{render_utterance, sample_sentence};
use s2st_core::dsp::Waveform;
use s2st_core::speaker::*;
use s2st_core::Error;

#[test]
fn utterance_embedding_identifies_every_registered_speaker() {
    let reg = default_registry();
    for spk in &reg {
        let want = speaker_embed(spk).unwrap();
        for i in 0..10u64 {
            let mut r = s2st_tensor::rng::stream(i, "test.speaker", 0, 0);
            let w = render_utterance(&sample_sentence(&mut r, 16), spk, 16, 8000, i).unwrap();
            assert_eq!(identify_speaker(&w, &reg).unwrap().speaker_id, spk.speaker_id);
            let got = embed_from_utterance(&w, &reg).unwrap();
            assert_eq!(got, want);
            assert_eq!(embed_from_utterance(&w, &reg).unwrap(), got);
        }
    }
}

#[test]
fn random_distinct_speakers_are_far_apart() {
    use rand::Rng;
    let mut r = s2st_tensor::rng::stream(3, "test.pairs", 0, 0);
    let mut pairs = 0;
    while pairs < 100 {
        let (a, b) = (r.random_range(0..10_000u32), r.random_range(0..10_000u32));
        if a == b {
            continue;
        }
        let spec = |id| SpeakerSpec { speaker_id: id, f0: 150.0, tilt: 0.0 };
        let (ea, eb) = (speaker_embed(&spec(a)).unwrap(), speaker_embed(&spec(b)).unwrap());
        assert!(ea.cosine(&eb).abs() < 0.5, "{a} vs {b}");
        pairs += 1;
    }
}

#[test]
fn silence_has_no_voiced_content() {
    let w = Waveform::new(vec![0.0; 8000], 8000).unwrap();
    assert!(matches!(embed_from_utterance(&w, &default_registry()), Err(Error::NoVoicedContent)));
    let short = Waveform::new(vec![0.1; 10], 8000).unwrap();
    assert!(matches!(estimate_f0(&short), Err(Error::NoVoicedContent)));
}

#[test]
fn out_of_range_pitch_is_rejected() {
    for f0 in [79.0, 401.0, f64::NAN] {
        assert!(speaker_embed(&SpeakerSpec { speaker_id: 1, f0, tilt: 0.0 }).is_err());
    }
}

#[test]
fn canonical_voice_is_speaker_zero_at_220_hz() {
    let c = SpeakerSpec::canonical();
    assert_eq!((c.speaker_id, c.f0), (0, 220.0));
    assert_eq!(default_registry()[0], c);
}

proptest! {
    #[test]
    fn embeddings_are_unit_vectors(id in any::<u32>()) {
        let e = speaker_embed(&SpeakerSpec { speaker_id: id, f0: 200.0, tilt: 0.0 }).unwrap();
        prop_assert_eq!(e.0.len(), EMBED_DIM);
        prop_assert!((e.norm() - 1.0).abs() < 1e-6);
        // A pure function of the id.
        let again = speaker_embed(&SpeakerSpec { speaker_id: id, f0: 300.0, tilt: 2.0 }).unwrap();
        prop_assert_eq!(e, again);
    }

    #[test]
    fn pitch_of_rendered_speech_is_recovered(f0 in 80.0f64..400.0, tilt in -3.0f64..3.0, seed in 0u64..100) {
        let mut r = s2st_tensor::rng::stream(seed, "test.pitch", 0, 0);
        let spk = SpeakerSpec { speaker_id: 9, f0, tilt };
        let w = render_utterance(&sample_sentence(&mut r, 16), &spk, 16, 8000, seed).unwrap();
        let est = estimate_f0(&w).unwrap();
        prop_assert!((est / f0 - 1.0).abs() < 0.02, "f0 {} estimated {}", f0, est);
    }
}
