use proptest::prelude::*;
use s2st_core::corpus::{render_utterance, SymbolSequence};
use s2st_core::evalkit::*;
use s2st_core::speaker::default_registry;

/// Corpus BLEU written from the definition: clipped n-gram precision by
/// linear search, add-one smoothing for zero counts at n >= 2, geometric
/// mean, brevity penalty exp(1 - r/c).
fn bleu_oracle(hyps: &[Vec<u8>], refs: &[Vec<u8>], max_n: usize) -> f64 {
    let grams = |s: &[u8], n: usize| -> Vec<Vec<u8>> { (0..(s.len() + 1).saturating_sub(n)).map(|i| s[i..i + n].to_vec()).collect() };
    let (mut m, mut t) = (vec![0usize; max_n], vec![0usize; max_n]);
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            let mut pool = grams(r, n);
            for g in grams(h, n) {
                t[n - 1] += 1;
                if let Some(i) = pool.iter().position(|x| *x == g) {
                    pool.swap_remove(i);
                    m[n - 1] += 1;
                }
            }
        }
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 || m[0] == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for n in 0..max_n {
        let p = if n > 0 && m[n] == 0 {
            1.0 / (t[n] as f64 + 1.0)
        } else if t[n] == 0 {
            1.0
        } else {
            m[n] as f64 / t[n] as f64
        };
        s += p.ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * (s / max_n as f64).exp()
}

/// Full-table edit distance.
fn edit_oracle(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, v) in d[0].iter_mut().enumerate() {
        *v = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn seq(s: &str) -> SymbolSequence {
    s.parse().unwrap()
}

#[test]
fn hand_computed_bleu() {
    let b = bleu_tokens(&[vec!["a", "b", "c", "d"]], &[vec!["a", "b", "c", "d", "e"]], 4).unwrap();
    assert!((b - 77.88).abs() < 0.01, "{b}");
}

#[test]
fn sequence_bleu_counts_words() {
    // Same symbols, different word split: no word unigram matches.
    assert_eq!(bleu(&[seq("1 2 | 3")], &[seq("1 | 2 3")], 4).unwrap(), 0.0);
    assert_eq!(bleu(&[seq("1 2 | 3 | 4 5")], &[seq("1 2 | 3 | 4 5")], 4).unwrap(), 100.0);
    let empty = SymbolSequence::default();
    assert_eq!(bleu(&[empty], &[seq("1")], 4).unwrap(), 0.0);
}

#[test]
fn corpus_per_pools_edits() {
    let p = corpus_per(&[vec![1, 2], vec![5, 6, 7, 8]], &[vec![1, 3], vec![5, 6, 7, 8]]).unwrap();
    assert!((p - 100.0 / 6.0).abs() < 1e-12);
}

#[test]
fn voice_match_accepts_own_voice_only() {
    let reg = default_registry();
    let s = seq("1 2 | 3 4 | 5");
    for spk in &reg {
        let w = render_utterance(&s, spk, 16, 8000, 1).unwrap();
        for other in &reg {
            let v = voice_match(&w, other).unwrap();
            assert_eq!(v.matched, other == spk, "rendered {} vs {}: f0 {}", spk.speaker_id, other.speaker_id, v.f0);
        }
    }
}

proptest! {
    #[test]
    fn bleu_matches_oracle(
        pairs in proptest::collection::vec(
            (proptest::collection::vec(0u8..5, 0..10), proptest::collection::vec(0u8..5, 1..10)),
            1..6,
        ),
        max_n in 1usize..5,
    ) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let got = bleu_tokens(&h, &r, max_n).unwrap();
        let want = bleu_oracle(&h, &r, max_n);
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        prop_assert!((0.0..=100.0).contains(&got));
    }

    #[test]
    fn bleu_of_a_corpus_with_itself_is_100(
        x in proptest::collection::vec(proptest::collection::vec(0u8..9, 1..12), 1..6),
    ) {
        prop_assert!((bleu_tokens(&x, &x, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn per_is_a_normalized_metric(
        a in proptest::collection::vec(0usize..4, 0..10),
        b in proptest::collection::vec(0usize..4, 1..10),
        c in proptest::collection::vec(0usize..4, 0..10),
    ) {
        let p = per(&a, &b).unwrap();
        prop_assert!(p >= 0.0);
        prop_assert_eq!(p == 0.0, a == b);
        let bytes = |v: &[usize]| v.iter().map(|&x| x as u8).collect::<Vec<_>>();
        let d = levenshtein(&a, &b);
        prop_assert_eq!(d, edit_oracle(&bytes(&a), &bytes(&b)));
        prop_assert!((p - 100.0 * d as f64 / b.len() as f64).abs() < 1e-12);
        prop_assert_eq!(d, levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= d + levenshtein(&b, &c));
    }
}
