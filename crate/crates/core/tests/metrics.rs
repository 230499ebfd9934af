use partlab::corpus::{Corpus, CorpusManifest, Split};
use partlab::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force recursion with memoization over all alignments.
fn oracle_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else {
            let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            let del = go(a, b, i + 1, j, memo) + 1;
            let ins = go(a, b, i, j + 1, memo) + 1;
            sub.min(del).min(ins)
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

fn random_words(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..9);
    (0..n)
        .map(|_| ["a", "b", "c", "dd", "e"][rng.gen_range(0..5)])
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn wer_and_cer_match_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let (r, h) = (random_words(&mut rng), random_words(&mut rng));
        let rw: Vec<&str> = r.split(' ').collect();
        let hw: Vec<&str> = h.split(' ').collect();
        assert_eq!(wer(&r, &h).unwrap(), oracle_distance(&rw, &hw) as f64 / rw.len() as f64);
        let rc: Vec<char> = r.chars().filter(|c| *c != ' ').collect();
        let hc: Vec<char> = h.chars().filter(|c| *c != ' ').collect();
        assert_eq!(cer(&r, &h).unwrap(), oracle_distance(&rc, &hc) as f64 / rc.len() as f64);
    }
}

/// Hand counts: hyp "the cat" has unigrams {the, cat} both matched (2/2),
/// one bigram matched (1/1), and no trigrams or 4-grams; c = 2, r = 3.
#[test]
fn bleu_hand_counted_examples() {
    let tok = BleuTokenizer::Word13a;
    let perfect = bleu_corpus(&["the cat sat", "a dog"], &["the cat sat", "a dog"], tok).unwrap();
    assert!((perfect - 100.0).abs() < 1e-6);
    assert!(bleu_corpus(&["the cat sat"], &["a dog ran"], tok).unwrap().abs() < 1e-6);
    let p1: f64 = 2.0 / 2.0;
    let p2: f64 = 1.0 / 1.0;
    let bp = (1.0f64 - 3.0 / 2.0).exp();
    let want = 100.0 * bp * ((p1.ln() + p2.ln()) / 2.0).exp();
    let got = bleu_corpus(&["the cat sat"], &["the cat"], tok).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn normalization_idempotent_on_corpus_strings() {
    let c = Corpus::build(&CorpusManifest::default()).unwrap();
    let cfg = NormalizerConfig::default();
    for split in Split::ALL {
        for u in c.split(split) {
            let once = normalize(&u.text, &cfg);
            assert_eq!(normalize(&once, &cfg), once);
        }
    }
}

proptest! {
    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,40}") {
        let cfg = NormalizerConfig::default();
        let once = normalize(&s, &cfg);
        prop_assert_eq!(normalize(&once, &cfg), once);
    }

    #[test]
    fn bleu_invariant_under_pair_permutation(
        pairs in proptest::collection::vec(("[a-d]( [a-d]){0,6}", "[a-d]( [a-d]){0,6}"), 1..8),
        seed in any::<u64>(),
    ) {
        let (refs, hyps): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let base = bleu_corpus(&refs, &hyps, BleuTokenizer::Word13a).unwrap();
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let r2: Vec<&String> = idx.iter().map(|&i| &refs[i]).collect();
        let h2: Vec<&String> = idx.iter().map(|&i| &hyps[i]).collect();
        let permuted = bleu_corpus(&r2, &h2, BleuTokenizer::Word13a).unwrap();
        prop_assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn micro_wer_unchanged_by_duplication(
        pairs in proptest::collection::vec(("[a-d]( [a-d]){0,6}", "([a-d]( [a-d]){0,6})?"), 1..8),
    ) {
        let mut once = ErrorCounts::default();
        for (r, h) in &pairs {
            once.add(word_errors(r, h).unwrap());
        }
        let mut twice = ErrorCounts::default();
        for (r, h) in pairs.iter().chain(&pairs) {
            twice.add(word_errors(r, h).unwrap());
        }
        prop_assert_eq!(once.rate(), twice.rate());
    }

    #[test]
    fn edit_distance_matches_oracle(a in proptest::collection::vec(0u8..4, 0..10), b in proptest::collection::vec(0u8..4, 0..10)) {
        prop_assert_eq!(edit_distance(&a, &b), oracle_distance(&a, &b));
    }
}
