//! Normalization, edit-distance error rates and corpus BLEU.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EXTRA_PUNCTUATION: &str = "。，、！？；：「」『』（）《》〈〉【】…—–‘’“”·";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizerConfig {
    pub lowercase: bool,
    /// Characters replaced by a space.
    pub punctuation: String,
    pub collapse_whitespace: bool,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        let mut punctuation: String = (0u8..128).map(char::from).filter(char::is_ascii_punctuation).collect();
        punctuation.push_str(EXTRA_PUNCTUATION);
        Self {
            lowercase: true,
            punctuation,
            collapse_whitespace: true,
        }
    }
}

pub fn normalize(s: &str, cfg: &NormalizerConfig) -> String {
    let lowered = if cfg.lowercase { s.to_lowercase() } else { s.to_string() };
    let stripped: String = lowered
        .chars()
        .map(|c| if cfg.punctuation.contains(c) { ' ' } else { c })
        .collect();
    if cfg.collapse_whitespace {
        stripped.split_whitespace().collect::<Vec<_>>().join(" ")
    } else {
        stripped.trim().to_string()
    }
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit count and reference length, summed for micro-averaging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub edits: usize,
    pub reference: usize,
}

impl ErrorCounts {
    pub fn rate(&self) -> f64 {
        self.edits as f64 / self.reference as f64
    }

    pub fn add(&mut self, other: ErrorCounts) {
        self.edits += other.edits;
        self.reference += other.reference;
    }
}

pub fn word_errors(reference: &str, hypothesis: &str) -> Result<ErrorCounts> {
    let cfg = NormalizerConfig::default();
    let (r, h) = (normalize(reference, &cfg), normalize(hypothesis, &cfg));
    let r: Vec<&str> = r.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::UndefinedReference);
    }
    let h: Vec<&str> = h.split_whitespace().collect();
    Ok(ErrorCounts {
        edits: edit_distance(&r, &h),
        reference: r.len(),
    })
}

pub fn char_errors(reference: &str, hypothesis: &str) -> Result<ErrorCounts> {
    let cfg = NormalizerConfig::default();
    let chars = |s: &str| -> Vec<char> { normalize(s, &cfg).chars().filter(|c| !c.is_whitespace()).collect() };
    let (r, h) = (chars(reference), chars(hypothesis));
    if r.is_empty() {
        return Err(Error::UndefinedReference);
    }
    Ok(ErrorCounts {
        edits: edit_distance(&r, &h),
        reference: r.len(),
    })
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    word_errors(reference, hypothesis).map(|c| c.rate())
}

pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    char_errors(reference, hypothesis).map(|c| c.rate())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuTokenizer {
    Char,
    Word13a,
}

fn tok13a_rules() -> &'static [(Regex, &'static str)] {
    static RULES: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    RULES.get_or_init(|| {
        [
            (r"([\{-~\[-` -&\(-\+:-@/])", " ${1} "),
            (r"([^0-9])([\.,])", "${1} ${2} "),
            (r"([\.,])([^0-9])", " ${1} ${2}"),
            (r"([0-9])(-)", "${1} ${2} "),
        ]
        .into_iter()
        .map(|(p, r)| (Regex::new(p).expect("static pattern"), r))
        .collect()
    })
}

/// The `13a` tokenizer: split off punctuation and symbols, keep periods and
/// commas inside numbers, then split on whitespace.
pub fn tokenize_13a(s: &str) -> Vec<String> {
    let mut line = s.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut line = format!(" {line} ");
    for (re, rep) in tok13a_rules() {
        line = re.replace_all(&line, *rep).into_owned();
    }
    line.split_whitespace().map(str::to_string).collect()
}

pub fn tokenize(s: &str, tokenizer: BleuTokenizer) -> Vec<String> {
    match tokenizer {
        BleuTokenizer::Char => s.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        BleuTokenizer::Word13a => tokenize_13a(s),
    }
}

pub const BLEU_MAX_ORDER: usize = 4;

/// Corpus-level n-gram statistics for BLEU.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_ORDER],
    pub totals: [usize; BLEU_MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(toks: &[String], n: usize) -> std::collections::HashMap<&[String], usize> {
    let mut m = std::collections::HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn add_pair(&mut self, reference: &[String], hypothesis: &[String]) {
        self.hyp_len += hypothesis.len();
        self.ref_len += reference.len();
        for n in 1..=BLEU_MAX_ORDER {
            let r = ngram_counts(reference, n);
            let h = ngram_counts(hypothesis, n);
            self.totals[n - 1] += hypothesis.len().saturating_sub(n - 1);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    /// Unsmoothed BLEU over the orders for which the hypothesis side has at
    /// least one n-gram, times the brevity penalty, in [0, 100].
    pub fn score(&self) -> f64 {
        let orders = self.totals.iter().take_while(|&&t| t > 0).count();
        if orders == 0 || self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..orders {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / orders as f64).exp()
    }
}

pub fn bleu_corpus<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H], tokenizer: BleuTokenizer) -> Result<f64> {
    if refs.len() != hyps.len() || refs.is_empty() {
        return Err(Error::Pairing {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let mut stats = BleuStats::default();
    for (r, h) in refs.iter().zip(hyps) {
        stats.add_pair(&tokenize(r.as_ref(), tokenizer), &tokenize(h.as_ref(), tokenizer));
    }
    Ok(stats.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_examples() {
        let c = NormalizerConfig::default();
        assert_eq!(normalize("Hello,  World!", &c), "hello world");
        assert_eq!(normalize("hello world", &c), "hello world");
        assert_eq!(normalize("", &c), "");
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer("a b c", "a b c").unwrap(), 0.0);
        assert_eq!(wer("a b c d", "a x c").unwrap(), 0.5);
        assert_eq!(wer("a", "a b c").unwrap(), 2.0);
        assert!(matches!(wer(" ,. ", "a"), Err(Error::UndefinedReference)));
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abcd", "abcd").unwrap(), 0.0);
        assert_eq!(cer("abcd", "abd").unwrap(), 0.25);
        assert_eq!(cer("ab cd", "abcd").unwrap(), 0.0);
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu_corpus(&["the cat sat"], &["the cat sat"], BleuTokenizer::Word13a).unwrap(), 100.0);
        assert_eq!(bleu_corpus(&["the cat sat"], &["dog runs far"], BleuTokenizer::Word13a).unwrap(), 0.0);
        let b = bleu_corpus(&["the cat sat"], &["the cat"], BleuTokenizer::Word13a).unwrap();
        assert!((b - 100.0 * (-0.5f64).exp()).abs() < 1e-9);
        assert!(matches!(
            bleu_corpus(&["a"], &["a", "b"], BleuTokenizer::Char),
            Err(Error::Pairing { refs: 1, hyps: 2 })
        ));
    }

    #[test]
    fn tokenizer_13a_splits_punctuation() {
        assert_eq!(tokenize_13a("Hello, world."), ["Hello", ",", "world", "."]);
        assert_eq!(tokenize_13a("3.5 and 1,000"), ["3.5", "and", "1,000"]);
        assert_eq!(tokenize_13a("a-b 9-1"), ["a-b", "9", "-", "1"]);
        assert_eq!(tokenize(" 一二 三", BleuTokenizer::Char), ["一", "二", "三"]);
    }
}
