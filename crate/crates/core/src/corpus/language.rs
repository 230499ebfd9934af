//! Synthetic languages: lexicon, concept map, acoustic prototypes, script,
//! word order and a bigram grammar.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::seeds::derive;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const WORDS_PER_LANGUAGE: usize = 40;
pub const MIN_SENTENCE: usize = 3;
pub const MAX_SENTENCE: usize = 10;
const SUCCESSORS: usize = 6;
const PREFIXES: &[char] = &['w', 'k', 'm', 'p', 's', 't', 'v', 'z', 'b', 'd', 'f', 'g', 'h', 'j', 'l', 'n'];
/// First glyph of the block used by character-joined languages.
const GLYPH_BASE: u32 = 0x4E00;

const TAG_PROTO: u64 = 1;
const TAG_LEXICON: u64 = 2;
const TAG_GRAMMAR: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptMode {
    WordSpaced,
    CharacterJoined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WordOrder {
    Identity,
    Reversal,
    SwapAdjacentPairs,
}

impl WordOrder {
    /// Every rule is an involution, so this also undoes itself.
    pub fn apply<T: Copy>(self, xs: &[T]) -> Vec<T> {
        let mut out = xs.to_vec();
        match self {
            WordOrder::Identity => {}
            WordOrder::Reversal => out.reverse(),
            WordOrder::SwapAdjacentPairs => {
                for pair in out.chunks_exact_mut(2) {
                    pair.swap(0, 1);
                }
            }
        }
        out
    }
}

/// Sparse first-order grammar over word ids.
#[derive(Clone, Debug, PartialEq)]
pub struct BigramGrammar {
    /// Per word: (successor, probability), probabilities summing to one.
    pub successors: Vec<Vec<(usize, f64)>>,
}

impl BigramGrammar {
    fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let successors = (0..WORDS_PER_LANGUAGE)
            .map(|prev| {
                // No self-loops: a repeated word would be acoustically
                // indistinguishable from one slowly spoken word.
                let others: Vec<usize> = (0..WORDS_PER_LANGUAGE).filter(|&w| w != prev).collect();
                let mut picks: Vec<usize> = others.choose_multiple(&mut rng, SUCCESSORS).copied().collect();
                picks.sort_unstable();
                let raw: Vec<f64> = picks.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
                let total: f64 = raw.iter().sum();
                picks.into_iter().zip(raw).map(|(w, r)| (w, r / total)).collect()
            })
            .collect();
        Self { successors }
    }

    pub fn prob(&self, prev: usize, next: usize) -> f64 {
        self.successors[prev]
            .iter()
            .find(|(w, _)| *w == next)
            .map_or(0.0, |(_, p)| *p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageSpec {
    pub id: usize,
    pub name: String,
    pub script: ScriptMode,
    pub order: WordOrder,
    /// word id → concept id (a permutation of `0..WORDS_PER_LANGUAGE`).
    pub concept_of_word: Vec<usize>,
    /// concept id → word id (inverse of `concept_of_word`).
    pub word_of_concept: Vec<usize>,
    /// One `d_mel`-dim frame prototype per word.
    pub prototypes: Vec<Vec<f32>>,
    pub grammar_seed: u64,
    pub grammar: BigramGrammar,
}

/// Builds `count` languages. Language 0 is the word-spaced identity-order
/// pivot; the rest alternate (character-joined, reversal) and
/// (word-spaced, adjacent-pair swap).
pub fn generate_languages(seed: u64, count: usize, d_mel: usize) -> Result<Vec<LanguageSpec>> {
    if count < 2 {
        return Err(Error::Config(format!(
            "need at least 2 languages for translation, got {count}"
        )));
    }
    if count > PREFIXES.len() {
        return Err(Error::Config(format!("at most {} languages supported", PREFIXES.len())));
    }
    if d_mel == 0 {
        return Err(Error::Config("d_mel must be positive".into()));
    }
    Ok((0..count).map(|id| build_language(seed, id, d_mel)).collect())
}

fn build_language(seed: u64, id: usize, d_mel: usize) -> LanguageSpec {
    let (script, order) = match id {
        0 => (ScriptMode::WordSpaced, WordOrder::Identity),
        i if i % 2 == 1 => (ScriptMode::CharacterJoined, WordOrder::Reversal),
        _ => (ScriptMode::WordSpaced, WordOrder::SwapAdjacentPairs),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive(&[seed, TAG_LEXICON, id as u64]));
    let mut concept_of_word: Vec<usize> = (0..WORDS_PER_LANGUAGE).collect();
    concept_of_word.shuffle(&mut rng);
    let mut word_of_concept = vec![0; WORDS_PER_LANGUAGE];
    for (w, &c) in concept_of_word.iter().enumerate() {
        word_of_concept[c] = w;
    }
    let prototypes = (0..WORDS_PER_LANGUAGE)
        .map(|w| {
            let mut r = ChaCha8Rng::seed_from_u64(derive(&[seed, TAG_PROTO, id as u64, w as u64]));
            (0..d_mel).map(|_| StandardNormal.sample(&mut r)).collect()
        })
        .collect();
    let grammar_seed = derive(&[seed, TAG_GRAMMAR, id as u64]);
    LanguageSpec {
        id,
        name: format!("l{id}"),
        script,
        order,
        concept_of_word,
        word_of_concept,
        prototypes,
        grammar_seed,
        grammar: BigramGrammar::generate(grammar_seed),
    }
}

impl LanguageSpec {
    pub fn d_mel(&self) -> usize {
        self.prototypes[0].len()
    }

    fn check_word(&self, w: usize) -> Result<()> {
        if w >= WORDS_PER_LANGUAGE {
            return Err(Error::Vocabulary { lang: self.id, word: w });
        }
        Ok(())
    }

    /// Surface symbol of a word: `w07`-style for word-spaced scripts, a
    /// single glyph for character-joined ones.
    pub fn symbol(&self, w: usize) -> Result<String> {
        self.check_word(w)?;
        Ok(match self.script {
            ScriptMode::WordSpaced => format!("{}{w:02}", PREFIXES[self.id]),
            ScriptMode::CharacterJoined => {
                let cp = GLYPH_BASE + (self.id * 64 + w) as u32;
                char::from_u32(cp).expect("CJK block").to_string()
            }
        })
    }

    pub fn render_text(&self, words: &[usize]) -> Result<String> {
        let syms = words.iter().map(|&w| self.symbol(w)).collect::<Result<Vec<_>>>()?;
        Ok(match self.script {
            ScriptMode::WordSpaced => syms.join(" "),
            ScriptMode::CharacterJoined => syms.concat(),
        })
    }

    /// Inverse of [`render_text`](Self::render_text).
    pub fn parse_text(&self, text: &str) -> Result<Vec<usize>> {
        let bad = |s: &str| Error::parse(format!("language {}", self.name), format!("unknown symbol `{s}`"));
        match self.script {
            ScriptMode::WordSpaced => text
                .split_whitespace()
                .map(|tok| {
                    let mut chars = tok.chars();
                    let ok_prefix = chars.next() == Some(PREFIXES[self.id]);
                    let num: Option<usize> = chars.as_str().parse().ok();
                    match (ok_prefix, num) {
                        (true, Some(w)) if w < WORDS_PER_LANGUAGE && tok.len() == 3 => Ok(w),
                        _ => Err(bad(tok)),
                    }
                })
                .collect(),
            ScriptMode::CharacterJoined => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| {
                    let base = GLYPH_BASE + (self.id * 64) as u32;
                    match (c as u32).checked_sub(base) {
                        Some(w) if (w as usize) < WORDS_PER_LANGUAGE => Ok(w as usize),
                        _ => Err(bad(&c.to_string())),
                    }
                })
                .collect(),
        }
    }

    /// Bigram-grammar sentence of 3–10 words, a pure function of the seed.
    pub fn sample_sentence(&self, sentence_seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(sentence_seed);
        let len = rng.gen_range(MIN_SENTENCE..=MAX_SENTENCE);
        let mut words = Vec::with_capacity(len);
        let mut cur = rng.gen_range(0..WORDS_PER_LANGUAGE);
        words.push(cur);
        while words.len() < len {
            let u: f64 = rng.gen();
            let succ = &self.grammar.successors[cur];
            let mut acc = 0.0;
            cur = succ.last().unwrap().0;
            for &(w, p) in succ {
                acc += p;
                if u < acc {
                    cur = w;
                    break;
                }
            }
            words.push(cur);
        }
        words
    }
}

/// Acoustic rendering parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticParams {
    pub noise_sigma: f64,
    pub rate_min: usize,
    pub rate_max: usize,
}

/// Features for a spoken word sequence: each word's prototype repeated
/// `r ∈ [rate_min, rate_max]` frames plus N(0, σ²) noise. Returns the
/// `[T × d_mel]` features and the per-word frame counts.
pub fn synthesize_features(
    lang: &LanguageSpec,
    words: &[usize],
    example_seed: u64,
    acoustic: AcousticParams,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    if words.is_empty() {
        return Err(Error::DegenerateBatch("cannot synthesize an empty word sequence".into()));
    }
    if acoustic.rate_min == 0 || acoustic.rate_min > acoustic.rate_max {
        return Err(Error::Config("speaking-rate range must satisfy 1 <= min <= max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(example_seed);
    let noise = Normal::new(0.0, acoustic.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let d = lang.d_mel();
    let mut data = Vec::new();
    let mut frames = Vec::with_capacity(words.len());
    for &w in words {
        lang.check_word(w)?;
        let r = rng.gen_range(acoustic.rate_min..=acoustic.rate_max);
        frames.push(r);
        for _ in 0..r {
            for &p in &lang.prototypes[w] {
                let n: f64 = if acoustic.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((p as f64 + n) as f32);
            }
        }
    }
    let t = data.len() / d;
    Ok((Tensor::matrix(t, d, data)?, frames))
}

/// Lexicalizes a source sentence in the target language: source words →
/// concepts, undo the source word order, apply the target word order, then
/// concepts → target words.
pub fn translate(words: &[usize], src: &LanguageSpec, tgt: &LanguageSpec) -> Result<Vec<usize>> {
    if src.id == tgt.id {
        return Err(Error::Task(format!(
            "translation requires distinct languages, got {} → {} (that is ASR)",
            src.name, tgt.name
        )));
    }
    let concepts = words
        .iter()
        .map(|&w| {
            src.check_word(w)?;
            Ok(src.concept_of_word[w])
        })
        .collect::<Result<Vec<_>>>()?;
    let canonical = src.order.apply(&concepts);
    Ok(tgt.order.apply(&canonical).into_iter().map(|c| tgt.word_of_concept[c]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langs() -> Vec<LanguageSpec> {
        generate_languages(7, 4, 16).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(langs(), langs());
    }

    #[test]
    fn exactly_one_identity_pivot() {
        let l = langs();
        assert_eq!(l.iter().filter(|l| l.order == WordOrder::Identity).count(), 1);
        assert_eq!(l[0].order, WordOrder::Identity);
        assert_eq!(l[0].script, ScriptMode::WordSpaced);
        assert!(l.iter().any(|l| l.script == ScriptMode::CharacterJoined));
        assert!(l.iter().any(|l| l.order == WordOrder::Reversal));
    }

    #[test]
    fn prototypes_differ_across_languages() {
        let l = langs();
        assert_ne!(l[1].prototypes[3], l[2].prototypes[3]);
    }

    #[test]
    fn concept_map_is_bijection() {
        for l in langs() {
            for w in 0..WORDS_PER_LANGUAGE {
                assert_eq!(l.word_of_concept[l.concept_of_word[w]], w);
            }
        }
    }

    #[test]
    fn too_few_languages_rejected() {
        assert!(matches!(generate_languages(1, 1, 16), Err(Error::Config(_))));
    }

    #[test]
    fn rendering_rules() {
        let l = langs();
        assert_eq!(l[0].render_text(&[2, 7]).unwrap(), "w02 w07");
        let cj = l[1].render_text(&[2, 7]).unwrap();
        assert_eq!(cj.chars().count(), 2);
        assert!(!cj.contains(' '));
        assert!(matches!(l[0].render_text(&[40]), Err(Error::Vocabulary { word: 40, .. })));
    }

    #[test]
    fn translation_reverses_into_reversal_target() {
        let l = langs();
        let (src, tgt) = (&l[0], &l[1]);
        let words: Vec<usize> = [3, 5, 1].iter().map(|&c| src.word_of_concept[c]).collect();
        let want: Vec<usize> = [1, 5, 3].iter().map(|&c| tgt.word_of_concept[c]).collect();
        assert_eq!(translate(&words, src, tgt).unwrap(), want);
    }

    #[test]
    fn translation_into_identity_keeps_concept_order() {
        let l = langs();
        let words: Vec<usize> = [3, 5, 1].iter().map(|&c| l[1].word_of_concept[c]).collect();
        // l1 uses reversal, so its surface order is undone first.
        let out = translate(&words, &l[1], &l[0]).unwrap();
        let concepts: Vec<usize> = out.iter().map(|&w| l[0].concept_of_word[w]).collect();
        assert_eq!(concepts, vec![1, 5, 3]);
        let id_words: Vec<usize> = [4, 9].iter().map(|&c| l[2].word_of_concept[c]).collect();
        let mut l2_identity = l[2].clone();
        l2_identity.order = WordOrder::Identity;
        let out = translate(&id_words, &l2_identity, &l[0]).unwrap();
        let concepts: Vec<usize> = out.iter().map(|&w| l[0].concept_of_word[w]).collect();
        assert_eq!(concepts, vec![4, 9]);
    }

    #[test]
    fn same_language_translation_is_a_task_error() {
        let l = langs();
        assert!(matches!(translate(&[1], &l[2], &l[2]), Err(Error::Task(_))));
    }

    #[test]
    fn features_noiseless_fixed_rate_equal_prototypes() {
        let l = langs();
        let ac = AcousticParams {
            noise_sigma: 0.0,
            rate_min: 2,
            rate_max: 2,
        };
        let (f, frames) = synthesize_features(&l[0], &[4, 9], 5, ac).unwrap();
        assert_eq!(frames, vec![2, 2]);
        assert_eq!(f.shape(), &[4, 16]);
        assert_eq!(f.row(0), &l[0].prototypes[4][..]);
        assert_eq!(f.row(1), &l[0].prototypes[4][..]);
        assert_eq!(f.row(3), &l[0].prototypes[9][..]);
    }

    #[test]
    fn features_length_within_rate_bounds() {
        let l = langs();
        let ac = AcousticParams {
            noise_sigma: 0.1,
            rate_min: 2,
            rate_max: 4,
        };
        for seed in 0..50 {
            let (f, _) = synthesize_features(&l[2], &[1, 2, 3, 4, 5], seed, ac).unwrap();
            assert!((10..=20).contains(&f.rows()));
        }
        assert!(synthesize_features(&l[2], &[], 0, ac).is_err());
    }
}
