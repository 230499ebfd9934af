use serde::{Deserialize, Serialize};

use super::Task;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
const SPECIALS: usize = 2;

/// Token id layout: specials, then one instruction token per
/// (task, source, target) triple, then each language's word block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub languages: usize,
    pub words_per_language: usize,
}

impl VocabLayout {
    pub fn new(languages: usize, words_per_language: usize) -> Self {
        Self {
            languages,
            words_per_language,
        }
    }

    pub fn instruction_count(&self) -> usize {
        self.languages * self.languages
    }

    /// Instruction token for ASR in `src` (`tgt == src`) or S2TT `src → tgt`.
    pub fn instruction(&self, task: Task, src: usize, tgt: usize) -> usize {
        let n = self.languages;
        let idx = match task {
            Task::Asr => src,
            Task::S2tt => n + src * (n - 1) + if tgt < src { tgt } else { tgt - 1 },
        };
        SPECIALS + idx
    }

    pub fn is_instruction(&self, token: usize) -> bool {
        (SPECIALS..SPECIALS + self.instruction_count()).contains(&token)
    }

    fn word_base(&self) -> usize {
        SPECIALS + self.instruction_count()
    }

    pub fn word_token(&self, lang: usize, word: usize) -> usize {
        self.word_base() + lang * self.words_per_language + word
    }

    /// Inverse of [`word_token`](Self::word_token).
    pub fn word_of(&self, token: usize) -> Option<(usize, usize)> {
        let rel = token.checked_sub(self.word_base())?;
        let lang = rel / self.words_per_language;
        (lang < self.languages).then_some((lang, rel % self.words_per_language))
    }

    /// Smallest vocabulary covering every token.
    pub fn size(&self) -> usize {
        self.word_base() + self.languages * self.words_per_language
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instruction_tokens_are_distinct() {
        let v = VocabLayout::new(4, 40);
        let mut seen = std::collections::BTreeSet::new();
        for s in 0..4 {
            assert!(seen.insert(v.instruction(Task::Asr, s, s)));
            for t in (0..4).filter(|&t| t != s) {
                assert!(seen.insert(v.instruction(Task::S2tt, s, t)));
            }
        }
        assert_eq!(seen.len(), v.instruction_count());
        assert!(seen.iter().all(|&t| v.is_instruction(t)));
        assert_eq!(v.size(), 2 + 16 + 160);
    }

    #[test]
    fn word_tokens_round_trip() {
        let v = VocabLayout::new(4, 40);
        for l in 0..4 {
            for w in [0, 17, 39] {
                assert_eq!(v.word_of(v.word_token(l, w)), Some((l, w)));
            }
        }
        assert_eq!(v.word_of(EOS), None);
        assert_eq!(v.word_of(v.size()), None);
    }
}
