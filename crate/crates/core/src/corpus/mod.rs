//! Deterministic synthetic multilingual speech benchmark.
//!
//! `D_mono` holds ASR examples for every language; `D_cross` holds speech
//! translation examples for the configured directions. Every example is
//! regenerated from its seeds, so record files store seeds and metadata only.

pub mod language;
pub mod records;
pub mod seeds;
pub mod vocab;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use language::{
    generate_languages, synthesize_features, translate, AcousticParams, LanguageSpec, ScriptMode, WordOrder,
    WORDS_PER_LANGUAGE,
};
pub use vocab::{VocabLayout, EOS, PAD};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use seeds::derive;

pub const CORPUS_SCHEMA: &str = "partlab-corpus/1";
const MAX_RESAMPLE: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    S2tt,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Asr => "asr",
            Task::S2tt => "s2tt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The two training datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "mono")]
    Mono,
    #[serde(rename = "cross")]
    Cross,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mono => "mono",
            DatasetKind::Cross => "cross",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

/// A translation direction between two language ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Direction {
    pub src: usize,
    pub tgt: usize,
}

impl Direction {
    pub fn label(&self) -> String {
        format!("l{}-l{}", self.src, self.tgt)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Validation {
            field: "directions".into(),
            reason: format!("`{s}` is not of the form lS-lT"),
        };
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        let num = |x: &str| x.strip_prefix('l').and_then(|n| n.parse::<usize>().ok()).ok_or_else(bad);
        Ok(Self {
            src: num(a)?,
            tgt: num(b)?,
        })
    }
}

/// Corpus configuration, persisted as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema: String,
    pub seed: u64,
    pub languages: usize,
    pub d_mel: usize,
    pub noise_sigma: f64,
    pub rate_min: usize,
    pub rate_max: usize,
    /// Per language.
    pub asr: SplitSizes,
    /// Per direction.
    pub s2tt: SplitSizes,
    /// `lS-lT` labels; defaults to every non-pivot language to and from l0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<Vec<String>>,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        Self {
            schema: CORPUS_SCHEMA.to_string(),
            seed: 7,
            languages: 4,
            d_mel: 16,
            noise_sigma: 0.1,
            rate_min: 2,
            rate_max: 4,
            asr: SplitSizes {
                train: 2000,
                dev: 200,
                test: 200,
            },
            s2tt: SplitSizes {
                train: 1000,
                dev: 200,
                test: 200,
            },
            directions: None,
        }
    }
}

impl CorpusManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::parse("corpus manifest", e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, r: &str| {
            Err(Error::Validation {
                field: f.into(),
                reason: r.into(),
            })
        };
        if self.schema != CORPUS_SCHEMA {
            return field("schema", &format!("expected `{CORPUS_SCHEMA}`"));
        }
        if self.languages < 2 {
            return field("languages", "need at least 2");
        }
        if self.d_mel == 0 {
            return field("d_mel", "must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return field("noise_sigma", "must be finite and non-negative");
        }
        if self.rate_min == 0 || self.rate_min > self.rate_max {
            return field("rate_min", "need 1 <= rate_min <= rate_max");
        }
        if self.asr.train == 0 {
            return field("asr.train", "must be positive");
        }
        for d in self.directions()? {
            if d.src >= self.languages || d.tgt >= self.languages {
                return Err(Error::Config(format!(
                    "direction {} names an unknown language (have {})",
                    d.label(),
                    self.languages
                )));
            }
            if d.src == d.tgt {
                return field("directions", &format!("{} is not a translation direction", d.label()));
            }
        }
        Ok(())
    }

    pub fn directions(&self) -> Result<Vec<Direction>> {
        match &self.directions {
            Some(list) => list.iter().map(|s| Direction::parse(s)).collect(),
            None => {
                let mut v: Vec<Direction> = (1..self.languages).map(|l| Direction { src: l, tgt: 0 }).collect();
                v.extend((1..self.languages).map(|l| Direction { src: 0, tgt: l }));
                Ok(v)
            }
        }
    }

    pub fn acoustic(&self) -> AcousticParams {
        AcousticParams {
            noise_sigma: self.noise_sigma,
            rate_min: self.rate_min,
            rate_max: self.rate_max,
        }
    }

    pub fn vocab(&self) -> VocabLayout {
        VocabLayout::new(self.languages, WORDS_PER_LANGUAGE)
    }

    /// Longest possible feature sequence.
    pub fn max_frames(&self) -> usize {
        language::MAX_SENTENCE * self.rate_max
    }
}

/// One example.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub split: Split,
    pub task: Task,
    pub source: usize,
    pub target: usize,
    pub instruction: usize,
    /// Spoken source-language word ids.
    pub words: Vec<usize>,
    /// Target-language word ids.
    pub reference: Vec<usize>,
    /// Reference rendered in the target script.
    pub text: String,
    pub sentence_seed: u64,
    pub example_seed: u64,
    pub frames_per_word: Vec<usize>,
    pub features: Tensor<f32>,
}

impl Utterance {
    pub fn kind(&self) -> DatasetKind {
        match self.task {
            Task::Asr => DatasetKind::Mono,
            Task::S2tt => DatasetKind::Cross,
        }
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// Target token ids (word tokens, no end marker).
    pub fn target_tokens(&self, vocab: &VocabLayout) -> Vec<usize> {
        self.reference.iter().map(|&w| vocab.word_token(self.target, w)).collect()
    }

    /// Row label: language for ASR, `lS-lT` for translation.
    pub fn label(&self) -> String {
        match self.task {
            Task::Asr => format!("l{}", self.source),
            Task::S2tt => Direction {
                src: self.source,
                tgt: self.target,
            }
            .label(),
        }
    }
}

/// Train/dev/test partitions of one dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partitions {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Partitions {
    pub fn get(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<Utterance> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub languages: Vec<LanguageSpec>,
    pub vocab: VocabLayout,
    pub mono: Partitions,
    pub cross: Partitions,
}

/// Identifies a generation stream: task, source, target.
fn stream_code(task: Task, src: usize, tgt: usize) -> [u64; 3] {
    [task as u64, src as u64, tgt as u64]
}

impl Corpus {
    pub fn dataset(&self, kind: DatasetKind) -> &Partitions {
        match kind {
            DatasetKind::Mono => &self.mono,
            DatasetKind::Cross => &self.cross,
        }
    }

    /// All utterances of a split, ASR first.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.mono.get(split).iter().chain(self.cross.get(split))
    }

    pub fn language(&self, id: usize) -> &LanguageSpec {
        &self.languages[id]
    }

    /// Materializes every split. Train sentences are drawn first; dev and
    /// test sentences whose word sequence already occurs in an earlier split
    /// of the same source language are resampled, so splits are disjoint
    /// both by seed and by content.
    pub fn build(manifest: &CorpusManifest) -> Result<Self> {
        manifest.validate()?;
        let languages = generate_languages(manifest.seed, manifest.languages, manifest.d_mel)?;
        let vocab = manifest.vocab();
        let directions = manifest.directions()?;

        let mut streams: Vec<(Task, usize, usize, SplitSizes)> =
            (0..manifest.languages).map(|l| (Task::Asr, l, l, manifest.asr)).collect();
        streams.extend(directions.iter().map(|d| (Task::S2tt, d.src, d.tgt, manifest.s2tt)));

        let mut seen: Vec<HashSet<Vec<usize>>> = vec![HashSet::new(); manifest.languages];
        let mut corpus = Corpus {
            manifest: manifest.clone(),
            languages,
            vocab,
            mono: Partitions::default(),
            cross: Partitions::default(),
        };
        for split in Split::ALL {
            let mut fresh: Vec<HashSet<Vec<usize>>> = vec![HashSet::new(); manifest.languages];
            for &(task, src, tgt, sizes) in &streams {
                for index in 0..sizes.get(split) {
                    let (sentence_seed, words) =
                        corpus.draw_sentence(task, src, tgt, split, index as u64, &seen[src])?;
                    fresh[src].insert(words.clone());
                    let utt = corpus.realize(split, task, src, tgt, sentence_seed, &words)?;
                    let part = match task {
                        Task::Asr => &mut corpus.mono,
                        Task::S2tt => &mut corpus.cross,
                    };
                    part.get_mut(split).push(utt);
                }
            }
            for (s, f) in seen.iter_mut().zip(fresh) {
                s.extend(f);
            }
        }
        Ok(corpus)
    }

    fn draw_sentence(
        &self,
        task: Task,
        src: usize,
        tgt: usize,
        split: Split,
        index: u64,
        exclude: &HashSet<Vec<usize>>,
    ) -> Result<(u64, Vec<usize>)> {
        let [a, b, c] = stream_code(task, src, tgt);
        for attempt in 0..MAX_RESAMPLE {
            let seed = derive(&[self.manifest.seed, split.code(), a, b, c, index, attempt]);
            let words = self.languages[src].sample_sentence(seed);
            if !exclude.contains(&words) {
                return Ok((seed, words));
            }
        }
        Err(Error::Config(format!(
            "could not draw a {split} sentence for l{src} unseen in earlier splits"
        )))
    }

    /// Builds the utterance for a spoken sentence; features come from the
    /// example seed derived from the sentence seed.
    pub fn realize(
        &self,
        split: Split,
        task: Task,
        src: usize,
        tgt: usize,
        sentence_seed: u64,
        words: &[usize],
    ) -> Result<Utterance> {
        let (s, t) = (&self.languages[src], &self.languages[tgt]);
        let reference = match task {
            Task::Asr => {
                if src != tgt {
                    return Err(Error::Task("ASR requires source == target".into()));
                }
                words.to_vec()
            }
            Task::S2tt => translate(words, s, t)?,
        };
        let example_seed = derive(&[sentence_seed, 0xfea7]);
        let (features, frames_per_word) = synthesize_features(s, words, example_seed, self.manifest.acoustic())?;
        Ok(Utterance {
            split,
            task,
            source: src,
            target: tgt,
            instruction: self.vocab.instruction(task, src, tgt),
            text: t.render_text(&reference)?,
            words: words.to_vec(),
            reference,
            sentence_seed,
            example_seed,
            frames_per_word,
            features,
        })
    }

    /// ASR languages and translation directions in report order.
    pub fn report_rows(&self) -> Vec<(Task, usize, usize)> {
        let mut rows: Vec<(Task, usize, usize)> = (0..self.languages.len()).map(|l| (Task::Asr, l, l)).collect();
        rows.extend(
            self.manifest
                .directions()
                .expect("validated")
                .into_iter()
                .map(|d| (Task::S2tt, d.src, d.tgt)),
        );
        rows
    }
}
