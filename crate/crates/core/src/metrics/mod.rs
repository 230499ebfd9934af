//! Evaluation: normalized WER/CER routed by script, corpus BLEU routed by
//! target script, and per-language score reports.

pub mod text;

use std::fmt::Write as _;

use serde::Serialize;

pub use text::{
    bleu_corpus, cer, char_errors, edit_distance, normalize, tokenize, tokenize_13a, wer, word_errors, BleuStats,
    BleuTokenizer, ErrorCounts, NormalizerConfig,
};

use crate::corpus::{Corpus, ScriptMode, Split, Task, Utterance};
use crate::error::{Error, Result};
use crate::model::{Decoded, SlmModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Wer,
    Cer,
    Bleu,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Wer => "wer",
            MetricName::Cer => "cer",
            MetricName::Bleu => "bleu",
        }
    }
}

/// CER for character-joined scripts, WER otherwise.
pub fn error_metric_for(script: ScriptMode) -> MetricName {
    match script {
        ScriptMode::CharacterJoined => MetricName::Cer,
        ScriptMode::WordSpaced => MetricName::Wer,
    }
}

pub fn bleu_tokenizer_for(script: ScriptMode) -> BleuTokenizer {
    match script {
        ScriptMode::CharacterJoined => BleuTokenizer::Char,
        ScriptMode::WordSpaced => BleuTokenizer::Word13a,
    }
}

/// Placeholder surface form for non-word tokens in a hypothesis.
pub const NON_WORD: &str = "∅";

/// Renders decoded token ids in the target language's script. Words of
/// other languages keep their own surface form.
pub fn render_hypothesis(corpus: &Corpus, target: usize, tokens: &[usize]) -> String {
    let parts: Vec<String> = tokens
        .iter()
        .map(|&t| match corpus.vocab.word_of(t) {
            Some((lang, w)) => corpus.languages[lang].symbol(w).expect("word id in range"),
            None => NON_WORD.to_string(),
        })
        .collect();
    match corpus.languages[target].script {
        ScriptMode::WordSpaced => parts.join(" "),
        ScriptMode::CharacterJoined => parts.concat(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRow {
    pub split: Split,
    pub task: Task,
    pub label: String,
    pub metric: MetricName,
    /// Error rate as a fraction, or BLEU in [0, 100].
    pub value: f64,
    pub count: usize,
    pub truncated: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub split: Split,
    pub rows: Vec<ScoreRow>,
    /// Mean of the per-language WER/CER rows.
    pub asr_macro: Option<f64>,
    /// Mean of the per-direction BLEU rows.
    pub bleu_macro: Option<f64>,
}

pub const CSV_HEADER: &str = "split,task,lang_or_direction,metric_name,value,count";

impl ScoreReport {
    pub fn row(&self, label: &str) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// One row per language/direction, then the macro summary rows
    /// (labelled `macro`).
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.split,
                r.task.as_str(),
                r.label,
                r.metric.as_str(),
                r.value,
                r.count
            );
        }
        let n = |t: Task| self.rows.iter().filter(|r| r.task == t).map(|r| r.count).sum::<usize>();
        if let Some(v) = self.asr_macro {
            let _ = writeln!(s, "{},asr,macro,error_rate,{v},{}", self.split, n(Task::Asr));
        }
        if let Some(v) = self.bleu_macro {
            let _ = writeln!(s, "{},s2tt,macro,bleu,{v},{}", self.split, n(Task::S2tt));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:<5} {:<8} {:<5} {:>9} {:>6} {:>6} {:>6}",
            "split", "task", "row", "metric", "value", "count", "trunc", "failed"
        );
        for r in &self.rows {
            let v = match r.metric {
                MetricName::Bleu => format!("{:.2}", r.value),
                _ => format!("{:.4}", r.value),
            };
            let _ = writeln!(
                s,
                "{:<6} {:<5} {:<8} {:<6} {:>9} {:>6} {:>6} {:>6}",
                self.split,
                r.task.as_str(),
                r.label,
                r.metric.as_str(),
                v,
                r.count,
                r.truncated,
                r.failed
            );
        }
        if let Some(v) = self.asr_macro {
            let _ = writeln!(s, "macro ASR error rate: {v:.4}");
        }
        if let Some(v) = self.bleu_macro {
            let _ = writeln!(s, "macro BLEU: {v:.2}");
        }
        s
    }
}

/// Scores decoded hypotheses (or decode failures) for every utterance of
/// `split`, in corpus order.
pub fn score_split(corpus: &Corpus, split: Split, hyps: &[Result<Decoded>]) -> Result<ScoreReport> {
    let utts: Vec<&Utterance> = corpus.split(split).collect();
    if utts.len() != hyps.len() {
        return Err(Error::Pairing {
            refs: utts.len(),
            hyps: hyps.len(),
        });
    }
    let mut rows = Vec::new();
    for (task, src, tgt) in corpus.report_rows() {
        let mut errors = ErrorCounts::default();
        let (mut refs, mut outs) = (Vec::new(), Vec::new());
        let (mut count, mut truncated, mut failed) = (0, 0, 0);
        let mut label = String::new();
        for (u, h) in utts.iter().zip(hyps) {
            if u.task != task || u.source != src || u.target != tgt {
                continue;
            }
            label = u.label();
            count += 1;
            let text = match h {
                Ok(d) => {
                    truncated += usize::from(d.truncated);
                    render_hypothesis(corpus, tgt, &d.tokens)
                }
                Err(_) => {
                    failed += 1;
                    String::new()
                }
            };
            match task {
                Task::Asr => errors.add(match error_metric_for(corpus.languages[tgt].script) {
                    MetricName::Cer => char_errors(&u.text, &text)?,
                    _ => word_errors(&u.text, &text)?,
                }),
                Task::S2tt => {
                    refs.push(u.text.clone());
                    outs.push(text);
                }
            }
        }
        if count == 0 {
            continue;
        }
        let script = corpus.languages[tgt].script;
        let (metric, value) = match task {
            Task::Asr => (error_metric_for(script), errors.rate()),
            Task::S2tt => (MetricName::Bleu, bleu_corpus(&refs, &outs, bleu_tokenizer_for(script))?),
        };
        rows.push(ScoreRow {
            split,
            task,
            label,
            metric,
            value,
            count,
            truncated,
            failed,
        });
    }
    let mean = |t: Task| {
        let v: Vec<f64> = rows.iter().filter(|r| r.task == t).map(|r| r.value).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(ScoreReport {
        split,
        asr_macro: mean(Task::Asr),
        bleu_macro: mean(Task::S2tt),
        rows,
    })
}

/// Greedy-decodes every utterance of `split` and scores it.
pub fn evaluate_model(model: &SlmModel, corpus: &Corpus, split: Split) -> Result<ScoreReport> {
    let max_len = model.config.max_target();
    let hyps: Vec<Result<Decoded>> = corpus
        .split(split)
        .map(|u| model.greedy_decode(&u.features, u.instruction, max_len))
        .collect();
    score_split(corpus, split, &hyps)
}
