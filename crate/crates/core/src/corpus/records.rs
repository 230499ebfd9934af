//! On-disk corpus layout: `manifest.toml` plus `train.jsonl`, `dev.jsonl`
//! and `test.jsonl`. The first line of each record file is a header naming
//! the schema and field order; every further line is one utterance holding
//! seeds and metadata. Features are re-synthesized on load.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusManifest, Split, Task, Utterance, CORPUS_SCHEMA};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

pub const RECORD_FIELDS: [&str; 10] = [
    "task",
    "source",
    "target",
    "instruction",
    "sentence_seed",
    "example_seed",
    "frames",
    "words",
    "reference",
    "text",
];

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    split: Split,
    fields: Vec<String>,
    count: usize,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub task: Task,
    pub source: usize,
    pub target: usize,
    pub instruction: usize,
    pub sentence_seed: u64,
    pub example_seed: u64,
    pub frames: Vec<usize>,
    pub words: Vec<usize>,
    pub reference: Vec<usize>,
    pub text: String,
}

impl From<&Utterance> for Record {
    fn from(u: &Utterance) -> Self {
        Self {
            task: u.task,
            source: u.source,
            target: u.target,
            instruction: u.instruction,
            sentence_seed: u.sentence_seed,
            example_seed: u.example_seed,
            frames: u.frames_per_word.clone(),
            words: u.words.clone(),
            reference: u.reference.clone(),
            text: u.text.clone(),
        }
    }
}

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.as_str())
}

/// Writes the manifest echo and the three record files into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, corpus.manifest.to_toml()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    for split in Split::ALL {
        let path = dir.join(split_file(split));
        let ctx = || format!("writing {}", path.display());
        let file = fs::File::create(&path).map_err(|e| Error::io(ctx(), e))?;
        let mut out = BufWriter::new(file);
        let utts: Vec<&Utterance> = corpus.split(split).collect();
        let header = Header {
            schema: CORPUS_SCHEMA.to_string(),
            split,
            fields: RECORD_FIELDS.iter().map(|s| s.to_string()).collect(),
            count: utts.len(),
        };
        let mut line = serde_json::to_string(&header).expect("header serializes");
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(|e| Error::io(ctx(), e))?;
        for u in utts {
            let mut line = serde_json::to_string(&Record::from(u)).expect("record serializes");
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(|e| Error::io(ctx(), e))?;
        }
        out.flush().map_err(|e| Error::io(ctx(), e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    CorpusManifest::from_toml(&text)
}

/// Loads a corpus written by [`write_corpus`], re-deriving every utterance
/// from its seeds and checking it against the stored metadata.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut corpus = Corpus {
        languages: super::generate_languages(manifest.seed, manifest.languages, manifest.d_mel)?,
        vocab: manifest.vocab(),
        manifest,
        mono: Default::default(),
        cross: Default::default(),
    };
    for split in Split::ALL {
        let path = dir.join(split_file(split));
        let ctx = path.display().to_string();
        let file = fs::File::open(&path).map_err(|e| Error::io(format!("opening {ctx}"), e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::parse(&ctx, "missing header line"))?
            .map_err(|e| Error::io(format!("reading {ctx}"), e))?;
        let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::parse(&ctx, e))?;
        if header.schema != CORPUS_SCHEMA || header.fields != RECORD_FIELDS || header.split != split {
            return Err(Error::parse(&ctx, "header does not match schema"));
        }
        let mut n = 0;
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {ctx}"), e))?;
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::parse(format!("{ctx}:{}", i + 2), e))?;
            let langs = corpus.languages.len();
            if rec.source >= langs || rec.target >= langs {
                return Err(Error::parse(format!("{ctx}:{}", i + 2), "unknown language"));
            }
            let u = corpus.realize(split, rec.task, rec.source, rec.target, rec.sentence_seed, &rec.words)?;
            if Record::from(&u) != rec || corpus.languages[rec.source].sample_sentence(rec.sentence_seed) != rec.words {
                return Err(Error::parse(
                    format!("{ctx}:{}", i + 2),
                    "record disagrees with its seeds",
                ));
            }
            match u.task {
                Task::Asr => corpus.mono.get_mut(split).push(u),
                Task::S2tt => corpus.cross.get_mut(split).push(u),
            }
            n += 1;
        }
        if n != header.count {
            return Err(Error::parse(&ctx, format!("header promises {} records, found {n}", header.count)));
        }
    }
    Ok(corpus)
}
