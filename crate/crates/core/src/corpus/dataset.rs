use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::embedding::{Vocab, EOS, UNK};
use crate::error::{Error, Result};

/// Word-level tokens: whitespace split, lowercased, unknown words map to UNK.
pub fn tokenize(vocab: &Vocab, text: &str) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK))
        .collect()
}

/// Joins token surfaces with single spaces, dropping reserved tokens.
pub fn detokenize(vocab: &Vocab, ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&id| !crate::embedding::is_reserved(id))
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T × feat_dim` frames.
    pub features: Tensor,
    pub text: String,
}

#[derive(Serialize, Deserialize)]
struct UtteranceLine {
    utterance_id: String,
    features: Vec<Vec<f64>>,
    text: String,
}

/// An utterance with its target ids (always EOS-terminated).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Tensor,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Tokenizes every transcript and appends EOS.
    pub fn encode(&self, vocab: &Vocab) -> Vec<Example> {
        self.utterances
            .iter()
            .map(|u| {
                let mut targets = tokenize(vocab, &u.text);
                targets.push(EOS);
                Example { id: u.id.clone(), features: u.features.clone(), targets }
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for u in &self.utterances {
            let line = UtteranceLine {
                utterance_id: u.id.clone(),
                features: (0..u.features.rows()).map(|r| u.features.row(r).to_vec()).collect(),
                text: u.text.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }

    pub fn read_jsonl<R: BufRead>(split: Split, reader: R) -> Result<Self> {
        let mut utterances = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let u: UtteranceLine = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            if u.features.is_empty() {
                return Err(Error::Parse { line: i + 1, msg: "utterance has no frames".into() });
            }
            let features = Tensor::from_rows(&u.features)
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            if !features.is_finite() {
                return Err(Error::Parse { line: i + 1, msg: "non-finite feature".into() });
            }
            utterances.push(Utterance { id: u.utterance_id, features, text: u.text });
        }
        Ok(Self { split, utterances })
    }

    pub fn load(split: Split, path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(split, BufReader::new(File::open(path)?))
    }
}

pub fn save_text_corpus(lines: &[String], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

/// Non-empty lines of a plain-text corpus.
pub fn load_text_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for l in r.lines() {
        let l = l?;
        if !l.trim().is_empty() {
            out.push(l);
        }
    }
    Ok(out)
}
