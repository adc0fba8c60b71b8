use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::tokenizer::{Origin, TokenSeq, BYTE_VOCAB, EOS};
use crate::rng::{self, DOMAIN_SPLIT};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub sequences: Vec<TokenSeq>,
    pub source: PathBuf,
    pub split: Split,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

struct Document {
    /// Prompt bytes followed by a newline, if the document is an instruction pair.
    prompt: Vec<u8>,
    body: Vec<u8>,
}

const PROMPT_TAG: &str = "PROMPT:\n";
const RESPONSE_TAG: &str = "\nRESPONSE:\n";

fn parse_document(text: &str) -> Document {
    if let Some(rest) = text.strip_prefix(PROMPT_TAG) {
        if let Some(at) = rest.find(RESPONSE_TAG) {
            let mut prompt = rest[..at].as_bytes().to_vec();
            prompt.push(b'\n');
            return Document {
                prompt,
                body: rest[at + RESPONSE_TAG.len()..].as_bytes().to_vec(),
            };
        }
    }
    Document {
        prompt: Vec::new(),
        body: text.as_bytes().to_vec(),
    }
}

/// Documents are runs of non-blank lines separated by blank lines.
fn split_documents(text: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines().chain(std::iter::once("")) {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(parse_document(&current.join("\n")));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    docs
}

/// Chunks every document (bytes + EOS) into windows of at most `context_len`
/// tokens, drops windows with nothing to score and exact duplicates.
fn windows(docs: &[Document], context_len: usize) -> Vec<TokenSeq> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for doc in docs {
        let mut tokens: Vec<u32> = doc
            .prompt
            .iter()
            .chain(&doc.body)
            .map(|&b| b as u32)
            .collect();
        tokens.push(EOS);
        for (c, chunk) in tokens.chunks(context_len).enumerate() {
            let prompt_len = doc
                .prompt
                .len()
                .saturating_sub(c * context_len)
                .min(chunk.len());
            if chunk.len() < 2 || prompt_len >= chunk.len() {
                continue;
            }
            if !seen.insert(chunk.to_vec()) {
                continue;
            }
            out.push(
                TokenSeq::new(chunk.to_vec(), Origin::Real, prompt_len, BYTE_VOCAB)
                    .expect("byte windows satisfy TokenSeq invariants"),
            );
        }
    }
    out
}

/// Splits corpus text into train/eval windows. `eval_fraction` of the
/// (deduplicated) windows go to eval, chosen by a seeded shuffle; both splits
/// keep file order.
pub fn parse_corpus(
    text: &str,
    source: &Path,
    context_len: usize,
    eval_fraction: f64,
    seed: u64,
) -> Result<(Corpus, Corpus)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Config(format!(
            "eval fraction must be in (0, 1), got {eval_fraction}"
        )));
    }
    if context_len < 2 {
        return Err(Error::Config(format!(
            "context_len must be >= 2, got {context_len}"
        )));
    }
    let seqs = windows(&split_documents(text), context_len);
    if seqs.len() < 2 {
        return Err(Error::Empty(format!(
            "corpus {source:?} yields {} usable sequences, need at least 2",
            seqs.len()
        )));
    }
    let n = seqs.len();
    let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[DOMAIN_SPLIT]));
    let mut is_eval = vec![false; n];
    for &i in &order[..n_eval] {
        is_eval[i] = true;
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (s, e) in seqs.into_iter().zip(is_eval) {
        if e {
            eval.push(s);
        } else {
            train.push(s);
        }
    }
    let mk = |sequences, split| Corpus {
        sequences,
        source: source.to_path_buf(),
        split,
    };
    Ok((mk(train, Split::Train), mk(eval, Split::Eval)))
}

pub fn load_corpus(
    path: &Path,
    context_len: usize,
    eval_fraction: f64,
    seed: u64,
) -> Result<(Corpus, Corpus)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8_lossy(&bytes);
    parse_corpus(&text, path, context_len, eval_fraction, seed)
}

/// One document per line, keeping the 0-based line number; blank lines are skipped.
pub fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i, l.to_string()))
        .collect())
}
