//! Closed-vocabulary whitespace tokenizer.
//!
//! Word ids are assigned by descending frequency with lexicographic
//! tie-breaks, after the four specials, so rebuilding from the same corpora
//! reproduces the same vocabulary file byte for byte.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TglError};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;

const SPECIAL_STRINGS: [&str; 4] = ["<bos>", "<eos>", "<unk>", "<pad>"];

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerFile {
    specials: Vec<String>,
    vocab: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    /// Build from every text the model will ever see (corpora plus probes),
    /// so probes never hit `<unk>`.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for word in text.split_whitespace() {
                *freq.entry(word).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(TglError::data("tokenizer built from no texts".to_string()));
        }
        let mut entries: Vec<(&str, usize)> = freq.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut words: Vec<String> = SPECIAL_STRINGS.iter().map(|s| s.to_string()).collect();
        words.extend(entries.into_iter().map(|(w, _)| w.to_string()));
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Tokenizer { words, ids })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.ids.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).map(|s| s.as_str()).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = TokenizerFile {
            specials: SPECIAL_STRINGS.iter().map(|s| s.to_string()).collect(),
            vocab: self.words[SPECIAL_STRINGS.len()..].to_vec(),
        };
        let f = std::fs::File::create(path.as_ref())?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, &file)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| TglError::data(format!("cannot open {}: {e}", path.as_ref().display())))?;
        let file: TokenizerFile = serde_json::from_slice(&bytes)
            .map_err(|e| TglError::data(format!("bad tokenizer file: {e}")))?;
        if file.specials != SPECIAL_STRINGS {
            return Err(TglError::data(format!(
                "unexpected specials {:?}",
                file.specials
            )));
        }
        let mut words: Vec<String> = SPECIAL_STRINGS.iter().map(|s| s.to_string()).collect();
        words.extend(file.vocab);
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Tokenizer { words, ids })
    }
}

/// Encode documents as `<bos> words <eos>` streams, concatenate, and chunk
/// into full-length training sequences. The tail shorter than `seq_len` is
/// dropped.
pub fn pack_documents<'a>(
    texts: impl Iterator<Item = &'a str>,
    tokenizer: &Tokenizer,
    seq_len: usize,
) -> Vec<Vec<usize>> {
    let mut stream = Vec::new();
    for text in texts {
        stream.push(BOS);
        stream.extend(tokenizer.encode(text));
        stream.push(EOS);
    }
    stream
        .chunks_exact(seq_len)
        .map(|c| c.to_vec())
        .collect()
}
