//! Whitespace/punctuation tokenizer and the template vocabulary used by the
//! text pathway. The vocabulary is frozen at corpus-build time: every word
//! that can appear in a generated description is enumerated here, plus the
//! pad/unk specials and the placeholder-mode tokens.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::Result;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
/// Fixed description used when testing without text annotations.
pub const PLACEHOLDER_TEXT: &str = "a frame of { }";
/// Text tokens fed to the encoder, fixed by the text pathway width.
pub const MAX_TOKENS: usize = 15;

/// Split on whitespace, then peel punctuation characters into their own
/// tokens; lowercases everything.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() || ch == '-' || ch == '\'' {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut list = vec![PAD.to_string(), UNK.to_string()];
        for t in tokens {
            if !list.contains(&t) {
                list.push(t);
            }
        }
        let index = list
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens: list,
            index,
        }
    }

    /// Vocabulary covering every phrase the synthetic templates can emit.
    pub fn builtin() -> Self {
        let mut words = Vec::new();
        for phrase in crate::synthdata::template_phrases() {
            words.extend(tokenize(&phrase));
        }
        words.extend(tokenize(PLACEHOLDER_TEXT));
        Self::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&1)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Token ids padded/truncated to the fixed text width. Unknown words map
    /// to `<unk>`, never an error.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text)
            .iter()
            .take(MAX_TOKENS)
            .map(|t| self.id(t))
            .collect();
        ids.resize(MAX_TOKENS, self.pad_id());
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let tokens: Vec<String> = std::io::BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()?;
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self { tokens, index })
    }
}
