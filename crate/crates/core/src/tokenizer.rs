//! Tokenizer interface plus a word-level tokenizer with byte fallback.
//!
//! Word pieces come from a whitespace split with leading/trailing
//! `.,?!;"()` peeled into their own pieces. A piece missing from the
//! vocabulary is emitted as its UTF-8 bytes (`<0xNN>` tokens), prefixed by a
//! space byte unless it starts the text, so decoding restores the spacing.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EOS: &str = "<|endoftext|>";
pub const SYS: &str = "[sys]";
pub const USR: &str = "[usr]";

const PEEL: &[char] = &['.', ',', '?', '!', ';', '"', '(', ')'];
const ATTACH: &[&str] = &[".", ",", "?", "!", ";"];
const SPECIALS: [&str; 3] = [EOS, SYS, USR];
const FIRST_BYTE: usize = SPECIALS.len();
const FIRST_WORD: usize = FIRST_BYTE + 256;

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<usize>;
    fn decode(&self, ids: &[usize]) -> String;
    fn vocab_size(&self) -> usize;
    fn token(&self, id: usize) -> Option<&str>;
    fn token_id(&self, token: &str) -> Option<usize>;
    fn eos_id(&self) -> usize;
    fn sys_id(&self) -> usize;
    fn usr_id(&self) -> usize;
}

/// Splits text into word and punctuation pieces.
pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut w = word;
        let mut lead = Vec::new();
        while let Some(c) = w.chars().next().filter(|c| PEEL.contains(c)) {
            lead.push(&w[..c.len_utf8()]);
            w = &w[c.len_utf8()..];
        }
        let mut trail = Vec::new();
        while let Some(c) = w.chars().next_back().filter(|c| PEEL.contains(c)) {
            trail.push(&w[w.len() - c.len_utf8()..]);
            w = &w[..w.len() - c.len_utf8()];
        }
        out.extend(lead);
        if !w.is_empty() {
            out.push(w);
        }
        out.extend(trail.into_iter().rev());
    }
    out
}

#[derive(Debug, Clone)]
pub struct WordTokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    schema_version: u32,
    words: Vec<String>,
}

impl WordTokenizer {
    /// Specials, the 256 byte tokens, then `words` in order (duplicates and
    /// words that collide with reserved tokens are skipped).
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..256).map(|b| format!("<0x{b:02X}>")));
        let mut ids: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w = w.as_ref();
            if !ids.contains_key(w) {
                ids.insert(w.to_owned(), tokens.len());
                tokens.push(w.to_owned());
            }
        }
        Self { tokens, ids }
    }

    /// Vocabulary covering every piece of `texts`, in first-seen order.
    pub fn from_texts<S: AsRef<str>>(texts: impl IntoIterator<Item = S>) -> Self {
        let mut words = Vec::new();
        for t in texts {
            words.extend(pieces(t.as_ref()).into_iter().map(str::to_owned));
        }
        Self::new(words)
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[FIRST_WORD..]
    }

    /// True when `text` encodes without byte fallback.
    pub fn covers(&self, text: &str) -> bool {
        pieces(text).iter().all(|p| self.ids.contains_key(*p))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile { schema_version: 1, words: self.words().to_vec() };
        let json = serde_json::to_string_pretty(&file)?;
        crate::write_file(path, json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::read_text(path)?;
        let file: VocabFile = serde_json::from_str(&text)?;
        if file.schema_version != 1 {
            return Err(Error::Format(format!("unsupported vocab schema_version {}", file.schema_version)));
        }
        Ok(Self::new(file.words))
    }

    fn byte_of(id: usize) -> Option<u8> {
        (FIRST_BYTE..FIRST_WORD).contains(&id).then(|| (id - FIRST_BYTE) as u8)
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, p) in pieces(text).into_iter().enumerate() {
            match self.ids.get(p) {
                Some(&id) => out.push(id),
                None => {
                    if i > 0 {
                        out.push(FIRST_BYTE + b' ' as usize);
                    }
                    out.extend(p.bytes().map(|b| FIRST_BYTE + b as usize));
                }
            }
        }
        out
    }

    fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut bytes = Vec::new();
        for &id in ids {
            if let Some(b) = Self::byte_of(id) {
                bytes.push(b);
                continue;
            }
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(&bytes));
                bytes.clear();
            }
            let Some(tok) = self.tokens.get(id) else { continue };
            if !out.is_empty() && !ATTACH.contains(&tok.as_str()) {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        out
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    fn token_id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    fn eos_id(&self) -> usize {
        0
    }

    fn sys_id(&self) -> usize {
        1
    }

    fn usr_id(&self) -> usize {
        2
    }
}
