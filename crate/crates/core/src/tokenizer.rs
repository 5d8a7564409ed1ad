//! WordPiece vocabulary and greedy longest-match tokenization.
//!
//! No lower-casing or accent stripping is applied, so Devanagari and other
//! caseless scripts pass through whitespace pre-splitting unchanged.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

pub const CONTINUATION: &str = "##";

/// Words longer than this many characters become a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// The first four tokens must be `[PAD] [UNK] [CLS] [SEP]` in that order.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        for (id, special) in [PAD, UNK, CLS, SEP].into_iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(special) {
                return Err(Error::Data(format!("vocab id {id} must be {special}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Data(format!("vocab line {} is empty", id + 1)));
            }
            if ids.insert(tok.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate vocab token {tok:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Specials followed by `tokens`.
    pub fn with_specials<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::new(all)
    }

    /// One token per line; line number (from zero) is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        Self::new(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Greedy longest-match pieces of one word, or `None` if some suffix cannot
/// be matched.
fn word_pieces(word: &str, vocab: &Vocab, out: &mut Vec<usize>) -> bool {
    let start_len = out.len();
    // Byte offsets of every char boundary, including the end.
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(word.len()))
        .collect();
    let mut start = 0;
    let mut piece = String::new();
    while start < bounds.len() - 1 {
        let mut matched = None;
        for end in (start + 1..bounds.len()).rev() {
            piece.clear();
            if start > 0 {
                piece.push_str(CONTINUATION);
            }
            piece.push_str(&word[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&piece) {
                matched = Some((id, end));
                break;
            }
        }
        match matched {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => {
                out.truncate(start_len);
                return false;
            }
        }
    }
    true
}

pub fn wordpiece_tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        if word.chars().count() > MAX_WORD_CHARS || !word_pieces(word, vocab, &mut ids) {
            ids.push(UNK_ID);
        }
    }
    ids
}

/// `[CLS] tokens… [SEP]` truncated and padded to `max_len`, with its mask.
pub fn encode_example(text: &str, vocab: &Vocab, max_len: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    encode_ids(&wordpiece_tokenize(text, vocab), max_len)
}

pub fn encode_ids(tokens: &[usize], max_len: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    if max_len < 2 {
        return Err(Error::Input(format!("max_len must be at least 2, got {max_len}")));
    }
    let kept = &tokens[..tokens.len().min(max_len - 2)];
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend_from_slice(kept);
    ids.push(SEP_ID);
    let mut mask = vec![1u8; ids.len()];
    ids.resize(max_len, PAD_ID);
    mask.resize(max_len, 0);
    Ok((ids, mask))
}

/// Inverse of [`encode_ids`]: the token ids between `[CLS]` and `[SEP]`.
pub fn strip_specials(ids: &[usize], mask: &[u8]) -> Vec<usize> {
    let real = mask.iter().take_while(|&&m| m == 1).count();
    if real < 2 {
        return Vec::new();
    }
    ids[1..real - 1].to_vec()
}
