//! Byte-level BPE tokenizer reading GPT-2 `encoder.json` / `merges.txt`
//! files unchanged.
//!
//! Text is split into pre-tokens with the GPT-2 pattern, each pre-token's
//! bytes are mapped to printable characters, and merges are applied greedily
//! in rank order. Any byte symbol missing from the vocabulary file is
//! appended after the file's ids, so encoding is total.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};
use crate::model::TokenId;

const PRETOKEN_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// The reversible byte → char table used by GPT-2.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (b'!' as u32..=b'~' as u32).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
    };
    let mut extra = 0;
    for b in 0..256u32 {
        let c = if printable(b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).unwrap();
    }
    table
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    encoder: HashMap<String, TokenId>,
    decoder: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    file_vocab_size: usize,
    pattern: Regex,
}

impl Tokenizer {
    /// Builds a tokenizer from a token → id map and an ordered merge list.
    /// Ids must be dense in `[0, len)`.
    pub fn from_parts(
        vocab: HashMap<String, TokenId>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let n = vocab.len();
        let mut decoder = vec![None; n];
        for (tok, &id) in &vocab {
            let slot = decoder.get_mut(id as usize).ok_or_else(|| {
                Error::validation(format!("token id {id} is not dense in [0, {n})"))
            })?;
            if slot.is_some() {
                return Err(Error::validation(format!("token id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let mut decoder: Vec<String> = decoder.into_iter().map(Option::unwrap).collect();
        let mut encoder = vocab;

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        for &c in &byte_encoder {
            let s = c.to_string();
            if !encoder.contains_key(&s) {
                encoder.insert(s.clone(), decoder.len() as TokenId);
                decoder.push(s);
            }
        }

        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, pair) in merges.into_iter().enumerate() {
            merge_ranks.entry(pair).or_insert(rank);
        }
        Ok(Self {
            encoder,
            decoder,
            merge_ranks,
            byte_encoder,
            byte_decoder,
            file_vocab_size: n,
            pattern: Regex::new(PRETOKEN_PATTERN).expect("static pattern"),
        })
    }

    /// Parses vocabulary JSON and merges text in the GPT-2 release formats.
    pub fn from_str_pair(vocab_json: &str, merges_text: &str) -> Result<Self> {
        let vocab: HashMap<String, TokenId> = serde_json::from_str(vocab_json)
            .map_err(|e| Error::Format(format!("vocabulary json: {e}")))?;
        Self::from_parts(vocab, parse_merges(merges_text)?)
    }

    pub fn from_files(vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<Self> {
        let vocab = std::fs::read_to_string(vocab_path)?;
        let merges = std::fs::read_to_string(merges_path)?;
        Self::from_str_pair(&vocab, &merges)
    }

    /// Vocabulary size including appended byte fallbacks.
    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    /// Number of entries present in the vocabulary file.
    pub fn file_vocab_size(&self) -> usize {
        self.file_vocab_size
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.encoder.get(token).copied()
    }

    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.decoder.get(id as usize).map(String::as_str)
    }

    fn bpe(&self, word: &str, out: &mut Vec<TokenId>) {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, w[0].clone(), w[1].clone()))
                })
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else {
                break;
            };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == first && symbols[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        for sym in symbols {
            match self.encoder.get(&sym) {
                Some(&id) => out.push(id),
                // merged symbol absent from the vocabulary: fall back to bytes
                None => out.extend(sym.chars().map(|c| self.encoder[&c.to_string()])),
            }
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(text) {
            let piece = m.expect("pre-tokenizer pattern cannot fail").as_str();
            let mapped: String = piece
                .bytes()
                .map(|b| self.byte_encoder[b as usize])
                .collect();
            self.bpe(&mapped, &mut ids);
        }
        ids
    }

    /// Raw bytes represented by a token sequence.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token_str(id).ok_or(Error::Vocabulary {
                id,
                vocab_size: self.vocab_size(),
            })?;
            for c in tok.chars() {
                match self.byte_decoder.get(&c) {
                    Some(&b) => bytes.push(b),
                    None => {
                        let mut buf = [0u8; 4];
                        bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(bytes)
    }

    /// Decodes to text; invalid UTF-8 (a sequence cut inside a character)
    /// is replaced with U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// First sub-token of the word in its mid-sentence (leading space) form.
    pub fn condition_first_token(&self, word: &str) -> Result<TokenId> {
        if word.is_empty() {
            return Err(Error::usage("condition word must be non-empty"));
        }
        Ok(self.encode(&format!(" {word}"))[0])
    }
}

/// One merge per line, two space-separated symbols; rank is line order.
/// A leading `#version` line is skipped.
pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if (i == 0 && line.starts_with("#version")) || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                merges.push((a.to_string(), b.to_string()))
            }
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected two space-separated symbols, got {line:?}"),
                })
            }
        }
    }
    Ok(merges)
}
