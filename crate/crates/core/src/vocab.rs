//! Token vocabulary with reserved `<mask>`, `<eos>` and `<pad>` symbols.
//!
//! On disk a vocabulary is a text file with one printable symbol per line;
//! the zero-based line number is the token id.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const MASK_SYMBOL: &str = "<mask>";
pub const EOS_SYMBOL: &str = "<eos>";
pub const PAD_SYMBOL: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
    mask: TokenId,
    eos: TokenId,
    pad: TokenId,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered symbol list. The reserved symbols
    /// must be present; symbols must be unique, non-empty and free of whitespace.
    pub fn new<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        if symbols.len() > TokenId::MAX as usize {
            return Err(Error::Vocab("too many symbols".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, sym) in symbols.iter().enumerate() {
            if sym.is_empty() || sym.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!(
                    "symbol {id} ({sym:?}) is empty or contains whitespace"
                )));
            }
            if index.insert(sym.clone(), id as TokenId).is_some() {
                return Err(Error::Vocab(format!("duplicate symbol {sym:?}")));
            }
        }
        let reserved = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("reserved symbol {s} missing")))
        };
        let mask = reserved(MASK_SYMBOL)?;
        let eos = reserved(EOS_SYMBOL)?;
        let pad = reserved(PAD_SYMBOL)?;
        Ok(Self {
            symbols,
            index,
            mask,
            eos,
            pad,
        })
    }

    /// Reserved symbols first, followed by `words` in order (duplicates skipped).
    pub fn with_reserved<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut symbols: Vec<String> = vec![MASK_SYMBOL.into(), EOS_SYMBOL.into(), PAD_SYMBOL.into()];
        for w in words {
            let w = w.into();
            if !symbols.contains(&w) {
                symbols.push(w);
            }
        }
        Self::new(symbols)
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.symbols.len()
    }

    /// Whitespace tokenization; every word must be a known symbol.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Vocab(format!("unknown symbol {w:?}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let sym = self
                .symbol(id)
                .ok_or_else(|| Error::Vocab(format!("token id {id} out of range")))?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(sym);
        }
        Ok(out)
    }

    /// Decodes the answer part of a response: everything before the first
    /// EOS, with PAD tokens dropped.
    pub fn decode_answer(&self, ids: &[TokenId]) -> Result<String> {
        let end = ids.iter().position(|&t| t == self.eos).unwrap_or(ids.len());
        let kept: Vec<TokenId> = ids[..end].iter().copied().filter(|&t| t != self.pad).collect();
        self.decode(&kept)
    }

    /// SHA-256 over the newline-joined symbol table, hex encoded.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for sym in &self.symbols {
            hasher.update(sym.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for sym in &self.symbols {
            let _ = writeln!(out, "{sym}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::trim_end).filter(|l| !l.is_empty()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::with_reserved(["a", "b", "1"]).unwrap()
    }

    #[test]
    fn reserved_ids_distinct_and_in_range() {
        let v = vocab();
        let ids = [v.mask_id(), v.eos_id(), v.pad_id()];
        assert!(ids.iter().all(|&i| (i as usize) < v.size()));
        assert_ne!(ids[0], ids[1]);
        assert_ne!(ids[1], ids[2]);
        assert_ne!(ids[0], ids[2]);
    }

    #[test]
    fn missing_reserved_symbol_is_rejected() {
        assert!(Vocabulary::new(["<mask>", "<eos>", "x"]).is_err());
    }

    #[test]
    fn duplicate_symbol_is_rejected() {
        assert!(Vocabulary::new(["<mask>", "<eos>", "<pad>", "x", "x"]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let v = vocab();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.hash(), back.hash());
    }

    #[test]
    fn encode_decode() {
        let v = vocab();
        let ids = v.encode("  a b\t1 ").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "a b 1");
        assert!(v.encode("a zzz").is_err());
    }

    #[test]
    fn decode_answer_stops_at_eos() {
        let v = vocab();
        let a = v.id("a").unwrap();
        let ids = [a, v.pad_id(), a, v.eos_id(), a, v.pad_id()];
        assert_eq!(v.decode_answer(&ids).unwrap(), "a a");
    }
}
