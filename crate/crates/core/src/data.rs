//! Prompt/response datasets stored as JSON lines:
//! `{"prompt": "...", "response": "..."}` per line.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::TokenSequence;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub prompt: String,
    pub response: String,
}

impl Pair {
    pub fn new(prompt: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            response: response.into(),
        }
    }

    pub fn tokenize(&self, vocab: &Vocabulary) -> Result<TokenSequence> {
        let mut tokens = vocab.encode(&self.prompt)?;
        let prompt_len = tokens.len();
        tokens.extend(vocab.encode(&self.response)?);
        TokenSequence::new(tokens, prompt_len, vocab)
    }
}

pub fn tokenize_all(pairs: &[Pair], vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    pairs.iter().map(|p| p.tokenize(vocab)).collect()
}

/// Blank lines are skipped.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: Pair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

pub fn write_jsonl(pairs: &[Pair], mut out: impl Write) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn save_jsonl(pairs: &[Pair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_jsonl(pairs, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let pairs = vec![Pair::new("a b =", "c <eos>"), Pair::new("b", "a")];
        save_jsonl(&pairs, &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), pairs);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"prompt\":\"a\",\"response\":\"b\"}\n\nnot json\n").unwrap();
        match read_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tokenize_sets_boundary() {
        let v = Vocabulary::with_reserved(["a", "b", "="]).unwrap();
        let seq = Pair::new("a b =", "b <eos>").tokenize(&v).unwrap();
        assert_eq!(seq.prompt_len(), 3);
        assert_eq!(seq.response(), &[4, v.eos_id()]);
        assert!(Pair::new("a z", "b").tokenize(&v).is_err());
    }
}
