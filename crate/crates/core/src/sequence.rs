//! Clean and noisy token sequences, and the policies deciding which
//! positions the forward process may corrupt.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

/// A clean prompt/response pair stored as one token run.
/// `tokens[..prompt_len]` is the prompt, the rest is the response.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<TokenId>,
    prompt_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>, prompt_len: usize, vocab: &Vocabulary) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::Precondition(format!(
                "prompt_len {prompt_len} exceeds sequence length {}",
                tokens.len()
            )));
        }
        for &t in &tokens {
            if !vocab.contains(t) {
                return Err(Error::Vocab(format!("token id {t} out of range")));
            }
            if t == vocab.mask_id() {
                return Err(Error::Precondition("clean sequence contains <mask>".into()));
            }
        }
        Ok(Self { tokens, prompt_len })
    }

    /// A sequence that is all prompt.
    pub fn prompt_only(tokens: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        let n = tokens.len();
        Self::new(tokens, n, vocab)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.prompt_len]
    }

    pub fn response(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }
}

/// A partially masked sequence `X_t`.
///
/// `masked` is sorted and `tokens[i] == MASK` exactly for `i` in `masked`.
/// When `origin` is known every unmasked token equals the origin token;
/// infilling templates have no origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisySequence {
    tokens: Vec<TokenId>,
    masked: Vec<usize>,
    t: f64,
    prompt_len: usize,
    mask_id: TokenId,
    origin: Option<TokenSequence>,
}

impl NoisySequence {
    /// Masks `positions` of `origin`. Duplicates are ignored.
    pub fn from_clean(origin: &TokenSequence, positions: &[usize], t: f64, mask_id: TokenId) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("timestep {t} outside [0,1]")));
        }
        let mut masked: Vec<usize> = positions.to_vec();
        masked.sort_unstable();
        masked.dedup();
        if let Some(&last) = masked.last() {
            if last >= origin.len() {
                return Err(Error::Precondition(format!(
                    "mask position {last} outside sequence of length {}",
                    origin.len()
                )));
            }
        }
        if t == 0.0 && !masked.is_empty() {
            return Err(Error::Precondition("t = 0 requires an empty mask set".into()));
        }
        let mut tokens = origin.tokens().to_vec();
        for &i in &masked {
            tokens[i] = mask_id;
        }
        Ok(Self {
            tokens,
            masked,
            t,
            prompt_len: origin.prompt_len(),
            mask_id,
            origin: Some(origin.clone()),
        })
    }

    /// A template for infilling: every MASK token is a position to fill.
    /// `t` is set to the masked fraction.
    pub fn template(tokens: Vec<TokenId>, prompt_len: usize, vocab: &Vocabulary) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::Precondition(format!(
                "prompt_len {prompt_len} exceeds sequence length {}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| !vocab.contains(t)) {
            return Err(Error::Vocab(format!("token id {bad} out of range")));
        }
        Ok(Self::from_masked_tokens(tokens, prompt_len, vocab.mask_id()))
    }

    pub(crate) fn from_masked_tokens(tokens: Vec<TokenId>, prompt_len: usize, mask_id: TokenId) -> Self {
        let masked: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == mask_id).then_some(i))
            .collect();
        let t = if tokens.is_empty() {
            0.0
        } else {
            masked.len() as f64 / tokens.len() as f64
        };
        Self {
            tokens,
            masked,
            t,
            prompt_len,
            mask_id,
            origin: None,
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn masked_positions(&self) -> &[usize] {
        &self.masked
    }

    pub fn num_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn origin(&self) -> Option<&TokenSequence> {
        self.origin.as_ref()
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.masked.binary_search(&pos).is_ok()
    }

    /// Writes `token` into masked position `pos` and removes it from the mask set.
    pub(crate) fn commit(&mut self, pos: usize, token: TokenId) -> Result<()> {
        if token == self.mask_id {
            return Err(Error::Precondition("cannot commit <mask>".into()));
        }
        let idx = self
            .masked
            .binary_search(&pos)
            .map_err(|_| Error::Precondition(format!("position {pos} is not masked")))?;
        self.masked.remove(idx);
        self.tokens[pos] = token;
        if self.masked.is_empty() {
            self.t = 0.0;
        }
        Ok(())
    }

    /// The clean sequence once every mask has been filled.
    pub fn into_clean(self) -> Result<TokenSequence> {
        if !self.masked.is_empty() {
            return Err(Error::Precondition(format!(
                "{} positions are still masked",
                self.masked.len()
            )));
        }
        Ok(TokenSequence {
            tokens: self.tokens,
            prompt_len: self.prompt_len,
        })
    }
}

/// Which positions the forward process may mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskingPolicy {
    ResponseOnly,
    FullSequence,
    Spans(Vec<Range<usize>>),
}

impl MaskingPolicy {
    /// The maskable positions, in increasing order.
    pub fn region(&self, len: usize, prompt_len: usize) -> Result<Vec<usize>> {
        match self {
            MaskingPolicy::FullSequence => Ok((0..len).collect()),
            MaskingPolicy::ResponseOnly => Ok((prompt_len.min(len)..len).collect()),
            MaskingPolicy::Spans(spans) => {
                validate_spans(spans, len)?;
                let mut out: Vec<usize> = spans.iter().flat_map(Clone::clone).collect();
                out.sort_unstable();
                Ok(out)
            }
        }
    }

    pub fn region_of(&self, seq: &TokenSequence) -> Result<Vec<usize>> {
        self.region(seq.len(), seq.prompt_len())
    }
}

/// Spans must be non-inverted, inside `0..len`, and pairwise disjoint.
pub fn validate_spans(spans: &[Range<usize>], len: usize) -> Result<()> {
    for s in spans {
        if s.start > s.end || s.end > len {
            return Err(Error::Precondition(format!(
                "span {}..{} outside sequence of length {len}",
                s.start, s.end
            )));
        }
    }
    let mut sorted: Vec<&Range<usize>> = spans.iter().filter(|s| !s.is_empty()).collect();
    sorted.sort_by_key(|s| s.start);
    for pair in sorted.windows(2) {
        if pair[0].end > pair[1].start {
            return Err(Error::Precondition(format!(
                "spans {}..{} and {}..{} overlap",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::with_reserved(["a", "b", "c"]).unwrap()
    }

    #[test]
    fn clean_sequence_rejects_mask_and_bad_boundary() {
        let v = vocab();
        assert!(TokenSequence::new(vec![v.mask_id()], 0, &v).is_err());
        assert!(TokenSequence::new(vec![3, 4], 3, &v).is_err());
        assert!(TokenSequence::new(vec![3, 99], 1, &v).is_err());
    }

    #[test]
    fn noisy_tokens_match_mask_set() {
        let v = vocab();
        let seq = TokenSequence::new(vec![3, 4, 5, 3], 2, &v).unwrap();
        let noisy = NoisySequence::from_clean(&seq, &[3, 1, 1], 0.5, v.mask_id()).unwrap();
        assert_eq!(noisy.masked_positions(), &[1, 3]);
        assert_eq!(noisy.tokens(), &[3, v.mask_id(), 5, v.mask_id()]);
    }

    #[test]
    fn zero_timestep_requires_no_masks() {
        let v = vocab();
        let seq = TokenSequence::new(vec![3, 4], 1, &v).unwrap();
        assert!(NoisySequence::from_clean(&seq, &[0], 0.0, v.mask_id()).is_err());
        assert!(NoisySequence::from_clean(&seq, &[], 0.0, v.mask_id()).is_ok());
    }

    #[test]
    fn commit_fills_and_finishes() {
        let v = vocab();
        let mut tpl = NoisySequence::template(vec![v.mask_id(), 3], 2, &v).unwrap();
        assert!(tpl.commit(1, 4).is_err());
        tpl.commit(0, 5).unwrap();
        let clean = tpl.into_clean().unwrap();
        assert_eq!(clean.tokens(), &[5, 3]);
    }

    #[test]
    fn policy_regions() {
        assert_eq!(MaskingPolicy::ResponseOnly.region(5, 2).unwrap(), vec![2, 3, 4]);
        assert_eq!(MaskingPolicy::FullSequence.region(3, 2).unwrap(), vec![0, 1, 2]);
        let spans = MaskingPolicy::Spans(vec![3..5, 0..1]);
        assert_eq!(spans.region(5, 0).unwrap(), vec![0, 3, 4]);
        assert!(MaskingPolicy::Spans(vec![0..3, 2..4]).region(5, 0).is_err());
        assert!(MaskingPolicy::Spans(vec![4..6]).region(5, 0).is_err());
    }
}
