//! Prompt infilling: fill the masked part of a prompt template conditioned
//! on reference responses, validate each filled prompt by generating answers
//! for the few-shot inputs, and keep the best one for every later input.
//!
//! Template text is whitespace separated. `{name}` is a slot filled per
//! example, `<mask*k>` stands for `k` masked positions (`<mask>` for one),
//! and every other word is a vocabulary symbol.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::eval::{exact_match, normalize_answer};
use crate::sampler::{generate, infill, GenerationResult, SamplerConfig};
use crate::seed::derive_seed;
use crate::sequence::NoisySequence;
use crate::vocab::{TokenId, Vocabulary, MASK_SYMBOL};

pub type Slots = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Piece {
    Literal(TokenId),
    Mask,
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTemplate {
    pieces: Vec<Piece>,
}

/// A template with its slots substituted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instantiated {
    pub tokens: Vec<TokenId>,
    /// masked token ranges, in increasing order
    pub mask_spans: Vec<Range<usize>>,
    /// token offset of each template piece
    pub offsets: Vec<usize>,
}

impl PromptTemplate {
    pub fn new(pieces: Vec<Piece>) -> Self {
        Self { pieces }
    }

    /// Literal tokens only.
    pub fn from_tokens(tokens: &[TokenId]) -> Self {
        Self::new(tokens.iter().map(|&t| Piece::Literal(t)).collect())
    }

    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut pieces = Vec::new();
        for word in text.split_whitespace() {
            if let Some(name) = word.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                if name.is_empty() || name.contains(['{', '}']) {
                    return Err(Error::Template(format!("malformed slot marker {word:?}")));
                }
                pieces.push(Piece::Slot(name.to_string()));
            } else if word == MASK_SYMBOL {
                pieces.push(Piece::Mask);
            } else if let Some(k) = word.strip_prefix("<mask*").and_then(|w| w.strip_suffix('>')) {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::Template(format!("malformed mask marker {word:?}")))?;
                if k == 0 {
                    return Err(Error::Template("mask marker with zero length".into()));
                }
                pieces.extend(std::iter::repeat_n(Piece::Mask, k));
            } else {
                let id = vocab
                    .id(word)
                    .ok_or_else(|| Error::Template(format!("unknown symbol {word:?}")))?;
                pieces.push(Piece::Literal(id));
            }
        }
        Ok(Self { pieces })
    }

    pub fn to_text(&self, vocab: &Vocabulary) -> Result<String> {
        let mut words = Vec::new();
        let mut i = 0;
        while i < self.pieces.len() {
            match &self.pieces[i] {
                Piece::Literal(id) => {
                    let sym = vocab
                        .symbol(*id)
                        .ok_or_else(|| Error::Vocab(format!("token id {id} out of range")))?;
                    words.push(sym.to_string());
                    i += 1;
                }
                Piece::Slot(name) => {
                    words.push(format!("{{{name}}}"));
                    i += 1;
                }
                Piece::Mask => {
                    let run = self.pieces[i..].iter().take_while(|p| **p == Piece::Mask).count();
                    words.push(if run == 1 { MASK_SYMBOL.to_string() } else { format!("<mask*{run}>") });
                    i += run;
                }
            }
        }
        Ok(words.join(" "))
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn num_masks(&self) -> usize {
        self.pieces.iter().filter(|p| **p == Piece::Mask).count()
    }

    pub fn slot_names(&self) -> Vec<&str> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(n) => Some(n.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Substitutes every slot; masks stay as MASK tokens.
    pub fn instantiate(&self, slots: &Slots, vocab: &Vocabulary) -> Result<Instantiated> {
        let mut tokens = Vec::new();
        let mut offsets = Vec::with_capacity(self.pieces.len());
        let mut mask_spans: Vec<Range<usize>> = Vec::new();
        for piece in &self.pieces {
            offsets.push(tokens.len());
            match piece {
                Piece::Literal(id) => {
                    if !vocab.contains(*id) {
                        return Err(Error::Vocab(format!("token id {id} out of range")));
                    }
                    tokens.push(*id);
                }
                Piece::Mask => {
                    let at = tokens.len();
                    match mask_spans.last_mut() {
                        Some(last) if last.end == at => last.end += 1,
                        _ => mask_spans.push(at..at + 1),
                    }
                    tokens.push(vocab.mask_id());
                }
                Piece::Slot(name) => {
                    let value = slots
                        .get(name)
                        .ok_or_else(|| Error::Template(format!("missing value for slot {{{name}}}")))?;
                    let ids = vocab.encode(value)?;
                    if ids.contains(&vocab.mask_id()) {
                        return Err(Error::Template(format!("slot {{{name}}} value contains {MASK_SYMBOL}")));
                    }
                    tokens.extend(ids);
                }
            }
        }
        Ok(Instantiated {
            tokens,
            mask_spans,
            offsets,
        })
    }

    /// Replaces the mask pieces with the tokens found at their positions in
    /// `filled`, an infilled instantiation of this template.
    fn fill_from(&self, inst: &Instantiated, filled: &[TokenId]) -> Self {
        let pieces = self
            .pieces
            .iter()
            .zip(&inst.offsets)
            .map(|(p, &o)| match p {
                Piece::Mask => Piece::Literal(filled[o]),
                other => other.clone(),
            })
            .collect();
        Self { pieces }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub slots: Slots,
    pub response: Vec<TokenId>,
}

impl FewShotExample {
    pub fn new(slots: Slots, response: Vec<TokenId>) -> Result<Self> {
        if response.is_empty() {
            return Err(Error::Precondition("few-shot reference response is empty".into()));
        }
        Ok(Self { slots, response })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillCandidate {
    /// position in the pool; the tie-break key
    pub index: usize,
    pub prompt: PromptTemplate,
    /// conditioning example, `None` for an unmodified baseline
    pub example: Option<usize>,
    pub seed: Option<u64>,
    pub score: Option<f64>,
    pub per_example: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Scorer {
    #[default]
    ExactMatch,
    /// `max(0, 1 - |pred - ref| / range)` on numeric answers; unparsable
    /// answers score 0
    AbsoluteError { range: f64 },
}

impl Scorer {
    pub fn score(&self, prediction: &str, reference: &str) -> f64 {
        match *self {
            Scorer::ExactMatch => f64::from(exact_match(prediction, reference)),
            Scorer::AbsoluteError { range } => {
                let parse = |s: &str| normalize_answer(s).replace(' ', "").parse::<f64>().ok();
                match (parse(prediction), parse(reference)) {
                    (Some(p), Some(r)) => (1.0 - (p - r).abs() / range).max(0.0),
                    _ => 0.0,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TieBreak {
    /// the candidate with the lowest pool index wins
    #[default]
    LowestIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub num_candidates: usize,
    pub infill: SamplerConfig,
    /// `gen_length` is ignored: answers are generated at the reference length
    pub validation: SamplerConfig,
    pub scorer: Scorer,
    pub tie_break: TieBreak,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_candidates: 8,
            infill: SamplerConfig::default(),
            validation: SamplerConfig {
                temperature: 0.0,
                ..SamplerConfig::default()
            },
            scorer: Scorer::ExactMatch,
            tie_break: TieBreak::LowestIndex,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 {
            return Err(Error::Config("num_candidates must be at least 1".into()));
        }
        if let Scorer::AbsoluteError { range } = self.scorer {
            if !(range > 0.0 && range.is_finite()) {
                return Err(Error::Config(format!("scorer range must be positive, got {range}")));
            }
        }
        self.infill.validate()?;
        self.validation.validate()
    }
}

/// The filled template followed by the clean reference response; only the
/// template's masks are masked.
pub fn assemble_infill_context(
    template: &PromptTemplate,
    example: &FewShotExample,
    vocab: &Vocabulary,
) -> Result<NoisySequence> {
    let inst = template.instantiate(&example.slots, vocab)?;
    if example.response.contains(&vocab.mask_id()) {
        return Err(Error::Template("reference response contains <mask>".into()));
    }
    let prompt_len = inst.tokens.len();
    let mut tokens = inst.tokens;
    tokens.extend_from_slice(&example.response);
    NoisySequence::template(tokens, prompt_len, vocab)
}

/// `N` candidates; candidate `i` is conditioned on example `i mod |examples|`
/// and infilled with a seed derived from `(cfg.seed, i)`.
pub fn propose_candidates(
    model: &Denoiser,
    template: &PromptTemplate,
    examples: &[FewShotExample],
    cfg: &PipelineConfig,
    vocab: &Vocabulary,
) -> Result<Vec<InfillCandidate>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Pipeline("no few-shot examples".into()));
    }
    (0..cfg.num_candidates)
        .map(|i| {
            let ex = i % examples.len();
            let seed = derive_seed(cfg.seed, "candidate", i as u64);
            let prompt = infill_template(model, template, &examples[ex], &cfg.infill, seed, vocab)?;
            Ok(InfillCandidate {
                index: i,
                prompt,
                example: Some(ex),
                seed: Some(seed),
                score: None,
                per_example: Vec::new(),
            })
        })
        .collect()
}

fn infill_template(
    model: &Denoiser,
    template: &PromptTemplate,
    example: &FewShotExample,
    sampler: &SamplerConfig,
    seed: u64,
    vocab: &Vocabulary,
) -> Result<PromptTemplate> {
    let inst = template.instantiate(&example.slots, vocab)?;
    let ctx = assemble_infill_context(template, example, vocab)?;
    let out = infill(model, &ctx, &SamplerConfig { seed, ..*sampler })?;
    Ok(template.fill_from(&inst, out.sequence.tokens()))
}

/// Generates a response of `gen_length` tokens after the prompt with its
/// slots filled. The prompt must contain no masks.
pub fn generate_with_prompt(
    model: &Denoiser,
    prompt: &PromptTemplate,
    slots: &Slots,
    gen_length: usize,
    sampler: &SamplerConfig,
    vocab: &Vocabulary,
) -> Result<GenerationResult> {
    if prompt.num_masks() > 0 {
        return Err(Error::Pipeline("prompt still contains masks".into()));
    }
    let inst = prompt.instantiate(slots, vocab)?;
    generate(
        model,
        &inst.tokens,
        vocab.mask_id(),
        &SamplerConfig {
            gen_length,
            ..*sampler
        },
    )
}

/// Answer text of a generated or reference response.
fn answer(vocab: &Vocabulary, response: &[TokenId]) -> Result<String> {
    vocab.decode_answer(response)
}

/// Scores every candidate by its mean score over the examples. Example `j`
/// is generated with a seed derived from `(cfg.seed, j)` for every
/// candidate, so a score does not depend on the candidate's position.
pub fn validate_candidates(
    model: &Denoiser,
    candidates: &mut [InfillCandidate],
    examples: &[FewShotExample],
    cfg: &PipelineConfig,
    vocab: &Vocabulary,
) -> Result<()> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::Pipeline("no candidates to validate".into()));
    }
    if examples.is_empty() {
        return Err(Error::Pipeline("no few-shot examples".into()));
    }
    for cand in candidates.iter_mut() {
        let mut scores = Vec::with_capacity(examples.len());
        for (j, ex) in examples.iter().enumerate() {
            let sampler = SamplerConfig {
                seed: derive_seed(cfg.seed, "validate", j as u64),
                ..cfg.validation
            };
            let out = generate_with_prompt(model, &cand.prompt, &ex.slots, ex.response.len(), &sampler, vocab)?;
            let predicted = answer(vocab, out.sequence.response())?;
            let reference = answer(vocab, &ex.response)?;
            scores.push(cfg.scorer.score(&predicted, &reference));
        }
        cand.score = Some(scores.iter().sum::<f64>() / scores.len() as f64);
        cand.per_example = scores;
    }
    Ok(())
}

/// Highest score; ties go to the lowest pool index.
pub fn select_best(candidates: &[InfillCandidate]) -> Result<&InfillCandidate> {
    let mut best: Option<(&InfillCandidate, f64)> = None;
    for c in candidates {
        let s = c
            .score
            .ok_or_else(|| Error::Pipeline(format!("candidate {} has not been scored", c.index)))?;
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && b.index < c.index) => Some((b, bs)),
            _ => Some((c, s)),
        };
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::Pipeline("no candidates to select from".into()))
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub candidates: Vec<InfillCandidate>,
    pub best: InfillCandidate,
    /// number of infilling runs; fixed by the configuration, not by how many
    /// inputs the selected prompt is later applied to
    pub infill_calls: usize,
}

/// Proposes, validates and selects.
pub fn optimize_prompt(
    model: &Denoiser,
    template: &PromptTemplate,
    examples: &[FewShotExample],
    cfg: &PipelineConfig,
    vocab: &Vocabulary,
) -> Result<PipelineOutcome> {
    let mut candidates = propose_candidates(model, template, examples, cfg, vocab)?;
    let infill_calls = candidates.len();
    validate_candidates(model, &mut candidates, examples, cfg, vocab)?;
    let best = select_best(&candidates)?.clone();
    Ok(PipelineOutcome {
        candidates,
        best,
        infill_calls,
    })
}

/// Answers for each input under a fixed prompt. No infilling happens here.
pub fn apply_prompt(
    model: &Denoiser,
    prompt: &PromptTemplate,
    inputs: &[Slots],
    gen_length: usize,
    sampler: &SamplerConfig,
    vocab: &Vocabulary,
) -> Result<Vec<String>> {
    inputs
        .iter()
        .enumerate()
        .map(|(i, slots)| {
            let s = SamplerConfig {
                seed: derive_seed(sampler.seed, "apply", i as u64),
                ..*sampler
            };
            let out = generate_with_prompt(model, prompt, slots, gen_length, &s, vocab)?;
            answer(vocab, out.sequence.response())
        })
        .collect()
}

/// Window start offsets over a prompt of `len` pieces: `0, stride, ...` while
/// the window fits, or a single offset 0 when it never does.
pub fn window_offsets(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if window > len {
        return vec![0];
    }
    (0..=(len - window) / stride).map(|k| k * stride).collect()
}

#[derive(Debug, Clone)]
pub struct SlidingWindowOutcome {
    /// index 0 is the unmodified prompt
    pub candidates: Vec<InfillCandidate>,
    pub best: InfillCandidate,
}

/// Re-infills `mask_size` pieces at the start of each window. Slot pieces
/// inside the masked range are kept; masking skips over them. Window `k`
/// (1-based pool index) is conditioned on example `(k - 1) mod |examples|`.
#[allow(clippy::too_many_arguments)]
pub fn sliding_window_infill(
    model: &Denoiser,
    prompt: &PromptTemplate,
    window: usize,
    stride: usize,
    mask_size: usize,
    examples: &[FewShotExample],
    cfg: &PipelineConfig,
    vocab: &Vocabulary,
) -> Result<SlidingWindowOutcome> {
    if mask_size == 0 || stride == 0 || window < mask_size {
        return Err(Error::Config(format!(
            "need window >= mask_size >= 1 and stride >= 1, got window {window}, stride {stride}, mask {mask_size}"
        )));
    }
    if prompt.num_masks() > 0 {
        return Err(Error::Pipeline("prompt to refine still contains masks".into()));
    }
    if examples.is_empty() {
        return Err(Error::Pipeline("no few-shot examples".into()));
    }
    let mut candidates = vec![InfillCandidate {
        index: 0,
        prompt: prompt.clone(),
        example: None,
        seed: None,
        score: None,
        per_example: Vec::new(),
    }];
    for (k, offset) in window_offsets(prompt.len(), window, stride).into_iter().enumerate() {
        let end = (offset + mask_size).min(prompt.len());
        let pieces: Vec<Piece> = prompt
            .pieces()
            .iter()
            .enumerate()
            .map(|(i, p)| match p {
                Piece::Literal(_) if (offset..end).contains(&i) => Piece::Mask,
                other => other.clone(),
            })
            .collect();
        let masked = PromptTemplate::new(pieces);
        let ex = k % examples.len();
        let seed = derive_seed(cfg.seed, "window", k as u64);
        let filled = if masked.num_masks() == 0 {
            masked
        } else {
            infill_template(model, &masked, &examples[ex], &cfg.infill, seed, vocab)?
        };
        candidates.push(InfillCandidate {
            index: k + 1,
            prompt: filled,
            example: Some(ex),
            seed: Some(seed),
            score: None,
            per_example: Vec::new(),
        });
    }
    validate_candidates(model, &mut candidates, examples, cfg, vocab)?;
    let best = select_best(&candidates)?.clone();
    Ok(SlidingWindowOutcome { candidates, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub example: Option<usize>,
    pub seed: Option<u64>,
    pub prompt: String,
    pub per_example: Vec<f64>,
    pub score: Option<f64>,
}

impl CandidateRecord {
    pub fn new(c: &InfillCandidate, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self {
            index: c.index,
            example: c.example,
            seed: c.seed,
            prompt: c.prompt.to_text(vocab)?,
            per_example: c.per_example.clone(),
            score: c.score,
        })
    }
}

/// One JSON line per candidate.
pub fn write_candidate_report(candidates: &[InfillCandidate], vocab: &Vocabulary, mut out: impl Write) -> Result<()> {
    for c in candidates {
        serde_json::to_writer(&mut out, &CandidateRecord::new(c, vocab)?)?;
        out.write_all(b"\n").map_err(|e| Error::io("<report>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn vocab() -> Vocabulary {
        Vocabulary::with_reserved(["a", "b", "c", "d", "=", "x", "y"]).unwrap()
    }

    fn model(v: &Vocabulary) -> Denoiser {
        Denoiser::init(
            DenoiserConfig {
                vocab_size: v.size(),
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                max_len: 32,
                d_ff: 32,
            },
            5,
        )
        .unwrap()
    }

    fn example(v: &Vocabulary, q: &str, r: &str) -> FewShotExample {
        FewShotExample::new(Slots::from([("q".into(), q.into())]), v.encode(r).unwrap()).unwrap()
    }

    fn scored(index: usize, score: f64, tok: TokenId) -> InfillCandidate {
        InfillCandidate {
            index,
            prompt: PromptTemplate::from_tokens(&[tok]),
            example: Some(0),
            seed: Some(0),
            score: Some(score),
            per_example: vec![score],
        }
    }

    #[test]
    fn parse_and_render() {
        let v = vocab();
        let t = PromptTemplate::parse("<mask*3> a {q} = <mask>", &v).unwrap();
        assert_eq!(t.len(), 7);
        assert_eq!(t.num_masks(), 4);
        assert_eq!(t.slot_names(), vec!["q"]);
        assert_eq!(t.to_text(&v).unwrap(), "<mask*3> a {q} = <mask>");
        assert!(PromptTemplate::parse("a zz", &v).is_err());
        assert!(PromptTemplate::parse("<mask*0>", &v).is_err());
        assert!(PromptTemplate::parse("{}", &v).is_err());
    }

    #[test]
    fn context_layout() {
        let v = vocab();
        let t = PromptTemplate::parse("<mask*8> {q} =", &v).unwrap();
        let ex = example(&v, "a b", "c <eos>");
        let ctx = assemble_infill_context(&t, &ex, &v).unwrap();
        assert_eq!(ctx.num_masked(), 8);
        assert_eq!(ctx.prompt_len(), 11);
        assert_eq!(ctx.len(), 13);
        assert!(ctx.masked_positions().iter().all(|&p| p < ctx.prompt_len()));

        let plain = PromptTemplate::parse("x {q} =", &v).unwrap();
        let ctx = assemble_infill_context(&plain, &ex, &v).unwrap();
        assert_eq!(ctx.num_masked(), 0);

        let missing = FewShotExample::new(Slots::new(), vec![3]).unwrap();
        assert!(matches!(
            assemble_infill_context(&t, &missing, &v),
            Err(Error::Template(_))
        ));
        assert!(FewShotExample::new(Slots::new(), vec![]).is_err());
    }

    #[test]
    fn candidates_round_robin_and_deterministic() {
        let v = vocab();
        let m = model(&v);
        let t = PromptTemplate::parse("x <mask*3> {q} =", &v).unwrap();
        let exs = [example(&v, "a", "b <eos>"), example(&v, "c d", "d <eos>")];
        let cfg = PipelineConfig {
            num_candidates: 5,
            seed: 9,
            ..Default::default()
        };
        let a = propose_candidates(&m, &t, &exs, &cfg, &v).unwrap();
        let prov: Vec<usize> = a.iter().map(|c| c.example.unwrap()).collect();
        assert_eq!(prov, vec![0, 1, 0, 1, 0]);
        let b = propose_candidates(&m, &t, &exs, &cfg, &v).unwrap();
        assert_eq!(a, b);
        for c in &a {
            assert_eq!(c.prompt.len(), t.len());
            assert_eq!(c.prompt.num_masks(), 0);
            assert_eq!(c.prompt.pieces()[0], Piece::Literal(v.id("x").unwrap()));
            assert_eq!(c.prompt.pieces()[4], Piece::Slot("q".into()));
        }
        let zero = PipelineConfig {
            num_candidates: 0,
            ..cfg
        };
        assert!(matches!(propose_candidates(&m, &t, &exs, &zero, &v), Err(Error::Config(_))));
    }

    #[test]
    fn selection_rules() {
        let cands = [scored(0, 0.2, 3), scored(1, 0.9, 4), scored(2, 0.9, 5)];
        assert_eq!(select_best(&cands).unwrap().index, 1);
        let single = [scored(0, 0.0, 3)];
        assert_eq!(select_best(&single).unwrap().index, 0);
        let mut unscored = cands.clone();
        unscored[2].score = None;
        assert!(select_best(&unscored).is_err());
    }

    #[test]
    fn selection_is_permutation_invariant() {
        let cands = [scored(0, 0.5, 3), scored(1, 0.7, 4), scored(2, 0.7, 5)];
        let expected = select_best(&cands).unwrap().prompt.clone();
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for p in perms {
            let shuffled: Vec<InfillCandidate> = p.iter().map(|&i| cands[i].clone()).collect();
            assert_eq!(select_best(&shuffled).unwrap().prompt, expected);
        }
    }

    #[test]
    fn scorers() {
        assert_eq!(Scorer::ExactMatch.score("4 2", " 4  2 "), 1.0);
        let s = Scorer::AbsoluteError { range: 4.0 };
        assert_eq!(s.score("3", "5"), 0.5);
        assert_eq!(s.score("9", "1"), 0.0);
        assert_eq!(s.score("a", "1"), 0.0);
    }

    #[test]
    fn validation_scores_are_order_invariant() {
        let v = vocab();
        let m = model(&v);
        let t = PromptTemplate::parse("x <mask*2> {q} =", &v).unwrap();
        let exs = [example(&v, "a", "b <eos>"), example(&v, "c", "d <eos>")];
        let cfg = PipelineConfig {
            num_candidates: 3,
            ..Default::default()
        };
        let mut cands = propose_candidates(&m, &t, &exs, &cfg, &v).unwrap();
        validate_candidates(&m, &mut cands, &exs, &cfg, &v).unwrap();
        let mut reversed: Vec<InfillCandidate> = cands.iter().rev().cloned().map(|mut c| {
            c.score = None;
            c
        }).collect();
        validate_candidates(&m, &mut reversed, &exs, &cfg, &v).unwrap();
        for c in &cands {
            let r = reversed.iter().find(|r| r.index == c.index).unwrap();
            assert_eq!(c.score, r.score);
            assert_eq!(c.per_example.len(), 2);
        }
        assert!(validate_candidates(&m, &mut [], &exs, &cfg, &v).is_err());
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_offsets(16, 8, 4), vec![0, 4, 8]);
        assert_eq!(window_offsets(8, 8, 4), vec![0]);
        assert_eq!(window_offsets(5, 8, 4), vec![0]);
        for len in 1..30 {
            for w in 1..10 {
                for s in 1..6 {
                    let n = window_offsets(len, w, s).len();
                    let expected = if w > len { 1 } else { (len - w) / s + 1 };
                    assert_eq!(n, expected);
                }
            }
        }
    }

    #[test]
    fn sliding_window_keeps_baseline_and_slots() {
        let v = vocab();
        let m = model(&v);
        let prompt = PromptTemplate::parse("a b c d x y {q} =", &v).unwrap();
        let exs = [example(&v, "a", "b <eos>")];
        let cfg = PipelineConfig::default();
        let out = sliding_window_infill(&m, &prompt, 4, 2, 4, &exs, &cfg, &v).unwrap();
        assert_eq!(out.candidates.len(), 1 + window_offsets(8, 4, 2).len());
        assert_eq!(out.candidates[0].prompt, prompt);
        let base = out.candidates[0].score.unwrap();
        assert!(out.best.score.unwrap() >= base);
        for c in &out.candidates {
            assert_eq!(c.prompt.pieces()[6], Piece::Slot("q".into()));
        }
        assert!(sliding_window_infill(&m, &prompt, 2, 2, 4, &exs, &cfg, &v).is_err());
    }

    #[test]
    fn report_lines() {
        let v = vocab();
        let cands = [scored(0, 0.5, 3), scored(1, 1.0, 4)];
        let mut buf = Vec::new();
        write_candidate_report(&cands, &v, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let rec: CandidateRecord = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(rec.prompt, "b");
        assert_eq!(rec.score, Some(1.0));
    }
}
