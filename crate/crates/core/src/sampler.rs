//! Reverse process: iterative denoising for generation and fixed-length
//! infilling. Committed tokens are never re-masked.

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, LogitsGrid};
use crate::error::{Error, Result};
use crate::seed::{rng_from_seed, Rng};
use crate::sequence::{NoisySequence, TokenSequence};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UnmaskStrategy {
    /// commit the samples with the highest probability first
    #[default]
    Confidence,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub gen_length: usize,
    pub temperature: f64,
    pub strategy: UnmaskStrategy,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 128,
            gen_length: 128,
            temperature: 0.8,
            strategy: UnmaskStrategy::Confidence,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("invalid temperature {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub positions: Vec<usize>,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub sequence: TokenSequence,
    pub trace: Vec<TraceStep>,
}

impl GenerationResult {
    /// One JSON object per step: `{"step":..,"positions":[..],"tokens":[..]}`.
    pub fn write_trace_jsonl(&self, mut out: impl Write) -> Result<()> {
        for step in &self.trace {
            serde_json::to_writer(&mut out, step)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }
}

/// Splits `num_masked` commits over at most `steps` steps; earlier steps get
/// the ceiling of the even split.
pub fn unmask_count_schedule(num_masked: usize, steps: usize) -> Vec<usize> {
    if num_masked == 0 || steps == 0 {
        return Vec::new();
    }
    let n = steps.min(num_masked);
    let (base, rem) = (num_masked / n, num_masked % n);
    (0..n).map(|i| base + usize::from(i < rem)).collect()
}

struct Proposal {
    pos: usize,
    token: TokenId,
    confidence: f64,
}

/// Samples a token for every masked position from `softmax(logits / T)` and
/// reports the probability of the sampled token under that distribution.
/// At `T = 0` the argmax is taken and confidence is its untempered probability.
fn propose(logits: &LogitsGrid, state: &NoisySequence, temperature: f64, rng: &mut Rng) -> Vec<Proposal> {
    let mask_id = state.mask_id() as usize;
    let v = logits.vocab_size();
    let mut probs = vec![0.0; v];
    state
        .masked_positions()
        .iter()
        .map(|&pos| {
            let row = logits.row(0, pos);
            let scale = if temperature > 0.0 { 1.0 / temperature } else { 1.0 };
            let max = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != mask_id)
                .map(|(_, &x)| x * scale)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, p) in probs.iter_mut().enumerate() {
                *p = if k == mask_id { 0.0 } else { (row[k] * scale - max).exp() };
                sum += *p;
            }
            probs.iter_mut().for_each(|p| *p /= sum);
            let token = if temperature > 0.0 {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = None;
                for (k, &p) in probs.iter().enumerate() {
                    if p > 0.0 {
                        acc += p;
                        pick = Some(k);
                        if u < acc {
                            break;
                        }
                    }
                }
                pick.expect("at least one non-mask token")
            } else {
                // first maximal index: ties resolve to the lowest id
                let mut best = usize::from(mask_id == 0);
                for k in 0..v {
                    if k != mask_id && probs[k] > probs[best] {
                        best = k;
                    }
                }
                best
            };
            Proposal {
                pos,
                token: token as TokenId,
                confidence: probs[token],
            }
        })
        .collect()
}

/// One reverse step: proposes tokens for all masked positions and commits
/// exactly `k` of them.
pub fn denoise_step(
    model: &Denoiser,
    state: &NoisySequence,
    k: usize,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<(NoisySequence, TraceStep)> {
    if k > state.num_masked() {
        return Err(Error::Precondition(format!(
            "cannot commit {k} positions, only {} masked",
            state.num_masked()
        )));
    }
    let mut next = state.clone();
    if k == 0 {
        return Ok((next, TraceStep { step: 0, positions: vec![], tokens: vec![] }));
    }
    let logits = model.forward(std::slice::from_ref(state))?;
    let mut proposals = propose(&logits, state, config.temperature, rng);
    let chosen: Vec<Proposal> = match config.strategy {
        UnmaskStrategy::Confidence => {
            proposals.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.pos.cmp(&b.pos)));
            proposals.truncate(k);
            proposals
        }
        UnmaskStrategy::Random => {
            let mut idx = sample(rng, proposals.len(), k).into_vec();
            idx.sort_unstable();
            let mut taken: Vec<Option<Proposal>> = proposals.into_iter().map(Some).collect();
            idx.into_iter().map(|i| taken[i].take().expect("distinct indices")).collect()
        }
    };
    let mut step = TraceStep {
        step: 0,
        positions: Vec::with_capacity(k),
        tokens: Vec::with_capacity(k),
    };
    for p in chosen {
        next.commit(p.pos, p.token)?;
        step.positions.push(p.pos);
        step.tokens.push(p.token);
    }
    Ok((next, step))
}

fn run(model: &Denoiser, mut state: NoisySequence, config: &SamplerConfig) -> Result<GenerationResult> {
    config.validate()?;
    if state.len() > model.config().max_len {
        return Err(Error::Length {
            len: state.len(),
            max_len: model.config().max_len,
        });
    }
    let mut rng = rng_from_seed(config.seed);
    let schedule = unmask_count_schedule(state.num_masked(), config.steps);
    let mut trace = Vec::with_capacity(schedule.len());
    for (i, &k) in schedule.iter().enumerate() {
        let (next, mut step) = denoise_step(model, &state, k, config, &mut rng)?;
        step.step = i;
        trace.push(step);
        state = next;
    }
    Ok(GenerationResult {
        sequence: state.into_clean()?,
        trace,
    })
}

/// Appends `gen_length` masks after `prompt` and denoises them.
pub fn generate(model: &Denoiser, prompt: &[TokenId], mask_id: TokenId, config: &SamplerConfig) -> Result<GenerationResult> {
    let total = prompt.len() + config.gen_length;
    if total > model.config().max_len {
        return Err(Error::Length {
            len: total,
            max_len: model.config().max_len,
        });
    }
    if prompt.contains(&mask_id) {
        return Err(Error::Precondition("prompt contains <mask>".into()));
    }
    let mut tokens = prompt.to_vec();
    tokens.resize(total, mask_id);
    let state = NoisySequence::from_masked_tokens(tokens, prompt.len(), mask_id);
    run(model, state, config)
}

/// Fills every masked position of `template`; all other tokens and the
/// length are preserved.
pub fn infill(model: &Denoiser, template: &NoisySequence, config: &SamplerConfig) -> Result<GenerationResult> {
    run(model, template.clone(), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::vocab::Vocabulary;

    fn setup() -> (Vocabulary, Denoiser) {
        let v = Vocabulary::with_reserved((0..13).map(|i| format!("w{i}"))).unwrap();
        let cfg = DenoiserConfig {
            vocab_size: v.size(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_len: 24,
            d_ff: 32,
        };
        (v.clone(), Denoiser::init(cfg, 3).unwrap())
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(unmask_count_schedule(128, 128), vec![1; 128]);
        assert_eq!(unmask_count_schedule(5, 2), vec![3, 2]);
        assert!(unmask_count_schedule(0, 4).is_empty());
        assert_eq!(unmask_count_schedule(3, 10), vec![1, 1, 1]);
    }

    #[test]
    fn zero_temperature_commits_argmax() {
        let (v, model) = setup();
        let tpl = NoisySequence::template(vec![5, v.mask_id(), 6, v.mask_id()], 4, &v).unwrap();
        let cfg = SamplerConfig {
            temperature: 0.0,
            ..SamplerConfig::default()
        };
        let mut rng = rng_from_seed(0);
        let (next, step) = denoise_step(&model, &tpl, 2, &cfg, &mut rng).unwrap();
        assert_eq!(next.num_masked(), 0);
        let logits = model.forward(std::slice::from_ref(&tpl)).unwrap();
        for (&pos, &tok) in step.positions.iter().zip(&step.tokens) {
            let row = logits.row(0, pos);
            let best = (0..row.len())
                .filter(|&k| k != v.mask_id() as usize)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(tok as usize, best);
        }
    }

    #[test]
    fn too_many_commits_is_an_error() {
        let (v, model) = setup();
        let tpl = NoisySequence::template(vec![5, v.mask_id()], 2, &v).unwrap();
        let mut rng = rng_from_seed(0);
        assert!(denoise_step(&model, &tpl, 2, &SamplerConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn generate_edge_cases() {
        let (v, model) = setup();
        let prompt = [5, 6, 7];
        let empty = generate(&model, &prompt, v.mask_id(), &SamplerConfig { gen_length: 0, ..Default::default() }).unwrap();
        assert_eq!(empty.sequence.tokens(), &prompt);
        assert!(empty.trace.is_empty());

        let one = generate(
            &model,
            &prompt,
            v.mask_id(),
            &SamplerConfig {
                gen_length: 6,
                steps: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(one.trace.len(), 1);
        assert_eq!(one.trace[0].positions.len(), 6);
        assert_eq!(&one.sequence.tokens()[..3], &prompt);
        assert_eq!(one.sequence.prompt_len(), 3);

        let long = SamplerConfig {
            gen_length: 22,
            ..Default::default()
        };
        assert!(matches!(generate(&model, &prompt, v.mask_id(), &long), Err(Error::Length { .. })));
    }

    #[test]
    fn infill_without_masks_is_identity() {
        let (v, model) = setup();
        let tpl = NoisySequence::template(vec![5, 6, 7], 3, &v).unwrap();
        let before = model.forward_calls();
        let out = infill(&model, &tpl, &SamplerConfig::default()).unwrap();
        assert_eq!(out.sequence.tokens(), &[5, 6, 7]);
        assert_eq!(model.forward_calls(), before);
    }

    #[test]
    fn infill_prefix_uses_bounded_calls() {
        let (v, model) = setup();
        let mut tokens = vec![v.mask_id(); 8];
        tokens.extend(5..13);
        let tpl = NoisySequence::template(tokens.clone(), 8, &v).unwrap();
        for steps in [1, 3, 8, 20] {
            let before = model.forward_calls();
            let cfg = SamplerConfig { steps, ..Default::default() };
            let out = infill(&model, &tpl, &cfg).unwrap();
            let calls = model.forward_calls() - before;
            assert!(calls as usize <= steps.min(8));
            assert_eq!(&out.sequence.tokens()[8..], &tokens[8..]);
            let filled: usize = out.trace.iter().map(|s| s.positions.len()).sum();
            assert_eq!(filled, 8);
            assert!(out.trace.iter().all(|s| s.positions.len() <= 8usize.div_ceil(steps)));
        }
    }

    #[test]
    fn trace_jsonl_one_line_per_step() {
        let (v, model) = setup();
        let out = generate(&model, &[5], v.mask_id(), &SamplerConfig { gen_length: 4, steps: 2, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        out.write_trace_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: TraceStep = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 0);
        assert_eq!(first.positions.len(), 2);
    }

    #[test]
    fn random_strategy_preserves_clean_tokens() {
        let (v, model) = setup();
        let tpl = NoisySequence::template(vec![v.mask_id(), 6, v.mask_id(), 8, v.mask_id()], 5, &v).unwrap();
        let cfg = SamplerConfig {
            strategy: UnmaskStrategy::Random,
            steps: 2,
            ..Default::default()
        };
        let out = infill(&model, &tpl, &cfg).unwrap();
        assert_eq!(out.sequence.tokens()[1], 6);
        assert_eq!(out.sequence.tokens()[3], 8);
        assert!(!out.sequence.tokens().contains(&v.mask_id()));
    }
}
