//! A small bidirectional transformer estimating `P(X_0 | X_t)`.
//!
//! Pre-norm blocks with learned positional embeddings and no causal mask.
//! There is no timestep input: the noise level is implicit in the mask
//! pattern. All parameters live in one flat `f64` buffer whose tensor order
//! is given by [`DenoiserConfig::tensors`]; gradients use the same layout.

mod kernels;
mod loss;
mod net;

use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::sequence::NoisySequence;

pub use loss::{masked_cross_entropy, CrossEntropy};
pub use net::ForwardCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub d_ff: usize,
}

impl DenoiserConfig {
    /// Default architecture: 4 layers, 4 heads, width 128, feed-forward 512.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_len: 256,
            d_ff: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter tensors in storage order. Matrices are `[in, out]`.
    ///
    /// ```text
    /// tok_emb [V, d]      pos_emb [max_len, d]
    /// per layer l:
    ///   l.ln1.gain [d]  l.ln1.bias [d]
    ///   l.attn.wq [d, d] l.attn.bq [d]  (likewise wk/bk, wv/bv, wo/bo)
    ///   l.ln2.gain [d]  l.ln2.bias [d]
    ///   l.ff.w1 [d, ff]  l.ff.b1 [ff]  l.ff.w2 [ff, d]  l.ff.b2 [d]
    /// lnf.gain [d]  lnf.bias [d]  out.w [d, V]  out.b [V]
    /// ```
    pub fn tensors(&self) -> Vec<TensorInfo> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut list = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, kind: TensorKind| {
            let size = shape.iter().product::<usize>();
            list.push(TensorInfo {
                name,
                shape,
                offset,
                kind,
            });
            offset += size;
        };
        push("tok_emb".into(), vec![v, d], TensorKind::Embedding);
        push("pos_emb".into(), vec![self.max_len, d], TensorKind::Embedding);
        for l in 0..self.n_layers {
            push(format!("{l}.ln1.gain"), vec![d], TensorKind::Gain);
            push(format!("{l}.ln1.bias"), vec![d], TensorKind::Bias);
            for p in ["q", "k", "v", "o"] {
                push(format!("{l}.attn.w{p}"), vec![d, d], TensorKind::Matrix);
                push(format!("{l}.attn.b{p}"), vec![d], TensorKind::Bias);
            }
            push(format!("{l}.ln2.gain"), vec![d], TensorKind::Gain);
            push(format!("{l}.ln2.bias"), vec![d], TensorKind::Bias);
            push(format!("{l}.ff.w1"), vec![d, f], TensorKind::Matrix);
            push(format!("{l}.ff.b1"), vec![f], TensorKind::Bias);
            push(format!("{l}.ff.w2"), vec![f, d], TensorKind::Matrix);
            push(format!("{l}.ff.b2"), vec![d], TensorKind::Bias);
        }
        push("lnf.gain".into(), vec![d], TensorKind::Gain);
        push("lnf.bias".into(), vec![d], TensorKind::Bias);
        push("out.w".into(), vec![d, v], TensorKind::Matrix);
        push("out.b".into(), vec![v], TensorKind::Bias);
        list
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(TensorInfo::size).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    Embedding,
    Matrix,
    Bias,
    Gain,
}

impl TensorKind {
    /// Whether decoupled weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, TensorKind::Embedding | TensorKind::Matrix)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorInfo {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.size()
    }
}

/// Resolved offsets of one transformer block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &DenoiserConfig) -> Self {
        let tensors = cfg.tensors();
        let at = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.offset)
                .expect("tensor listed in layout")
        };
        let layers = (0..cfg.n_layers)
            .map(|l| LayerOffsets {
                ln1_g: at(&format!("{l}.ln1.gain")),
                ln1_b: at(&format!("{l}.ln1.bias")),
                wq: at(&format!("{l}.attn.wq")),
                bq: at(&format!("{l}.attn.bq")),
                wk: at(&format!("{l}.attn.wk")),
                bk: at(&format!("{l}.attn.bk")),
                wv: at(&format!("{l}.attn.wv")),
                bv: at(&format!("{l}.attn.bv")),
                wo: at(&format!("{l}.attn.wo")),
                bo: at(&format!("{l}.attn.bo")),
                ln2_g: at(&format!("{l}.ln2.gain")),
                ln2_b: at(&format!("{l}.ln2.bias")),
                w1: at(&format!("{l}.ff.w1")),
                b1: at(&format!("{l}.ff.b1")),
                w2: at(&format!("{l}.ff.w2")),
                b2: at(&format!("{l}.ff.b2")),
            })
            .collect();
        Self {
            tok_emb: at("tok_emb"),
            pos_emb: at("pos_emb"),
            layers,
            lnf_g: at("lnf.gain"),
            lnf_b: at("lnf.bias"),
            out_w: at("out.w"),
            out_b: at("out.b"),
            total: tensors.iter().map(TensorInfo::size).sum(),
        }
    }
}

/// Per-position logits for a batch, `batch × len × vocab`. Sequences in a
/// batch may differ in length.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid {
    vocab_size: usize,
    seqs: Vec<Vec<f64>>,
}

impl LogitsGrid {
    pub fn new(vocab_size: usize, seqs: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(bad) = seqs.iter().find(|s| s.len() % vocab_size != 0) {
            return Err(Error::Precondition(format!(
                "logits length {} is not a multiple of vocab size {vocab_size}",
                bad.len()
            )));
        }
        Ok(Self { vocab_size, seqs })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn batch_size(&self) -> usize {
        self.seqs.len()
    }

    pub fn seq_len(&self, b: usize) -> usize {
        self.seqs[b].len() / self.vocab_size
    }

    /// `(batch, len, vocab)` when all sequences share a length.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        let len = self.seqs.first().map_or(0, |s| s.len() / self.vocab_size);
        self.seqs
            .iter()
            .all(|s| s.len() == len * self.vocab_size)
            .then_some((self.seqs.len(), len, self.vocab_size))
    }

    pub fn row(&self, b: usize, pos: usize) -> &[f64] {
        &self.seqs[b][pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    pub fn seq(&self, b: usize) -> &[f64] {
        &self.seqs[b]
    }

    pub(crate) fn seq_mut(&mut self, b: usize) -> &mut Vec<f64> {
        &mut self.seqs[b]
    }

    /// Log-probabilities of one row.
    pub fn log_softmax_row(&self, b: usize, pos: usize) -> Vec<f64> {
        let row = self.row(b, pos);
        let lse = kernels::log_sum_exp(row);
        row.iter().map(|v| v - lse).collect()
    }

    pub fn softmax_row(&self, b: usize, pos: usize) -> Vec<f64> {
        let mut row = self.row(b, pos).to_vec();
        kernels::softmax_in_place(&mut row);
        row
    }
}

/// Anything that maps noisy sequences to per-position logits.
pub trait Predictor {
    fn vocab_size(&self) -> usize;
    fn logits(&self, batch: &[NoisySequence]) -> Result<LogitsGrid>;
}

/// Result of a training forward/backward pass.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    /// Per-example normalized loss; `None` for examples without masks.
    pub per_example: Vec<Option<f64>>,
    pub grads: Vec<f64>,
}

#[derive(Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    layout: Layout,
    params: Vec<f64>,
    forward_calls: AtomicU64,
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.clone(),
            forward_calls: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Denoiser {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Denoiser {
    /// Fresh parameters: embeddings and projection matrices drawn from
    /// `N(0, 1/d_model)`, biases zero, layer-norm gains one.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        for t in config.tensors() {
            let slot = &mut params[t.range()];
            match t.kind {
                TensorKind::Embedding | TensorKind::Matrix => {
                    slot.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
                }
                TensorKind::Gain => slot.fill(1.0),
                TensorKind::Bias => {}
            }
        }
        Ok(Self {
            config,
            layout,
            params,
            forward_calls: AtomicU64::new(0),
        })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
            forward_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.config
            .tensors()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.config.tensors().into_iter().find(|t| t.name == name)?.range();
        Some(&mut self.params[range])
    }

    /// Number of sequences pushed through [`Denoiser::forward`] so far.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::Length {
                len,
                max_len: self.config.max_len,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        self.check_len(tokens.len())?;
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Vocab(format!("token id {t} out of range")));
        }
        Ok(())
    }

    /// Logits for one token run, `len × vocab`.
    pub fn forward_tokens(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        Ok(net::forward(&self.config, &self.layout, &self.params, tokens).logits)
    }

    pub fn forward(&self, batch: &[NoisySequence]) -> Result<LogitsGrid> {
        let seqs = batch
            .iter()
            .map(|s| self.forward_tokens(s.tokens()))
            .collect::<Result<Vec<_>>>()?;
        LogitsGrid::new(self.config.vocab_size, seqs)
    }

    /// Masked cross-entropy against each sequence's clean origin, with exact
    /// gradients for every parameter.
    pub fn loss_and_grad(&self, batch: &[NoisySequence]) -> Result<LossGrad> {
        let mut caches = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for s in batch {
            self.check_tokens(s.tokens())?;
            let origin = s
                .origin()
                .ok_or_else(|| Error::Precondition("training sequence has no clean origin".into()))?;
            targets.push(origin.tokens());
            caches.push(net::forward(&self.config, &self.layout, &self.params, s.tokens()));
        }
        let grid = LogitsGrid::new(
            self.config.vocab_size,
            caches.iter_mut().map(|c| std::mem::take(&mut c.logits)).collect(),
        )?;
        let masks: Vec<&[usize]> = batch.iter().map(NoisySequence::masked_positions).collect();
        let ce = masked_cross_entropy(&grid, &targets, &masks)?;
        let mut grads = vec![0.0; self.layout.total];
        for (b, cache) in caches.iter().enumerate() {
            if ce.per_example[b].is_some() {
                net::backward(&self.config, &self.layout, &self.params, cache, ce.dlogits.seq(b), &mut grads);
            }
        }
        Ok(LossGrad {
            loss: ce.loss,
            per_example: ce.per_example,
            grads,
        })
    }

    /// Loss only, used by gradient checks.
    pub fn loss(&self, batch: &[NoisySequence]) -> Result<f64> {
        let grid = self.forward(batch)?;
        let targets: Vec<&[u32]> = batch
            .iter()
            .map(|s| s.origin().map(|o| o.tokens()).unwrap_or(&[]))
            .collect();
        let masks: Vec<&[usize]> = batch.iter().map(NoisySequence::masked_positions).collect();
        Ok(masked_cross_entropy(&grid, &targets, &masks)?.loss)
    }
}

impl Predictor for Denoiser {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn logits(&self, batch: &[NoisySequence]) -> Result<LogitsGrid> {
        self.forward(batch)
    }
}
