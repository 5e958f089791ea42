//! Supervised fine-tuning with response-only (RO) or full-sequence (FS)
//! masking, and staged pipelines such as FS followed by RO.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, StageTag};
use crate::denoiser::{Denoiser, LossGrad};
use crate::error::{Error, Result};
use crate::noise::{mask_bernoulli, mask_fixed_count, sample_mask_ratio};
use crate::seed::{derive_seed, derived_rng, Rng, RngState};
use crate::sequence::{MaskingPolicy, NoisySequence, TokenSequence};

/// Redraws of `t` allowed before one maskable position is forced.
pub const MAX_MASK_REDRAWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageKind {
    ResponseOnly,
    FullSequence,
}

impl StageKind {
    pub fn policy(self) -> MaskingPolicy {
        match self {
            StageKind::ResponseOnly => MaskingPolicy::ResponseOnly,
            StageKind::FullSequence => MaskingPolicy::FullSequence,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            StageKind::ResponseOnly => "RO",
            StageKind::FullSequence => "FS",
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            StageKind::ResponseOnly => 4,
            StageKind::FullSequence => 8,
        }
    }
}

impl std::str::FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "RO" | "ro" | "response-only" => Ok(StageKind::ResponseOnly),
            "FS" | "fs" | "full-sequence" => Ok(StageKind::FullSequence),
            other => Err(Error::Config(format!("unknown stage kind {other:?}"))),
        }
    }
}

/// How the number of masked positions follows from the drawn ratio `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MaskSampler {
    /// exactly `⌊t·|region|⌋` positions
    #[default]
    FixedCount,
    /// each region position independently with probability `t`
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch_size: 32,
            epochs: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("peak_lr", self.peak_lr),
            ("eps", self.eps),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment coefficients must lie in [0,1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup reaching `peak_lr` at step `warmup_steps`, then cosine
    /// decay to zero at the final step.
    pub fn learning_rate(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let last = total_steps.saturating_sub(1);
        if last <= self.warmup_steps {
            return self.peak_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / (last - self.warmup_steps) as f64).min(1.0);
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: StageKind,
    pub config: TrainConfig,
    pub sampler: MaskSampler,
}

impl StageSpec {
    /// Toy defaults with the stage's default epoch count (FS 8, RO 4).
    pub fn new(kind: StageKind) -> Self {
        Self {
            kind,
            config: TrainConfig {
                epochs: kind.default_epochs(),
                ..TrainConfig::default()
            },
            sampler: MaskSampler::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: String,
    /// mean masking ratio over the batch
    pub t: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tstage\tt\tloss\tgrad_norm\tclipped_grad_norm\tlr\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.8}\t{:.8}\t{:.8}\t{:.8e}",
                r.step, r.stage, r.t, r.loss, r.grad_norm, r.clipped_grad_norm, r.lr
            );
        }
        out
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }
}

/// Draws one training mask for `seq` under `kind`'s policy. A draw that masks
/// nothing is redrawn up to [`MAX_MASK_REDRAWS`] times; after that one
/// uniformly chosen maskable position is masked.
pub fn draw_training_mask(
    seq: &TokenSequence,
    kind: StageKind,
    sampler: MaskSampler,
    mask_id: u32,
    rng: &mut Rng,
) -> Result<NoisySequence> {
    let policy = kind.policy();
    let region = policy.region_of(seq)?;
    if region.is_empty() {
        return Err(Error::Precondition(match kind {
            StageKind::ResponseOnly => "response-only masking needs a non-empty response".into(),
            StageKind::FullSequence => "cannot mask an empty sequence".into(),
        }));
    }
    let mut t = 0.0;
    for _ in 0..=MAX_MASK_REDRAWS {
        t = sample_mask_ratio(rng);
        let noisy = match sampler {
            MaskSampler::FixedCount => mask_fixed_count(seq, t, &policy, mask_id, rng)?,
            MaskSampler::Bernoulli => mask_bernoulli(seq, t, &policy, mask_id, rng)?,
        };
        if noisy.num_masked() > 0 {
            return Ok(noisy);
        }
    }
    let forced = region[rng.gen_range(0..region.len())];
    NoisySequence::from_clean(seq, &[forced], t, mask_id)
}

fn objective(
    model: &Denoiser,
    batch: &[TokenSequence],
    kind: StageKind,
    sampler: MaskSampler,
    mask_id: u32,
    rng: &mut Rng,
) -> Result<(LossGrad, Vec<NoisySequence>)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let noisy = batch
        .iter()
        .map(|s| draw_training_mask(s, kind, sampler, mask_id, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((model.loss_and_grad(&noisy)?, noisy))
}

/// Full-sequence objective: any position of prompt or response may be
/// masked; each example's loss is normalized by its mask-set size.
pub fn loss_full_sequence(
    model: &Denoiser,
    batch: &[TokenSequence],
    sampler: MaskSampler,
    mask_id: u32,
    rng: &mut Rng,
) -> Result<(LossGrad, Vec<NoisySequence>)> {
    objective(model, batch, StageKind::FullSequence, sampler, mask_id, rng)
}

/// Response-only objective: prompts stay clean; normalization is by the
/// number of masked response positions.
pub fn loss_response_only(
    model: &Denoiser,
    batch: &[TokenSequence],
    sampler: MaskSampler,
    mask_id: u32,
    rng: &mut Rng,
) -> Result<(LossGrad, Vec<NoisySequence>)> {
    if let Some(s) = batch.iter().find(|s| s.prompt_len() >= s.len()) {
        return Err(Error::Precondition(format!(
            "example of length {} has an empty response",
            s.len()
        )));
    }
    objective(model, batch, StageKind::ResponseOnly, sampler, mask_id, rng)
}

fn objective_with_masks(
    model: &Denoiser,
    batch: &[TokenSequence],
    masks: &[Vec<usize>],
    kind: StageKind,
    mask_id: u32,
) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    if masks.len() != batch.len() {
        return Err(Error::Precondition(format!(
            "{} mask sets for {} examples",
            masks.len(),
            batch.len()
        )));
    }
    let policy = kind.policy();
    let noisy = batch
        .iter()
        .zip(masks)
        .map(|(seq, m)| {
            let region = policy.region_of(seq)?;
            if let Some(&bad) = m.iter().find(|p| region.binary_search(p).is_err()) {
                return Err(Error::Precondition(format!(
                    "position {bad} is outside the {} region",
                    kind.tag()
                )));
            }
            let t = if m.is_empty() { 0.0 } else { m.len() as f64 / region.len() as f64 };
            NoisySequence::from_clean(seq, m, t.min(1.0), mask_id)
        })
        .collect::<Result<Vec<_>>>()?;
    model.loss_and_grad(&noisy)
}

/// [`loss_full_sequence`] with caller-chosen mask sets, one per example.
pub fn loss_full_sequence_masked(
    model: &Denoiser,
    batch: &[TokenSequence],
    masks: &[Vec<usize>],
    mask_id: u32,
) -> Result<LossGrad> {
    objective_with_masks(model, batch, masks, StageKind::FullSequence, mask_id)
}

/// [`loss_response_only`] with caller-chosen mask sets; every position must
/// lie in the response.
pub fn loss_response_only_masked(
    model: &Denoiser,
    batch: &[TokenSequence],
    masks: &[Vec<usize>],
    mask_id: u32,
) -> Result<LossGrad> {
    if let Some(s) = batch.iter().find(|s| s.prompt_len() >= s.len()) {
        return Err(Error::Precondition(format!(
            "example of length {} has an empty response",
            s.len()
        )));
    }
    objective_with_masks(model, batch, masks, StageKind::ResponseOnly, mask_id)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    decay: Vec<bool>,
    step: u64,
}

impl AdamW {
    pub fn new(model: &Denoiser) -> Self {
        let n = model.params().len();
        let mut decay = vec![false; n];
        for t in model.config().tensors() {
            if t.kind.decays() {
                decay[t.range()].fill(true);
            }
        }
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            if self.decay[i] {
                params[i] -= lr * cfg.weight_decay * params[i];
            }
            params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Rescales `grads` to norm at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub log: TrainLog,
    /// state of the masking stream when the stage finished
    pub rng_state: RngState,
}

pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> usize {
    dataset_len.div_ceil(batch_size)
}

/// Runs one fine-tuning stage in place.
///
/// Each epoch visits the dataset in an order shuffled with a seed derived
/// from `(seed, epoch)`; every visit draws one fresh mask per example.
pub fn train_stage(
    model: &mut Denoiser,
    dataset: &[TokenSequence],
    stage: &StageSpec,
    mask_id: u32,
    seed: u64,
) -> Result<StageOutcome> {
    stage.config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    let cfg = &stage.config;
    let per_epoch = steps_per_epoch(dataset.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut mask_rng = derived_rng(seed, "mask", 0);
    let mut opt = AdamW::new(model);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut derived_rng(seed, "shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let (mut lg, noisy) = match stage.kind {
                StageKind::FullSequence => loss_full_sequence(model, &batch, stage.sampler, mask_id, &mut mask_rng)?,
                StageKind::ResponseOnly => loss_response_only(model, &batch, stage.sampler, mask_id, &mut mask_rng)?,
            };
            if !lg.loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss: lg.loss });
            }
            let grad_norm = clip_grad_norm(&mut lg.grads, cfg.clip_norm);
            let clipped = lg.grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            let lr = cfg.learning_rate(step, total);
            opt.update(model.params_mut(), &lg.grads, lr, cfg);
            log.records.push(StepRecord {
                step,
                stage: stage.kind.tag().to_string(),
                t: noisy.iter().map(NoisySequence::t).sum::<f64>() / noisy.len() as f64,
                loss: lg.loss,
                grad_norm,
                clipped_grad_norm: clipped,
                lr,
            });
            step += 1;
        }
    }
    Ok(StageOutcome {
        log,
        rng_state: RngState::capture(&mask_rng),
    })
}

#[derive(Debug, Clone)]
pub struct StageArtifact {
    pub tag: StageTag,
    pub checkpoint: Checkpoint,
    pub path: Option<PathBuf>,
    pub param_hash: String,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: Denoiser,
    pub stages: Vec<StageArtifact>,
    pub log: TrainLog,
}

/// Runs `stages` in order, each continuing from the previous stage's
/// parameters, and checkpoints after every stage. With `checkpoint_dir`
/// set, stage `FS+RO` is written to `<dir>/FS-RO.ckpt`.
pub fn run_pipeline(
    mut model: Denoiser,
    stages: &[StageSpec],
    dataset: &[TokenSequence],
    mask_id: u32,
    vocab_hash: &str,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<PipelineOutcome> {
    if stages.is_empty() {
        return Err(Error::Config("at least one stage is required".into()));
    }
    let mut tag = StageTag::untrained();
    let mut artifacts = Vec::with_capacity(stages.len());
    let mut log = TrainLog::default();
    for (i, stage) in stages.iter().enumerate() {
        let outcome = train_stage(&mut model, dataset, stage, mask_id, derive_seed(seed, "stage", i as u64))?;
        tag = tag.then(stage.kind.tag());
        let ckpt = Checkpoint::from_model(&model, vocab_hash, tag.clone(), Some(outcome.rng_state));
        let path = match checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.ckpt", tag.file_stem()));
                ckpt.save(&path)?;
                Some(path)
            }
            None => None,
        };
        artifacts.push(StageArtifact {
            tag: tag.clone(),
            checkpoint: ckpt,
            path,
            param_hash: model.param_hash(),
        });
        log.extend(outcome.log);
    }
    Ok(PipelineOutcome {
        model,
        stages: artifacts,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::seed::rng_from_seed;
    use crate::vocab::Vocabulary;

    fn vocab() -> Vocabulary {
        Vocabulary::with_reserved((0..13).map(|i| format!("w{i}"))).unwrap()
    }

    fn config(v: &Vocabulary) -> DenoiserConfig {
        DenoiserConfig {
            vocab_size: v.size(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_len: 16,
            d_ff: 32,
        }
    }

    fn data(v: &Vocabulary, n: usize, seed: u64) -> Vec<TokenSequence> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                let tokens = (0..8).map(|_| rng.gen_range(3..v.size() as u32)).collect();
                TokenSequence::new(tokens, 3, v).unwrap()
            })
            .collect()
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig {
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let total = 100;
        assert_eq!(cfg.learning_rate(10, total), cfg.peak_lr);
        assert!(cfg.learning_rate(0, total) < cfg.peak_lr);
        assert!(cfg.learning_rate(total - 1, total) <= 1e-3 * cfg.peak_lr);
        for s in 10..total - 1 {
            assert!(cfg.learning_rate(s + 1, total) <= cfg.learning_rate(s, total));
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1, 0.1];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn response_only_never_masks_prompt() {
        let v = vocab();
        let mut rng = rng_from_seed(0);
        for seq in data(&v, 200, 1) {
            for sampler in [MaskSampler::FixedCount, MaskSampler::Bernoulli] {
                let n = draw_training_mask(&seq, StageKind::ResponseOnly, sampler, v.mask_id(), &mut rng).unwrap();
                assert!(n.num_masked() > 0);
                assert!(n.masked_positions().iter().all(|&p| p >= seq.prompt_len()));
            }
        }
    }

    #[test]
    fn empty_draw_forces_one_mask() {
        let v = vocab();
        let seq = TokenSequence::new(vec![3], 0, &v).unwrap();
        let mut rng = rng_from_seed(3);
        // |X| = 1: fixed-count masks one token only when t = 1, so redraws run out
        for _ in 0..50 {
            let n = draw_training_mask(&seq, StageKind::FullSequence, MaskSampler::FixedCount, v.mask_id(), &mut rng)
                .unwrap();
            assert_eq!(n.masked_positions(), &[0]);
        }
    }

    #[test]
    fn single_token_loss_is_negative_log_prob() {
        let v = vocab();
        let model = Denoiser::init(config(&v), 2).unwrap();
        let seq = TokenSequence::new(vec![5], 0, &v).unwrap();
        let mut rng = rng_from_seed(3);
        let (lg, noisy) =
            loss_full_sequence(&model, std::slice::from_ref(&seq), MaskSampler::FixedCount, v.mask_id(), &mut rng)
                .unwrap();
        let grid = model.forward(&noisy).unwrap();
        let lp = grid.log_softmax_row(0, 0);
        assert!((lg.loss + lp[5]).abs() < 1e-12);
    }

    #[test]
    fn response_only_rejects_empty_response() {
        let v = vocab();
        let model = Denoiser::init(config(&v), 2).unwrap();
        let seq = TokenSequence::new(vec![3, 4], 2, &v).unwrap();
        let mut rng = rng_from_seed(0);
        assert!(loss_response_only(&model, &[seq], MaskSampler::FixedCount, v.mask_id(), &mut rng).is_err());
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let v = vocab();
        let mut model = Denoiser::init(config(&v), 2).unwrap();
        model.tensor_mut("out.w").unwrap().fill(0.0);
        let mut rng = rng_from_seed(9);
        let (lg, _) = loss_full_sequence(&model, &data(&v, 6, 4), MaskSampler::FixedCount, v.mask_id(), &mut rng).unwrap();
        assert!((lg.loss - (v.size() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn response_only_logit_grads_vanish_on_prompt() {
        let v = vocab();
        let model = Denoiser::init(config(&v), 2).unwrap();
        let mut rng = rng_from_seed(1);
        let batch = data(&v, 4, 6);
        let noisy: Vec<NoisySequence> = batch
            .iter()
            .map(|s| draw_training_mask(s, StageKind::ResponseOnly, MaskSampler::FixedCount, v.mask_id(), &mut rng).unwrap())
            .collect();
        let grid = model.forward(&noisy).unwrap();
        let targets: Vec<&[u32]> = batch.iter().map(TokenSequence::tokens).collect();
        let masks: Vec<&[usize]> = noisy.iter().map(NoisySequence::masked_positions).collect();
        let ce = crate::denoiser::masked_cross_entropy(&grid, &targets, &masks).unwrap();
        for (b, s) in batch.iter().enumerate() {
            for pos in 0..s.prompt_len() {
                assert!(ce.dlogits.row(b, pos).iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn overfits_single_batch() {
        let v = vocab();
        let mut model = Denoiser::init(config(&v), 5).unwrap();
        // clean prompts identify each example, so the response loss can reach zero
        let batch = data(&v, 8, 2);
        let stage = StageSpec {
            kind: StageKind::ResponseOnly,
            sampler: MaskSampler::FixedCount,
            config: TrainConfig {
                peak_lr: 1e-2,
                warmup_steps: 10,
                batch_size: 8,
                epochs: 200,
                ..TrainConfig::default()
            },
        };
        let out = train_stage(&mut model, &batch, &stage, v.mask_id(), 4).unwrap();
        let recs = &out.log.records;
        assert_eq!(recs.len(), 200);
        let head: f64 = recs[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let tail: f64 = recs[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(tail < 0.1 * head, "initial {head} final {tail}");
        assert!(recs.iter().all(|r| r.clipped_grad_norm <= 1.0 + 1e-9));
        assert_eq!(recs[10].lr, stage.config.peak_lr);
        assert!(recs.last().unwrap().lr <= 1e-3 * stage.config.peak_lr);
    }

    #[test]
    fn pipeline_tags_and_reproducibility() {
        let v = vocab();
        let dataset = data(&v, 12, 8);
        let mut fs = StageSpec::new(StageKind::FullSequence);
        fs.config.epochs = 1;
        fs.config.batch_size = 4;
        let mut ro = StageSpec::new(StageKind::ResponseOnly);
        ro.config.epochs = 1;
        ro.config.batch_size = 4;
        let dir = tempfile::tempdir().unwrap();
        let run = |dir: Option<&Path>| {
            run_pipeline(Denoiser::init(config(&v), 1).unwrap(), &[fs, ro], &dataset, v.mask_id(), &v.hash(), 77, dir)
                .unwrap()
        };
        let a = run(Some(dir.path()));
        let tags: Vec<&str> = a.stages.iter().map(|s| s.tag.as_str()).collect();
        assert_eq!(tags, ["FS", "FS+RO"]);
        assert!(dir.path().join("FS.ckpt").exists());
        assert!(dir.path().join("FS-RO.ckpt").exists());
        let b = run(None);
        assert_eq!(a.model, b.model);
        assert_eq!(
            a.stages[1].checkpoint.to_bytes().unwrap(),
            b.stages[1].checkpoint.to_bytes().unwrap()
        );
    }

    #[test]
    fn default_epochs() {
        assert_eq!(StageSpec::new(StageKind::FullSequence).config.epochs, 8);
        assert_eq!(StageSpec::new(StageKind::ResponseOnly).config.epochs, 4);
    }
}
