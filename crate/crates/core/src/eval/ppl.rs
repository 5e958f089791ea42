//! Diffusion perplexity: `exp(NELBO / L)` with a Monte Carlo NELBO.
//!
//! The NELBO of a clean sequence under the linear schedule is
//!
//! ```text
//! ∫₀¹ σ_max·α_t/(1-α_t) · E_{M ~ Bern(1-α_t)} [ Σ_{i∈M} -log p(x_i | x_M) ] dt
//! ```
//!
//! Two estimators are provided. [`PplEstimator::TimeSampled`] draws `t`
//! uniformly on `[t_min, 1]` and weights the masked log-loss by the schedule
//! weight. [`PplEstimator::MaskCount`] integrates `t` out analytically:
//! conditioned on `|M| = n` the mask is a uniform `n`-subset, and the time
//! integral of the weighted binomial probability of `n` collapses to
//! `P(Bin(L, p_max) ≥ n) / n` with `p_max = 1 - e^{-σ_max}`. Drawing `n`
//! uniformly from `1..=L` then gives an unbiased estimate over the whole
//! interval `(0, 1]` without a pole at `t = 0`.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::KeyValue;
use crate::denoiser::{LogitsGrid, Predictor};
use crate::error::{Error, Result};
use crate::noise::{NoiseSchedule, T_MIN};
use crate::seed::{derived_rng, Rng};
use crate::sequence::{MaskingPolicy, NoisySequence, TokenSequence};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum PplEstimator {
    #[default]
    MaskCount,
    TimeSampled { t_min: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplConfig {
    pub mc_samples: usize,
    pub schedule: NoiseSchedule,
    pub region: MaskingPolicy,
    pub estimator: PplEstimator,
    pub seed: u64,
    /// sequences per predictor call
    pub batch_size: usize,
}

impl Default for PplConfig {
    fn default() -> Self {
        Self {
            mc_samples: 1000,
            schedule: NoiseSchedule::default(),
            region: MaskingPolicy::FullSequence,
            estimator: PplEstimator::default(),
            seed: 0,
            batch_size: 64,
        }
    }
}

impl PplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let PplEstimator::TimeSampled { t_min } = self.estimator {
            if !(T_MIN..1.0).contains(&t_min) {
                return Err(Error::Config(format!("t_min must lie in [{T_MIN}, 1), got {t_min}")));
            }
        }
        NoiseSchedule::new(self.schedule.sigma_max).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplEstimate {
    pub ppl: f64,
    pub nelbo_per_token: f64,
    pub mc_samples: usize,
    /// standard error of the NELBO estimate (not per token); 0 when a
    /// sequence received a single draw
    pub std_err: f64,
    /// number of region positions the NELBO is normalized by
    pub tokens: usize,
}

impl PplEstimate {
    pub fn nelbo(&self) -> f64 {
        self.nelbo_per_token * self.tokens as f64
    }

    pub fn std_err_per_token(&self) -> f64 {
        self.std_err / self.tokens as f64
    }
}

impl KeyValue for PplEstimate {
    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("ppl", format!("{}", self.ppl)),
            ("nelbo_per_token", format!("{}", self.nelbo_per_token)),
            ("mc_samples", self.mc_samples.to_string()),
            ("std_err", format!("{}", self.std_err)),
            ("tokens", self.tokens.to_string()),
        ]
    }
}

/// `tails[n] = P(Bin(len, p) ≥ n)` for `n = 0..=len`, with `ln p` and
/// `ln(1 - p)` supplied so that `p` near 1 stays exact.
fn binomial_upper_tails(len: usize, ln_p: f64, ln_q: f64) -> Vec<f64> {
    let mut ln_fact = vec![0.0; len + 1];
    for i in 1..=len {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let pmf: Vec<f64> = (0..=len)
        .map(|k| {
            let ln_choose = ln_fact[len] - ln_fact[k] - ln_fact[len - k];
            let a = if k == 0 { 0.0 } else { k as f64 * ln_p };
            let b = if k == len { 0.0 } else { (len - k) as f64 * ln_q };
            (ln_choose + a + b).exp()
        })
        .collect();
    let mut tails = vec![0.0; len + 2];
    for k in (0..=len).rev() {
        tails[k] = tails[k + 1] + pmf[k];
    }
    tails.truncate(len + 1);
    tails
}

fn masked_nll(grid: &LogitsGrid, b: usize, noisy: &NoisySequence, clean: &[TokenId]) -> f64 {
    noisy
        .masked_positions()
        .iter()
        .map(|&i| {
            let row = grid.row(b, i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[clean[i] as usize]
        })
        .sum()
}

/// Per-draw weighted NELBO values for one sequence.
fn draw_values<P: Predictor + ?Sized>(
    model: &P,
    seq: &TokenSequence,
    mask_id: TokenId,
    cfg: &PplConfig,
    draws: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let region = cfg.region.region_of(seq)?;
    let len = region.len();
    if len == 0 {
        return Err(Error::Precondition("perplexity region is empty".into()));
    }
    let sigma = cfg.schedule.sigma_max;
    let count_weights: Vec<f64> = match cfg.estimator {
        PplEstimator::MaskCount => {
            let tails = binomial_upper_tails(len, (-(-sigma).exp_m1()).ln(), -sigma);
            (0..=len)
                .map(|n| if n == 0 { 0.0 } else { len as f64 * tails[n] / n as f64 })
                .collect()
        }
        PplEstimator::TimeSampled { .. } => Vec::new(),
    };

    let mut values = vec![0.0; draws];
    let mut pending: Vec<(usize, f64, NoisySequence)> = Vec::with_capacity(cfg.batch_size);
    let flush = |pending: &mut Vec<(usize, f64, NoisySequence)>, values: &mut [f64]| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let batch: Vec<NoisySequence> = pending.iter().map(|(_, _, s)| s.clone()).collect();
        let grid = model.logits(&batch)?;
        for (b, (idx, weight, noisy)) in pending.iter().enumerate() {
            values[*idx] = weight * masked_nll(&grid, b, noisy, seq.tokens());
        }
        pending.clear();
        Ok(())
    };
    for d in 0..draws {
        let (positions, t, weight) = match cfg.estimator {
            PplEstimator::MaskCount => {
                let n = rng.gen_range(1..=len);
                let pos: Vec<usize> = sample(rng, len, n).into_iter().map(|i| region[i]).collect();
                (pos, n as f64 / len as f64, count_weights[n])
            }
            PplEstimator::TimeSampled { t_min } => {
                let t = t_min + (1.0 - t_min) * rng.gen::<f64>();
                let p = 1.0 - cfg.schedule.alpha(t)?;
                let pos: Vec<usize> = region.iter().copied().filter(|_| rng.gen::<f64>() < p).collect();
                (pos, t, cfg.schedule.nelbo_weight(t)?)
            }
        };
        if positions.is_empty() {
            continue;
        }
        pending.push((d, weight, NoisySequence::from_clean(seq, &positions, t, mask_id)?));
        if pending.len() == cfg.batch_size {
            flush(&mut pending, &mut values)?;
        }
    }
    flush(&mut pending, &mut values)?;
    Ok(values)
}

fn mean_and_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Diffusion perplexity of one sequence over `cfg.region`, normalized by the
/// region size.
pub fn diffusion_ppl<P: Predictor + ?Sized>(
    model: &P,
    seq: &TokenSequence,
    mask_id: TokenId,
    cfg: &PplConfig,
) -> Result<PplEstimate> {
    corpus_ppl(model, std::slice::from_ref(seq), mask_id, cfg)
}

/// Corpus perplexity `exp(Σ NELBO_s / Σ L_s)`. The `mc_samples` draws are
/// spread evenly over the sequences (earlier sequences take the remainder),
/// and sequence `s` uses its own stream derived from `(seed, s)`.
pub fn corpus_ppl<P: Predictor + ?Sized>(
    model: &P,
    seqs: &[TokenSequence],
    mask_id: TokenId,
    cfg: &PplConfig,
) -> Result<PplEstimate> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::Precondition("no sequences to evaluate".into()));
    }
    if cfg.mc_samples < seqs.len() {
        return Err(Error::Config(format!(
            "{} draws cannot cover {} sequences",
            cfg.mc_samples,
            seqs.len()
        )));
    }
    let (base, extra) = (cfg.mc_samples / seqs.len(), cfg.mc_samples % seqs.len());
    let mut nelbo = 0.0;
    let mut var = 0.0;
    let mut tokens = 0;
    for (s, seq) in seqs.iter().enumerate() {
        let draws = base + usize::from(s < extra);
        let mut rng = derived_rng(cfg.seed, "ppl", s as u64);
        let values = draw_values(model, seq, mask_id, cfg, draws, &mut rng)?;
        let (m, v) = mean_and_var(&values);
        nelbo += m;
        var += v / draws as f64;
        tokens += cfg.region.region_of(seq)?.len();
    }
    let per_token = nelbo / tokens as f64;
    Ok(PplEstimate {
        ppl: per_token.exp(),
        nelbo_per_token: per_token,
        mc_samples: cfg.mc_samples,
        std_err: var.sqrt(),
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Denoiser, DenoiserConfig};
    use crate::vocab::Vocabulary;

    /// Constant logits: every row is `row`.
    struct Fixed(Vec<f64>);

    impl Predictor for Fixed {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }

        fn logits(&self, batch: &[NoisySequence]) -> Result<LogitsGrid> {
            LogitsGrid::new(self.0.len(), batch.iter().map(|s| self.0.repeat(s.len())).collect())
        }
    }

    /// Puts all mass on the clean token.
    struct Oracle(TokenSequence, usize);

    impl Predictor for Oracle {
        fn vocab_size(&self) -> usize {
            self.1
        }

        fn logits(&self, batch: &[NoisySequence]) -> Result<LogitsGrid> {
            let seqs = batch
                .iter()
                .map(|_| {
                    let mut out = vec![f64::NEG_INFINITY; self.0.len() * self.1];
                    for (i, &t) in self.0.tokens().iter().enumerate() {
                        out[i * self.1 + t as usize] = 0.0;
                    }
                    out
                })
                .collect();
            LogitsGrid::new(self.1, seqs)
        }
    }

    fn seq(len: usize, vocab: usize) -> (Vocabulary, TokenSequence) {
        let v = Vocabulary::with_reserved((3..vocab).map(|i| format!("w{i}"))).unwrap();
        let tokens = (0..len).map(|i| 3 + (i * 7 % (vocab - 3)) as u32).collect();
        let s = TokenSequence::new(tokens, len / 2, &v).unwrap();
        (v, s)
    }

    #[test]
    fn binomial_tails_match_direct_sum() {
        let p: f64 = 0.3;
        let tails = binomial_upper_tails(5, p.ln(), (1.0 - p).ln());
        assert!((tails[0] - 1.0).abs() < 1e-12);
        let p5 = p.powi(5);
        assert!((tails[5] - p5).abs() < 1e-15);
        let p4 = 5.0 * p.powi(4) * (1.0 - p) + p5;
        assert!((tails[4] - p4).abs() < 1e-14);
    }

    #[test]
    fn mask_count_is_exact_for_uniform_predictor_mean() {
        // the mean over all n of L·w_n·n·lnV equals L·p_max·lnV
        let len = 12;
        let sigma: f64 = 10.0;
        let tails = binomial_upper_tails(len, (-(-sigma).exp_m1()).ln(), -sigma);
        let mean: f64 = (1..=len).map(|n| tails[n]).sum::<f64>();
        let p_max = -(-sigma).exp_m1();
        assert!((mean - len as f64 * p_max).abs() < 1e-10);
    }

    #[test]
    fn uniform_predictor_gives_vocab_power() {
        let (v, s) = seq(16, 64);
        let model = Fixed(vec![0.0; 64]);
        let cfg = PplConfig {
            mc_samples: 500,
            ..Default::default()
        };
        let est = diffusion_ppl(&model, &s, v.mask_id(), &cfg).unwrap();
        let expected = 64f64.powf(-(-10f64).exp_m1());
        assert!((est.ppl / expected - 1.0).abs() < 0.02, "{est:?}");
    }

    #[test]
    fn perfect_predictor_is_one() {
        let (v, s) = seq(10, 20);
        let model = Oracle(s.clone(), 20);
        for estimator in [PplEstimator::MaskCount, PplEstimator::TimeSampled { t_min: T_MIN }] {
            let cfg = PplConfig {
                mc_samples: 50,
                estimator,
                ..Default::default()
            };
            let est = diffusion_ppl(&model, &s, v.mask_id(), &cfg).unwrap();
            assert_eq!(est.nelbo_per_token, 0.0);
            assert_eq!(est.ppl, 1.0);
        }
    }

    #[test]
    fn zero_samples_rejected() {
        let (v, s) = seq(4, 8);
        let cfg = PplConfig {
            mc_samples: 0,
            ..Default::default()
        };
        assert!(matches!(diffusion_ppl(&Fixed(vec![0.0; 8]), &s, v.mask_id(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn spans_over_full_range_match_full_sequence() {
        let (v, s) = seq(9, 16);
        let model = Denoiser::init(
            DenoiserConfig {
                vocab_size: 16,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                max_len: 9,
                d_ff: 16,
            },
            2,
        )
        .unwrap();
        for estimator in [PplEstimator::MaskCount, PplEstimator::TimeSampled { t_min: T_MIN }] {
            let full = PplConfig {
                mc_samples: 40,
                estimator,
                seed: 5,
                ..Default::default()
            };
            let spans = PplConfig {
                region: MaskingPolicy::Spans(vec![0..9]),
                ..full.clone()
            };
            let a = diffusion_ppl(&model, &s, v.mask_id(), &full).unwrap();
            let b = diffusion_ppl(&model, &s, v.mask_id(), &spans).unwrap();
            assert_eq!(a.ppl.to_bits(), b.ppl.to_bits());
        }
    }

    #[test]
    fn response_region_normalizes_by_response_length() {
        let (v, s) = seq(10, 20);
        let cfg = PplConfig {
            mc_samples: 20,
            region: MaskingPolicy::ResponseOnly,
            ..Default::default()
        };
        let est = diffusion_ppl(&Fixed(vec![0.0; 20]), &s, v.mask_id(), &cfg).unwrap();
        assert_eq!(est.tokens, 5);
    }

    #[test]
    fn corpus_requires_a_draw_per_sequence() {
        let (v, s) = seq(6, 10);
        let cfg = PplConfig {
            mc_samples: 1,
            ..Default::default()
        };
        let model = Fixed(vec![0.0; 10]);
        assert!(corpus_ppl(&model, &[s.clone(), s], v.mask_id(), &cfg).is_err());
    }

    #[test]
    fn key_value_record() {
        let est = PplEstimate {
            ppl: 2.0,
            nelbo_per_token: 2f64.ln(),
            mc_samples: 3,
            std_err: 0.5,
            tokens: 4,
        };
        let kv = est.to_kv();
        assert!(kv.starts_with("ppl=2\n"));
        assert!(kv.contains("mc_samples=3\n"));
    }
}
