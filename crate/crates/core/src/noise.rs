//! Forward (masking) process: the linear noise schedule `σ(t) = t·σ_max`,
//! survival probability `α_t = exp(-σ(t))`, and the two masking samplers.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::sequence::{MaskingPolicy, NoisySequence, TokenSequence};

/// Smallest timestep accepted by [`nelbo_weight`]; the weight has a pole at 0.
pub const T_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_max: 10.0 }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_max: f64) -> Result<Self> {
        if !(sigma_max > 0.0 && sigma_max.is_finite()) {
            return Err(Error::Config(format!("sigma_max must be positive, got {sigma_max}")));
        }
        Ok(Self { sigma_max })
    }

    /// Probability that a token survives (stays unmasked) at time `t`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("timestep {t} outside [0,1]")));
        }
        Ok((-t * self.sigma_max).exp())
    }

    /// `-α'_t / (1 - α_t) = σ_max·α_t / (1 - α_t)`, the positive NELBO weight.
    pub fn nelbo_weight(&self, t: f64) -> Result<f64> {
        if !(T_MIN..=1.0).contains(&t) {
            return Err(Error::Domain(format!("timestep {t} outside [{T_MIN},1]")));
        }
        let alpha = (-t * self.sigma_max).exp();
        // exp_m1 keeps 1 - α accurate for small σ(t)
        Ok(self.sigma_max * alpha / -(-t * self.sigma_max).exp_m1())
    }
}

/// Masking ratio `t ~ U(0, 1]`.
pub fn sample_mask_ratio(rng: &mut Rng) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Masks exactly `⌊t·|region|⌋` positions of the policy region, chosen
/// uniformly without replacement.
pub fn mask_fixed_count(
    seq: &TokenSequence,
    t: f64,
    policy: &MaskingPolicy,
    mask_id: u32,
    rng: &mut Rng,
) -> Result<NoisySequence> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("masking ratio {t} outside [0,1]")));
    }
    let region = policy.region_of(seq)?;
    let count = (t * region.len() as f64).floor() as usize;
    let positions: Vec<usize> = if count == 0 {
        Vec::new()
    } else {
        sample(rng, region.len(), count)
            .into_iter()
            .map(|i| region[i])
            .collect()
    };
    NoisySequence::from_clean(seq, &positions, t, mask_id)
}

/// Masks each position of the policy region independently with probability `p`.
/// The resulting sequence records `t = p`.
pub fn mask_bernoulli(
    seq: &TokenSequence,
    p: f64,
    policy: &MaskingPolicy,
    mask_id: u32,
    rng: &mut Rng,
) -> Result<NoisySequence> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("masking probability {p} outside [0,1]")));
    }
    let region = policy.region_of(seq)?;
    // one draw per region position, even at p = 0 or 1, so streams stay aligned
    let positions: Vec<usize> = region
        .into_iter()
        .filter(|_| rng.gen::<f64>() < p)
        .collect();
    let t = if positions.is_empty() { 0.0 } else { p };
    NoisySequence::from_clean(seq, &positions, t, mask_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use crate::vocab::Vocabulary;

    fn setup(len: usize, prompt_len: usize) -> (Vocabulary, TokenSequence) {
        let v = Vocabulary::with_reserved(["a", "b", "c", "d"]).unwrap();
        let tokens = (0..len).map(|i| 3 + (i % 4) as u32).collect();
        let seq = TokenSequence::new(tokens, prompt_len, &v).unwrap();
        (v, seq)
    }

    #[test]
    fn mask_ratio_in_half_open_unit_interval() {
        let mut rng = rng_from_seed(1);
        for _ in 0..10_000 {
            let t = sample_mask_ratio(&mut rng);
            assert!(t > 0.0 && t <= 1.0);
        }
    }

    #[test]
    fn mask_ratio_mean_and_determinism() {
        let mut rng = rng_from_seed(11);
        // streaming mean oracle
        let mut mean = 0.0;
        for n in 1..=100_000u32 {
            let t = sample_mask_ratio(&mut rng);
            mean += (t - mean) / f64::from(n);
        }
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");

        let mut a = rng_from_seed(5);
        let mut b = rng_from_seed(5);
        for _ in 0..100 {
            assert_eq!(sample_mask_ratio(&mut a).to_bits(), sample_mask_ratio(&mut b).to_bits());
        }
    }

    #[test]
    fn alpha_values() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha(1.0).unwrap(), (-10.0f64).exp());
        // exp(-5) = 0.006737946999085467...
        assert!((s.alpha(0.5).unwrap() - 6.737_947e-3).abs() < 1e-7);
        assert!(s.alpha(1.5).is_err());
        assert!(s.alpha(-0.1).is_err());
    }

    #[test]
    fn nelbo_weight_values() {
        let s = NoiseSchedule::default();
        // 10·e^-10 / (1 - e^-10) = 4.5402e-4 ; 10·e^-5 / (1 - e^-5) = 6.7836e-2
        assert!((s.nelbo_weight(1.0).unwrap() - 4.5402e-4).abs() < 1e-8);
        assert!((s.nelbo_weight(0.5).unwrap() - 6.7836e-2).abs() < 1e-6);
        assert!(s.nelbo_weight(0.0).is_err());
        assert!(s.nelbo_weight(1e-4).is_err());
    }

    #[test]
    fn schedule_monotone() {
        let s = NoiseSchedule::default();
        let grid: Vec<f64> = (0..=1000).map(|i| T_MIN + (1.0 - T_MIN) * i as f64 / 1000.0).collect();
        for w in grid.windows(2) {
            assert!(s.alpha(w[1]).unwrap() < s.alpha(w[0]).unwrap());
            assert!(s.nelbo_weight(w[1]).unwrap() < s.nelbo_weight(w[0]).unwrap());
        }
    }

    #[test]
    fn fixed_count_examples() {
        let (v, seq) = setup(8, 3);
        let mut rng = rng_from_seed(0);
        let full = MaskingPolicy::FullSequence;
        assert_eq!(mask_fixed_count(&seq, 0.5, &full, v.mask_id(), &mut rng).unwrap().num_masked(), 4);
        assert_eq!(mask_fixed_count(&seq, 0.999, &full, v.mask_id(), &mut rng).unwrap().num_masked(), 7);
        let none = mask_fixed_count(&seq, 0.0, &full, v.mask_id(), &mut rng).unwrap();
        assert_eq!(none.num_masked(), 0);
        assert_eq!(none.tokens(), seq.tokens());
    }

    #[test]
    fn bernoulli_extremes() {
        let (v, seq) = setup(10, 4);
        let mut rng = rng_from_seed(0);
        let ro = MaskingPolicy::ResponseOnly;
        let none = mask_bernoulli(&seq, 0.0, &ro, v.mask_id(), &mut rng).unwrap();
        assert_eq!(none.tokens(), seq.tokens());
        let all = mask_bernoulli(&seq, 1.0, &ro, v.mask_id(), &mut rng).unwrap();
        assert_eq!(all.masked_positions(), &[4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn bernoulli_binomial_band() {
        // counting oracle over 1000 seeds: count in [450, 550] on >= 99% of them
        let (v, seq) = setup(1000, 0);
        let inside = (0..1000u64)
            .filter(|&s| {
                let mut rng = rng_from_seed(s);
                let n = mask_bernoulli(&seq, 0.5, &MaskingPolicy::FullSequence, v.mask_id(), &mut rng)
                    .unwrap()
                    .num_masked();
                (450..=550).contains(&n)
            })
            .count();
        assert!(inside >= 990, "{inside} of 1000 seeds inside the band");
    }
}
