//! The four loss heads and their weighted combination.

use crate::data::PAD_ID;

use super::params::ModelParams;
use super::{ModelConfig, ModelError};

/// Sub-losses, the L2 term, and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_c: f64,
    pub l_g: f64,
    pub l_a: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.l_r.is_finite()
            && self.l_c.is_finite()
            && self.l_g.is_finite()
            && self.l_a.is_finite()
            && self.reg.is_finite()
    }
}

/// total = pl·L_r + λ_c·L_c + gl·L_g + al·L_a + λ_l·‖Θ‖², exactly.
pub fn combine_losses(
    l_r: f64,
    l_c: f64,
    l_g: f64,
    l_a: f64,
    sq_norm: f64,
    cfg: &ModelConfig,
) -> LossBreakdown {
    let reg = cfg.lambda_l * sq_norm;
    LossBreakdown {
        l_r,
        l_c,
        l_g,
        l_a,
        reg,
        total: cfg.pl * l_r + cfg.lambda_c * l_c + cfg.gl * l_g + cfg.al * l_a + reg,
    }
}

/// Mean squared error over a batch of rating predictions.
pub fn rating_loss(preds: &[f64], truths: &[f64]) -> Result<f64, ModelError> {
    if preds.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if preds.len() != truths.len() {
        return Err(ModelError::LengthMismatch(preds.len(), truths.len()));
    }
    let sum: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (t - p) * (t - p))
        .sum();
    Ok(sum / preds.len() as f64)
}

fn non_pad_count(targets: &[u32]) -> usize {
    targets.iter().filter(|&&t| t != PAD_ID).count()
}

/// Teacher-forced NLL: `dists[t]` predicts `targets[t]`; PAD targets are
/// excluded from both the sum and the mean.
pub fn generation_loss(dists: &[Vec<f64>], targets: &[u32]) -> Result<f64, ModelError> {
    if dists.len() != targets.len() {
        return Err(ModelError::LengthMismatch(dists.len(), targets.len()));
    }
    let n = non_pad_count(targets);
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (dist, &t) in dists.iter().zip(targets) {
        if t != PAD_ID {
            sum -= dist[t as usize].ln();
        }
    }
    Ok(sum / n as f64)
}

/// Bag-of-words NLL of the whole target under the single distribution taken
/// from the id-slot hidden state.
pub fn context_loss(dist: &[f64], targets: &[u32]) -> f64 {
    let n = non_pad_count(targets);
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = targets
        .iter()
        .filter(|&&t| t != PAD_ID)
        .map(|&t| -dist[t as usize].ln())
        .sum();
    sum / n as f64
}

/// Same as [`context_loss`] but computing the distribution from the hidden
/// state through the vocabulary head.
pub fn context_loss_from_hidden(hidden: &[f64], targets: &[u32], params: &ModelParams) -> f64 {
    let dist = super::forward::vocab_distribution(hidden, params);
    context_loss(&dist, targets)
}

/// Aspect discriminator: timesteps whose target is one of the selected
/// aspect words contribute −log e_t[target]; everything else contributes 0.
/// The mean runs over all non-PAD timesteps.
pub fn aspect_loss(dists: &[Vec<f64>], targets: &[u32], aspect_ids: &[u32]) -> f64 {
    let n = non_pad_count(targets);
    if n == 0 || aspect_ids.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for (dist, &t) in dists.iter().zip(targets) {
        if t != PAD_ID && aspect_ids.binary_search(&t).is_ok() {
            sum -= dist[t as usize].ln();
        }
    }
    sum / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;

    #[test]
    fn perfect_predictions_zero_loss() {
        assert_eq!(rating_loss(&[1.0, 4.5], &[1.0, 4.5]).unwrap(), 0.0);
    }

    #[test]
    fn rating_loss_hand_case() {
        let l = rating_loss(&[1.0, 2.0], &[1.0, 4.0]).unwrap();
        assert_eq!(l, 2.0);
    }

    #[test]
    fn rating_loss_matches_naive_two_pass_summation() {
        let preds: Vec<f64> = (0..17).map(|i| (i as f64 * 0.77).sin() * 2.0 + 3.0).collect();
        let truths: Vec<f64> = (0..17).map(|i| (i as f64 * 0.31).cos() * 2.0 + 3.0).collect();
        let got = rating_loss(&preds, &truths).unwrap();
        // Naive oracle: accumulate squared errors one by one, divide once.
        let mut acc = 0.0;
        for i in 0..preds.len() {
            let d = truths[i] - preds[i];
            acc += d * d;
        }
        let expect = acc / preds.len() as f64;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn rating_loss_empty_batch_errors() {
        assert!(rating_loss(&[], &[]).is_err());
        assert!(rating_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn uniform_generation_loss_is_log_v() {
        let v = 8usize;
        let uniform = vec![1.0 / v as f64; v];
        let dists = vec![uniform.clone(), uniform.clone(), uniform];
        let l = generation_loss(&dists, &[4, 5, 6]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_generation_loss_is_zero() {
        let mut d = vec![0.0f64; 8];
        d[5] = 1.0;
        let l = generation_loss(&[d], &[5]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn generation_loss_three_token_hand_case() {
        // Hand-built distributions; expected value is the mean of
        // -ln(0.5), -ln(0.25), -ln(0.125).
        let mut d1 = vec![0.0625; 8];
        d1[4] = 0.5;
        let mut d2 = vec![0.1; 8];
        d2[5] = 0.25;
        let mut d3 = vec![0.125; 8];
        d3[6] = 0.125;
        let l = generation_loss(&[d1, d2, d3], &[4, 5, 6]).unwrap();
        let expect = (0.5f64.ln() + 0.25f64.ln() + 0.125f64.ln()) / -3.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn pad_targets_are_excluded() {
        let mut hit = vec![0.0f64; 8];
        hit[4] = 1.0;
        let uniform = vec![1.0 / 8.0; 8];
        let l = generation_loss(&[hit, uniform], &[4, crate::data::PAD_ID]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn generation_loss_length_mismatch_errors() {
        let uniform = vec![1.0 / 8.0; 8];
        assert!(generation_loss(&[uniform], &[4, 5]).is_err());
    }

    #[test]
    fn context_loss_uniform_is_log_v() {
        let uniform = vec![1.0 / 8.0; 8];
        let l = context_loss(&uniform, &[4, 5, 6]);
        assert!((l - 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn context_loss_certain_token_is_zero() {
        let mut d = vec![0.0f64; 8];
        d[6] = 1.0;
        assert_eq!(context_loss(&d, &[6]), 0.0);
    }

    #[test]
    fn context_loss_three_token_hand_case() {
        let d = vec![0.1, 0.2, 0.3, 0.4];
        let l = context_loss(&d, &[0, 3, 3]);
        let expect = -(0.1f64.ln() + 0.4f64.ln() + 0.4f64.ln()) / 3.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn aspect_loss_empty_set_is_zero() {
        let uniform = vec![0.25f64; 4];
        assert_eq!(aspect_loss(&[uniform], &[2], &[]), 0.0);
    }

    #[test]
    fn aspect_loss_certain_hit_is_zero() {
        let mut d = vec![0.0f64; 8];
        d[5] = 1.0;
        assert_eq!(aspect_loss(&[d], &[5], &[5]), 0.0);
    }

    #[test]
    fn aspect_loss_hand_case_two_hits_of_four() {
        // Four steps, aspects {4, 6}; targets hit at steps 0 and 2.
        let d0 = vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0];
        let d1 = vec![0.125; 8];
        let d2 = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.75, 0.25, 0.0];
        let d3 = vec![0.125; 8];
        let l = aspect_loss(&[d0, d1, d2, d3], &[4, 5, 6, 7], &[4, 6]);
        let expect = -(0.5f64.ln() + 0.25f64.ln()) / 4.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn combine_matches_the_weighted_sum_identity() {
        let cfg = tiny_config();
        let b = combine_losses(1.0, 1.0, 1.0, 1.0, 0.0, &cfg);
        assert!((b.total - 2.05).abs() < 1e-12);
        let b0 = combine_losses(0.0, 0.0, 0.0, 0.0, 0.0, &cfg);
        assert_eq!(b0.total, 0.0);
    }

    #[test]
    fn doubling_gl_doubles_exactly_the_generation_contribution() {
        let mut cfg = tiny_config();
        let base = combine_losses(0.3, 0.7, 1.3, 0.2, 4.0, &cfg);
        cfg.gl *= 2.0;
        let doubled = combine_losses(0.3, 0.7, 1.3, 0.2, 4.0, &cfg);
        assert!((doubled.total - base.total - 1.3).abs() < 1e-12);
    }
}
