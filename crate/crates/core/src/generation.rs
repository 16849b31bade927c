//! Greedy autoregressive decoding and fixed-length padding.

use crate::data::{EOS_ID, PAD_ID};
use crate::model::{
    build_mask, forward, vocab_distribution, InputSequence, ModelConfig, ModelError, ModelParams,
    PREFIX_LEN,
};

/// Argmax with ties broken toward the lowest token id.
fn argmax(dist: &[f64]) -> u32 {
    let mut best = 0usize;
    let mut best_p = f64::NEG_INFINITY;
    for (i, &p) in dist.iter().enumerate() {
        if p > best_p {
            best_p = p;
            best = i;
        }
    }
    best as u32
}

/// Decode up to `max_len` tokens for an assembled prefix (its `tokens` field
/// is ignored). Generation stops when EOS wins the argmax; EOS itself is not
/// emitted. Every step recomputes the full forward pass, so each new token
/// conditions on everything generated so far.
pub fn greedy_decode(
    prefix: &InputSequence,
    params: &ModelParams,
    cfg: &ModelConfig,
    max_len: usize,
) -> Result<Vec<u32>, ModelError> {
    let mut seq = prefix.clone();
    seq.tokens.clear();
    let mut out: Vec<u32> = Vec::new();
    for _ in 0..max_len {
        let mask = build_mask(seq.seq_len())?;
        let hidden = forward(&seq, &mask, params, cfg);
        let dist = vocab_distribution(hidden.row(PREFIX_LEN + out.len()), params);
        let token = argmax(&dist);
        if token == EOS_ID {
            break;
        }
        out.push(token);
        seq.tokens.push(token);
    }
    Ok(out)
}

/// Right-pad with PAD or truncate to exactly `len` tokens.
pub fn pad_truncate(tokens: &[u32], len: usize) -> Vec<u32> {
    let mut out: Vec<u32> = tokens.iter().take(len).copied().collect();
    while out.len() < len {
        out.push(PAD_ID);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{testutil::example_seq, tiny_config};
    use crate::training::init_params;

    #[test]
    fn pad_truncate_pads_short_sequences() {
        assert_eq!(pad_truncate(&[4, 5, 6], 5), vec![4, 5, 6, PAD_ID, PAD_ID]);
    }

    #[test]
    fn pad_truncate_cuts_long_sequences() {
        assert_eq!(pad_truncate(&[4, 5, 6, 7, 8, 9, 10], 5), vec![4, 5, 6, 7, 8]);
    }

    #[test]
    fn pad_truncate_identity_at_exact_length() {
        assert_eq!(pad_truncate(&[4, 5, 6], 3), vec![4, 5, 6]);
    }

    #[test]
    fn eos_keeps_its_place_when_within_bound() {
        assert_eq!(pad_truncate(&[4, EOS_ID], 4), vec![4, EOS_ID, PAD_ID, PAD_ID]);
    }

    #[test]
    fn eos_peak_on_first_step_gives_empty_explanation() {
        let cfg = tiny_config();
        let mut params = crate::model::ModelParams::zeros(&cfg);
        // Bias the vocabulary head hard toward EOS.
        *params.vocab_b.at_mut(0, EOS_ID as usize) = 10.0;
        let prefix = example_seq(&cfg, 0, 0, &[], 3.0);
        let out = greedy_decode(&prefix, &params, &cfg, 15).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn decode_never_exceeds_max_len() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 3);
        // Make EOS essentially unreachable so the length cap binds.
        *params.vocab_b.at_mut(0, EOS_ID as usize) = -100.0;
        let prefix = example_seq(&cfg, 1, 2, &[], 3.0);
        let out = greedy_decode(&prefix, &params, &cfg, 15).unwrap();
        assert_eq!(out.len(), 15);
    }

    #[test]
    fn decode_is_deterministic() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 5);
        let prefix = example_seq(&cfg, 1, 2, &[], 3.0);
        let a = greedy_decode(&prefix, &params, &cfg, 10).unwrap();
        let b = greedy_decode(&prefix, &params, &cfg, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stepwise_trace_matches_cache_free_re_run() {
        // The oracle recomputes every step's distribution from scratch with
        // its own forward calls and argmax.
        let cfg = tiny_config();
        let params = init_params(&cfg, 8);
        let prefix = example_seq(&cfg, 2, 3, &[], 3.0);
        let got = greedy_decode(&prefix, &params, &cfg, 8).unwrap();

        let mut oracle: Vec<u32> = Vec::new();
        for _ in 0..8 {
            let mut seq = prefix.clone();
            seq.tokens = oracle.clone();
            let mask = build_mask(seq.seq_len()).unwrap();
            let hidden = forward(&seq, &mask, &params, &cfg);
            let dist = vocab_distribution(hidden.row(PREFIX_LEN + oracle.len()), &params);
            let mut best = 0usize;
            let mut best_p = f64::NEG_INFINITY;
            for (i, &p) in dist.iter().enumerate() {
                if p > best_p {
                    best_p = p;
                    best = i;
                }
            }
            if best as u32 == EOS_ID {
                break;
            }
            oracle.push(best as u32);
        }
        assert_eq!(got, oracle);
    }

    #[test]
    fn no_pad_before_non_pad_in_padded_decodes() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 9);
        let prefix = example_seq(&cfg, 0, 1, &[], 3.0);
        let out = greedy_decode(&prefix, &params, &cfg, 12).unwrap();
        let padded = pad_truncate(&out, 15);
        assert_eq!(padded.len(), 15);
        let first_pad = padded.iter().position(|&t| t == PAD_ID);
        if let Some(p) = first_pad {
            assert!(padded[p..].iter().all(|&t| t == PAD_ID));
        }
    }
}
