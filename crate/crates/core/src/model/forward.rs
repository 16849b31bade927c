//! Forward pass with the caches the backward pass needs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::linalg::{axpy, Mat};
use super::loss::{aspect_loss, context_loss, generation_loss};
use super::mask::AttentionMask;
use super::params::{LayerParams, ModelParams};
use super::{InputSequence, ModelConfig, ModelError, SlotVec, PREFIX_LEN};

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const MASK_FILL: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct LnCache {
    /// (x - mean) / std, before gain/bias.
    pub normed: Mat,
    pub inv_std: Vec<f64>,
    pub out: Mat,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Mat,
    pub q: Vec<Mat>,
    pub k: Vec<Mat>,
    pub v: Vec<Mat>,
    /// Per-head softmax weights (masked entries exactly zero).
    pub attn: Vec<Mat>,
    pub heads_out: Mat,
    pub drop1: Option<Vec<f64>>,
    pub ln1: LnCache,
    pub ffn_pre: Mat,
    pub ffn_act: Mat,
    pub drop2: Option<Vec<f64>>,
    pub ln2: LnCache,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x: Mat,
    pub layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn final_hidden(&self) -> &Mat {
        match self.layers.last() {
            Some(l) => &l.ln2.out,
            None => &self.x,
        }
    }
}

fn layer_norm(x: &Mat, gain: &Mat, bias: &Mat) -> LnCache {
    let d = x.cols;
    let mut normed = Mat::zeros(x.rows, d);
    let mut out = Mat::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let n = (row[c] - mean) * is;
            *normed.at_mut(r, c) = n;
            *out.at_mut(r, c) = gain.at(0, c) * n + bias.at(0, c);
        }
    }
    LnCache {
        normed,
        inv_std,
        out,
    }
}

fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect()
}

fn apply_mask_mul(m: &mut Mat, mask: &[f64]) {
    for (x, &k) in m.data.iter_mut().zip(mask) {
        *x *= k;
    }
}

/// Numerically stable softmax over one logit row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn layer_forward(
    input: Mat,
    mask: &AttentionMask,
    lp: &LayerParams,
    cfg: &ModelConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> LayerCache {
    let s = input.rows;
    let d = cfg.d;
    let dh = cfg.head_dim();
    let scale = cfg.attn_scale();

    let mut q = Vec::with_capacity(cfg.heads);
    let mut k = Vec::with_capacity(cfg.heads);
    let mut v = Vec::with_capacity(cfg.heads);
    let mut attn = Vec::with_capacity(cfg.heads);
    let mut heads_out = Mat::zeros(s, d);
    for h in 0..cfg.heads {
        let qh = input.matmul(&lp.wq[h]);
        let kh = input.matmul(&lp.wk[h]);
        let vh = input.matmul(&lp.wv[h]);
        let mut logits = qh.matmul_bt(&kh);
        for qi in 0..s {
            let row = logits.row_mut(qi);
            for (ki, x) in row.iter_mut().enumerate() {
                if mask.allowed(qi, ki) {
                    *x /= scale;
                } else {
                    *x = MASK_FILL;
                }
            }
            softmax_in_place(row);
        }
        let head = logits.matmul(&vh);
        for r in 0..s {
            heads_out.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(head.row(r));
        }
        q.push(qh);
        k.push(kh);
        v.push(vh);
        attn.push(logits);
    }

    let mut dropped = heads_out.clone();
    let mut drop1 = None;
    let mut drop2 = None;
    let rng = dropout;
    if cfg.dropout > 0.0 {
        if let Some(rng) = rng {
            let m1 = dropout_mask(s * d, cfg.dropout, rng);
            apply_mask_mul(&mut dropped, &m1);
            drop1 = Some(m1);
            drop2 = Some(dropout_mask(s * d, cfg.dropout, rng));
        }
    }

    let mut res1 = input.clone();
    res1.add_assign_mat(&dropped);
    let ln1 = layer_norm(&res1, &lp.ln1_gain, &lp.ln1_bias);

    let mut ffn_pre = ln1.out.matmul(&lp.ffn_w1);
    for r in 0..s {
        let row = ffn_pre.row_mut(r);
        for (x, b) in row.iter_mut().zip(lp.ffn_b1.row(0)) {
            *x += b;
        }
    }
    let mut ffn_act = ffn_pre.clone();
    for x in ffn_act.data.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let mut ffn_out = ffn_act.matmul(&lp.ffn_w2);
    for r in 0..s {
        let row = ffn_out.row_mut(r);
        for (x, b) in row.iter_mut().zip(lp.ffn_b2.row(0)) {
            *x += b;
        }
    }
    if let Some(m2) = &drop2 {
        apply_mask_mul(&mut ffn_out, m2);
    }

    let mut res2 = ln1.out.clone();
    res2.add_assign_mat(&ffn_out);
    let ln2 = layer_norm(&res2, &lp.ln2_gain, &lp.ln2_bias);

    LayerCache {
        input,
        q,
        k,
        v,
        attn,
        heads_out,
        drop1,
        ln1,
        ffn_pre,
        ffn_act,
        drop2,
        ln2,
    }
}

/// Slot embeddings plus position embeddings P_1..P_|s|.
pub fn embed_input(seq: &InputSequence, params: &ModelParams, cfg: &ModelConfig) -> Mat {
    let s = seq.seq_len();
    let d = cfg.d;
    let mut x = Mat::zeros(s, d);
    x.row_mut(0).copy_from_slice(params.user_emb.row(seq.user));
    x.row_mut(1).copy_from_slice(params.item_emb.row(seq.item));
    for (slot, sv) in seq.aspect_slots.iter().enumerate() {
        let r = 2 + slot;
        match sv {
            SlotVec::Given(a) => {
                // Row vector times the learned d×d projection.
                let row = x.row_mut(r);
                for (i, &ai) in a.iter().enumerate() {
                    if ai != 0.0 {
                        axpy(row, params.aspect_proj.row(i), ai);
                    }
                }
            }
            SlotVec::Null => x.row_mut(r).copy_from_slice(params.null_vec.row(0)),
        }
    }
    for (slot, sv) in seq.retrieval_slots.iter().enumerate() {
        let r = 4 + slot;
        match sv {
            SlotVec::Given(vv) => x.row_mut(r).copy_from_slice(vv),
            SlotVec::Null => x.row_mut(r).copy_from_slice(params.null_vec.row(0)),
        }
    }
    x.row_mut(PREFIX_LEN)
        .copy_from_slice(params.word_emb.row(crate::data::BOS_ID as usize));
    for (i, &tok) in seq.tokens.iter().enumerate() {
        x.row_mut(PREFIX_LEN + 1 + i)
            .copy_from_slice(params.word_emb.row(tok as usize));
    }
    for r in 0..s {
        let prow = params.pos_emb.row(r).to_vec();
        axpy(x.row_mut(r), &prow, 1.0);
    }
    x
}

/// Run the stack over an already-embedded input. Dropout applies only when a
/// generator is supplied (training); eval calls are deterministic.
pub fn forward_from(
    x: Mat,
    mask: &AttentionMask,
    params: &ModelParams,
    cfg: &ModelConfig,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> ForwardCache {
    assert_eq!(x.rows, mask.size(), "input rows must match mask");
    let first = x.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut current = x;
    for lp in &params.layers {
        let cache = layer_forward(current, mask, lp, cfg, dropout.as_deref_mut());
        current = cache.ln2.out.clone();
        layers.push(cache);
    }
    ForwardCache { x: first, layers }
}

/// Deterministic eval-mode forward; returns the final-layer hidden states.
pub fn forward(
    seq: &InputSequence,
    mask: &AttentionMask,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Mat {
    let x = embed_input(seq, params, cfg);
    forward_from(x, mask, params, cfg, None).final_hidden().clone()
}

/// One attention layer in eval mode: multi-head masked attention, residual,
/// layer norm, feed-forward, residual, layer norm.
pub fn attention_layer(
    input: &Mat,
    mask: &AttentionMask,
    lp: &LayerParams,
    cfg: &ModelConfig,
) -> Mat {
    layer_forward(input.clone(), mask, lp, cfg, None).ln2.out
}

/// softmax(W^v h + b^v): the distribution over the vocabulary.
pub fn vocab_distribution(hidden: &[f64], params: &ModelParams) -> Vec<f64> {
    let mut logits: Vec<f64> = (0..params.vocab_w.rows)
        .map(|t| {
            let wrow = params.vocab_w.row(t);
            let mut acc = params.vocab_b.at(0, t);
            for (w, h) in wrow.iter().zip(hidden) {
                acc += w * h;
            }
            acc
        })
        .collect();
    softmax_in_place(&mut logits);
    logits
}

/// Cached state of the rating head for one example.
#[derive(Debug, Clone)]
pub struct RatingCache {
    /// [H_v, u_emb, v_emb] concatenation (length 3d).
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub prediction: f64,
}

/// ReLU([H_v, u_id, v_id]·W_l1)·W_l2 with the cached intermediates.
pub fn predict_rating_cached(
    hidden_v: &[f64],
    user_emb: &[f64],
    item_emb: &[f64],
    params: &ModelParams,
) -> RatingCache {
    let d = hidden_v.len();
    let mut input = Vec::with_capacity(3 * d);
    input.extend_from_slice(hidden_v);
    input.extend_from_slice(user_emb);
    input.extend_from_slice(item_emb);
    let mut pre = vec![0.0f64; params.rating_w1.cols];
    for (i, &xi) in input.iter().enumerate() {
        if xi != 0.0 {
            axpy(&mut pre, params.rating_w1.row(i), xi);
        }
    }
    let act: Vec<f64> = pre.iter().map(|&x| x.max(0.0)).collect();
    let prediction = act
        .iter()
        .enumerate()
        .map(|(j, a)| a * params.rating_w2.at(j, 0))
        .sum();
    RatingCache {
        input,
        pre,
        act,
        prediction,
    }
}

/// Scalar rating r̂ for a sequence (eval convenience).
pub fn predict_rating(
    seq: &InputSequence,
    final_hidden: &Mat,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> f64 {
    predict_rating_cached(
        final_hidden.row(cfg.rating_slot.index()),
        params.user_emb.row(seq.user),
        params.item_emb.row(seq.item),
        params,
    )
    .prediction
}

/// Everything the losses and the backward pass need for one example.
#[derive(Debug, Clone)]
pub struct ExampleRun {
    pub cache: ForwardCache,
    /// Vocabulary distributions at positions PREFIX_LEN .. PREFIX_LEN+n.
    pub gen_dists: Vec<Vec<f64>>,
    /// The single distribution from the id-slot hidden state.
    pub ctx_dist: Vec<f64>,
    pub rating: RatingCache,
    pub targets: Vec<u32>,
    pub l_c: f64,
    pub l_g: f64,
    pub l_a: f64,
}

/// Forward one example through the trunk and all heads.
pub fn run_example(
    seq: &InputSequence,
    mask: &AttentionMask,
    params: &ModelParams,
    cfg: &ModelConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<ExampleRun, ModelError> {
    let x = embed_input(seq, params, cfg);
    let cache = forward_from(x, mask, params, cfg, dropout);
    let final_hidden = cache.final_hidden().clone();
    let targets = seq.targets();

    let gen_dists: Vec<Vec<f64>> = (0..targets.len())
        .map(|t| vocab_distribution(final_hidden.row(PREFIX_LEN + t), params))
        .collect();
    let hv = final_hidden.row(cfg.rating_slot.index());
    let ctx_dist = vocab_distribution(hv, params);
    let rating = predict_rating_cached(
        hv,
        params.user_emb.row(seq.user),
        params.item_emb.row(seq.item),
        params,
    );

    let l_g = generation_loss(&gen_dists, &targets)?;
    let l_c = context_loss(&ctx_dist, &targets);
    let l_a = aspect_loss(&gen_dists, &targets, &seq.aspect_ids);
    Ok(ExampleRun {
        cache,
        gen_dists,
        ctx_dist,
        rating,
        targets,
        l_c,
        l_g,
        l_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mask, tiny_config};
    use rand::SeedableRng;

    fn example_seq(cfg: &ModelConfig, tokens: &[u32]) -> InputSequence {
        crate::model::testutil::example_seq(cfg, 1, 2, tokens, 4.0)
    }

    fn seeded_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
        crate::training::init_params(cfg, seed)
    }

    #[test]
    fn zero_params_give_uniform_attention_everywhere() {
        let cfg = tiny_config();
        let params = ModelParams::zeros(&cfg);
        let seq = example_seq(&cfg, &[4, 5, 6]);
        let mask = build_mask(seq.seq_len()).unwrap();
        let x = embed_input(&seq, &params, &cfg);
        let cache = forward_from(x, &mask, &params, &cfg, None);
        for head in &cache.layers[0].attn {
            for qi in 0..head.rows {
                let visible = mask.visible(qi);
                for ki in 0..head.cols {
                    let w = head.at(qi, ki);
                    if mask.allowed(qi, ki) {
                        assert!((w - 1.0 / visible as f64).abs() < 1e-12);
                    } else {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_is_exact() {
        let cfg = tiny_config();
        let params = seeded_params(&cfg, 3);
        let seq = example_seq(&cfg, &[4, 5, 6, 7]);
        let mask = build_mask(seq.seq_len()).unwrap();
        let x = embed_input(&seq, &params, &cfg);
        let cache = forward_from(x, &mask, &params, &cfg, None);
        for layer in &cache.layers {
            for head in &layer.attn {
                for qi in 0..head.rows {
                    let sum: f64 = head.row(qi).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
                    for ki in 0..head.cols {
                        if !mask.allowed(qi, ki) {
                            assert_eq!(head.at(qi, ki), 0.0, "masked weight not zero");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config();
        let params = seeded_params(&cfg, 9);
        let seq = example_seq(&cfg, &[4, 9, 12]);
        let mask = build_mask(seq.seq_len()).unwrap();
        let a = forward(&seq, &mask, &params, &cfg);
        let b = forward(&seq, &mask, &params, &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn one_layer_forward_equals_direct_attention_layer() {
        let mut cfg = tiny_config();
        cfg.layers = 1;
        let params = seeded_params(&cfg, 4);
        let seq = example_seq(&cfg, &[4, 5]);
        let mask = build_mask(seq.seq_len()).unwrap();
        let via_forward = forward(&seq, &mask, &params, &cfg);
        let x = embed_input(&seq, &params, &cfg);
        let direct = attention_layer(&x, &mask, &params.layers[0], &cfg);
        assert_eq!(via_forward, direct);
    }

    #[test]
    fn tiny_attention_matches_hand_computation() {
        // d=2, H=1, |s|=3, identity projections, unit gains, zero FFN, full
        // visibility. Expected values hand-computed once (dot products, exp,
        // normalize, two layer norms) and frozen.
        let mut cfg = tiny_config();
        cfg.d = 2;
        cfg.heads = 1;
        cfg.layers = 1;
        cfg.ffn_dim = 2;
        cfg.vocab_size = 5;
        let mut params = ModelParams::zeros(&cfg);
        let eye = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        params.layers[0].wq[0] = eye.clone();
        params.layers[0].wk[0] = eye.clone();
        params.layers[0].wv[0] = eye;
        params.layers[0].ln1_gain = Mat::from_vec(1, 2, vec![1.0, 1.0]);
        params.layers[0].ln2_gain = Mat::from_vec(1, 2, vec![1.0, 1.0]);

        let x = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let mask = AttentionMask::from_fn(3, |_, _| true);
        let cache = forward_from(x, &mask, &params, &cfg, None);

        let attn = &cache.layers[0].attn[0];
        let row0 = [0.40111209267978593, 0.1977758146404282, 0.40111209267978593];
        let row2 = [0.24825507825772311, 0.24825507825772311, 0.50348984348455383];
        for (k, &e) in row0.iter().enumerate() {
            assert!((attn.at(0, k) - e).abs() < 1e-12);
        }
        for (k, &e) in row2.iter().enumerate() {
            assert!((attn.at(2, k) - e).abs() < 1e-12);
        }
        let out = cache.final_hidden();
        let expect = [
            [0.9999949998993819, -0.9999949998993819],
            [-0.9999949998993819, 0.9999949998993819],
            [0.0, 0.0],
        ];
        for r in 0..3 {
            for c in 0..2 {
                assert!(
                    (out.at(r, c) - expect[r][c]).abs() < 1e-12,
                    "({r},{c}): {} vs {}",
                    out.at(r, c),
                    expect[r][c]
                );
            }
        }
    }

    #[test]
    fn dropout_zero_means_trainmode_equals_eval() {
        let cfg = tiny_config();
        let params = seeded_params(&cfg, 6);
        let seq = example_seq(&cfg, &[4, 5, 6]);
        let mask = build_mask(seq.seq_len()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let run = run_example(&seq, &mask, &params, &cfg, Some(&mut rng)).unwrap();
        let eval = forward(&seq, &mask, &params, &cfg);
        assert_eq!(run.cache.final_hidden(), &eval);
    }

    #[test]
    fn vocab_distribution_sums_to_one_and_shift_invariant() {
        let cfg = tiny_config();
        let mut params = seeded_params(&cfg, 2);
        let h: Vec<f64> = (0..cfg.d).map(|i| (i as f64 * 0.37).sin()).collect();
        let p1 = vocab_distribution(&h, &params);
        let sum: f64 = p1.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(p1.iter().all(|&x| x > 0.0));
        // Adding a constant to every logit leaves the distribution unchanged.
        for t in 0..params.vocab_b.cols {
            *params.vocab_b.at_mut(0, t) += 3.25;
        }
        let p2 = vocab_distribution(&h, &params);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_logits_give_uniform_vocab_distribution() {
        let cfg = tiny_config();
        let params = ModelParams::zeros(&cfg);
        let h = vec![0.0f64; cfg.d];
        let p = vocab_distribution(&h, &params);
        for &x in &p {
            assert!((x - 1.0 / cfg.vocab_size as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn rating_head_zero_weights_give_zero() {
        let cfg = tiny_config();
        let params = ModelParams::zeros(&cfg);
        let h = vec![1.0f64; cfg.d];
        let u = vec![1.0f64; cfg.d];
        let v = vec![1.0f64; cfg.d];
        let out = predict_rating_cached(&h, &u, &v, &params);
        assert_eq!(out.prediction, 0.0);
    }

    #[test]
    fn rating_head_matches_hand_matrix_product() {
        // W1 = block of identities stacked (3d×d), W2 = ones: the prediction
        // is sum(ReLU(h + u + v)).
        let cfg = tiny_config();
        let mut params = ModelParams::zeros(&cfg);
        let d = cfg.d;
        for i in 0..d {
            *params.rating_w1.at_mut(i, i) = 1.0;
            *params.rating_w1.at_mut(d + i, i) = 1.0;
            *params.rating_w1.at_mut(2 * d + i, i) = 1.0;
            *params.rating_w2.at_mut(i, 0) = 1.0;
        }
        let h: Vec<f64> = (0..d).map(|i| i as f64 - 3.0).collect();
        let u: Vec<f64> = (0..d).map(|i| 0.5 * i as f64).collect();
        let v: Vec<f64> = (0..d).map(|_| -1.0).collect();
        let out = predict_rating_cached(&h, &u, &v, &params);
        let expect: f64 = (0..d)
            .map(|i| (h[i] + u[i] + v[i]).max(0.0))
            .sum();
        assert!((out.prediction - expect).abs() < 1e-12);
    }

    #[test]
    fn rating_head_fully_clipped_is_zero() {
        let cfg = tiny_config();
        let mut params = ModelParams::zeros(&cfg);
        let d = cfg.d;
        for i in 0..d {
            *params.rating_w1.at_mut(i, i) = 1.0;
            *params.rating_w2.at_mut(i, 0) = 1.0;
        }
        let h = vec![-5.0f64; d];
        let u = vec![0.0f64; d];
        let v = vec![0.0f64; d];
        let out = predict_rating_cached(&h, &u, &v, &params);
        assert_eq!(out.prediction, 0.0);
    }
}
