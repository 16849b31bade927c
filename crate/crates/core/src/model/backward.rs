//! Hand-written reverse pass. Gradients accumulate into a `ModelParams`
//! shaped like the parameters; correctness is pinned by finite-difference
//! checks in the test suite.

use crate::data::PAD_ID;

use super::forward::{ExampleRun, LayerCache, LnCache};
use super::linalg::{axpy, Mat};
use super::params::{LayerParams, ModelParams};
use super::{InputSequence, ModelConfig, SlotVec, PREFIX_LEN};

/// Per-example loss weights already folded with the batch normalizer, so the
/// example's contribution to the batch gradient is self-contained.
#[derive(Debug, Clone, Copy)]
pub struct BatchWeights {
    pub inv_batch: f64,
}

fn ln_backward(
    d_out: &Mat,
    cache: &LnCache,
    gain: &Mat,
    g_gain: &mut Mat,
    g_bias: &mut Mat,
) -> Mat {
    let d = d_out.cols;
    let mut dx = Mat::zeros(d_out.rows, d);
    for r in 0..d_out.rows {
        let dout = d_out.row(r);
        let normed = cache.normed.row(r);
        let inv_std = cache.inv_std[r];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            let dn = dout[c] * gain.at(0, c);
            m1 += dn;
            m2 += dn * normed[c];
            *g_gain.at_mut(0, c) += dout[c] * normed[c];
            *g_bias.at_mut(0, c) += dout[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let dxr = dx.row_mut(r);
        for c in 0..d {
            let dn = dout[c] * gain.at(0, c);
            dxr[c] = inv_std * (dn - m1 - normed[c] * m2);
        }
    }
    dx
}

fn apply_dropout_grad(m: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        for (x, &k) in m.data.iter_mut().zip(mask) {
            *x *= k;
        }
    }
}

/// Backward through one transformer layer; returns the gradient w.r.t. the
/// layer input.
fn layer_backward(
    cache: &LayerCache,
    lp: &LayerParams,
    grads: &mut LayerParams,
    d_out: &Mat,
    cfg: &ModelConfig,
) -> Mat {
    let s = d_out.rows;
    let dh = cfg.head_dim();
    let scale = cfg.attn_scale();

    // ln2 -> res2 = ln1.out + dropout(ffn_out)
    let d_res2 = ln_backward(d_out, &cache.ln2, &lp.ln2_gain, &mut grads.ln2_gain, &mut grads.ln2_bias);
    let mut d_ln1out = d_res2.clone();
    let mut d_ffn_out = d_res2;
    apply_dropout_grad(&mut d_ffn_out, &cache.drop2);

    // ffn_out = relu(ln1.out·W1 + b1)·W2 + b2
    grads.ffn_w2.add_assign_mat(&cache.ffn_act.t_matmul(&d_ffn_out));
    for r in 0..s {
        for (b, &g) in grads.ffn_b2.row_mut(0).iter_mut().zip(d_ffn_out.row(r)) {
            *b += g;
        }
    }
    let mut d_pre = d_ffn_out.matmul_bt(&lp.ffn_w2);
    for (dp, &pre) in d_pre.data.iter_mut().zip(&cache.ffn_pre.data) {
        if pre <= 0.0 {
            *dp = 0.0;
        }
    }
    grads.ffn_w1.add_assign_mat(&cache.ln1.out.t_matmul(&d_pre));
    for r in 0..s {
        for (b, &g) in grads.ffn_b1.row_mut(0).iter_mut().zip(d_pre.row(r)) {
            *b += g;
        }
    }
    d_ln1out.add_assign_mat(&d_pre.matmul_bt(&lp.ffn_w1));

    // ln1 -> res1 = input + dropout(heads_out)
    let d_res1 = ln_backward(
        &d_ln1out,
        &cache.ln1,
        &lp.ln1_gain,
        &mut grads.ln1_gain,
        &mut grads.ln1_bias,
    );
    let mut d_input = d_res1.clone();
    let mut d_heads = d_res1;
    apply_dropout_grad(&mut d_heads, &cache.drop1);

    for h in 0..cfg.heads {
        let mut d_head = Mat::zeros(s, dh);
        for r in 0..s {
            d_head
                .row_mut(r)
                .copy_from_slice(&d_heads.row(r)[h * dh..(h + 1) * dh]);
        }
        let attn = &cache.attn[h];
        let d_v = attn.t_matmul(&d_head);
        let d_attn = d_head.matmul_bt(&cache.v[h]);
        // softmax backward: masked weights are exactly zero, so their logits
        // receive no gradient.
        let mut d_logits = Mat::zeros(s, s);
        for qi in 0..s {
            let a = attn.row(qi);
            let da = d_attn.row(qi);
            let dot: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
            let out = d_logits.row_mut(qi);
            for ki in 0..s {
                out[ki] = a[ki] * (da[ki] - dot);
            }
        }
        let mut d_q = d_logits.matmul(&cache.k[h]);
        d_q.scale(1.0 / scale);
        let mut d_k = d_logits.t_matmul(&cache.q[h]);
        d_k.scale(1.0 / scale);

        grads.wq[h].add_assign_mat(&cache.input.t_matmul(&d_q));
        grads.wk[h].add_assign_mat(&cache.input.t_matmul(&d_k));
        grads.wv[h].add_assign_mat(&cache.input.t_matmul(&d_v));
        d_input.add_assign_mat(&d_q.matmul_bt(&lp.wq[h]));
        d_input.add_assign_mat(&d_k.matmul_bt(&lp.wk[h]));
        d_input.add_assign_mat(&d_v.matmul_bt(&lp.wv[h]));
    }
    d_input
}

/// dW_v, db_v and the hidden-state gradient for one vocab-head application.
fn vocab_head_backward(
    d_logits: &[f64],
    hidden: &[f64],
    params: &ModelParams,
    grads: &mut ModelParams,
    d_hidden: &mut [f64],
) {
    for (t, &g) in d_logits.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        axpy(grads.vocab_w.row_mut(t), hidden, g);
        axpy(d_hidden, params.vocab_w.row(t), g);
        *grads.vocab_b.at_mut(0, t) += g;
    }
}

/// Accumulate the gradient of this example's contribution to the batch loss
/// (all four weighted heads; the L2 term is added once per batch elsewhere).
pub fn backward_example(
    seq: &InputSequence,
    run: &ExampleRun,
    params: &ModelParams,
    cfg: &ModelConfig,
    weights: BatchWeights,
    grads: &mut ModelParams,
) {
    let s = seq.seq_len();
    let d = cfg.d;
    let vocab = cfg.vocab_size;
    let inv_b = weights.inv_batch;
    let targets = &run.targets;
    let n_steps = targets.iter().filter(|&&t| t != PAD_ID).count();
    let final_hidden = run.cache.final_hidden().clone();
    let mut d_final = Mat::zeros(s, d);

    // Generation + aspect heads, teacher-forced over positions 6..6+n.
    if n_steps > 0 {
        for (t, &y) in targets.iter().enumerate() {
            if y == PAD_ID {
                continue;
            }
            let in_tau = seq.aspect_ids.binary_search(&y).is_ok();
            let w = cfg.gl + if in_tau { cfg.al } else { 0.0 };
            let coef = inv_b * w / n_steps as f64;
            if coef == 0.0 {
                continue;
            }
            let dist = &run.gen_dists[t];
            let mut d_logits: Vec<f64> = dist.iter().map(|&p| coef * p).collect();
            d_logits[y as usize] -= coef;
            let pos = PREFIX_LEN + t;
            let mut d_hidden = vec![0.0f64; d];
            vocab_head_backward(&d_logits, final_hidden.row(pos), params, grads, &mut d_hidden);
            axpy(d_final.row_mut(pos), &d_hidden, 1.0);
        }
    }

    // Context head: one distribution from the id-slot hidden state.
    let hv_idx = cfg.rating_slot.index();
    if n_steps > 0 && cfg.lambda_c != 0.0 {
        let coef = inv_b * cfg.lambda_c;
        let mut counts = vec![0.0f64; vocab];
        for &y in targets.iter().filter(|&&t| t != PAD_ID) {
            counts[y as usize] += 1.0;
        }
        let d_logits: Vec<f64> = run
            .ctx_dist
            .iter()
            .zip(&counts)
            .map(|(&p, &c)| coef * (p - c / n_steps as f64))
            .collect();
        let mut d_hidden = vec![0.0f64; d];
        vocab_head_backward(&d_logits, final_hidden.row(hv_idx), params, grads, &mut d_hidden);
        axpy(d_final.row_mut(hv_idx), &d_hidden, 1.0);
    }

    // Rating head: r̂ = relu([H_v, u, v]·W1)·W2, squared error.
    {
        let g = inv_b * cfg.pl * 2.0 * (run.rating.prediction - seq.rating);
        if g != 0.0 {
            let mut d_act = vec![0.0f64; d];
            for j in 0..d {
                *grads.rating_w2.at_mut(j, 0) += g * run.rating.act[j];
                d_act[j] = g * params.rating_w2.at(j, 0);
            }
            let d_pre: Vec<f64> = d_act
                .iter()
                .zip(&run.rating.pre)
                .map(|(&da, &pre)| if pre > 0.0 { da } else { 0.0 })
                .collect();
            let mut d_x = vec![0.0f64; 3 * d];
            for i in 0..3 * d {
                let xi = run.rating.input[i];
                if xi != 0.0 {
                    axpy(grads.rating_w1.row_mut(i), &d_pre, xi);
                }
                d_x[i] = params
                    .rating_w1
                    .row(i)
                    .iter()
                    .zip(&d_pre)
                    .map(|(w, dp)| w * dp)
                    .sum();
            }
            axpy(d_final.row_mut(hv_idx), &d_x[..d], 1.0);
            axpy(grads.user_emb.row_mut(seq.user), &d_x[d..2 * d], 1.0);
            axpy(grads.item_emb.row_mut(seq.item), &d_x[2 * d..], 1.0);
        }
    }

    // Trunk.
    let mut d_out = d_final;
    for (cache, (lp, g_lp)) in run
        .cache
        .layers
        .iter()
        .zip(params.layers.iter().zip(grads.layers.iter_mut()))
        .rev()
    {
        d_out = layer_backward(cache, lp, g_lp, &d_out, cfg);
    }

    // Input embeddings.
    let d_x = d_out;
    for r in 0..s {
        axpy(grads.pos_emb.row_mut(r), d_x.row(r), 1.0);
    }
    axpy(grads.user_emb.row_mut(seq.user), d_x.row(0), 1.0);
    axpy(grads.item_emb.row_mut(seq.item), d_x.row(1), 1.0);
    for (slot, sv) in seq.aspect_slots.iter().enumerate() {
        let r = 2 + slot;
        match sv {
            SlotVec::Given(a) => {
                for (i, &ai) in a.iter().enumerate() {
                    if ai != 0.0 {
                        axpy(grads.aspect_proj.row_mut(i), d_x.row(r), ai);
                    }
                }
            }
            SlotVec::Null => axpy(grads.null_vec.row_mut(0), d_x.row(r), 1.0),
        }
    }
    for (slot, sv) in seq.retrieval_slots.iter().enumerate() {
        let r = 4 + slot;
        if matches!(sv, SlotVec::Null) {
            axpy(grads.null_vec.row_mut(0), d_x.row(r), 1.0);
        }
    }
    axpy(
        grads.word_emb.row_mut(crate::data::BOS_ID as usize),
        d_x.row(PREFIX_LEN),
        1.0,
    );
    for (i, &tok) in seq.tokens.iter().enumerate() {
        axpy(
            grads.word_emb.row_mut(tok as usize),
            d_x.row(PREFIX_LEN + 1 + i),
            1.0,
        );
    }
}
