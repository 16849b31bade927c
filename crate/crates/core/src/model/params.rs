//! Parameter tensors and their canonical enumeration order.

use super::linalg::Mat;
use super::ModelConfig;

/// How a tensor initializes: Xavier for weights, zeros for bias-like
/// tensors, ones for layer-norm gains, and identity for square projections
/// that should start as a pass-through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gain,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Vec<Mat>,
    pub wk: Vec<Mat>,
    pub wv: Vec<Mat>,
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub ffn_w1: Mat,
    pub ffn_b1: Mat,
    pub ffn_w2: Mat,
    pub ffn_b2: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub user_emb: Mat,
    pub item_emb: Mat,
    pub word_emb: Mat,
    pub pos_emb: Mat,
    /// d×d projection taking raw aspect-pair embeddings to model space.
    pub aspect_proj: Mat,
    /// Learned 1×d stand-in for ablated aspect/retrieval slots.
    pub null_vec: Mat,
    pub layers: Vec<LayerParams>,
    pub vocab_w: Mat,
    pub vocab_b: Mat,
    pub rating_w1: Mat,
    pub rating_w2: Mat,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> ModelParams {
        let d = cfg.d;
        let dh = cfg.head_dim();
        let ffn = cfg.ffn_width();
        let layer = || LayerParams {
            wq: (0..cfg.heads).map(|_| Mat::zeros(d, dh)).collect(),
            wk: (0..cfg.heads).map(|_| Mat::zeros(d, dh)).collect(),
            wv: (0..cfg.heads).map(|_| Mat::zeros(d, dh)).collect(),
            ln1_gain: Mat::zeros(1, d),
            ln1_bias: Mat::zeros(1, d),
            ffn_w1: Mat::zeros(d, ffn),
            ffn_b1: Mat::zeros(1, ffn),
            ffn_w2: Mat::zeros(ffn, d),
            ffn_b2: Mat::zeros(1, d),
            ln2_gain: Mat::zeros(1, d),
            ln2_bias: Mat::zeros(1, d),
        };
        ModelParams {
            user_emb: Mat::zeros(cfg.n_users, d),
            item_emb: Mat::zeros(cfg.n_items, d),
            word_emb: Mat::zeros(cfg.vocab_size, d),
            pos_emb: Mat::zeros(cfg.max_seq_len(), d),
            aspect_proj: Mat::zeros(d, d),
            null_vec: Mat::zeros(1, d),
            layers: (0..cfg.layers).map(|_| layer()).collect(),
            vocab_w: Mat::zeros(cfg.vocab_size, d),
            vocab_b: Mat::zeros(1, cfg.vocab_size),
            rating_w1: Mat::zeros(3 * d, d),
            rating_w2: Mat::zeros(d, 1),
        }
    }

    /// Canonical (name, kind, tensor) listing; iteration order is part of the
    /// checkpoint format and the seeded-init contract.
    pub fn tensors(&self) -> Vec<(String, TensorKind, &Mat)> {
        use TensorKind::*;
        let mut out: Vec<(String, TensorKind, &Mat)> = vec![
            ("user_emb".into(), Weight, &self.user_emb),
            ("item_emb".into(), Weight, &self.item_emb),
            ("word_emb".into(), Weight, &self.word_emb),
            ("pos_emb".into(), Weight, &self.pos_emb),
            ("aspect_proj".into(), Identity, &self.aspect_proj),
            ("null_vec".into(), Bias, &self.null_vec),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (h, m) in l.wq.iter().enumerate() {
                out.push((format!("layer{i}.wq{h}"), Weight, m));
            }
            for (h, m) in l.wk.iter().enumerate() {
                out.push((format!("layer{i}.wk{h}"), Weight, m));
            }
            for (h, m) in l.wv.iter().enumerate() {
                out.push((format!("layer{i}.wv{h}"), Weight, m));
            }
            out.push((format!("layer{i}.ln1_gain"), Gain, &l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), Bias, &l.ln1_bias));
            out.push((format!("layer{i}.ffn_w1"), Weight, &l.ffn_w1));
            out.push((format!("layer{i}.ffn_b1"), Bias, &l.ffn_b1));
            out.push((format!("layer{i}.ffn_w2"), Weight, &l.ffn_w2));
            out.push((format!("layer{i}.ffn_b2"), Bias, &l.ffn_b2));
            out.push((format!("layer{i}.ln2_gain"), Gain, &l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), Bias, &l.ln2_bias));
        }
        out.push(("vocab_w".into(), Weight, &self.vocab_w));
        out.push(("vocab_b".into(), Bias, &self.vocab_b));
        out.push(("rating_w1".into(), Weight, &self.rating_w1));
        out.push(("rating_w2".into(), Weight, &self.rating_w2));
        out
    }

    /// Mutable variant of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, TensorKind, &mut Mat)> {
        use TensorKind::*;
        let mut out: Vec<(String, TensorKind, &mut Mat)> = vec![
            ("user_emb".into(), Weight, &mut self.user_emb),
            ("item_emb".into(), Weight, &mut self.item_emb),
            ("word_emb".into(), Weight, &mut self.word_emb),
            ("pos_emb".into(), Weight, &mut self.pos_emb),
            ("aspect_proj".into(), Identity, &mut self.aspect_proj),
            ("null_vec".into(), Bias, &mut self.null_vec),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (h, m) in l.wq.iter_mut().enumerate() {
                out.push((format!("layer{i}.wq{h}"), Weight, m));
            }
            for (h, m) in l.wk.iter_mut().enumerate() {
                out.push((format!("layer{i}.wk{h}"), Weight, m));
            }
            for (h, m) in l.wv.iter_mut().enumerate() {
                out.push((format!("layer{i}.wv{h}"), Weight, m));
            }
            out.push((format!("layer{i}.ln1_gain"), Gain, &mut l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), Bias, &mut l.ln1_bias));
            out.push((format!("layer{i}.ffn_w1"), Weight, &mut l.ffn_w1));
            out.push((format!("layer{i}.ffn_b1"), Bias, &mut l.ffn_b1));
            out.push((format!("layer{i}.ffn_w2"), Weight, &mut l.ffn_w2));
            out.push((format!("layer{i}.ffn_b2"), Bias, &mut l.ffn_b2));
            out.push((format!("layer{i}.ln2_gain"), Gain, &mut l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), Bias, &mut l.ln2_bias));
        }
        out.push(("vocab_w".into(), Weight, &mut self.vocab_w));
        out.push(("vocab_b".into(), Bias, &mut self.vocab_b));
        out.push(("rating_w1".into(), Weight, &mut self.rating_w1));
        out.push(("rating_w2".into(), Weight, &mut self.rating_w2));
        out
    }

    /// ‖Θ‖²: sum of squares over every tensor.
    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, _, m)| m.sq_sum()).sum()
    }

    /// self += s · other, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, s: f64) {
        let theirs = other.tensors();
        for ((_, _, mine), (_, _, other)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_scaled(other, s);
        }
    }
}
