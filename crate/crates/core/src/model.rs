//! The joint-enhancement transformer.
//!
//! The model consumes a 6-slot context prefix — user id, item id, two
//! selected aspect vectors, and the two fused retrieval vectors — followed by
//! BOS and the explanation tokens. A modified attention mask lets the id and
//! aspect slots attend to each other while text positions decode causally
//! over the whole prefix. Four heads share the trunk: rating regression,
//! context prediction from the item slot, token generation, and the aspect
//! discriminator.

pub mod backward;
pub mod forward;
pub mod linalg;
pub mod loss;
pub mod mask;
pub mod params;

use thiserror::Error;

pub use backward::{backward_example, BatchWeights};
pub use forward::{
    attention_layer, embed_input, forward, run_example, vocab_distribution, ExampleRun,
    ForwardCache,
};
pub use linalg::Mat;
pub use loss::{
    aspect_loss, combine_losses, context_loss, context_loss_from_hidden, generation_loss,
    rating_loss, LossBreakdown,
};
pub use mask::{build_mask, AttentionMask};
pub use params::{LayerParams, ModelParams, TensorKind};

/// Number of context slots ahead of BOS. This is the "6" in the generation
/// loss position arithmetic; several shape assumptions hang off it.
pub const PREFIX_LEN: usize = 6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("sequence length {got} below minimum {need}")]
    SequenceTooShort { got: usize, need: usize },
    #[error("missing {0} input and the corresponding component is enabled")]
    MissingComponent(&'static str),
    #[error("{what} index {got} out of range ({limit})")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        limit: usize,
    },
    #[error("explanation has {got} tokens, max length is {max}")]
    ExplanationTooLong { got: usize, max: usize },
    #[error("vector for {what} has dimension {got}, expected {expected}")]
    DimMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("prediction/truth lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Which final-layer hidden state feeds the rating head and context loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingSlot {
    /// Slot 2 (the item id position) — the default.
    Item,
    /// Slot 1 (the user id position) — the configurable alternative.
    User,
}

impl RatingSlot {
    pub fn index(self) -> usize {
        match self {
            RatingSlot::User => 0,
            RatingSlot::Item => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub n_users: usize,
    pub n_items: usize,
    /// Maximum explanation length T.
    pub max_len: usize,
    /// Feed-forward width; 0 resolves to 4·d.
    pub ffn_dim: usize,
    pub dropout: f64,
    pub pl: f64,
    pub lambda_c: f64,
    pub gl: f64,
    pub al: f64,
    pub lambda_l: f64,
    pub use_retrieval: bool,
    pub use_aspects: bool,
    /// Scale attention logits by sqrt(d) instead of sqrt(d/H).
    pub scale_full_d: bool,
    pub rating_slot: RatingSlot,
}

impl ModelConfig {
    /// Paper defaults for everything except the corpus-dependent sizes.
    pub fn new(vocab_size: usize, n_users: usize, n_items: usize) -> ModelConfig {
        ModelConfig {
            d: 384,
            heads: 2,
            layers: 2,
            vocab_size,
            n_users,
            n_items,
            max_len: 15,
            ffn_dim: 0,
            dropout: 0.0,
            pl: 0.2,
            lambda_c: 0.8,
            gl: 1.0,
            al: 0.05,
            lambda_l: 1e-4,
            use_retrieval: true,
            use_aspects: true,
            scale_full_d: false,
            rating_slot: RatingSlot::Item,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.d == 0 || self.heads == 0 || self.layers == 0 {
            return bad("d, heads and layers must be positive".into());
        }
        if self.d % self.heads != 0 {
            return bad(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        if !(15..=20).contains(&self.max_len) {
            return bad(format!("max_len={} outside [15, 20]", self.max_len));
        }
        if self.vocab_size <= 4 {
            return bad("vocab must exceed the reserved tokens".into());
        }
        if self.n_users == 0 || self.n_items == 0 {
            return bad("need at least one user and one item".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout={} outside [0, 1)", self.dropout));
        }
        for (name, w) in [
            ("pl", self.pl),
            ("lambda_c", self.lambda_c),
            ("gl", self.gl),
            ("al", self.al),
            ("lambda_l", self.lambda_l),
        ] {
            if !(w >= 0.0) {
                return bad(format!("loss weight {name}={w} must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.d
        } else {
            self.ffn_dim
        }
    }

    /// Longest sequence the model ever sees: prefix + BOS + T tokens.
    pub fn max_seq_len(&self) -> usize {
        PREFIX_LEN + 1 + self.max_len
    }

    pub fn attn_scale(&self) -> f64 {
        if self.scale_full_d {
            (self.d as f64).sqrt()
        } else {
            (self.head_dim() as f64).sqrt()
        }
    }
}

/// An embedded-vector slot: supplied, or the learned null vector (ablations).
#[derive(Debug, Clone, PartialEq)]
pub enum SlotVec {
    Given(Vec<f64>),
    Null,
}

/// The assembled model input: 6 context slots, then BOS and the explanation.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    pub user: usize,
    pub item: usize,
    pub aspect_slots: [SlotVec; 2],
    pub retrieval_slots: [SlotVec; 2],
    /// Explanation tokens (no BOS/EOS).
    pub tokens: Vec<u32>,
    /// Vocabulary ids of the selected aspect words (the discriminator set).
    pub aspect_ids: Vec<u32>,
    pub rating: f64,
}

impl InputSequence {
    pub fn seq_len(&self) -> usize {
        PREFIX_LEN + 1 + self.tokens.len()
    }

    /// Teacher-forcing targets: the tokens shifted left, closed by EOS.
    pub fn targets(&self) -> Vec<u32> {
        let mut t = self.tokens.clone();
        t.push(crate::data::EOS_ID);
        t
    }
}

/// Raw pieces handed to [`build_input`]. Vector components are optional so
/// ablated configurations can omit them.
pub struct InputParts<'a> {
    pub user: usize,
    pub item: usize,
    pub aspect_vecs: Option<[&'a [f32]; 2]>,
    pub aspect_ids: &'a [u32],
    pub s_uv: Option<&'a [f32]>,
    pub s_vu: Option<&'a [f32]>,
    pub tokens: &'a [u32],
    pub rating: f64,
}

fn to_slot(v: &[f32], what: &'static str, d: usize) -> Result<SlotVec, ModelError> {
    if v.len() != d {
        return Err(ModelError::DimMismatch {
            what,
            got: v.len(),
            expected: d,
        });
    }
    Ok(SlotVec::Given(v.iter().map(|&x| f64::from(x)).collect()))
}

/// Assemble the slot layout, applying ablation flags: a disabled component's
/// slots become the learned null vector and (for aspects) its discriminator
/// set empties, so the forward pass cannot depend on the dropped inputs.
pub fn build_input(parts: InputParts, cfg: &ModelConfig) -> Result<InputSequence, ModelError> {
    if parts.user >= cfg.n_users {
        return Err(ModelError::IndexOutOfRange {
            what: "user",
            got: parts.user,
            limit: cfg.n_users,
        });
    }
    if parts.item >= cfg.n_items {
        return Err(ModelError::IndexOutOfRange {
            what: "item",
            got: parts.item,
            limit: cfg.n_items,
        });
    }
    if parts.tokens.len() > cfg.max_len {
        return Err(ModelError::ExplanationTooLong {
            got: parts.tokens.len(),
            max: cfg.max_len,
        });
    }
    for &t in parts.tokens {
        if t as usize >= cfg.vocab_size {
            return Err(ModelError::IndexOutOfRange {
                what: "token",
                got: t as usize,
                limit: cfg.vocab_size,
            });
        }
    }
    let aspect_slots = if cfg.use_aspects {
        let vecs = parts
            .aspect_vecs
            .ok_or(ModelError::MissingComponent("aspect"))?;
        [
            to_slot(vecs[0], "aspect slot 1", cfg.d)?,
            to_slot(vecs[1], "aspect slot 2", cfg.d)?,
        ]
    } else {
        [SlotVec::Null, SlotVec::Null]
    };
    let retrieval_slots = if cfg.use_retrieval {
        let s_uv = parts
            .s_uv
            .ok_or(ModelError::MissingComponent("retrieval s_uv"))?;
        let s_vu = parts
            .s_vu
            .ok_or(ModelError::MissingComponent("retrieval s_vu"))?;
        [to_slot(s_uv, "s_uv", cfg.d)?, to_slot(s_vu, "s_vu", cfg.d)?]
    } else {
        [SlotVec::Null, SlotVec::Null]
    };
    let mut aspect_ids: Vec<u32> = if cfg.use_aspects {
        parts
            .aspect_ids
            .iter()
            .copied()
            .filter(|&id| {
                id as usize >= crate::data::RESERVED_TOKENS.len()
                    && (id as usize) < cfg.vocab_size
            })
            .collect()
    } else {
        Vec::new()
    };
    aspect_ids.sort_unstable();
    aspect_ids.dedup();
    Ok(InputSequence {
        user: parts.user,
        item: parts.item,
        aspect_slots,
        retrieval_slots,
        tokens: parts.tokens.to_vec(),
        aspect_ids,
        rating: parts.rating,
    })
}

#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(20, 3, 4);
    cfg.d = 8;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.ffn_dim = 16;
    cfg
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Deterministic synthetic example for model-level tests.
    pub(crate) fn example_seq(
        cfg: &ModelConfig,
        user: usize,
        item: usize,
        tokens: &[u32],
        rating: f64,
    ) -> InputSequence {
        let d = cfg.d;
        let wave = |p: usize, f: f64| -> Vec<f32> {
            (0..d).map(|i| (((i + p) as f64) * f).sin() as f32).collect()
        };
        let a1 = wave(user + 1, 0.31);
        let a2 = wave(item + 2, 0.47);
        let s1 = wave(user + 3, 0.59);
        let s2 = wave(item + 4, 0.73);
        build_input(
            InputParts {
                user,
                item,
                aspect_vecs: Some([&a1, &a2]),
                aspect_ids: &[5, 7],
                s_uv: Some(&s1),
                s_vu: Some(&s2),
                tokens,
                rating,
            },
            cfg,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, axis: usize) -> Vec<f32> {
        let mut v = vec![0.0f32; dim];
        v[axis] = 1.0;
        v
    }

    #[test]
    fn prefix_length_is_six() {
        assert_eq!(PREFIX_LEN, 6);
        let cfg = tiny_config();
        let a1 = unit(8, 0);
        let a2 = unit(8, 1);
        let s1 = unit(8, 2);
        let s2 = unit(8, 3);
        let seq = build_input(
            InputParts {
                user: 1,
                item: 2,
                aspect_vecs: Some([&a1, &a2]),
                aspect_ids: &[5, 6],
                s_uv: Some(&s1),
                s_vu: Some(&s2),
                tokens: &[4, 5, 6],
                rating: 4.0,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(seq.seq_len(), PREFIX_LEN + 1 + 3);
    }

    #[test]
    fn slot_round_trip_returns_inputs() {
        let cfg = tiny_config();
        let a1 = unit(8, 0);
        let a2 = unit(8, 1);
        let s1 = unit(8, 2);
        let s2 = unit(8, 3);
        let seq = build_input(
            InputParts {
                user: 1,
                item: 2,
                aspect_vecs: Some([&a1, &a2]),
                aspect_ids: &[6, 5, 5],
                s_uv: Some(&s1),
                s_vu: Some(&s2),
                tokens: &[4, 5],
                rating: 3.5,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(seq.user, 1);
        assert_eq!(seq.item, 2);
        assert_eq!(seq.tokens, vec![4, 5]);
        assert_eq!(seq.aspect_ids, vec![5, 6]);
        assert_eq!(seq.rating, 3.5);
        match &seq.aspect_slots[0] {
            SlotVec::Given(v) => assert_eq!(v[0], 1.0),
            SlotVec::Null => panic!("expected given slot"),
        }
        assert_eq!(seq.targets(), vec![4, 5, crate::data::EOS_ID]);
    }

    #[test]
    fn ablation_replaces_slots_with_null() {
        let mut cfg = tiny_config();
        cfg.use_retrieval = false;
        let a1 = unit(8, 0);
        let a2 = unit(8, 1);
        let seq = build_input(
            InputParts {
                user: 0,
                item: 0,
                aspect_vecs: Some([&a1, &a2]),
                aspect_ids: &[5],
                s_uv: None,
                s_vu: None,
                tokens: &[4],
                rating: 2.0,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(seq.retrieval_slots, [SlotVec::Null, SlotVec::Null]);
    }

    #[test]
    fn missing_component_without_ablation_is_an_error() {
        let cfg = tiny_config();
        let a1 = unit(8, 0);
        let a2 = unit(8, 1);
        let err = build_input(
            InputParts {
                user: 0,
                item: 0,
                aspect_vecs: Some([&a1, &a2]),
                aspect_ids: &[],
                s_uv: None,
                s_vu: None,
                tokens: &[4],
                rating: 2.0,
            },
            &cfg,
        );
        assert!(matches!(err, Err(ModelError::MissingComponent(_))));
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = tiny_config();
        cfg.validate().unwrap();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.max_len = 21;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.al = -0.1;
        assert!(cfg.validate().is_err());
    }
}
