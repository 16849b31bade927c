//! The modified attention mask.
//!
//! Zero-based visibility rules over the 6-slot prefix and the text tail:
//! - rows 0-3 (user, item, two aspects) see exactly columns 0-3;
//! - rows 4-5 (the two retrieval slots) see the whole prefix, columns 0-5;
//! - rows >= 6 (BOS and explanation tokens) see the whole prefix and all
//!   text positions up to and including themselves; never a later one.

use super::{ModelError, PREFIX_LEN};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    /// May position `q` attend to position `k`?
    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.size + k]
    }

    pub fn visible(&self, q: usize) -> usize {
        (0..self.size).filter(|&k| self.allowed(q, k)).count()
    }

    #[cfg(test)]
    pub(crate) fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> AttentionMask {
        let mut bits = vec![false; size * size];
        for q in 0..size {
            for k in 0..size {
                bits[q * size + k] = f(q, k);
            }
        }
        AttentionMask { size, bits }
    }
}

pub fn build_mask(seq_len: usize) -> Result<AttentionMask, ModelError> {
    if seq_len < PREFIX_LEN + 1 {
        return Err(ModelError::SequenceTooShort {
            got: seq_len,
            need: PREFIX_LEN + 1,
        });
    }
    let mut bits = vec![false; seq_len * seq_len];
    for q in 0..seq_len {
        for k in 0..seq_len {
            let ok = if q < 4 {
                k < 4
            } else if q < PREFIX_LEN {
                k < PREFIX_LEN
            } else {
                k <= q
            };
            bits[q * seq_len + k] = ok;
        }
    }
    Ok(AttentionMask {
        size: seq_len,
        bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_four_positions_are_mutually_visible() {
        let mask = build_mask(10).unwrap();
        // 1-based positions 1 and 4 are 0-based 0 and 3.
        assert!(mask.allowed(0, 3));
        assert!(mask.allowed(3, 0));
        for q in 0..4 {
            for k in 0..4 {
                assert!(mask.allowed(q, k));
            }
        }
    }

    #[test]
    fn text_cannot_see_the_future() {
        let mask = build_mask(12).unwrap();
        // 1-based positions 8 and 9 are 0-based 7 and 8.
        assert!(!mask.allowed(7, 8));
        for q in PREFIX_LEN..12 {
            for k in (q + 1)..12 {
                assert!(!mask.allowed(q, k));
            }
        }
    }

    #[test]
    fn retrieval_slots_see_prefix_and_are_seen_by_text() {
        let mask = build_mask(10).unwrap();
        for q in 4..6 {
            for k in 0..6 {
                assert!(mask.allowed(q, k));
            }
            for k in 6..10 {
                assert!(!mask.allowed(q, k));
            }
        }
        for q in 6..10 {
            assert!(mask.allowed(q, 4));
            assert!(mask.allowed(q, 5));
        }
    }

    #[test]
    fn id_slots_do_not_see_retrieval_or_text() {
        let mask = build_mask(10).unwrap();
        for q in 0..4 {
            for k in 4..10 {
                assert!(!mask.allowed(q, k));
            }
        }
    }

    #[test]
    fn full_matrix_for_len_10_matches_hand_enumeration() {
        // Hand-enumerated from the three rules; rows are queries.
        let expect: [[u8; 10]; 10] = [
            [1, 1, 1, 1, 0, 0, 0, 0, 0, 0],
            [1, 1, 1, 1, 0, 0, 0, 0, 0, 0],
            [1, 1, 1, 1, 0, 0, 0, 0, 0, 0],
            [1, 1, 1, 1, 0, 0, 0, 0, 0, 0],
            [1, 1, 1, 1, 1, 1, 0, 0, 0, 0],
            [1, 1, 1, 1, 1, 1, 0, 0, 0, 0],
            [1, 1, 1, 1, 1, 1, 1, 0, 0, 0],
            [1, 1, 1, 1, 1, 1, 1, 1, 0, 0],
            [1, 1, 1, 1, 1, 1, 1, 1, 1, 0],
            [1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
        ];
        let mask = build_mask(10).unwrap();
        for q in 0..10 {
            for k in 0..10 {
                assert_eq!(
                    mask.allowed(q, k),
                    expect[q][k] == 1,
                    "mismatch at ({q},{k})"
                );
            }
        }
    }

    #[test]
    fn too_short_sequences_are_rejected() {
        assert!(build_mask(6).is_err());
        assert!(build_mask(7).is_ok());
    }
}
