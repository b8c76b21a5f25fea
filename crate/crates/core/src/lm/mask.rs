//! Attention mask construction: the stair-stepping mask for time-major
//! multi-channel EEG tokens, the ordinary causal mask for text, and the
//! generic predicate constructor the instruction assembler composes.

use crate::tensor::{Scalar, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense `S x S` boolean attention mask; `allowed(q, k)` says whether
/// query position q may attend to key position k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; size * size];
        for q in 0..size {
            for k in 0..size {
                allowed[q * size + k] = f(q, k);
            }
        }
        AttnMask { size, allowed }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.size + k]
    }

    /// 1.0 where attention is allowed, 0.0 elsewhere.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.allowed.iter().map(|&b| if b { S::one() } else { S::zero() }).collect();
        Tensor::new(vec![self.size, self.size], data).expect("mask shape")
    }

    /// Time-major stair-stepping mask over `channels * times` EEG tokens
    /// followed by `pad_len` PAD positions: a token sees all channels at
    /// its own and earlier time steps; PAD rows and columns are fully
    /// disallowed.
    pub fn stair_step(channels: usize, times: usize, pad_len: usize, max_len: usize) -> Result<Self> {
        let body = channels * times;
        let size = body + pad_len;
        if size > max_len {
            return Err(TensorError::InvalidArg {
                op: "stair_step_mask",
                detail: format!("{size} positions exceed the maximum sequence length {max_len}"),
            });
        }
        if channels == 0 || times == 0 {
            return Err(TensorError::InvalidArg {
                op: "stair_step_mask",
                detail: "need at least one channel and one time step".into(),
            });
        }
        Ok(Self::from_fn(size, |q, k| {
            q < body && k < body && (k / channels) <= (q / channels)
        }))
    }

    /// Ordinary lower-triangular causal mask.
    pub fn causal(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(TensorError::InvalidArg {
                op: "causal_mask",
                detail: "size must be >= 1".into(),
            });
        }
        Ok(Self::from_fn(size, |q, k| k <= q))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stair_step_matches_spec_table() {
        // C=2, T=3: rows [110000, 110000, 111100, 111100, 111111, 111111]
        let m = AttnMask::stair_step(2, 3, 0, 1024).unwrap();
        let expected = [
            [1, 1, 0, 0, 0, 0],
            [1, 1, 0, 0, 0, 0],
            [1, 1, 1, 1, 0, 0],
            [1, 1, 1, 1, 0, 0],
            [1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1],
        ];
        for q in 0..6 {
            for k in 0..6 {
                assert_eq!(m.allowed(q, k), expected[q][k] == 1, "({q},{k})");
            }
        }
    }

    #[test]
    fn stair_step_equals_bruteforce_predicate() {
        for c in 1..=8usize {
            for t in 1..=16usize {
                let m = AttnMask::stair_step(c, t, 0, 1024).unwrap();
                for q in 0..c * t {
                    for k in 0..c * t {
                        assert_eq!(m.allowed(q, k), (k / c) <= (q / c), "C={c} T={t} ({q},{k})");
                    }
                }
            }
        }
    }

    #[test]
    fn single_channel_stair_is_causal() {
        let s = AttnMask::stair_step(1, 7, 0, 1024).unwrap();
        let c = AttnMask::causal(7).unwrap();
        assert_eq!(s, c);
    }

    #[test]
    fn allowed_key_count_is_channels_times_time() {
        let c = 3;
        let t = 5;
        let m = AttnMask::stair_step(c, t, 0, 1024).unwrap();
        for q in 0..c * t {
            let time = q / c;
            let count = (0..c * t).filter(|&k| m.allowed(q, k)).count();
            assert_eq!(count, c * (time + 1));
        }
    }

    #[test]
    fn pad_rows_and_columns_disallowed() {
        let m = AttnMask::stair_step(2, 2, 3, 1024).unwrap();
        assert_eq!(m.size(), 7);
        for p in 4..7 {
            for i in 0..7 {
                assert!(!m.allowed(p, i), "pad row {p} attends {i}");
                assert!(!m.allowed(i, p), "position {i} attends pad {p}");
            }
        }
    }

    #[test]
    fn causal_shapes() {
        let m = AttnMask::causal(1).unwrap();
        assert!(m.allowed(0, 0));
        let m = AttnMask::causal(3).unwrap();
        for q in 0..3 {
            assert_eq!((0..3).filter(|&k| m.allowed(q, k)).count(), q + 1);
        }
    }

    #[test]
    fn length_cap_enforced() {
        assert!(AttnMask::stair_step(4, 4, 0, 15).is_err());
        assert!(AttnMask::stair_step(4, 4, 0, 16).is_ok());
    }
}
