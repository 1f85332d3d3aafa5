// SPDX-License-Identifier: Apache-2.0

//! Analytic FLOP counts for one multi-head attention layer.
//!
//! Convention: every scalar add, sub, mul, div, exp and log is one FLOP; an
//! `m×k` by `k×n` matmul is `2mkn`. Softmax max-subtraction is not counted.
//! The model input width is `n_heads · d_k`.
//!
//! Per head, with `L` queries and keys:
//!
//! | component     | standard            | credal                     |
//! |---------------|---------------------|----------------------------|
//! | projections   | Q, K, V, O matmuls  | same                       |
//! | scores        | `2·L·d_k·L + L²`    | same                       |
//! | evidence      | 0                   | softplus, `3·L²`           |
//! | normalization | `L·(3L − 1)`        | same                       |
//! | vacuity       | 0                   | `2·L` (exp, sub)           |
//! | context       | `2·L·L·d_v`         | same                       |

use serde::{Deserialize, Serialize};

use crate::attention::Mechanism;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopModel {
    pub mechanism: Mechanism,
    pub seq_len: u64,
    pub d_k: u64,
    pub d_v: u64,
    pub n_heads: u64,
    pub projections: u64,
    pub scores: u64,
    pub evidence: u64,
    pub normalization: u64,
    pub vacuity: u64,
    pub context: u64,
}

impl FlopModel {
    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.evidence + self.normalization + self.vacuity + self.context
    }

    /// Matmul-derived terms, which never depend on the mechanism.
    pub fn matmul_terms(&self) -> (u64, u64, u64) {
        (self.projections, self.scores, self.context)
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 * 1e-9
    }

    pub fn scaled(&self, layers: u64) -> u64 {
        self.total() * layers
    }
}

/// FLOPs for one attention layer over a length-`seq_len` sequence.
pub fn count_attention_flops(seq_len: usize, d_k: usize, d_v: usize, n_heads: usize, mechanism: Mechanism) -> FlopModel {
    let (l, dk, dv, h) = (seq_len as u64, d_k as u64, d_v as u64, n_heads as u64);
    let d_model = h * dk;
    let projections = 2 * l * d_model * (h * dk) * 2 + 2 * l * d_model * (h * dv) + 2 * l * (h * dv) * d_model;
    let scores = h * (2 * l * dk * l + l * l);
    let normalization = h * l * (3 * l - 1);
    let context = h * 2 * l * l * dv;
    let (evidence, vacuity) = match mechanism {
        Mechanism::Standard => (0, 0),
        Mechanism::Credal => (h * 3 * l * l, h * 2 * l),
    };
    FlopModel {
        mechanism,
        seq_len: l,
        d_k: dk,
        d_v: dv,
        n_heads: h,
        projections,
        scores,
        evidence,
        normalization,
        vacuity,
        context,
    }
}

/// `(credal − standard) / standard` on totals.
pub fn relative_flop_difference(standard: &FlopModel, credal: &FlopModel) -> f64 {
    (credal.total() as f64 - standard.total() as f64) / standard.total() as f64
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::attention::{credal_from_scores, EvidenceFn, ScoreMatrix};
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn score_matmul_term() {
        let f = count_attention_flops(16, 8, 8, 1, Mechanism::Standard);
        // 2·16·8·16 plus the 16² score scaling.
        assert_eq!(f.scores - 16 * 16, 4096);
    }

    #[test]
    fn totals_are_sums_of_components() {
        let f = count_attention_flops(16, 8, 8, 4, Mechanism::Credal);
        let by_hand = f.projections + f.scores + f.evidence + f.normalization + f.vacuity + f.context;
        assert_eq!(f.total(), by_hand);
        assert_eq!(f.scaled(3), 3 * by_hand);
    }

    #[test]
    fn hand_counted_small_case() {
        // L = 2, d_k = d_v = 1, one head.
        let s = count_attention_flops(2, 1, 1, 1, Mechanism::Standard);
        assert_eq!(s.projections, 4 * 2 * 2);
        assert_eq!(s.scores, 8 + 4);
        assert_eq!(s.normalization, 2 * 5);
        assert_eq!(s.context, 8);
        let c = count_attention_flops(2, 1, 1, 1, Mechanism::Credal);
        assert_eq!(c.total() - s.total(), 3 * 4 + 2 * 2);
    }

    #[test]
    fn default_bench_parity() {
        let s = count_attention_flops(128, 64, 64, 4, Mechanism::Standard);
        let c = count_attention_flops(128, 64, 64, 4, Mechanism::Credal);
        let rel = relative_flop_difference(&s, &c);
        assert!(rel > 0.0 && rel < 0.005, "{rel}");
    }

    #[test]
    fn single_key_case() {
        for s in [-2.0, 0.0, 1.5] {
            let tape = Tape::new();
            let scores = ScoreMatrix::from_tensor(&tape, Tensor::from_rows(&[vec![s]]).unwrap(), None).unwrap();
            let v = tape.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
            let out = credal_from_scores(&scores, v, EvidenceFn::Exp).unwrap();
            assert_eq!(out.a_hat.value().data(), &[1.0]);
            let want = 1.0 / (f64::exp(s) + 1.0);
            assert!((out.vacuity.value().data()[0] - want).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn matmul_terms_match_across_mechanisms(l in 1usize..256, dk in 1usize..128, dv in 1usize..128, h in 1usize..8) {
            let s = count_attention_flops(l, dk, dv, h, Mechanism::Standard);
            let c = count_attention_flops(l, dk, dv, h, Mechanism::Credal);
            prop_assert_eq!(s.matmul_terms(), c.matmul_terms());
            prop_assert_eq!(s.normalization, c.normalization);
            prop_assert!(c.total() > s.total());
        }

        // The extra work is O(L²) per head against O(L²·d_k + L·d²) matmuls,
        // so the bound needs d_model ≥ 256 once L may reach d_model.
        #[test]
        fn parity_within_half_percent(d_model in prop::sample::select(vec![256usize, 512]), h in prop::sample::select(vec![1usize, 2, 4]), l in 1usize..=256) {
            let dk = d_model / h;
            let s = count_attention_flops(l, dk, dk, h, Mechanism::Standard);
            let c = count_attention_flops(l, dk, dk, h, Mechanism::Credal);
            prop_assert!(relative_flop_difference(&s, &c) < 0.005);
        }
    }
}
