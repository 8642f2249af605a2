use serde::{Deserialize, Serialize};

use super::kvzip::chunk_ranges;
use super::prompt::RepeatPromptSpec;
use crate::error::{contract, Result};

/// Attention cost model for one query head.
///
/// Units are half key-position pairs: a query scoring a strictly earlier key
/// costs 2, its own key costs 1. Causal prefill of `n` tokens is then exactly
/// `n²`, i.e. `n²/2` whole pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub n_c: usize,
    pub chunk_size: usize,
    pub prefill: u64,
    /// One entry per chunk: `2·n_c·n_in + n_in²`.
    pub per_chunk: Vec<u64>,
    pub scoring: u64,
    /// Count taken from instrumented forward passes, if available.
    pub measured_scoring: Option<u64>,
}

impl FlopReport {
    pub fn ratio(&self) -> f64 {
        self.scoring as f64 / self.prefill as f64
    }

    /// Attach a measured total summed over `heads` query heads (all layers).
    pub fn with_measured(mut self, total_half_pairs: u64, heads: usize) -> Result<Self> {
        let heads = heads as u64;
        if heads == 0 || !total_half_pairs.is_multiple_of(heads) {
            return Err(contract("measured attention work is not a whole count per head"));
        }
        self.measured_scoring = Some(total_half_pairs / heads);
        Ok(self)
    }

    pub fn measured_matches(&self) -> bool {
        self.measured_scoring == Some(self.scoring)
    }
}

/// Causal prefill cost, half-pair units.
pub fn prefill_half_pairs(n: usize) -> u64 {
    (n as u64).pow(2)
}

/// Cost of forwarding `n_in` tokens after `prior` cached ones.
pub fn extend_half_pairs(prior: usize, n_in: usize) -> u64 {
    let (p, n) = (prior as u64, n_in as u64);
    2 * p * n + n * n
}

/// Closed-form cost of chunked reconstruction scoring.
pub fn flops_scoring(n_c: usize, m: usize, prompt: &RepeatPromptSpec) -> Result<FlopReport> {
    if m == 0 || m > n_c {
        return Err(contract(format!("chunk size {m} must lie in 1..={n_c}")));
    }
    let per_chunk: Vec<u64> = chunk_ranges(n_c, m)
        .into_iter()
        .map(|r| extend_half_pairs(n_c, prompt.n_prompt(r.start) + r.len()))
        .collect();
    Ok(FlopReport {
        n_c,
        chunk_size: m,
        prefill: prefill_half_pairs(n_c),
        scoring: per_chunk.iter().sum(),
        per_chunk,
        measured_scoring: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_prompt() -> RepeatPromptSpec {
        RepeatPromptSpec {
            first: vec![],
            continuation_prefix: vec![],
            continuation_suffix: vec![],
            span_len: 0,
        }
    }

    #[test]
    fn ratio_is_two_plus_m_over_n() {
        let r = flops_scoring(4096, 2048, &no_prompt()).unwrap();
        assert_eq!(r.ratio(), 2.5);
        let r = flops_scoring(512, 512, &no_prompt()).unwrap();
        assert_eq!(r.ratio(), 3.0);
    }

    #[test]
    fn ratio_approaches_two() {
        let r = flops_scoring(1 << 16, 16, &no_prompt()).unwrap();
        assert!((r.ratio() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn prompt_tokens_are_charged() {
        let p = RepeatPromptSpec::standard();
        let r = flops_scoring(20, 10, &p).unwrap();
        assert_eq!(
            r.per_chunk,
            vec![extend_half_pairs(20, 12), extend_half_pairs(20, 10 + 11)]
        );
    }

    #[test]
    fn oversized_chunk_is_rejected() {
        assert!(flops_scoring(10, 11, &no_prompt()).is_err());
        assert!(flops_scoring(10, 0, &no_prompt()).is_err());
    }
}
