use serde::{Deserialize, Serialize};

use super::headlevel::HeadPolicy;
use crate::kvcache::{cache_ratio, EvictionMask};

/// Retention summary of a mask or head policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub per_layer_kept: Vec<usize>,
    pub kept: usize,
    pub total: usize,
    pub ratio: f64,
    /// Smallest and largest per-head retention fraction.
    pub min_head_retention: f64,
    pub max_head_retention: f64,
}

pub fn mask_to_policy_report(mask: &EvictionMask) -> PolicyReport {
    let n = mask.len();
    let fractions: Vec<f64> = (0..mask.n_layers())
        .flat_map(|l| (0..mask.n_kv_heads()).map(move |h| (l, h)))
        .map(|(l, h)| if n == 0 { 1.0 } else { mask.kept(l, h) as f64 / n as f64 })
        .collect();
    PolicyReport {
        per_layer_kept: (0..mask.n_layers()).map(|l| mask.kept_in_layer(l)).collect(),
        kept: mask.total_kept(),
        total: mask.total(),
        ratio: cache_ratio(mask),
        min_head_retention: fractions.iter().copied().fold(f64::INFINITY, f64::min).min(1.0),
        max_head_retention: fractions.iter().copied().fold(0.0, f64::max),
    }
}

pub fn policy_report(policy: &HeadPolicy, n_c: usize) -> PolicyReport {
    mask_to_policy_report(&policy.to_mask(n_c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eviction::allocate_headlevel;
    use crate::scoring::HeadScore;

    #[test]
    fn all_true_reports_full_ratio() {
        let r = mask_to_policy_report(&EvictionMask::filled(2, 3, 5, true));
        assert_eq!(r.ratio, 1.0);
        assert_eq!(r.per_layer_kept, vec![15, 15]);
        assert_eq!((r.min_head_retention, r.max_head_retention), (1.0, 1.0));
    }

    #[test]
    fn streaming_floor_reports_quarter() {
        let hs = HeadScore {
            n_layers: 2,
            n_kv_heads: 2,
            scores: vec![0.4, 0.3, 0.2, 0.1],
        };
        let p = allocate_headlevel(&hs, 0.25, 4, 12, 64).unwrap();
        let r = policy_report(&p, 64);
        assert_eq!(r.ratio, 0.25);
        assert_eq!(r.max_head_retention, 0.25);
    }
}
