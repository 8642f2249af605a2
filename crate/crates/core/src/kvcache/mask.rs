use serde::{Deserialize, Serialize};

use crate::tinylm::Role;

/// Boolean keep-set over a `layers × kv_heads × len` cache, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionMask {
    n_layers: usize,
    n_kv_heads: usize,
    len: usize,
    keep: Vec<bool>,
}

impl EvictionMask {
    pub fn filled(n_layers: usize, n_kv_heads: usize, len: usize, value: bool) -> Self {
        Self {
            n_layers,
            n_kv_heads,
            len,
            keep: vec![value; n_layers * n_kv_heads * len],
        }
    }

    pub fn from_vec(n_layers: usize, n_kv_heads: usize, len: usize, keep: Vec<bool>) -> Option<Self> {
        (keep.len() == n_layers * n_kv_heads * len).then_some(Self {
            n_layers,
            n_kv_heads,
            len,
            keep,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    /// Sequence length covered by each head row.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    fn offset(&self, layer: usize, head: usize) -> usize {
        (layer * self.n_kv_heads + head) * self.len
    }

    pub fn get(&self, layer: usize, head: usize, pos: usize) -> bool {
        self.keep[self.offset(layer, head) + pos]
    }

    pub fn set(&mut self, layer: usize, head: usize, pos: usize, keep: bool) {
        let o = self.offset(layer, head);
        self.keep[o + pos] = keep;
    }

    pub fn row(&self, layer: usize, head: usize) -> &[bool] {
        let o = self.offset(layer, head);
        &self.keep[o..o + self.len]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize) -> &mut [bool] {
        let o = self.offset(layer, head);
        &mut self.keep[o..o + self.len]
    }

    pub fn kept(&self, layer: usize, head: usize) -> usize {
        self.row(layer, head).iter().filter(|&&k| k).count()
    }

    pub fn kept_in_layer(&self, layer: usize) -> usize {
        (0..self.n_kv_heads).map(|h| self.kept(layer, h)).sum()
    }

    pub fn total_kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn total(&self) -> usize {
        self.keep.len()
    }

    /// Force-keep every position whose role equals `role`, in all heads.
    pub fn protect_roles(&mut self, roles: &[Role], role: Role) {
        for (p, _) in roles.iter().enumerate().filter(|(_, &r)| r == role) {
            for l in 0..self.n_layers {
                for h in 0..self.n_kv_heads {
                    self.set(l, h, p, true);
                }
            }
        }
    }

    /// True when every position tagged `role` is kept in every head.
    pub fn retains_role(&self, roles: &[Role], role: Role) -> bool {
        roles
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == role)
            .all(|(p, _)| (0..self.n_layers).all(|l| (0..self.n_kv_heads).all(|h| self.get(l, h, p))))
    }

    /// `self ⊆ other` as keep-sets.
    pub fn is_subset_of(&self, other: &EvictionMask) -> bool {
        self.keep.len() == other.keep.len() && self.keep.iter().zip(&other.keep).all(|(&a, &b)| !a || b)
    }

    /// Bit-packed row-major encoding, least-significant bit first.
    pub fn to_bits(&self) -> Vec<u8> {
        let mut bytes = vec![0u8; self.keep.len().div_ceil(8)];
        for (i, _) in self.keep.iter().enumerate().filter(|(_, &k)| k) {
            bytes[i / 8] |= 1 << (i % 8);
        }
        bytes
    }

    pub fn from_bits(n_layers: usize, n_kv_heads: usize, len: usize, bytes: &[u8]) -> Option<Self> {
        let n = n_layers * n_kv_heads * len;
        if bytes.len() != n.div_ceil(8) {
            return None;
        }
        let keep = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Self::from_vec(n_layers, n_kv_heads, len, keep)
    }
}

/// Fraction of pairs kept; an empty mask counts as fully kept.
pub fn cache_ratio(mask: &EvictionMask) -> f64 {
    if mask.total() == 0 {
        return 1.0;
    }
    mask.total_kept() as f64 / mask.total() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_of_all_true_is_one() {
        assert_eq!(cache_ratio(&EvictionMask::filled(2, 3, 10, true)), 1.0);
    }

    #[test]
    fn ratio_half_per_head() {
        let mut m = EvictionMask::filled(2, 2, 8, false);
        for l in 0..2 {
            for h in 0..2 {
                for p in 0..4 {
                    m.set(l, h, p * 2, true);
                }
            }
        }
        assert_eq!(cache_ratio(&m), 0.5);
        assert_eq!(m.kept_in_layer(1), 8);
    }

    #[test]
    fn protect_roles_sets_system_columns() {
        let mut m = EvictionMask::filled(2, 2, 3, false);
        let roles = [Role::System, Role::Context, Role::Context];
        assert!(!m.retains_role(&roles, Role::System));
        m.protect_roles(&roles, Role::System);
        assert!(m.retains_role(&roles, Role::System));
        assert_eq!(m.total_kept(), 4);
    }

    proptest! {
        #[test]
        fn bit_packing_round_trips(l in 1usize..4, h in 1usize..4, n in 0usize..40, seed in any::<u64>()) {
            let keep: Vec<bool> = (0..l * h * n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let m = EvictionMask::from_vec(l, h, n, keep).unwrap();
            let back = EvictionMask::from_bits(l, h, n, &m.to_bits()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
