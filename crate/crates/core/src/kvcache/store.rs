use serde::{Deserialize, Serialize};

use super::mask::EvictionMask;
use crate::error::{contract, Result};
use crate::tinylm::Role;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheDims {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl CacheDims {
    pub fn n_heads_total(&self) -> usize {
        self.n_layers * self.n_kv_heads
    }

    pub(crate) fn index(&self, layer: usize, head: usize) -> usize {
        debug_assert!(layer < self.n_layers && head < self.n_kv_heads);
        layer * self.n_kv_heads + head
    }
}

/// Keys, values and absolute positions held by one KV head of one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadKv {
    keys: Vec<f32>,
    values: Vec<f32>,
    positions: Vec<u32>,
}

impl HeadKv {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Row-major `len × head_dim`.
    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub(crate) fn push(&mut self, key: &[f32], value: &[f32], position: u32) {
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.positions.push(position);
    }

    pub(crate) fn from_parts(keys: Vec<f32>, values: Vec<f32>, positions: Vec<u32>) -> Self {
        Self {
            keys,
            values,
            positions,
        }
    }

    fn gather(&self, keep: &[bool], head_dim: usize) -> HeadKv {
        let mut out = HeadKv::default();
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            let row = i * head_dim..(i + 1) * head_dim;
            out.push(&self.keys[row.clone()], &self.values[row], self.positions[i]);
        }
        out
    }

    fn truncate(&mut self, len: usize, head_dim: usize) {
        self.keys.truncate(len * head_dim);
        self.values.truncate(len * head_dim);
        self.positions.truncate(len);
    }
}

/// Anything the model can attend over and append to while decoding.
pub trait KvStore {
    fn dims(&self) -> CacheDims;
    fn head(&self, layer: usize, head: usize) -> &HeadKv;
    fn head_mut(&mut self, layer: usize, head: usize) -> &mut HeadKv;
    /// Absolute position the next appended token will occupy.
    fn next_position(&self) -> usize;
    /// Record that `roles.len()` tokens were appended to every head.
    fn advance(&mut self, roles: &[Role]);
    /// Per-position role tags, when every head holds the same positions.
    fn position_roles(&self) -> Option<&[Role]> {
        None
    }
}

/// The uncompressed cache produced by prefill: every head holds the same
/// positions `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    dims: CacheDims,
    heads: Vec<HeadKv>,
    roles: Vec<Role>,
}

impl KvCache {
    pub fn empty(dims: CacheDims) -> Self {
        Self {
            dims,
            heads: vec![HeadKv::default(); dims.n_heads_total()],
            roles: Vec::new(),
        }
    }

    pub(crate) fn from_heads(dims: CacheDims, heads: Vec<HeadKv>, roles: Vec<Role>) -> Result<Self> {
        let cache = Self { dims, heads, roles };
        cache.validate()?;
        Ok(cache)
    }

    pub fn dims(&self) -> CacheDims {
        self.dims
    }

    /// Sequence length shared by all heads.
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn heads(&self) -> &[HeadKv] {
        &self.heads
    }

    /// Total number of stored KV pairs (`L · H · n`).
    pub fn n_pairs(&self) -> usize {
        self.heads.iter().map(HeadKv::len).sum()
    }

    /// Drop everything from position `len` on; used to discard appended
    /// prompt tokens so a context cache can be reused.
    pub fn truncate(&mut self, len: usize) {
        let d = self.dims.head_dim;
        for h in &mut self.heads {
            h.truncate(len, d);
        }
        self.roles.truncate(len);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.roles.len();
        if self.heads.len() != self.dims.n_heads_total() {
            return Err(contract("head count does not match cache dims"));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.len() != n || h.keys.len() != n * self.dims.head_dim || h.values.len() != n * self.dims.head_dim {
                return Err(contract(format!("head {i} length differs from cache length {n}")));
            }
            if h.positions.iter().enumerate().any(|(p, &q)| q as usize != p) {
                return Err(contract(format!("head {i} positions are not 0..{n}")));
            }
        }
        Ok(())
    }
}

impl KvStore for KvCache {
    fn dims(&self) -> CacheDims {
        self.dims
    }

    fn head(&self, layer: usize, head: usize) -> &HeadKv {
        &self.heads[self.dims.index(layer, head)]
    }

    fn head_mut(&mut self, layer: usize, head: usize) -> &mut HeadKv {
        let i = self.dims.index(layer, head);
        &mut self.heads[i]
    }

    fn next_position(&self) -> usize {
        self.roles.len()
    }

    fn advance(&mut self, roles: &[Role]) {
        self.roles.extend_from_slice(roles);
    }

    fn position_roles(&self) -> Option<&[Role]> {
        Some(&self.roles)
    }
}

/// Records what the compression step was allowed to see.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    /// Query tokens the scorer looked at, if compression was query-aware.
    pub observed_query: Option<Vec<u32>>,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            method: "unspecified".into(),
            observed_query: None,
        }
    }
}

/// Survivors of an eviction mask, physically gathered per head. Tokens
/// decoded on top of it are appended after the kept pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedCache {
    dims: CacheDims,
    heads: Vec<HeadKv>,
    mask: EvictionMask,
    kept: Vec<usize>,
    source_len: usize,
    next_position: usize,
    provenance: Provenance,
}

impl CompressedCache {
    pub fn dims(&self) -> CacheDims {
        self.dims
    }

    pub fn mask(&self) -> &EvictionMask {
        &self.mask
    }

    pub fn heads(&self) -> &[HeadKv] {
        &self.heads
    }

    /// Number of source pairs kept by head `(layer, head)`.
    pub fn kept(&self, layer: usize, head: usize) -> usize {
        self.kept[self.dims.index(layer, head)]
    }

    pub fn kept_pairs(&self) -> usize {
        self.kept.iter().sum()
    }

    /// Length of the cache this one was compressed from.
    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Bytes of key/value storage for the kept source pairs (32-bit floats).
    pub fn kv_bytes(&self) -> usize {
        self.kept_pairs() * 2 * self.dims.head_dim * 4
    }
}

impl KvStore for CompressedCache {
    fn dims(&self) -> CacheDims {
        self.dims
    }

    fn head(&self, layer: usize, head: usize) -> &HeadKv {
        &self.heads[self.dims.index(layer, head)]
    }

    fn head_mut(&mut self, layer: usize, head: usize) -> &mut HeadKv {
        let i = self.dims.index(layer, head);
        &mut self.heads[i]
    }

    fn next_position(&self) -> usize {
        self.next_position
    }

    fn advance(&mut self, roles: &[Role]) {
        self.next_position += roles.len();
    }
}

/// Gather the pairs selected by `mask`. System-tagged positions are always
/// kept; the returned cache's mask reflects that.
pub fn apply_mask(cache: &KvCache, mask: &EvictionMask) -> Result<CompressedCache> {
    let dims = cache.dims();
    if mask.n_layers() != dims.n_layers || mask.n_kv_heads() != dims.n_kv_heads || mask.len() != cache.len() {
        return Err(contract(format!(
            "mask shape {}x{}x{} does not match cache {}x{}x{}",
            mask.n_layers(),
            mask.n_kv_heads(),
            mask.len(),
            dims.n_layers,
            dims.n_kv_heads,
            cache.len()
        )));
    }
    let mut mask = mask.clone();
    mask.protect_roles(cache.roles(), Role::System);

    let mut heads = Vec::with_capacity(dims.n_heads_total());
    let mut kept = Vec::with_capacity(dims.n_heads_total());
    for l in 0..dims.n_layers {
        for h in 0..dims.n_kv_heads {
            let row = mask.row(l, h);
            heads.push(cache.head(l, h).gather(row, dims.head_dim));
            kept.push(row.iter().filter(|&&k| k).count());
        }
    }
    Ok(CompressedCache {
        dims,
        heads,
        mask,
        kept,
        source_len: cache.len(),
        next_position: cache.len(),
        provenance: Provenance::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cache(n_layers: usize, n_kv_heads: usize, len: usize, d: usize) -> KvCache {
        let dims = CacheDims {
            n_layers,
            n_kv_heads,
            head_dim: d,
        };
        let mut cache = KvCache::empty(dims);
        for p in 0..len {
            for l in 0..n_layers {
                for h in 0..n_kv_heads {
                    let base = (l * 100 + h * 10 + p) as f32;
                    let key: Vec<f32> = (0..d).map(|i| base + i as f32 * 0.1).collect();
                    let value: Vec<f32> = key.iter().map(|k| -k).collect();
                    cache.head_mut(l, h).push(&key, &value, p as u32);
                }
            }
            let role = if p == 0 { Role::System } else { Role::Context };
            cache.advance(&[role]);
        }
        cache
    }

    #[test]
    fn all_true_mask_keeps_everything() {
        let cache = toy_cache(2, 2, 5, 3);
        let mask = EvictionMask::filled(2, 2, 5, true);
        let c = apply_mask(&cache, &mask).unwrap();
        assert_eq!(c.heads(), cache.heads());
        assert_eq!(c.kept_pairs(), cache.n_pairs());
        assert_eq!(c.next_position(), 5);
    }

    #[test]
    fn all_false_mask_keeps_only_system_token() {
        let cache = toy_cache(1, 2, 4, 2);
        let mask = EvictionMask::filled(1, 2, 4, false);
        let c = apply_mask(&cache, &mask).unwrap();
        for h in c.heads() {
            assert_eq!(h.positions(), &[0]);
        }
        assert_eq!(c.kept_pairs(), 2);
        assert!(c.mask().get(0, 1, 0));
    }

    #[test]
    fn gather_preserves_order() {
        let cache = toy_cache(1, 1, 4, 2);
        let mut mask = EvictionMask::filled(1, 1, 4, false);
        mask.set(0, 0, 2, true);
        let c = apply_mask(&cache, &mask).unwrap();
        assert_eq!(c.head(0, 0).positions(), &[0, 2]);
        assert_eq!(c.head(0, 0).keys(), &[0.0, 0.1, 2.0, 2.1]);
        assert_eq!(c.head(0, 0).values(), &[-0.0, -0.1, -2.0, -2.1]);
        assert_eq!(c.kept(0, 0), 2);
    }

    #[test]
    fn reapplying_own_mask_is_identity() {
        let cache = toy_cache(2, 2, 7, 2);
        let mut mask = EvictionMask::filled(2, 2, 7, false);
        for (i, p) in [(0, 3), (1, 5), (2, 6), (3, 1)] {
            mask.set(i / 2, i % 2, p, true);
        }
        let once = apply_mask(&cache, &mask).unwrap();
        let twice = apply_mask(&cache, once.mask()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let cache = toy_cache(1, 2, 4, 2);
        let mask = EvictionMask::filled(1, 2, 5, true);
        assert!(matches!(apply_mask(&cache, &mask), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn original_cache_is_untouched() {
        let cache = toy_cache(2, 1, 6, 2);
        let before = cache.clone();
        let _ = apply_mask(&cache, &EvictionMask::filled(2, 1, 6, false)).unwrap();
        assert_eq!(cache, before);
    }

    #[test]
    fn truncate_drops_appended_positions() {
        let mut cache = toy_cache(1, 1, 6, 2);
        cache.truncate(3);
        assert_eq!(cache.len(), 3);
        cache.validate().unwrap();
    }
}
