use crate::error::{contract, Result};
use crate::tensor::{dot, softmax_in_place};

/// Borrowed `n × head_dim` keys and values of one KV head.
#[derive(Clone, Copy, Debug)]
pub struct KvSlice<'a> {
    pub keys: &'a [f32],
    pub values: &'a [f32],
}

impl<'a> KvSlice<'a> {
    pub fn new(keys: &'a [f32], values: &'a [f32]) -> Self {
        Self { keys, values }
    }

    pub fn empty() -> Self {
        Self { keys: &[], values: &[] }
    }

    fn rows(&self, head_dim: usize) -> usize {
        self.keys.len() / head_dim
    }
}

/// Attention of `group` query vectors (`group × head_dim`) over the
/// concatenation of surviving cached pairs and freshly computed pairs.
///
/// The result equals dense attention over the uncompressed cache with the
/// logits of evicted keys set to −∞.
pub fn attend_compressed(
    queries: &[f32],
    head_dim: usize,
    cached: KvSlice<'_>,
    fresh: KvSlice<'_>,
) -> Result<Vec<f32>> {
    if head_dim == 0 || !queries.len().is_multiple_of(head_dim) {
        return Err(contract("query length is not a multiple of head_dim"));
    }
    for s in [&cached, &fresh] {
        if s.keys.len() != s.values.len() || s.keys.len() % head_dim != 0 {
            return Err(contract("key/value slices do not match head_dim"));
        }
    }
    if cached.keys.is_empty() && fresh.keys.is_empty() {
        return Err(contract("no keys to attend over"));
    }
    let mut out = vec![0.0; queries.len()];
    let mut scratch = Vec::new();
    for (q, o) in queries.chunks_exact(head_dim).zip(out.chunks_exact_mut(head_dim)) {
        attend_into(q, head_dim, cached, fresh, o, &mut scratch);
    }
    Ok(out)
}

/// Unchecked single-query kernel used by the forward pass.
pub(crate) fn attend_into(
    query: &[f32],
    head_dim: usize,
    cached: KvSlice<'_>,
    fresh: KvSlice<'_>,
    out: &mut [f32],
    probs: &mut Vec<f32>,
) {
    let scale = 1.0 / (head_dim as f32).sqrt();
    probs.clear();
    for s in [&cached, &fresh] {
        probs.extend(s.keys.chunks_exact(head_dim).map(|k| dot(query, k) * scale));
    }
    softmax_in_place(probs);
    out.fill(0.0);
    let n_cached = cached.rows(head_dim);
    for (j, &p) in probs.iter().enumerate() {
        let v = if j < n_cached {
            &cached.values[j * head_dim..(j + 1) * head_dim]
        } else {
            let j = j - n_cached;
            &fresh.values[j * head_dim..(j + 1) * head_dim]
        };
        for (o, &x) in out.iter_mut().zip(v) {
            *o += p * x;
        }
    }
}
