//! KV storage, eviction masks and attention over compressed caches.
//!
//! Storage is ragged per `(layer, head)`: a full prefill cache happens to
//! have equal lengths everywhere, while a [`CompressedCache`] keeps only the
//! gathered survivors of an [`EvictionMask`], so per-head lengths differ.

mod attend;
mod io;
mod mask;
mod store;

pub(crate) use attend::attend_into;
pub use attend::{attend_compressed, KvSlice};
pub use io::{read_cache, read_mask, write_cache, write_mask};
pub use mask::{cache_ratio, EvictionMask};
pub use store::{apply_mask, CacheDims, CompressedCache, HeadKv, KvCache, KvStore, Provenance};
