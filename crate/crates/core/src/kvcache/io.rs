//! Debug export formats.
//!
//! Cache (`KVC1`), little-endian:
//! ```text
//! magic "KVC1" | n_layers u32 | n_kv_heads u32 | head_dim u32
//! per head in (layer, head) order:
//!     len u32 | positions u32 × len | keys f32 × len·d | values f32 × len·d
//! n_roles u32 | role u8 × n_roles   (0 system, 1 context, 2 prompt, 3 generated)
//! ```
//! `n_roles` is zero for compressed caches, whose heads differ in length.
//! Mask (`KVM1`), little-endian:
//! ```text
//! magic "KVM1" | n_layers u32 | n_kv_heads u32 | len u32 | bits (row-major, LSB first)
//! ```

use std::io::{Read, Write};

use super::mask::EvictionMask;
use super::store::{CacheDims, HeadKv, KvCache, KvStore};
use crate::error::{Error, Result};
use crate::tinylm::Role;

const CACHE_MAGIC: &[u8; 4] = b"KVC1";
const MASK_MAGIC: &[u8; 4] = b"KVM1";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format {
        what: "export",
        reason: format!("{v} does not fit in u32"),
    })?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4], what: &'static str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format {
            what,
            reason: format!("bad magic {m:?}"),
        });
    }
    Ok(())
}

/// Write any store (full or compressed) in the `KVC1` layout.
pub fn write_cache(w: &mut impl Write, store: &impl KvStore) -> Result<()> {
    let dims = store.dims();
    w.write_all(CACHE_MAGIC)?;
    put_u32(w, dims.n_layers)?;
    put_u32(w, dims.n_kv_heads)?;
    put_u32(w, dims.head_dim)?;
    for l in 0..dims.n_layers {
        for h in 0..dims.n_kv_heads {
            let head = store.head(l, h);
            put_u32(w, head.len())?;
            for &p in head.positions() {
                w.write_all(&p.to_le_bytes())?;
            }
            for &x in head.keys().iter().chain(head.values()) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    let roles = store.position_roles().unwrap_or(&[]);
    put_u32(w, roles.len())?;
    let bytes: Vec<u8> = roles.iter().map(|&r| role_byte(r)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn role_byte(r: Role) -> u8 {
    match r {
        Role::System => 0,
        Role::Context => 1,
        Role::Prompt => 2,
        Role::Generated => 3,
    }
}

fn byte_role(b: u8) -> Result<Role> {
    Ok(match b {
        0 => Role::System,
        1 => Role::Context,
        2 => Role::Prompt,
        3 => Role::Generated,
        _ => {
            return Err(Error::Format {
                what: "cache",
                reason: format!("unknown role tag {b}"),
            })
        }
    })
}

/// Read a `KVC1` file back as a full cache. Without a role section every
/// position is tagged as context.
pub fn read_cache(r: &mut impl Read) -> Result<KvCache> {
    check_magic(r, CACHE_MAGIC, "cache")?;
    let dims = CacheDims {
        n_layers: get_u32(r)? as usize,
        n_kv_heads: get_u32(r)? as usize,
        head_dim: get_u32(r)? as usize,
    };
    let mut heads = Vec::with_capacity(dims.n_heads_total());
    for _ in 0..dims.n_heads_total() {
        let len = get_u32(r)? as usize;
        let positions = (0..len).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let keys = get_f32s(r, len * dims.head_dim)?;
        let values = get_f32s(r, len * dims.head_dim)?;
        heads.push(HeadKv::from_parts(keys, values, positions));
    }
    let n = heads.first().map_or(0, HeadKv::len);
    let n_roles = get_u32(r)? as usize;
    let roles = match n_roles {
        0 => vec![Role::Context; n],
        _ if n_roles == n => {
            let mut bytes = vec![0u8; n];
            r.read_exact(&mut bytes)?;
            bytes.into_iter().map(byte_role).collect::<Result<_>>()?
        }
        _ => {
            return Err(Error::Format {
                what: "cache",
                reason: format!("{n_roles} role tags for {n} positions"),
            })
        }
    };
    KvCache::from_heads(dims, heads, roles)
}

pub fn write_mask(w: &mut impl Write, mask: &EvictionMask) -> Result<()> {
    w.write_all(MASK_MAGIC)?;
    put_u32(w, mask.n_layers())?;
    put_u32(w, mask.n_kv_heads())?;
    put_u32(w, mask.len())?;
    w.write_all(&mask.to_bits())?;
    Ok(())
}

pub fn read_mask(r: &mut impl Read) -> Result<EvictionMask> {
    check_magic(r, MASK_MAGIC, "mask")?;
    let (l, h, n) = (get_u32(r)? as usize, get_u32(r)? as usize, get_u32(r)? as usize);
    let mut bytes = vec![0u8; (l * h * n).div_ceil(8)];
    r.read_exact(&mut bytes)?;
    EvictionMask::from_bits(l, h, n, &bytes).ok_or(Error::Format {
        what: "mask",
        reason: "bit payload length mismatch".into(),
    })
}
