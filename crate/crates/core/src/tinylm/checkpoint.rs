//! Checkpoint format, little-endian:
//!
//! ```text
//! magic "TLM1"
//! n_layers n_kv_heads group_size head_dim vocab_size max_position hidden_dim seed   (u32 each)
//! parameter tensors in declaration order as raw f32:
//!     embed, per layer [attn_norm wq wk wv wo mlp_norm w_gate w_up w_down],
//!     final_norm, lm_head
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::model::{Model, Weights};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TLM1";

pub fn write_checkpoint(w: &mut impl Write, model: &Model) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in model.config.to_words() {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for t in model.weights.tensors() {
        for x in t {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            what: "checkpoint",
            reason: "bad magic".into(),
        });
    }
    let mut words = [0u32; 8];
    for w in &mut words {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *w = u32::from_le_bytes(b);
    }
    let config = ModelConfig::from_words(words);
    config.validate()?;
    let mut weights = Weights::zeros(&config);
    for t in weights.tensors_mut() {
        let mut buf = vec![0u8; t.len() * 4];
        r.read_exact(&mut buf)?;
        for (x, c) in t.iter_mut().zip(buf.chunks_exact(4)) {
            *x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format {
            what: "checkpoint",
            reason: "trailing bytes".into(),
        });
    }
    Model::from_weights(config, weights)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, model)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}
