use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMethod {
    Kvzip,
    KvzipLogit,
    PrefillMax,
    SnapWindow,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 4] = [
        ScoreMethod::Kvzip,
        ScoreMethod::KvzipLogit,
        ScoreMethod::PrefillMax,
        ScoreMethod::SnapWindow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreMethod::Kvzip => "kvzip",
            ScoreMethod::KvzipLogit => "kvzip-logit",
            ScoreMethod::PrefillMax => "prefill-max",
            ScoreMethod::SnapWindow => "snap-window",
        }
    }

    /// Whether scores are attention probabilities and so lie in `[0, 1]`.
    pub fn is_probability(self) -> bool {
        self != ScoreMethod::KvzipLogit
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scoring method `{s}`")))
    }
}

/// Importance scores, `layers × kv_heads × len`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor {
    n_layers: usize,
    n_kv_heads: usize,
    len: usize,
    scores: Vec<f32>,
    pub method: ScoreMethod,
    /// Chunk size used by reconstruction scoring.
    pub chunk_size: Option<usize>,
    /// Positions that every head must keep regardless of score. They take
    /// precedence over scored positions during allocation.
    pub pinned: Vec<usize>,
}

impl ScoreTensor {
    pub fn new(n_layers: usize, n_kv_heads: usize, len: usize, method: ScoreMethod) -> Self {
        Self::from_vec(
            n_layers,
            n_kv_heads,
            len,
            vec![0.0; n_layers * n_kv_heads * len],
            method,
        )
        .expect("sized by construction")
    }

    pub fn from_vec(
        n_layers: usize,
        n_kv_heads: usize,
        len: usize,
        scores: Vec<f32>,
        method: ScoreMethod,
    ) -> Option<Self> {
        (scores.len() == n_layers * n_kv_heads * len).then_some(Self {
            n_layers,
            n_kv_heads,
            len,
            scores,
            method,
            chunk_size: None,
            pinned: Vec::new(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    /// Number of scored positions (`n_c`).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.scores
    }

    pub fn get(&self, layer: usize, head: usize, pos: usize) -> f32 {
        self.scores[(layer * self.n_kv_heads + head) * self.len + pos]
    }

    pub fn row(&self, layer: usize, head: usize) -> &[f32] {
        let i = (layer * self.n_kv_heads + head) * self.len;
        &self.scores[i..i + self.len]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize) -> &mut [f32] {
        let i = (layer * self.n_kv_heads + head) * self.len;
        &mut self.scores[i..i + self.len]
    }

    /// Rows of one layer, head-major.
    pub fn layer(&self, layer: usize) -> &[f32] {
        let w = self.n_kv_heads * self.len;
        &self.scores[layer * w..(layer + 1) * w]
    }

    pub fn is_pinned(&self, pos: usize) -> bool {
        self.pinned.contains(&pos)
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &ScoreTensor) -> Option<f32> {
        if (self.n_layers, self.n_kv_heads, self.len) != (other.n_layers, other.n_kv_heads, other.len) {
            return None;
        }
        Some(
            self.scores
                .iter()
                .zip(&other.scores)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let bytes: Vec<u8> = self.scores.iter().flat_map(|s| s.to_le_bytes()).collect();
        let doc = ScoreDoc {
            format: SCORE_FORMAT.to_string(),
            n_layers: self.n_layers,
            n_kv_heads: self.n_kv_heads,
            len: self.len,
            method: self.method,
            chunk_size: self.chunk_size,
            pinned: self.pinned.clone(),
            data: B64.encode(bytes),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScoreDoc = serde_json::from_str(text)?;
        let bad = |reason: String| Error::Format {
            what: "score tensor",
            reason,
        };
        if doc.format != SCORE_FORMAT {
            return Err(bad(format!("unsupported format `{}`", doc.format)));
        }
        let bytes = B64.decode(doc.data).map_err(|e| bad(e.to_string()))?;
        if bytes.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of floats".into()));
        }
        let scores = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut t = Self::from_vec(doc.n_layers, doc.n_kv_heads, doc.len, scores, doc.method)
            .ok_or_else(|| bad("payload length does not match dims".into()))?;
        if doc.pinned.iter().any(|&p| p >= doc.len) {
            return Err(bad("pinned position out of range".into()));
        }
        t.chunk_size = doc.chunk_size;
        t.pinned = doc.pinned;
        Ok(t)
    }
}

const SCORE_FORMAT: &str = "score-tensor/1";

#[derive(Serialize, Deserialize)]
struct ScoreDoc {
    format: String,
    n_layers: usize,
    n_kv_heads: usize,
    len: usize,
    method: ScoreMethod,
    chunk_size: Option<usize>,
    pinned: Vec<usize>,
    /// Row-major little-endian f32, base64.
    data: String,
}

/// Per-head maxima, `layers × kv_heads`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub scores: Vec<f32>,
}

impl HeadScore {
    pub fn get(&self, layer: usize, head: usize) -> f32 {
        self.scores[layer * self.n_kv_heads + head]
    }
}

/// Max over the position axis. An empty row scores `-inf`.
pub fn aggregate_head(s: &ScoreTensor) -> HeadScore {
    let mut scores = Vec::with_capacity(s.n_layers * s.n_kv_heads);
    for l in 0..s.n_layers {
        for h in 0..s.n_kv_heads {
            scores.push(s.row(l, h).iter().copied().fold(f32::NEG_INFINITY, f32::max));
        }
    }
    HeadScore {
        n_layers: s.n_layers,
        n_kv_heads: s.n_kv_heads,
        scores,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_tensor_aggregates_to_constant() {
        let t = ScoreTensor::from_vec(2, 3, 5, vec![0.25; 30], ScoreMethod::Kvzip).unwrap();
        assert!(aggregate_head(&t).scores.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_peak_sets_head_max() {
        let mut t = ScoreTensor::from_vec(1, 2, 4, vec![0.1; 8], ScoreMethod::Kvzip).unwrap();
        t.row_mut(0, 1)[2] = 0.9;
        let h = aggregate_head(&t);
        assert_eq!(h.get(0, 1), 0.9);
        assert_eq!(h.get(0, 0), 0.1);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let vals: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut t = ScoreTensor::from_vec(2, 2, 6, vals, ScoreMethod::SnapWindow).unwrap();
        t.chunk_size = Some(3);
        t.pinned = vec![4, 5];
        let back = ScoreTensor::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn json_rejects_short_payload() {
        let t = ScoreTensor::new(1, 1, 3, ScoreMethod::Kvzip);
        let text = t.to_json().unwrap().replace("\"len\": 3", "\"len\": 4");
        assert!(ScoreTensor::from_json(&text).is_err());
    }

    #[test]
    fn method_names_parse_back() {
        for m in ScoreMethod::ALL {
            assert_eq!(m.name().parse::<ScoreMethod>().unwrap(), m);
        }
        assert!("h2o".parse::<ScoreMethod>().is_err());
    }
}
