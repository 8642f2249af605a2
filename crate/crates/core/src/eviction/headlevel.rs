use serde::{Deserialize, Serialize};

use super::budget::check_ratio;
use crate::error::{Error, Result};
use crate::kvcache::EvictionMask;
use crate::scoring::HeadScore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAssignment {
    Full,
    /// Keep the first `sink` and the last `window` positions.
    Streaming,
}

/// Context-independent per-head policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPolicy {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub sink: usize,
    pub window: usize,
    /// Row-major `layers × kv_heads`.
    pub heads: Vec<HeadAssignment>,
    /// True when the requested ratio was below the all-streaming floor.
    pub clamped: bool,
}

impl HeadPolicy {
    pub fn get(&self, layer: usize, head: usize) -> HeadAssignment {
        self.heads[layer * self.n_kv_heads + head]
    }

    pub fn n_full(&self) -> usize {
        self.heads.iter().filter(|&&a| a == HeadAssignment::Full).count()
    }

    /// Pairs one head keeps out of `n_c`.
    pub fn kept_per_head(&self, assignment: HeadAssignment, n_c: usize) -> usize {
        match assignment {
            HeadAssignment::Full => n_c,
            HeadAssignment::Streaming => (self.sink + self.window).min(n_c),
        }
    }

    pub fn ratio(&self, n_c: usize) -> f64 {
        if n_c == 0 || self.heads.is_empty() {
            return 1.0;
        }
        let kept: usize = self.heads.iter().map(|&a| self.kept_per_head(a, n_c)).sum();
        kept as f64 / (self.heads.len() * n_c) as f64
    }

    pub fn to_mask(&self, n_c: usize) -> EvictionMask {
        let mut mask = EvictionMask::filled(self.n_layers, self.n_kv_heads, n_c, true);
        for l in 0..self.n_layers {
            for h in 0..self.n_kv_heads {
                if self.get(l, h) == HeadAssignment::Streaming {
                    let recent = n_c.saturating_sub(self.window);
                    for (p, keep) in mask.row_mut(l, h).iter_mut().enumerate() {
                        *keep = p < self.sink || p >= recent;
                    }
                }
            }
        }
        mask
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: HeadPolicy = serde_json::from_str(text)?;
        if p.heads.len() != p.n_layers * p.n_kv_heads {
            return Err(Error::Format {
                what: "head policy",
                reason: "head count does not match dims".into(),
            });
        }
        Ok(p)
    }
}

/// Lowest ratio reachable with every head streaming.
pub fn streaming_floor(sink: usize, window: usize, n_c: usize) -> f64 {
    if n_c == 0 {
        1.0
    } else {
        (sink + window).min(n_c) as f64 / n_c as f64
    }
}

/// Mark the highest-scoring heads `full` (ties to the lower `(layer, head)`),
/// using the fewest full heads whose total ratio reaches `r`. Ratios below the
/// all-streaming floor are clamped to it.
pub fn allocate_headlevel(head: &HeadScore, r: f64, sink: usize, window: usize, n_c: usize) -> Result<HeadPolicy> {
    check_ratio(r)?;
    if sink + window > n_c {
        return Err(Error::Config(format!(
            "sink {sink} + window {window} exceeds context length {n_c}"
        )));
    }
    let total = head.scores.len();
    let floor = streaming_floor(sink, window, n_c);
    let clamped = r < floor;
    if clamped {
        log::warn!("ratio {r} is below the streaming floor {floor:.4}; clamping");
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| head.scores[b].total_cmp(&head.scores[a]).then(a.cmp(&b)));

    let s = sink + window;
    let reaches = |f: usize| {
        let kept = (f * n_c + (total - f) * s) as f64;
        kept >= r * (total * n_c) as f64 - 1e-9 * (total * n_c) as f64
    };
    let n_full = (0..=total).find(|&f| reaches(f)).unwrap_or(total);

    let mut heads = vec![HeadAssignment::Streaming; total];
    for &i in &order[..n_full] {
        heads[i] = HeadAssignment::Full;
    }
    Ok(HeadPolicy {
        n_layers: head.n_layers,
        n_kv_heads: head.n_kv_heads,
        sink,
        window,
        heads,
        clamped,
    })
}
