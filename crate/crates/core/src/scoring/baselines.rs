use super::kvzip::ScoreOutput;
use super::tensor::{ScoreMethod, ScoreTensor};
use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_in_place};
use crate::tinylm::{LayerCapture, Model, Role, TokenSeq};

/// Observation window and pooling kernel used for long contexts.
pub const SNAP_WINDOW: usize = 32;
pub const SNAP_KERNEL: usize = 7;
/// Observation window used for contexts under 1K tokens.
pub const SNAP_WINDOW_SHORT: usize = 16;

/// Causal attention row of query `i` (of `n_q` captured) over keys `0..visible`.
#[allow(clippy::too_many_arguments)]
fn attention_row(
    qs: &[f32],
    keys: &[f32],
    d: usize,
    n_q: usize,
    g: usize,
    i: usize,
    visible: usize,
    buf: &mut Vec<f32>,
) {
    let scale = 1.0 / (d as f32).sqrt();
    let q = &qs[(g * n_q + i) * d..(g * n_q + i + 1) * d];
    buf.clear();
    buf.extend(keys[..visible * d].chunks_exact(d).map(|k| dot(q, k) * scale));
    softmax_in_place(buf);
}

fn capture_context(model: &Model, tokens: &TokenSeq) -> Result<(Vec<LayerCapture>, u64)> {
    let (out, _) = model.forward(tokens, None, true)?;
    Ok((out.captured.expect("capture requested"), out.attention_half_pairs))
}

/// Largest causal attention each key receives from itself or any later query
/// during prefill, maximised over the query group.
pub fn score_prefill_max(model: &Model, context: &TokenSeq) -> Result<ScoreOutput> {
    let cfg = model.config();
    let (d, g_size, n) = (cfg.head_dim, cfg.group_size, context.len());
    let mut scores = ScoreTensor::new(cfg.n_layers, cfg.n_kv_heads, n, ScoreMethod::PrefillMax);
    if n == 0 {
        return Ok(ScoreOutput::new(scores, 0));
    }
    let (captured, hp) = capture_context(model, context)?;
    let mut buf = Vec::new();
    for (l, layer) in captured.iter().enumerate() {
        for (h, (qs, keys)) in layer.queries.iter().zip(&layer.keys).enumerate() {
            let row = scores.row_mut(l, h);
            for g in 0..g_size {
                for i in 0..n {
                    attention_row(qs, keys, d, n, g, i, i + 1, &mut buf);
                    for (r, &p) in row.iter_mut().zip(&buf) {
                        *r = r.max(p);
                    }
                }
            }
        }
    }
    Ok(ScoreOutput::new(scores, hp))
}

fn check_snap(kernel: usize, window: usize) -> Result<()> {
    if kernel.is_multiple_of(2) {
        return Err(Error::Config(format!("pooling kernel must be odd, got {kernel}")));
    }
    if window == 0 {
        return Err(Error::Config("observation window must be at least 1".into()));
    }
    Ok(())
}

/// Mean attention from query rows `q_rows` (indices into the captured
/// queries) over the first `n_keys` keys, maximised over the group.
#[allow(clippy::too_many_arguments)]
fn window_mean(
    qs: &[f32],
    keys: &[f32],
    d: usize,
    g_size: usize,
    n_q: usize,
    q_rows: std::ops::Range<usize>,
    key_offset: usize,
    n_keys: usize,
    buf: &mut Vec<f32>,
) -> Vec<f32> {
    let mut best = vec![f32::NEG_INFINITY; n_keys];
    let w = q_rows.len() as f32;
    for g in 0..g_size {
        let mut acc = vec![0.0f32; n_keys];
        for i in q_rows.clone() {
            attention_row(qs, keys, d, n_q, g, i, key_offset + i + 1, buf);
            for (a, &p) in acc.iter_mut().zip(buf.iter()) {
                *a += p;
            }
        }
        for (b, a) in best.iter_mut().zip(acc) {
            *b = b.max(a / w);
        }
    }
    best
}

/// Same-padded 1-D max pool with an odd kernel.
pub fn max_pool(xs: &[f32], kernel: usize) -> Vec<f32> {
    let r = kernel / 2;
    (0..xs.len())
        .map(|i| {
            xs[i.saturating_sub(r)..(i + r + 1).min(xs.len())]
                .iter()
                .copied()
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect()
}

/// Observation-window scoring: keys are scored by the mean attention the last
/// `window` context queries pay them, then max-pooled. The window's own keys
/// are pinned and keep their unpooled means.
pub fn score_snap_window(model: &Model, context: &TokenSeq, window: usize, kernel: usize) -> Result<ScoreOutput> {
    check_snap(kernel, window)?;
    let cfg = model.config();
    let (d, g_size, n) = (cfg.head_dim, cfg.group_size, context.len());
    let mut scores = ScoreTensor::new(cfg.n_layers, cfg.n_kv_heads, n, ScoreMethod::SnapWindow);
    if n == 0 {
        return Ok(ScoreOutput::new(scores, 0));
    }
    let window = if window > n {
        log::warn!("observation window {window} exceeds context length {n}; using {n}");
        n
    } else {
        window
    };
    let w0 = n - window;
    let (captured, hp) = capture_context(model, context)?;
    let mut buf = Vec::new();
    for (l, layer) in captured.iter().enumerate() {
        for (h, (qs, keys)) in layer.queries.iter().zip(&layer.keys).enumerate() {
            let mean = window_mean(qs, keys, d, g_size, n, w0..n, 0, n, &mut buf);
            let pooled = max_pool(&mean[..w0], kernel);
            let row = scores.row_mut(l, h);
            row[..w0].copy_from_slice(&pooled);
            row[w0..].copy_from_slice(&mean[w0..]);
        }
    }
    scores.pinned = (w0..n).collect();
    Ok(ScoreOutput::new(scores, hp))
}

/// Observation-window scoring driven by a query appended after the context,
/// as when a cache is compressed while serving that query. Only the context
/// keys are scored and nothing is pinned.
pub fn score_snap_observed(
    model: &Model,
    context: &TokenSeq,
    observation: &TokenSeq,
    kernel: usize,
) -> Result<ScoreOutput> {
    check_snap(kernel, observation.len())?;
    let cfg = model.config();
    let (d, g_size, n) = (cfg.head_dim, cfg.group_size, context.len());
    let full = context.concat(observation, Role::Prompt);
    let total = full.len();
    let (captured, hp) = capture_context(model, &full)?;
    let mut scores = ScoreTensor::new(cfg.n_layers, cfg.n_kv_heads, n, ScoreMethod::SnapWindow);
    let mut buf = Vec::new();
    for (l, layer) in captured.iter().enumerate() {
        for (h, (qs, keys)) in layer.queries.iter().zip(&layer.keys).enumerate() {
            let mean = window_mean(qs, keys, d, g_size, total, n..total, 0, n, &mut buf);
            scores.row_mut(l, h).copy_from_slice(&max_pool(&mean, kernel));
        }
    }
    Ok(ScoreOutput::new(scores, hp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{init_model, ModelConfig};

    fn model() -> Model {
        init_model(ModelConfig::new(2, 2, 2, 8, 40, 128, 5)).unwrap()
    }

    #[test]
    fn single_token_scores_one() {
        let out = score_prefill_max(&model(), &TokenSeq::new(vec![20])).unwrap();
        assert!(out.scores.as_slice().iter().all(|&s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn last_position_scores_its_self_attention() {
        let m = model();
        let ctx = TokenSeq::new(vec![13, 17, 19, 23, 29]);
        let out = score_prefill_max(&m, &ctx).unwrap();
        let (fwd, _) = m.forward(&ctx, None, true).unwrap();
        let cap = &fwd.captured.unwrap()[1];
        let mut buf = Vec::new();
        let mut expect = f32::NEG_INFINITY;
        for g in 0..2 {
            attention_row(&cap.queries[0], &cap.keys[0], 8, 5, g, 4, 5, &mut buf);
            expect = expect.max(buf[4]);
        }
        assert_eq!(out.scores.get(1, 0, 4), expect);
    }

    #[test]
    fn pooling_spreads_peaks() {
        assert_eq!(max_pool(&[0.0, 1.0, 0.0, 0.0, 0.0], 3), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(max_pool(&[0.5, 0.1], 1), vec![0.5, 0.1]);
    }

    #[test]
    fn window_keys_are_pinned() {
        let ctx = TokenSeq::new((12..40).collect());
        let out = score_snap_window(&model(), &ctx, 4, 7).unwrap();
        assert_eq!(out.scores.pinned, vec![24, 25, 26, 27]);
        assert!(out.scores.as_slice().iter().all(|&s| (0.0..=1.0 + 1e-6).contains(&s)));
    }

    #[test]
    fn oversized_window_is_clamped() {
        let ctx = TokenSeq::new((12..20).collect());
        let out = score_snap_window(&model(), &ctx, 50, 3).unwrap();
        assert_eq!(out.scores.pinned.len(), 8);
    }

    #[test]
    fn even_kernel_is_rejected() {
        let ctx = TokenSeq::new((12..20).collect());
        assert!(matches!(score_snap_window(&model(), &ctx, 4, 4), Err(Error::Config(_))));
    }
}
