//! Naive f64 reference forward pass and dense scoring oracles. Nothing here
//! calls the library's forward, attention or scoring code.

#![allow(dead_code)]

use kvzip::tinylm::{init_model, special, Model, ModelConfig, Weights};

const THETA: f64 = 10_000.0;
const EPS: f64 = 1e-5;

/// Scaled causal attention logits of one query head: `logits[i][j]`, `j ≤ i`.
pub type Logits = Vec<Vec<f64>>;

fn vecmat(x: &[f64], w: &[f32], n_in: usize, n_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n_out];
    for i in 0..n_in {
        for j in 0..n_out {
            y[j] += x[i] * w[i * n_out + j] as f64;
        }
    }
    y
}

fn rmsnorm(x: &[f64], gain: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + EPS).sqrt();
    x.iter().zip(gain).map(|(v, &g)| v * r * g as f64).collect()
}

fn rope(v: &mut [f64], pos: usize) {
    let half = v.len() / 2;
    for i in 0..half {
        let f = 1.0 / THETA.powf((2 * i) as f64 / (2 * half) as f64);
        let (s, c) = (pos as f64 * f).sin_cos();
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * c - b * s;
        v[i + half] = b * c + a * s;
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Full-sequence forward from scratch. Returns `logits[layer][query_head]`
/// and the final next-token logits per position.
pub fn reference(model: &Model, tokens: &[u32]) -> (Vec<Vec<Logits>>, Vec<Vec<f64>>) {
    reference_masked(model, tokens, |_, _, _, _| true)
}

/// As [`reference`], but query `i` of layer `l` sees key `j` of KV head `h`
/// only if `visible(l, h, i, j)`; hidden keys get a −∞ logit.
pub fn reference_masked(
    model: &Model,
    tokens: &[u32],
    visible: impl Fn(usize, usize, usize, usize) -> bool,
) -> (Vec<Vec<Logits>>, Vec<Vec<f64>>) {
    let cfg = model.config();
    let w = model.weights();
    let (hd, d, g, kvh) = (cfg.hidden_dim, cfg.head_dim, cfg.group_size, cfg.n_kv_heads);
    let kv = kvh * d;
    let ff = 2 * hd;
    let n = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| {
            w.embed[t as usize * hd..(t as usize + 1) * hd]
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let mut all = Vec::new();
    for (l, lw) in w.layers.iter().enumerate() {
        let h: Vec<Vec<f64>> = x.iter().map(|r| rmsnorm(r, &lw.attn_norm)).collect();
        let mut q: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, &lw.wq, hd, hd)).collect();
        let mut k: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, &lw.wk, hd, kv)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, &lw.wv, hd, kv)).collect();
        for p in 0..n {
            for c in q[p].chunks_mut(d) {
                rope(c, p);
            }
            for c in k[p].chunks_mut(d) {
                rope(c, p);
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut layer = Vec::new();
        let mut att = vec![vec![0.0; hd]; n];
        for qh in 0..kvh * g {
            let kh = qh / g;
            let mut lg: Logits = Vec::new();
            for i in 0..n {
                let qi = &q[i][qh * d..(qh + 1) * d];
                let row: Vec<f64> = (0..=i)
                    .map(|j| {
                        if !visible(l, kh, i, j) {
                            return f64::NEG_INFINITY;
                        }
                        qi.iter()
                            .zip(&k[j][kh * d..(kh + 1) * d])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let p = softmax(&row);
                for (j, pj) in p.iter().enumerate() {
                    for e in 0..d {
                        att[i][qh * d + e] += pj * v[j][kh * d + e];
                    }
                }
                lg.push(row);
            }
            layer.push(lg);
        }
        for i in 0..n {
            let o = vecmat(&att[i], &lw.wo, hd, hd);
            x[i].iter_mut().zip(o).for_each(|(a, b)| *a += b);
            let h2 = rmsnorm(&x[i], &lw.mlp_norm);
            let gate = vecmat(&h2, &lw.w_gate, hd, ff);
            let up = vecmat(&h2, &lw.w_up, hd, ff);
            let act: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(gv, u)| gv / (1.0 + (-gv).exp()) * u)
                .collect();
            let down = vecmat(&act, &lw.w_down, ff, hd);
            x[i].iter_mut().zip(down).for_each(|(a, b)| *a += b);
        }
        all.push(layer);
    }
    let logits = x
        .iter()
        .map(|r| vecmat(&rmsnorm(r, &w.final_norm), &w.lm_head, hd, cfg.vocab_size))
        .collect();
    (all, logits)
}

/// `out[layer][kv_head][position]`
pub type Dense = Vec<Vec<Vec<f64>>>;

/// Largest causal attention each key receives, maximised over the group.
pub fn prefill_max(model: &Model, ctx: &[u32]) -> Dense {
    let g = model.config().group_size;
    let (lg, _) = reference(model, ctx);
    let n = ctx.len();
    lg.iter()
        .map(|layer| {
            layer
                .chunks(g)
                .map(|group| {
                    let mut best = vec![f64::NEG_INFINITY; n];
                    for head in group {
                        for (i, row) in head.iter().enumerate() {
                            for (j, p) in softmax(row).into_iter().enumerate() {
                                assert!(j <= i);
                                best[j] = best[j].max(p);
                            }
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

/// Mean attention from the last `window` queries, maximised over the group,
/// pooled with a same-padded odd kernel over keys before the window only.
pub fn snap_window(model: &Model, ctx: &[u32], window: usize, kernel: usize) -> Dense {
    let g = model.config().group_size;
    let n = ctx.len();
    let w0 = n - window.min(n);
    let (lg, _) = reference(model, ctx);
    lg.iter()
        .map(|layer| {
            layer
                .chunks(g)
                .map(|group| {
                    let mut best = vec![f64::NEG_INFINITY; n];
                    for head in group {
                        let mut mean = vec![0.0; n];
                        for row in &head[w0..] {
                            for (j, p) in softmax(row).into_iter().enumerate() {
                                mean[j] += p / (n - w0) as f64;
                            }
                        }
                        for j in 0..n {
                            best[j] = best[j].max(mean[j]);
                        }
                    }
                    let r = kernel / 2;
                    (0..n)
                        .map(|j| {
                            if j >= w0 {
                                return best[j];
                            }
                            let lo = j.saturating_sub(r);
                            let hi = (j + r).min(w0 - 1);
                            best[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Repeat prompt for the chunk starting at `start`.
pub fn chunk_prompt(ctx: &[u32], start: usize) -> Vec<u32> {
    if start == 0 {
        return vec![special::REPEAT, special::COLON];
    }
    let mut p = vec![special::REPEAT, special::START];
    p.extend_from_slice(&ctx[start.saturating_sub(8)..start]);
    p.push(special::COLON);
    p
}

/// Reconstruction scores from one dense pass per chunk over
/// `context ++ prompt ++ chunk`. Each reconstruction query is normalised over
/// the chunk's keys and the reconstruction keys up to itself.
pub fn kvzip(model: &Model, ctx: &[u32], m: usize, logit: bool) -> Dense {
    let cfg = model.config();
    let (g, n) = (cfg.group_size, ctx.len());
    let mut out = vec![vec![vec![f64::NAN; n]; cfg.n_kv_heads]; cfg.n_layers];
    let mut start = 0;
    while start < n {
        let end = (start + m).min(n);
        let mut seq = ctx.to_vec();
        seq.extend(chunk_prompt(ctx, start));
        seq.extend_from_slice(&ctx[start..end]);
        let (lg, _) = reference(model, &seq);
        for (l, layer) in lg.iter().enumerate() {
            for (h, group) in layer.chunks(g).enumerate() {
                out[l][h][start..end].fill(f64::NEG_INFINITY);
                for head in group {
                    for row in &head[n..] {
                        let cols: Vec<usize> = (start..end).chain(n..row.len()).collect();
                        let sub: Vec<f64> = cols.iter().map(|&c| row[c]).collect();
                        let vals = if logit { sub } else { softmax(&sub) };
                        for (&c, v) in cols.iter().zip(vals) {
                            if c < end {
                                out[l][h][c] = out[l][h][c].max(v);
                            }
                        }
                    }
                }
            }
        }
        start = end;
    }
    out
}

pub fn max_diff(dense: &Dense, scores: &kvzip::scoring::ScoreTensor) -> f64 {
    let mut worst: f64 = 0.0;
    for (l, layer) in dense.iter().enumerate() {
        for (h, row) in layer.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                worst = worst.max((v - scores.get(l, h, j) as f64).abs());
            }
        }
    }
    worst
}

/// Freshly initialised model with every non-norm tensor scaled by `gain`, so
/// attention is peaked enough for score differences to show.
pub fn sharpened(cfg: ModelConfig, gain: f32) -> Model {
    let m = init_model(cfg).unwrap();
    let mut w = m.weights().clone();
    for (i, t) in w.tensors_mut().into_iter().enumerate() {
        if !Weights::is_norm_tensor(i, cfg.n_layers) {
            t.iter_mut().for_each(|x| *x *= gain);
        }
    }
    Model::from_weights(cfg, w).unwrap()
}

/// One query over `keys`/`values` rows of width `d`; keys with `keep[j]`
/// false get a −∞ logit.
pub fn dense_masked(q: &[f32], keys: &[f32], values: &[f32], keep: &[bool], d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = keys
        .chunks(d)
        .zip(keep)
        .map(|(k, &kp)| {
            if kp {
                q.iter().zip(k).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() * scale
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let mut out = vec![0.0; d];
    for (w, v) in e.iter().zip(values.chunks(d)) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w / s * *x as f64;
        }
    }
    out
}
