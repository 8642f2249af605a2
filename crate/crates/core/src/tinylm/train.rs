//! Next-token training with a hand-written backward pass and Adam.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{LayerWeights, Model, Weights};
use crate::error::{contract, Error, Result};
use crate::tensor::{
    dot, matmul, matmul_a_bt, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, rms_norm, rope_in_place, sigmoid, silu,
    softmax_in_place,
};

/// One training sequence. `loss_mask[i]` marks `tokens[i]` as a prediction
/// target (predicted from position `i - 1`); `loss_mask[0]` is ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSample {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TrainingSample {
    pub fn n_targets(&self) -> usize {
        self.loss_mask.iter().skip(1).filter(|&&m| m).count()
    }
}

/// A generator of training sequences.
pub trait SampleSource {
    fn sample(&self, rng: &mut ChaCha8Rng) -> TrainingSample;
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub grad_clip: f32,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 3e-3,
            seed: 0,
            batch_size: 16,
            warmup_steps: 100,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean per-target loss of every step's batch.
    pub losses: Vec<f32>,
}

struct LayerTape {
    x_in: Vec<f32>,
    h: Vec<f32>,
    inv: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// Per query head, `T × T` (zero above the diagonal).
    probs: Vec<Vec<f32>>,
    att: Vec<f32>,
    x_mid: Vec<f32>,
    h2: Vec<f32>,
    inv2: Vec<f32>,
    gate_pre: Vec<f32>,
    up: Vec<f32>,
    act: Vec<f32>,
}

struct Tape {
    layers: Vec<LayerTape>,
    x_out: Vec<f32>,
    hf: Vec<f32>,
    invf: Vec<f32>,
    logits: Vec<f32>,
}

fn forward_tape(model: &Model, tokens: &[u32]) -> Tape {
    let cfg = &model.config;
    let w = &model.weights;
    let t = tokens.len();
    let (hd, d, kv, ff, vocab) = (
        cfg.hidden_dim,
        cfg.head_dim,
        cfg.kv_dim(),
        cfg.ffn_dim(),
        cfg.vocab_size,
    );
    let g_size = cfg.group_size;
    let scale = 1.0 / (d as f32).sqrt();

    let mut x = vec![0.0; t * hd];
    for (row, &tok) in x.chunks_exact_mut(hd).zip(tokens) {
        row.copy_from_slice(&w.embed[tok as usize * hd..(tok as usize + 1) * hd]);
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lw in &w.layers {
        let x_in = x.clone();
        let mut h = vec![0.0; t * hd];
        let inv = rms_norm(&x, &lw.attn_norm, &mut h, hd);
        let mut q = vec![0.0; t * hd];
        let mut k = vec![0.0; t * kv];
        let mut v = vec![0.0; t * kv];
        matmul(&h, &lw.wq, &mut q, t, hd, hd);
        matmul(&h, &lw.wk, &mut k, t, hd, kv);
        matmul(&h, &lw.wv, &mut v, t, hd, kv);
        for i in 0..t {
            q[i * hd..(i + 1) * hd]
                .chunks_exact_mut(d)
                .for_each(|c| rope_in_place(c, i, false));
            k[i * kv..(i + 1) * kv]
                .chunks_exact_mut(d)
                .for_each(|c| rope_in_place(c, i, false));
        }
        let mut att = vec![0.0; t * hd];
        let mut probs = Vec::with_capacity(cfg.n_query_heads());
        for qi in 0..cfg.n_query_heads() {
            let kh = qi / g_size;
            let mut p = vec![0.0; t * t];
            for i in 0..t {
                let qv = &q[i * hd + qi * d..i * hd + (qi + 1) * d];
                let row = &mut p[i * t..i * t + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qv, &k[j * kv + kh * d..j * kv + (kh + 1) * d]) * scale;
                }
                softmax_in_place(row);
                let o = &mut att[i * hd + qi * d..i * hd + (qi + 1) * d];
                for (j, &pj) in row.iter().enumerate() {
                    for (ov, &vv) in o.iter_mut().zip(&v[j * kv + kh * d..j * kv + (kh + 1) * d]) {
                        *ov += pj * vv;
                    }
                }
            }
            probs.push(p);
        }
        matmul_acc(&att, &lw.wo, &mut x, t, hd, hd);
        let x_mid = x.clone();
        let mut h2 = vec![0.0; t * hd];
        let inv2 = rms_norm(&x, &lw.mlp_norm, &mut h2, hd);
        let mut gate_pre = vec![0.0; t * ff];
        let mut up = vec![0.0; t * ff];
        matmul(&h2, &lw.w_gate, &mut gate_pre, t, hd, ff);
        matmul(&h2, &lw.w_up, &mut up, t, hd, ff);
        let act: Vec<f32> = gate_pre.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
        matmul_acc(&act, &lw.w_down, &mut x, t, ff, hd);
        layers.push(LayerTape {
            x_in,
            h,
            inv,
            q,
            k,
            v,
            probs,
            att,
            x_mid,
            h2,
            inv2,
            gate_pre,
            up,
            act,
        });
    }
    let mut hf = vec![0.0; t * hd];
    let invf = rms_norm(&x, &w.final_norm, &mut hf, hd);
    let mut logits = vec![0.0; t * vocab];
    matmul(&hf, &w.lm_head, &mut logits, t, hd, vocab);
    Tape {
        layers,
        x_out: x,
        hf,
        invf,
        logits,
    }
}

/// Backward of `y = x · r · g` row-wise; accumulates into `dx` and `dgain`.
fn rms_norm_backward(dy: &[f32], x: &[f32], inv: &[f32], gain: &[f32], dx: &mut [f32], dgain: &mut [f32], dim: usize) {
    for (((dyr, xr), &r), dxr) in dy
        .chunks_exact(dim)
        .zip(x.chunks_exact(dim))
        .zip(inv)
        .zip(dx.chunks_exact_mut(dim))
    {
        let mut s = 0.0;
        for j in 0..dim {
            dgain[j] += dyr[j] * xr[j] * r;
            s += dyr[j] * gain[j] * xr[j];
        }
        let c = r * r * r * s / dim as f32;
        for j in 0..dim {
            dxr[j] += r * dyr[j] * gain[j] - xr[j] * c;
        }
    }
}

/// Summed (not averaged) cross-entropy of one sequence and its gradient.
fn sequence_grad(model: &Model, sample: &TrainingSample) -> (f32, Weights) {
    let cfg = &model.config;
    let w = &model.weights;
    let tokens = &sample.tokens;
    let t = tokens.len();
    let (hd, d, kv, ff, vocab) = (
        cfg.hidden_dim,
        cfg.head_dim,
        cfg.kv_dim(),
        cfg.ffn_dim(),
        cfg.vocab_size,
    );
    let g_size = cfg.group_size;
    let scale = 1.0 / (d as f32).sqrt();
    let tape = forward_tape(model, tokens);
    let mut grads = Weights::zeros(cfg);

    let mut loss = 0.0;
    let mut dlogits = vec![0.0; t * vocab];
    for i in 0..t.saturating_sub(1) {
        if !sample.loss_mask[i + 1] {
            continue;
        }
        let target = tokens[i + 1] as usize;
        let row = &mut dlogits[i * vocab..(i + 1) * vocab];
        row.copy_from_slice(&tape.logits[i * vocab..(i + 1) * vocab]);
        softmax_in_place(row);
        loss -= row[target].max(f32::MIN_POSITIVE).ln();
        row[target] -= 1.0;
    }

    matmul_at_b_acc(&tape.hf, &dlogits, &mut grads.lm_head, hd, t, vocab);
    let mut dhf = vec![0.0; t * hd];
    matmul_a_bt(&dlogits, &w.lm_head, &mut dhf, t, vocab, hd);
    let mut dx = vec![0.0; t * hd];
    rms_norm_backward(
        &dhf,
        &tape.x_out,
        &tape.invf,
        &w.final_norm,
        &mut dx,
        &mut grads.final_norm,
        hd,
    );

    for (l, (lt, lw)) in tape.layers.iter().zip(&w.layers).enumerate().rev() {
        let lg: &mut LayerWeights = &mut grads.layers[l];
        // MLP
        let mut dact = vec![0.0; t * ff];
        matmul_a_bt(&dx, &lw.w_down, &mut dact, t, hd, ff);
        matmul_at_b_acc(&lt.act, &dx, &mut lg.w_down, ff, t, hd);
        let mut dgate = vec![0.0; t * ff];
        let mut dup = vec![0.0; t * ff];
        for i in 0..t * ff {
            let g = lt.gate_pre[i];
            let s = sigmoid(g);
            dup[i] = dact[i] * g * s;
            dgate[i] = dact[i] * lt.up[i] * s * (1.0 + g * (1.0 - s));
        }
        matmul_at_b_acc(&lt.h2, &dgate, &mut lg.w_gate, hd, t, ff);
        matmul_at_b_acc(&lt.h2, &dup, &mut lg.w_up, hd, t, ff);
        let mut dh2 = vec![0.0; t * hd];
        matmul_a_bt(&dgate, &lw.w_gate, &mut dh2, t, ff, hd);
        matmul_a_bt_acc(&dup, &lw.w_up, &mut dh2, t, ff, hd);
        let mut dx_mid = dx.clone();
        rms_norm_backward(
            &dh2,
            &lt.x_mid,
            &lt.inv2,
            &lw.mlp_norm,
            &mut dx_mid,
            &mut lg.mlp_norm,
            hd,
        );

        // attention
        let mut datt = vec![0.0; t * hd];
        matmul_a_bt(&dx_mid, &lw.wo, &mut datt, t, hd, hd);
        matmul_at_b_acc(&lt.att, &dx_mid, &mut lg.wo, hd, t, hd);
        let mut dq = vec![0.0; t * hd];
        let mut dk = vec![0.0; t * kv];
        let mut dv = vec![0.0; t * kv];
        let mut dp = vec![0.0; t];
        for qi in 0..cfg.n_query_heads() {
            let kh = qi / g_size;
            let p = &lt.probs[qi];
            for i in 0..t {
                let d_o = &datt[i * hd + qi * d..i * hd + (qi + 1) * d];
                let prow = &p[i * t..i * t + i + 1];
                let mut s = 0.0;
                for j in 0..=i {
                    dp[j] = dot(d_o, &lt.v[j * kv + kh * d..j * kv + (kh + 1) * d]);
                    s += prow[j] * dp[j];
                }
                let qv = &lt.q[i * hd + qi * d..i * hd + (qi + 1) * d];
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - s) * scale;
                    let kr = j * kv + kh * d..j * kv + (kh + 1) * d;
                    for c in 0..d {
                        dq[i * hd + qi * d + c] += ds * lt.k[kr.start + c];
                        dk[kr.start + c] += ds * qv[c];
                        dv[kr.start + c] += prow[j] * d_o[c];
                    }
                }
            }
        }
        for i in 0..t {
            dq[i * hd..(i + 1) * hd]
                .chunks_exact_mut(d)
                .for_each(|c| rope_in_place(c, i, true));
            dk[i * kv..(i + 1) * kv]
                .chunks_exact_mut(d)
                .for_each(|c| rope_in_place(c, i, true));
        }
        matmul_at_b_acc(&lt.h, &dq, &mut lg.wq, hd, t, hd);
        matmul_at_b_acc(&lt.h, &dk, &mut lg.wk, hd, t, kv);
        matmul_at_b_acc(&lt.h, &dv, &mut lg.wv, hd, t, kv);
        let mut dh = vec![0.0; t * hd];
        matmul_a_bt(&dq, &lw.wq, &mut dh, t, hd, hd);
        matmul_a_bt_acc(&dk, &lw.wk, &mut dh, t, kv, hd);
        matmul_a_bt_acc(&dv, &lw.wv, &mut dh, t, kv, hd);
        dx = dx_mid;
        rms_norm_backward(&dh, &lt.x_in, &lt.inv, &lw.attn_norm, &mut dx, &mut lg.attn_norm, hd);
    }
    for (i, &tok) in tokens.iter().enumerate() {
        let row = &mut grads.embed[tok as usize * hd..(tok as usize + 1) * hd];
        for (g, &v) in row.iter_mut().zip(&dx[i * hd..(i + 1) * hd]) {
            *g += v;
        }
    }
    (loss, grads)
}

fn check_sample(model: &Model, s: &TrainingSample) -> Result<()> {
    let cfg = model.config();
    if s.tokens.len() != s.loss_mask.len() {
        return Err(contract("loss mask length differs from token count"));
    }
    if s.tokens.len() > cfg.max_position {
        return Err(Error::Capacity {
            needed: s.tokens.len(),
            max: cfg.max_position,
        });
    }
    if s.tokens.iter().any(|&t| t as usize >= cfg.vocab_size) {
        return Err(contract("training token outside vocabulary"));
    }
    Ok(())
}

/// Mean per-target loss and gradient over a batch. The reduction runs in
/// sample order, so the result does not depend on the worker count.
pub fn batch_gradient(model: &Model, batch: &[TrainingSample]) -> Result<(f32, Weights)> {
    for s in batch {
        check_sample(model, s)?;
    }
    let per_sample: Vec<(f32, Weights)> = batch.par_iter().map(|s| sequence_grad(model, s)).collect();
    let n_targets: usize = batch.iter().map(TrainingSample::n_targets).sum::<usize>().max(1);
    let mut total = Weights::zeros(&model.config);
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        for (acc, t) in total.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, &x) in acc.iter_mut().zip(t) {
                *a += x;
            }
        }
    }
    let inv = 1.0 / n_targets as f32;
    for t in total.tensors_mut() {
        t.iter_mut().for_each(|x| *x *= inv);
    }
    Ok((loss * inv, total))
}

/// Mean per-target loss without gradients.
pub fn mean_loss(model: &Model, samples: &[TrainingSample]) -> Result<f32> {
    let vocab = model.config.vocab_size;
    let mut loss = 0.0;
    let mut n = 0usize;
    for s in samples {
        check_sample(model, s)?;
        let tape = forward_tape(model, &s.tokens);
        for i in 0..s.tokens.len().saturating_sub(1) {
            if s.loss_mask[i + 1] {
                let mut row = tape.logits[i * vocab..(i + 1) * vocab].to_vec();
                softmax_in_place(&mut row);
                loss -= row[s.tokens[i + 1] as usize].max(f32::MIN_POSITIVE).ln();
                n += 1;
            }
        }
    }
    Ok(loss / n.max(1) as f32)
}

/// Logits of the training-path forward, for consistency checks against the
/// cached inference path.
pub fn training_logits(model: &Model, tokens: &[u32]) -> Vec<f32> {
    forward_tape(model, tokens).logits
}

struct Adam {
    m: Weights,
    v: Weights,
    t: i32,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.98;
const ADAM_EPS: f32 = 1e-8;

impl Adam {
    fn step(&mut self, params: &mut Weights, grads: &Weights, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Linear warmup, then cosine decay to a tenth of the peak rate.
fn lr_at(step: usize, opts: &TrainOptions) -> f32 {
    if step < opts.warmup_steps {
        return opts.lr * (step + 1) as f32 / opts.warmup_steps as f32;
    }
    let span = (opts.steps - opts.warmup_steps).max(1) as f32;
    let frac = (step - opts.warmup_steps) as f32 / span;
    opts.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * frac).cos()))
}

/// Train a copy of `model` on sequences drawn from `source`.
pub fn train(model: &Model, source: &impl SampleSource, opts: &TrainOptions) -> Result<(Model, TrainReport)> {
    let mut model = model.clone();
    let mut report = TrainReport::default();
    if opts.steps == 0 {
        return Ok((model, report));
    }
    if opts.batch_size == 0 || opts.lr.is_nan() || opts.lr <= 0.0 {
        return Err(Error::Config("batch_size and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam {
        m: Weights::zeros(&model.config),
        v: Weights::zeros(&model.config),
        t: 0,
    };
    for step in 0..opts.steps {
        let batch: Vec<TrainingSample> = (0..opts.batch_size).map(|_| source.sample(&mut rng)).collect();
        let (loss, mut grads) = batch_gradient(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let norm = grads
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f32>()
            .sqrt();
        if opts.grad_clip > 0.0 && norm > opts.grad_clip {
            let s = opts.grad_clip / norm;
            grads
                .tensors_mut()
                .into_iter()
                .for_each(|t| t.iter_mut().for_each(|g| *g *= s));
        }
        adam.step(&mut model.weights, &grads, lr_at(step, opts));
        if !model.weights.all_finite() {
            return Err(Error::Divergence { step, loss: f32::NAN });
        }
        if step % 100 == 0 {
            log::debug!("step {step}: loss {loss:.4}");
        }
        report.losses.push(loss);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{init_model, ModelConfig, TokenSeq};

    fn tiny() -> Model {
        init_model(ModelConfig::new(2, 2, 2, 4, 12, 32, 5)).unwrap()
    }

    fn sample(tokens: Vec<u32>) -> TrainingSample {
        let n = tokens.len();
        TrainingSample {
            tokens,
            loss_mask: vec![true; n],
        }
    }

    #[test]
    fn tape_logits_match_inference_forward() {
        let m = tiny();
        let toks = vec![1, 5, 2, 7, 3, 3, 11, 0];
        let (out, _) = m.forward(&TokenSeq::new(toks.clone()), None, false).unwrap();
        let tape = training_logits(&m, &toks);
        for (a, b) in out.logits.iter().zip(&tape) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // scale weights up so gradients are not vanishingly small
        let mut m = tiny();
        for t in m.weights.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= 5.0);
        }
        for l in &mut m.weights.layers {
            l.attn_norm.iter_mut().for_each(|x| *x = 1.0);
            l.mlp_norm.iter_mut().for_each(|x| *x = 1.0);
        }
        let batch = vec![sample(vec![1, 5, 2, 7, 3, 9, 4]), sample(vec![8, 8, 6, 1, 10])];
        let (_, grads) = batch_gradient(&m, &batch).unwrap();
        let n_tensors = grads.tensors().len();
        let eps = 1e-3f32;
        let mut checked = 0;
        for ti in 0..n_tensors {
            let len = grads.tensors()[ti].len();
            // embedding rows of tokens 1 and 5 are touched by the batch
            let picks = if ti == 0 { [16, 80, 83] } else { [0, len / 3, len - 1] };
            for &idx in &picks {
                let analytic = grads.tensors()[ti][idx];
                let mut plus = m.clone();
                plus.weights.tensors_mut()[ti][idx] += eps;
                let mut minus = m.clone();
                minus.weights.tensors_mut()[ti][idx] -= eps;
                let numeric = (mean_loss(&plus, &batch).unwrap() - mean_loss(&minus, &batch).unwrap()) / (2.0 * eps);
                let err = (numeric - analytic).abs();
                assert!(
                    err < 5e-4 + 0.02 * numeric.abs().max(analytic.abs()),
                    "tensor {ti} idx {idx}: analytic {analytic} numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, n_tensors * 3);
    }

    struct Fixed(Vec<TrainingSample>);
    impl SampleSource for Fixed {
        fn sample(&self, rng: &mut ChaCha8Rng) -> TrainingSample {
            use rand::Rng;
            self.0[rng.random_range(0..self.0.len())].clone()
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let m = tiny();
        let src = Fixed(vec![sample(vec![1, 2, 3])]);
        let opts = TrainOptions {
            steps: 0,
            ..Default::default()
        };
        let (trained, _) = train(&m, &src, &opts).unwrap();
        assert_eq!(trained.checksum(), m.checksum());
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let m = tiny();
        let data = vec![sample(vec![1, 2, 3, 4, 5, 6]), sample(vec![6, 5, 4, 3, 2, 1])];
        let src = Fixed(data.clone());
        let opts = TrainOptions {
            steps: 60,
            lr: 1e-2,
            batch_size: 4,
            warmup_steps: 5,
            ..Default::default()
        };
        let (a, _) = train(&m, &src, &opts).unwrap();
        let (b, _) = train(&m, &src, &opts).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(mean_loss(&a, &data).unwrap() < mean_loss(&m, &data).unwrap() * 0.5);
    }

    #[test]
    fn divergence_reports_step() {
        let mut m = tiny();
        m.weights.lm_head[0] = f32::INFINITY;
        let src = Fixed(vec![sample(vec![0, 0, 0])]);
        let opts = TrainOptions {
            steps: 3,
            ..Default::default()
        };
        assert!(matches!(train(&m, &src, &opts), Err(Error::Divergence { step: 0, .. })));
    }
}
