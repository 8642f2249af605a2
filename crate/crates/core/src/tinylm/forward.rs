use super::model::Model;
use super::tokens::{Role, TokenSeq};
use crate::error::{contract, Error, Result};
use crate::kvcache::{attend_into, KvCache, KvSlice, KvStore};
use crate::tensor::{argmax, matmul, matmul_acc, rms_norm, rope_in_place, silu};

/// Query/key features of one layer captured during a forward pass.
#[derive(Clone, Debug)]
pub struct LayerCapture {
    /// Per KV head: `group × n_in × head_dim`, rotary already applied.
    pub queries: Vec<Vec<f32>>,
    /// Per KV head: every key visible after the pass (cached then input),
    /// `(prior_len + n_in) × head_dim`.
    pub keys: Vec<Vec<f32>>,
    /// Per KV head: number of keys that were already cached before the pass.
    pub prior_len: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `n_in × vocab` row-major.
    pub logits: Vec<f32>,
    pub captured: Option<Vec<LayerCapture>>,
    /// Attention work in half key-position pairs, summed over every layer
    /// and query head: a strictly-past key costs 2, the diagonal key 1.
    pub attention_half_pairs: u64,
}

impl ForwardOutput {
    pub fn logits_row(&self, i: usize, vocab: usize) -> &[f32] {
        &self.logits[i * vocab..(i + 1) * vocab]
    }
}

impl Model {
    /// Run `input` on top of `store`, appending one KV pair per
    /// `(layer, head, input position)`. Input positions continue from
    /// `store.next_position()`.
    pub fn forward_into<S: KvStore>(&self, input: &TokenSeq, store: &mut S, capture: bool) -> Result<ForwardOutput> {
        let cfg = &self.config;
        input.validate(cfg.vocab_size)?;
        if store.dims() != cfg.cache_dims() {
            return Err(contract("cache dims do not match model"));
        }
        let n = input.len();
        let start = store.next_position();
        if start + n > cfg.max_position {
            return Err(Error::Capacity {
                needed: start + n,
                max: cfg.max_position,
            });
        }
        let (hd, d, g_size) = (cfg.hidden_dim, cfg.head_dim, cfg.group_size);
        let (kv, ff, vocab) = (cfg.kv_dim(), cfg.ffn_dim(), cfg.vocab_size);

        let mut x = vec![0.0; n * hd];
        for (row, &t) in x.chunks_exact_mut(hd).zip(&input.tokens) {
            row.copy_from_slice(&self.weights.embed[t as usize * hd..(t as usize + 1) * hd]);
        }

        let mut h = vec![0.0; n * hd];
        let mut q = vec![0.0; n * hd];
        let mut k = vec![0.0; n * kv];
        let mut v = vec![0.0; n * kv];
        let mut att = vec![0.0; n * hd];
        let mut gate = vec![0.0; n * ff];
        let mut up = vec![0.0; n * ff];
        let mut probs = Vec::new();
        let mut half_pairs = 0u64;
        let mut captured = capture.then(Vec::new);

        for (l, w) in self.weights.layers.iter().enumerate() {
            rms_norm(&x, &w.attn_norm, &mut h, hd);
            matmul(&h, &w.wq, &mut q, n, hd, hd);
            matmul(&h, &w.wk, &mut k, n, hd, kv);
            matmul(&h, &w.wv, &mut v, n, hd, kv);
            for i in 0..n {
                for qh in q[i * hd..(i + 1) * hd].chunks_exact_mut(d) {
                    rope_in_place(qh, start + i, false);
                }
                for kh in k[i * kv..(i + 1) * kv].chunks_exact_mut(d) {
                    rope_in_place(kh, start + i, false);
                }
            }

            let mut layer_cap = captured.as_ref().map(|_| LayerCapture {
                queries: Vec::with_capacity(cfg.n_kv_heads),
                keys: Vec::with_capacity(cfg.n_kv_heads),
                prior_len: Vec::with_capacity(cfg.n_kv_heads),
            });
            for kh in 0..cfg.n_kv_heads {
                let head = store.head_mut(l, kh);
                let prior = head.len();
                for i in 0..n {
                    let row = i * kv + kh * d..i * kv + (kh + 1) * d;
                    head.push(&k[row.clone()], &v[row], (start + i) as u32);
                }
                let head = store.head(l, kh);
                for g in 0..g_size {
                    let qi = kh * g_size + g;
                    for i in 0..n {
                        let visible = prior + i + 1;
                        let cached = KvSlice::new(&head.keys()[..visible * d], &head.values()[..visible * d]);
                        attend_into(
                            &q[i * hd + qi * d..i * hd + (qi + 1) * d],
                            d,
                            cached,
                            KvSlice::empty(),
                            &mut att[i * hd + qi * d..i * hd + (qi + 1) * d],
                            &mut probs,
                        );
                        half_pairs += 2 * visible as u64 - 1;
                    }
                }
                if let Some(cap) = &mut layer_cap {
                    let mut qs = Vec::with_capacity(g_size * n * d);
                    for g in 0..g_size {
                        let qi = kh * g_size + g;
                        for i in 0..n {
                            qs.extend_from_slice(&q[i * hd + qi * d..i * hd + (qi + 1) * d]);
                        }
                    }
                    cap.queries.push(qs);
                    cap.keys.push(head.keys().to_vec());
                    cap.prior_len.push(prior);
                }
            }
            if let (Some(all), Some(cap)) = (&mut captured, layer_cap) {
                all.push(cap);
            }
            matmul_acc(&att, &w.wo, &mut x, n, hd, hd);

            rms_norm(&x, &w.mlp_norm, &mut h, hd);
            matmul(&h, &w.w_gate, &mut gate, n, hd, ff);
            matmul(&h, &w.w_up, &mut up, n, hd, ff);
            for (gv, &u) in gate.iter_mut().zip(&up) {
                *gv = silu(*gv) * u;
            }
            matmul_acc(&gate, &w.w_down, &mut x, n, ff, hd);
        }

        rms_norm(&x, &self.weights.final_norm, &mut h, hd);
        let mut logits = vec![0.0; n * vocab];
        matmul(&h, &self.weights.lm_head, &mut logits, n, hd, vocab);

        store.advance(&input.roles_or(Role::Context));
        Ok(ForwardOutput {
            logits,
            captured,
            attention_half_pairs: half_pairs,
        })
    }

    /// Functional form: forward `input` after an optional cache and return the
    /// extended cache alongside the outputs.
    pub fn forward(
        &self,
        input: &TokenSeq,
        cache: Option<&KvCache>,
        capture: bool,
    ) -> Result<(ForwardOutput, KvCache)> {
        let mut cache = match cache {
            Some(c) => c.clone(),
            None => KvCache::empty(self.config.cache_dims()),
        };
        let out = self.forward_into(input, &mut cache, capture)?;
        Ok((out, cache))
    }

    /// Build the `L · H · n_c` pair cache for a context.
    pub fn prefill(&self, context: &TokenSeq) -> Result<KvCache> {
        Ok(self.forward(context, None, false)?.1)
    }

    /// Greedy decoding on a copy of `cache`: forward the prompt, then emit
    /// `max_new` argmax tokens (lowest index wins ties).
    pub fn decode_greedy<S: KvStore + Clone>(&self, cache: &S, prompt: &TokenSeq, max_new: usize) -> Result<TokenSeq> {
        let mut out = TokenSeq::with_role(Vec::new(), Role::Generated);
        if max_new == 0 {
            return Ok(out);
        }
        if prompt.is_empty() {
            return Err(contract("greedy decoding needs a non-empty prompt"));
        }
        let vocab = self.config.vocab_size;
        let mut store = cache.clone();
        let prompt = TokenSeq {
            tokens: prompt.tokens.clone(),
            roles: Some(prompt.roles_or(Role::Prompt)),
        };
        let mut fwd = self.forward_into(&prompt, &mut store, false)?;
        let mut last = prompt.len() - 1;
        loop {
            let next = argmax(fwd.logits_row(last, vocab)) as u32;
            out.push(next, Role::Generated);
            if out.len() == max_new {
                return Ok(out);
            }
            fwd = self.forward_into(&TokenSeq::with_role(vec![next], Role::Generated), &mut store, false)?;
            last = 0;
        }
    }
}
