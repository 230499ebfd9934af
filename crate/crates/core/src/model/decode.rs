//! Greedy decoding. The cached path runs the decoder incrementally with
//! per-layer key/value buffers and no tape; the reference path re-runs the
//! full tape forward every step and exists to check the cached one.

use super::{ModelIds, SlmModel};
use crate::corpus::EOS;
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, MatRef};
use crate::numerics::{BlockParams, Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Generated tokens without the end marker.
    pub tokens: Vec<usize>,
    /// True when generation stopped at the length limit.
    pub truncated: bool,
}

/// Greedy loop over a next-token scorer. `next(prefix)` returns logits for
/// the token following `prefix`.
pub fn greedy_from_logits<S: Real>(
    max_len: usize,
    mut next: impl FnMut(&[usize]) -> Result<Vec<S>>,
) -> Result<Decoded> {
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let logits = next(&tokens)?;
        let t = kernels::argmax(&logits);
        if t == EOS {
            return Ok(Decoded {
                tokens,
                truncated: false,
            });
        }
        tokens.push(t);
    }
    Ok(Decoded { tokens, truncated: true })
}

struct LayerCache<S> {
    k: Vec<S>,
    v: Vec<S>,
}

impl<S: Real> SlmModel<S> {
    /// Encoder then adapter, without gradients.
    pub fn speech_embeddings(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        if features.rows() == 0 {
            return Err(Error::EmptyInput("features"));
        }
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let f = tape.leaf(features, false);
        let x = self.encode_on(&mut tape, &b, f)?;
        let x = self.adapt_on(&mut tape, &b, x)?;
        Ok(tape.to_tensor(x))
    }

    fn decode_limit(&self, max_len: usize) -> Result<usize> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(max_len.min(self.config.max_text))
    }

    /// Greedy decoding with key/value caching; ties go to the lowest id.
    pub fn greedy_decode(&self, features: &Tensor<S>, instruction: usize, max_len: usize) -> Result<Decoded> {
        let limit = self.decode_limit(max_len)?;
        let speech = self.speech_embeddings(features)?;
        self.greedy_decode_speech(&speech, instruction, limit)
    }

    /// Greedy decoding from precomputed speech embeddings.
    pub fn greedy_decode_speech(&self, speech: &Tensor<S>, instruction: usize, max_len: usize) -> Result<Decoded> {
        let limit = self.decode_limit(max_len)?;
        let c = &self.config;
        let d = c.d_model;
        let ta = speech.rows();
        if ta > c.max_speech() {
            return Err(Error::Length {
                len: ta,
                max: c.max_speech(),
            });
        }
        if instruction >= c.vocab {
            return Err(Error::Index {
                index: instruction,
                bound: c.vocab,
            });
        }
        let ids = &self.ids;
        let pos_speech = self.params.get(ids.pos_speech).tensor.data();
        let pos_text = self.params.get(ids.pos_text).tensor.data();
        let embed = self.params.get(ids.embed).tensor.data();

        let mut x: Vec<S> = speech.data().to_vec();
        for (v, p) in x.iter_mut().zip(pos_speech) {
            *v += *p;
        }
        x.extend(
            embed[instruction * d..(instruction + 1) * d]
                .iter()
                .zip(&pos_text[..d])
                .map(|(&e, &p)| e + p),
        );
        let mut caches: Vec<LayerCache<S>> = ids
            .dec_layers
            .iter()
            .map(|_| LayerCache {
                k: Vec::with_capacity((ta + c.max_text) * d),
                v: Vec::with_capacity((ta + c.max_text) * d),
            })
            .collect();
        let mut logits = self.run_rows(x, ta + 1, &mut caches)?;
        greedy_from_logits(limit, |prefix| {
            if let Some(&last) = prefix.last() {
                let k = prefix.len();
                if last >= c.vocab {
                    return Err(Error::Index {
                        index: last,
                        bound: c.vocab,
                    });
                }
                let x: Vec<S> = embed[last * d..(last + 1) * d]
                    .iter()
                    .zip(&pos_text[k * d..(k + 1) * d])
                    .map(|(&e, &p)| e + p)
                    .collect();
                logits = self.run_rows(x, 1, &mut caches)?;
            }
            Ok(logits.clone())
        })
    }

    /// Pushes `n` new rows through the decoder, extending the caches, and
    /// returns the logits of the last row.
    fn run_rows(&self, mut x: Vec<S>, n: usize, caches: &mut [LayerCache<S>]) -> Result<Vec<S>> {
        let c = &self.config;
        let d = c.d_model;
        let ids: &ModelIds = &self.ids;
        for (layer, cache) in ids.dec_layers.iter().zip(caches.iter_mut()) {
            self.cached_block(layer, &mut x, n, cache);
        }
        let last = &x[(n - 1) * d..n * d];
        let mut h = vec![S::zero(); d];
        self.norm(ids.final_norm.g, ids.final_norm.b, last, &mut h);
        let w = &self.params.get(ids.head.w).tensor;
        let b = self.params.get(ids.head.b).tensor.data();
        let mut out = b.to_vec();
        kernels::gemm(1, d, c.vocab, MatRef::new(&h, d), MatRef::new(w.data(), c.vocab), &mut out, c.vocab, true);
        Ok(out)
    }

    fn norm(&self, g: crate::numerics::ParamId, b: crate::numerics::ParamId, x: &[S], out: &mut [S]) {
        let d = self.config.d_model;
        let rows = x.len() / d;
        let (mut mean, mut rstd) = (vec![S::zero(); rows], vec![S::zero(); rows]);
        kernels::layer_norm_rows(
            x,
            self.params.get(g).tensor.data(),
            self.params.get(b).tensor.data(),
            d,
            out,
            &mut mean,
            &mut rstd,
        );
    }

    /// `out = x·W + b` for `n` rows.
    fn affine(&self, x: &[S], n: usize, w: crate::numerics::ParamId, b: crate::numerics::ParamId) -> Vec<S> {
        let wt = &self.params.get(w).tensor;
        let (k, m) = (wt.rows(), wt.cols());
        let bias = self.params.get(b).tensor.data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        kernels::gemm(n, k, m, MatRef::new(x, k), MatRef::new(wt.data(), m), &mut out, m, true);
        out
    }

    fn cached_block(&self, p: &BlockParams, x: &mut [S], n: usize, cache: &mut LayerCache<S>) {
        let c = &self.config;
        let (d, heads) = (c.d_model, c.heads);
        let dh = d / heads;
        let past = cache.k.len() / d;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();

        let mut h = vec![S::zero(); n * d];
        self.norm(p.ln1_g, p.ln1_b, x, &mut h);
        let wqkv = self.params.get(p.wqkv).tensor.data();
        let mut qkv = vec![S::zero(); n * 3 * d];
        kernels::gemm(n, d, 3 * d, MatRef::new(&h, d), MatRef::new(wqkv, 3 * d), &mut qkv, 3 * d, false);
        for r in 0..n {
            let row = &qkv[r * 3 * d..(r + 1) * 3 * d];
            cache.k.extend_from_slice(&row[d..2 * d]);
            cache.v.extend_from_slice(&row[2 * d..]);
        }
        let mut att = vec![S::zero(); n * d];
        let mut scores = vec![S::zero(); past + n];
        for r in 0..n {
            let visible = past + r + 1;
            let q = &qkv[r * 3 * d..r * 3 * d + d];
            for hd in 0..heads {
                let qh = &q[hd * dh..(hd + 1) * dh];
                for (j, s) in scores[..visible].iter_mut().enumerate() {
                    *s = kernels::dot(qh, &cache.k[j * d + hd * dh..j * d + (hd + 1) * dh]) * scale;
                }
                kernels::softmax_prefix(&mut scores[..visible], visible);
                let o = &mut att[r * d + hd * dh..r * d + (hd + 1) * dh];
                for (j, &pj) in scores[..visible].iter().enumerate() {
                    let vj = &cache.v[j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (oe, &ve) in o.iter_mut().zip(vj) {
                        *oe += pj * ve;
                    }
                }
            }
        }
        let a = self.affine(&att, n, p.wo, p.bo);
        for (xv, av) in x.iter_mut().zip(&a) {
            *xv += *av;
        }
        self.norm(p.ln2_g, p.ln2_b, x, &mut h);
        let mut f = self.affine(&h, n, p.w1, p.b1);
        for v in f.iter_mut() {
            *v = kernels::gelu(*v);
        }
        let f = self.affine(&f, n, p.w2, p.b2);
        for (xv, fv) in x.iter_mut().zip(&f) {
            *xv += *fv;
        }
    }

    /// Greedy decoding by re-running the full tape forward each step.
    pub fn greedy_decode_reference(&self, features: &Tensor<S>, instruction: usize, max_len: usize) -> Result<Decoded> {
        let limit = self.decode_limit(max_len)?;
        let speech = self.speech_embeddings(features)?;
        greedy_from_logits(limit, |prefix| {
            let mut tape = Tape::new();
            let b = self.bind_frozen(&mut tape);
            let sp = tape.leaf(&speech, false);
            let mut text = vec![instruction];
            text.extend_from_slice(prefix);
            let h = self.decode_hidden_on(&mut tape, &b, sp, &text)?;
            let last = speech.rows() + text.len() - 1;
            let l = self.logits_on(&mut tape, &b, h, last, 1)?;
            Ok(tape.value(l).to_vec())
        })
    }
}
