//! Segment-pooled encoder with multi-layer-perceptron scoring heads.
//!
//! Tokens of each segment kind are mean-pooled into one embedding per kind.
//! The feature vector is the four pooled vectors followed by the elementwise
//! products of the five cross-segment pairs that a layout can contain. Two
//! `tanh` layers turn it into the sequence representation, and each head maps
//! that representation to one logit through its own hidden layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::composer::{ComposedSequence, SegmentKind};
use crate::error::{Error, Result};

const KINDS: usize = SegmentKind::COUNT;
/// (context, memory), (context, knowledge), (response, memory), (response, knowledge), (memory, knowledge)
const PAIRS: [(usize, usize); 5] = [(0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
const BLOCKS: usize = KINDS + PAIRS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerShape {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub repr: usize,
    pub head_hidden: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    heads: usize,
    head_len: usize,
    total: usize,
}

impl ScorerShape {
    pub fn features(&self) -> usize {
        BLOCKS * self.embed
    }

    fn layout(&self) -> Layout {
        let emb = 0;
        let w1 = emb + self.vocab * self.embed;
        let b1 = w1 + self.hidden * self.features();
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.repr * self.hidden;
        let heads = b2 + self.repr;
        let head_len = self.head_hidden * self.repr + 2 * self.head_hidden + 1;
        Layout {
            emb,
            w1,
            b1,
            w2,
            b2,
            heads,
            head_len,
            total: heads + self.heads * head_len,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ScorerCache {
    head: usize,
    tokens: [Vec<u32>; KINDS],
    means: [Vec<f64>; KINDS],
    x: Vec<f64>,
    h1: Vec<f64>,
    h: Vec<f64>,
    u: Vec<f64>,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerNet {
    pub shape: ScorerShape,
    pub params: Vec<f64>,
}

fn matvec(w: &[f64], x: &[f64], b: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *o = b[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `grad_w += d ⊗ x`, `grad_b += d`, returns `wᵀ d`.
fn matvec_backward(
    w: &[f64],
    x: &[f64],
    d: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let cols = x.len();
    let mut dx = vec![0.0; cols];
    for (i, &di) in d.iter().enumerate() {
        if di == 0.0 {
            continue;
        }
        grad_b[i] += di;
        let row = &w[i * cols..(i + 1) * cols];
        let grow = &mut grad_w[i * cols..(i + 1) * cols];
        for j in 0..cols {
            grow[j] += di * x[j];
            dx[j] += di * row[j];
        }
    }
    dx
}

impl ScorerNet {
    pub fn new<R: Rng>(shape: ScorerShape, init_scale: f64, rng: &mut R) -> Self {
        let params = (0..shape.num_params())
            .map(|_| rng.gen_range(-init_scale..=init_scale))
            .collect();
        ScorerNet { shape, params }
    }

    pub fn zeros(shape: ScorerShape) -> Self {
        ScorerNet {
            shape,
            params: vec![0.0; shape.num_params()],
        }
    }

    /// Logit of `seq` under `head`, with the cache for [`ScorerNet::backward`].
    pub fn forward(&self, seq: &ComposedSequence, head: usize) -> Result<ScorerCache> {
        let s = &self.shape;
        let l = s.layout();
        let p = &self.params;
        if head >= s.heads {
            return Err(Error::Index {
                index: head,
                len: s.heads,
            });
        }
        let e = s.embed;
        let mut tokens: [Vec<u32>; KINDS] = Default::default();
        for span in &seq.spans {
            tokens[span.kind.slot()].extend_from_slice(&seq.tokens[span.start..span.end]);
        }
        let mut means: [Vec<f64>; KINDS] = Default::default();
        for k in 0..KINDS {
            let mut m = vec![0.0; e];
            for &t in &tokens[k] {
                if t as usize >= s.vocab {
                    return Err(Error::Vocab {
                        token: t,
                        size: s.vocab,
                    });
                }
                let row = &p[l.emb + t as usize * e..l.emb + (t as usize + 1) * e];
                for (a, b) in m.iter_mut().zip(row) {
                    *a += b;
                }
            }
            if !tokens[k].is_empty() {
                let n = tokens[k].len() as f64;
                m.iter_mut().for_each(|a| *a /= n);
            }
            means[k] = m;
        }
        let mut x = Vec::with_capacity(s.features());
        for m in &means {
            x.extend_from_slice(m);
        }
        for &(a, b) in &PAIRS {
            x.extend(means[a].iter().zip(&means[b]).map(|(u, v)| u * v));
        }

        let mut h1 = vec![0.0; s.hidden];
        matvec(&p[l.w1..l.b1], &x, &p[l.b1..l.w2], &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut h = vec![0.0; s.repr];
        matvec(&p[l.w2..l.b2], &h1, &p[l.b2..l.heads], &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());

        let hb = l.heads + head * l.head_len;
        let (hu, hc) = (hb, hb + s.head_hidden * s.repr);
        let (hv, hbias) = (hc + s.head_hidden, hc + 2 * s.head_hidden);
        let mut u = vec![0.0; s.head_hidden];
        matvec(&p[hu..hc], &h, &p[hc..hv], &mut u);
        u.iter_mut().for_each(|v| *v = v.tanh());
        let logit = p[hbias] + u.iter().zip(&p[hv..hbias]).map(|(a, b)| a * b).sum::<f64>();

        Ok(ScorerCache {
            head,
            tokens,
            means,
            x,
            h1,
            h,
            u,
            logit,
        })
    }

    pub fn logit(&self, seq: &ComposedSequence, head: usize) -> Result<f64> {
        Ok(self.forward(seq, head)?.logit)
    }

    /// Accumulate `dlogit * ∂logit/∂params` into `grad`.
    pub fn backward(&self, cache: &ScorerCache, dlogit: f64, grad: &mut [f64]) {
        if dlogit == 0.0 {
            return;
        }
        let s = &self.shape;
        let l = s.layout();
        let p = &self.params;
        let e = s.embed;

        let hb = l.heads + cache.head * l.head_len;
        let (hu, hc) = (hb, hb + s.head_hidden * s.repr);
        let (hv, hbias) = (hc + s.head_hidden, hc + 2 * s.head_hidden);
        grad[hbias] += dlogit;
        let mut du = vec![0.0; s.head_hidden];
        for i in 0..s.head_hidden {
            grad[hv + i] += dlogit * cache.u[i];
            du[i] = dlogit * p[hv + i] * (1.0 - cache.u[i] * cache.u[i]);
        }
        let (gw, gb) = grad[hu..hv].split_at_mut(s.head_hidden * s.repr);
        let dh = matvec_backward(&p[hu..hc], &cache.h, &du, gw, gb);

        let da2: Vec<f64> = dh
            .iter()
            .zip(&cache.h)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        let (gw, gb) = grad[l.w2..l.heads].split_at_mut(s.repr * s.hidden);
        let dh1 = matvec_backward(&p[l.w2..l.b2], &cache.h1, &da2, gw, gb);

        let da1: Vec<f64> = dh1
            .iter()
            .zip(&cache.h1)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        let (gw, gb) = grad[l.w1..l.w2].split_at_mut(s.hidden * s.features());
        let dx = matvec_backward(&p[l.w1..l.b1], &cache.x, &da1, gw, gb);

        let mut dm: [Vec<f64>; KINDS] = Default::default();
        for k in 0..KINDS {
            dm[k] = dx[k * e..(k + 1) * e].to_vec();
        }
        for (pi, &(a, b)) in PAIRS.iter().enumerate() {
            let block = &dx[(KINDS + pi) * e..(KINDS + pi + 1) * e];
            for j in 0..e {
                dm[a][j] += block[j] * cache.means[b][j];
                dm[b][j] += block[j] * cache.means[a][j];
            }
        }
        for k in 0..KINDS {
            if cache.tokens[k].is_empty() {
                continue;
            }
            let n = cache.tokens[k].len() as f64;
            for &t in &cache.tokens[k] {
                let row = &mut grad[l.emb + t as usize * e..l.emb + (t as usize + 1) * e];
                for j in 0..e {
                    row[j] += dm[k][j] / n;
                }
            }
        }
    }
}
