//! Recurrent response generator conditioned on context, memory and knowledge.
//!
//! The conditioning vector concatenates the mean embeddings of the three
//! conditioning sequences. A single `tanh` recurrent cell reads the previous
//! token and the conditioning vector, and a linear projection produces the
//! next-token logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SpecialToken;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorShape {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    wc: usize,
    wx: usize,
    wh: usize,
    b: usize,
    u: usize,
    bu: usize,
    total: usize,
}

impl GeneratorShape {
    fn layout(&self) -> Layout {
        let (v, e, h) = (self.vocab, self.embed, self.hidden);
        let emb = 0;
        let wc = emb + v * e;
        let wx = wc + h * 3 * e;
        let wh = wx + h * e;
        let b = wh + h * h;
        let u = b + h;
        let bu = u + v * h;
        Layout {
            emb,
            wc,
            wx,
            wh,
            b,
            u,
            bu,
            total: bu + v,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }
}

/// Token ids the generator conditions on. Several memory fragments are
/// concatenated in selection order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenConditioning {
    pub context: Vec<u32>,
    pub memory: Vec<u32>,
    pub knowledge: Vec<u32>,
}

impl GenConditioning {
    pub fn new(context: &[Vec<u32>], memory: &[&[u32]], knowledge: &[u32]) -> Self {
        GenConditioning {
            context: context.concat(),
            memory: memory.concat(),
            knowledge: knowledge.to_vec(),
        }
    }

    fn parts(&self) -> [&[u32]; 3] {
        [&self.context, &self.memory, &self.knowledge]
    }
}

/// An autoregressive scorer usable by the decoder.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn start(&self, cond: &GenConditioning) -> Result<Self::State>;
    /// Log-probabilities of the next token.
    fn log_probs(&self, state: &Self::State) -> Vec<f64>;
    fn advance(&self, state: &Self::State, token: u32) -> Self::State;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub shape: GeneratorShape,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GenState {
    base: Vec<f64>,
    h: Vec<f64>,
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

impl Generator {
    pub fn new<R: Rng>(shape: GeneratorShape, init_scale: f64, rng: &mut R) -> Self {
        let params = (0..shape.num_params())
            .map(|_| rng.gen_range(-init_scale..=init_scale))
            .collect();
        Generator { shape, params }
    }

    pub fn zeros(shape: GeneratorShape) -> Self {
        Generator {
            shape,
            params: vec![0.0; shape.num_params()],
        }
    }

    fn check(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.shape.vocab) {
            Some(&t) => Err(Error::Vocab {
                token: t,
                size: self.shape.vocab,
            }),
            None => Ok(()),
        }
    }

    fn conditioning(&self, cond: &GenConditioning) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = &self.shape;
        let l = s.layout();
        let e = s.embed;
        let mut c = vec![0.0; 3 * e];
        for (slot, part) in cond.parts().iter().enumerate() {
            self.check(part)?;
            if part.is_empty() {
                continue;
            }
            for &t in *part {
                let row = &self.params[l.emb + t as usize * e..l.emb + (t as usize + 1) * e];
                for j in 0..e {
                    c[slot * e + j] += row[j];
                }
            }
            let n = part.len() as f64;
            c[slot * e..(slot + 1) * e].iter_mut().for_each(|v| *v /= n);
        }
        let mut base = vec![0.0; s.hidden];
        let p = &self.params;
        for i in 0..s.hidden {
            let row = &p[l.wc + i * 3 * e..l.wc + (i + 1) * 3 * e];
            base[i] = p[l.b + i] + row.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok((c, base))
    }

    fn cell(&self, base: &[f64], prev_token: u32, h_prev: &[f64]) -> Vec<f64> {
        let s = &self.shape;
        let l = s.layout();
        let (e, hd) = (s.embed, s.hidden);
        let p = &self.params;
        let x = &p[l.emb + prev_token as usize * e..l.emb + (prev_token as usize + 1) * e];
        (0..hd)
            .map(|i| {
                let wx = &p[l.wx + i * e..l.wx + (i + 1) * e];
                let wh = &p[l.wh + i * hd..l.wh + (i + 1) * hd];
                let a = base[i]
                    + wx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                    + wh.iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
                a.tanh()
            })
            .collect()
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let s = &self.shape;
        let l = s.layout();
        let p = &self.params;
        (0..s.vocab)
            .map(|v| {
                let row = &p[l.u + v * s.hidden..l.u + (v + 1) * s.hidden];
                p[l.bu + v] + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// `Σ_i log g(r_i | cond, r_<i)` under teacher forcing.
    pub fn log_likelihood(&self, cond: &GenConditioning, response: &[u32]) -> Result<f64> {
        self.accumulate(cond, response, 0.0, None)
    }

    /// Log-likelihood, adding `scale * ∂LL/∂params` into `grad`.
    pub fn log_likelihood_grad(
        &self,
        cond: &GenConditioning,
        response: &[u32],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.accumulate(cond, response, scale, Some(grad))
    }

    fn accumulate(
        &self,
        cond: &GenConditioning,
        response: &[u32],
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        if response.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.check(response)?;
        let s = &self.shape;
        let l = s.layout();
        let (e, hd) = (s.embed, s.hidden);
        let (c, base) = self.conditioning(cond)?;

        let mut inputs = Vec::with_capacity(response.len());
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(response.len() + 1);
        hs.push(vec![0.0; hd]);
        let mut probs = Vec::with_capacity(response.len());
        let mut total = 0.0;
        let mut prev = SpecialToken::Bos.id();
        for &target in response {
            let h = self.cell(&base, prev, hs.last().unwrap());
            let lp = log_softmax(&self.logits(&h));
            total += lp[target as usize];
            inputs.push(prev);
            hs.push(h);
            probs.push(lp);
            prev = target;
        }

        let Some(grad) = grad else {
            return Ok(total);
        };
        if scale == 0.0 {
            return Ok(total);
        }
        let p = &self.params;
        let mut dh_next = vec![0.0; hd];
        let mut dbase = vec![0.0; hd];
        for t in (0..response.len()).rev() {
            let h = &hs[t + 1];
            let h_prev = &hs[t];
            let mut dh = dh_next.clone();
            for v in 0..s.vocab {
                let target = if v == response[t] as usize { 1.0 } else { 0.0 };
                let dl = scale * (target - probs[t][v].exp());
                grad[l.bu + v] += dl;
                let row = l.u + v * hd;
                for i in 0..hd {
                    grad[row + i] += dl * h[i];
                    dh[i] += dl * p[row + i];
                }
            }
            let da: Vec<f64> = dh.iter().zip(h).map(|(d, h)| d * (1.0 - h * h)).collect();
            let x_row = l.emb + inputs[t] as usize * e;
            dh_next = vec![0.0; hd];
            for i in 0..hd {
                let di = da[i];
                dbase[i] += di;
                for j in 0..e {
                    grad[l.wx + i * e + j] += di * p[x_row + j];
                    grad[x_row + j] += di * p[l.wx + i * e + j];
                }
                for j in 0..hd {
                    grad[l.wh + i * hd + j] += di * h_prev[j];
                    dh_next[j] += di * p[l.wh + i * hd + j];
                }
            }
        }
        let mut dc = vec![0.0; 3 * e];
        for i in 0..hd {
            grad[l.b + i] += dbase[i];
            for j in 0..3 * e {
                grad[l.wc + i * 3 * e + j] += dbase[i] * c[j];
                dc[j] += dbase[i] * p[l.wc + i * 3 * e + j];
            }
        }
        for (slot, part) in cond.parts().iter().enumerate() {
            if part.is_empty() {
                continue;
            }
            let n = part.len() as f64;
            for &tok in *part {
                for j in 0..e {
                    grad[l.emb + tok as usize * e + j] += dc[slot * e + j] / n;
                }
            }
        }
        Ok(total)
    }
}

impl StepModel for Generator {
    type State = GenState;

    fn vocab_size(&self) -> usize {
        self.shape.vocab
    }

    fn start(&self, cond: &GenConditioning) -> Result<GenState> {
        let (_, base) = self.conditioning(cond)?;
        let h = self.cell(&base, SpecialToken::Bos.id(), &vec![0.0; self.shape.hidden]);
        Ok(GenState { base, h })
    }

    fn log_probs(&self, state: &GenState) -> Vec<f64> {
        log_softmax(&self.logits(&state.h))
    }

    fn advance(&self, state: &GenState, token: u32) -> GenState {
        GenState {
            h: self.cell(&state.base, token, &state.h),
            base: state.base.clone(),
        }
    }
}
