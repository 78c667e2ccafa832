//! Prior-driven selection, beam-search decoding and the evaluation harness.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedCase, MemoryRepository, SpecialToken, Vocab};
use crate::error::{Error, Result};
use crate::latent::{CaseView, LatentModels};
use crate::metrics::{recall_at_k, MetricsReport, RECALL_KS};
use crate::neural::generator::log_softmax;
use crate::neural::StepModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Draw the fragment from the prior; with `m > 1` the top `m` are taken.
    #[default]
    Sample,
    Argmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub repetition_penalty: f64,
    pub length_penalty: f64,
    /// Memory fragments activated per response.
    pub m: usize,
    pub selection: Selection,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 5,
            min_len: 10,
            max_len: 64,
            repetition_penalty: 1.0,
            length_penalty: 0.0,
            m: 2,
            selection: Selection::Sample,
        }
    }
}

impl DecodeConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.beam_width == 0 {
            out.push("decode.beam_width must be at least 1".into());
        }
        if self.max_len == 0 {
            out.push("decode.max_len must be positive".into());
        }
        if self.min_len > self.max_len {
            out.push("decode.min_len exceeds decode.max_len".into());
        }
        if !(self.repetition_penalty > 0.0 && self.repetition_penalty.is_finite()) {
            out.push("decode.repetition_penalty must be positive".into());
        }
        if !self.length_penalty.is_finite() {
            out.push("decode.length_penalty must be finite".into());
        }
        if self.m == 0 {
            out.push("decode.m must be at least 1".into());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of (penalized) token log-probabilities, including the end token.
    pub log_prob: f64,
    /// `log_prob / len^length_penalty`
    pub score: f64,
}

fn normalized(log_prob: f64, len: usize, lp: f64) -> f64 {
    if lp == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(lp)
    }
}

/// Multiplicative penalty on tokens already present, applied to
/// log-probabilities and renormalized.
fn penalize(log_probs: &mut Vec<f64>, prefix: &[u32], penalty: f64) {
    if penalty == 1.0 || prefix.is_empty() {
        return;
    }
    for &t in prefix {
        let v = &mut log_probs[t as usize];
        *v = if *v < 0.0 { *v * penalty } else { *v / penalty };
    }
    *log_probs = log_softmax(log_probs);
}

/// Beam search with the end token masked until `min_len` tokens are emitted.
/// Hypotheses still alive at `max_len` compete with finished ones.
pub fn beam_search<M: StepModel>(model: &M, start: M::State, cfg: &DecodeConfig) -> Hypothesis {
    let eos = SpecialToken::Eos.id();
    let width = cfg.beam_width.max(1);
    let mut alive: Vec<(Vec<u32>, f64, M::State)> = vec![(Vec::new(), 0.0, start)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let best_finished = |f: &[Hypothesis]| f.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);

    for step in 0..cfg.max_len {
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (b, (tokens, lp, state)) in alive.iter().enumerate() {
            let mut next = model.log_probs(state);
            penalize(&mut next, tokens, cfg.repetition_penalty);
            if step < cfg.min_len {
                next[eos as usize] = f64::NEG_INFINITY;
            }
            for (t, &l) in next.iter().enumerate() {
                if l > f64::NEG_INFINITY {
                    cands.push((lp + l, b, t as u32));
                }
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut next_alive = Vec::with_capacity(width);
        for (rank, &(lp, b, t)) in cands.iter().enumerate() {
            if t == eos {
                if rank < width {
                    let tokens = alive[b].0.clone();
                    let score = normalized(lp, tokens.len(), cfg.length_penalty);
                    finished.push(Hypothesis {
                        tokens,
                        log_prob: lp,
                        score,
                    });
                }
                continue;
            }
            let mut tokens = alive[b].0.clone();
            tokens.push(t);
            next_alive.push((tokens, lp, model.advance(&alive[b].2, t)));
            if next_alive.len() == width {
                break;
            }
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
        if !finished.is_empty() {
            let best_alive = alive[0].1;
            let settled = cfg.length_penalty == 0.0 && best_finished(&finished) >= best_alive;
            if settled || finished.len() >= width {
                alive.clear();
                break;
            }
        }
    }
    for (tokens, lp, _) in alive {
        let score = normalized(lp, tokens.len(), cfg.length_penalty);
        finished.push(Hypothesis {
            tokens,
            log_prob: lp,
            score,
        });
    }
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if h.score > finished[best].score {
            best = i;
        }
    }
    finished.swap_remove(best)
}

/// Memory fragments per user key, as token ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryIndex {
    entries: BTreeMap<String, Vec<Vec<u32>>>,
}

impl MemoryIndex {
    pub fn build(repo: &MemoryRepository, vocab: &Vocab) -> Self {
        let entries = repo
            .entries
            .iter()
            .map(|(k, frags)| (k.clone(), frags.iter().map(|f| vocab.encode(f)).collect()))
            .collect();
        MemoryIndex { entries }
    }

    pub fn get(&self, user_key: &str) -> Result<&[Vec<u32>]> {
        self.entries
            .get(user_key)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::MissingUser(user_key.to_string()))
    }
}

/// Inference input. There is deliberately no response field.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub context: Vec<Vec<u32>>,
    pub memory: Vec<Vec<u32>>,
    pub knowledge: Vec<Vec<u32>>,
}

impl Query {
    pub fn new(
        context: Vec<Vec<u32>>,
        user_key: &str,
        knowledge: Vec<Vec<u32>>,
        memory: &MemoryIndex,
    ) -> Result<Self> {
        Ok(Query {
            context,
            memory: memory.get(user_key)?.to_vec(),
            knowledge,
        })
    }

    pub fn from_case(case: &EncodedCase) -> Self {
        Query {
            context: case.context.clone(),
            memory: case.memory.clone(),
            knowledge: case.knowledge.clone(),
        }
    }

    fn view(&self) -> CaseView<'_> {
        CaseView {
            context: &self.context,
            response: None,
            memory: &self.memory,
            knowledge: &self.knowledge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub prior_zp: Vec<f64>,
    pub prior_zk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub zp: Vec<usize>,
    pub zk: usize,
    pub tokens: Vec<u32>,
    pub trace: Trace,
}

/// Select memory from `p(Zp|C)`, knowledge from `p(Zk|C,Zp)`, then decode.
pub fn respond<R: Rng + ?Sized>(
    models: &LatentModels,
    query: &Query,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Response> {
    let (zp, zk, trace) = select(models, query, cfg, rng)?;
    let v = query.view();
    let cond = models.conditioning(&v, &zp, zk)?;
    let start = models.generator.start(&cond)?;
    let hyp = beam_search(&models.generator, start, cfg);
    Ok(Response {
        zp,
        zk,
        tokens: hyp.tokens,
        trace,
    })
}

fn select<R: Rng + ?Sized>(
    models: &LatentModels,
    query: &Query,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<(Vec<usize>, usize, Trace)> {
    if query.knowledge.is_empty() {
        return Err(Error::Argument("empty knowledge set".into()));
    }
    let v = query.view();
    let p_zp = models.prior_zp(&v)?.dist;
    let zp = match (cfg.selection, cfg.m) {
        (Selection::Sample, 1) => vec![p_zp.sample(rng)],
        _ => p_zp.top_m(cfg.m),
    };
    let p_zk = models.prior_zk(&v, &zp)?.dist;
    let zk = match cfg.selection {
        Selection::Sample => p_zk.sample(rng),
        Selection::Argmax => p_zk.argmax(),
    };
    Ok((
        zp,
        zk,
        Trace {
            prior_zp: p_zp.probs().to_vec(),
            prior_zk: p_zk.probs().to_vec(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub n_cases: usize,
}

/// Decode every case and score against the references. Recall@k measures
/// the prior knowledge distribution against each case's target.
pub fn evaluate<R: Rng + ?Sized>(
    models: &LatentModels,
    cases: &[EncodedCase],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut hyps = Vec::with_capacity(cases.len());
    let mut refs = Vec::with_capacity(cases.len());
    let mut rankings = Vec::with_capacity(cases.len());
    for case in cases {
        let r = respond(models, &Query::from_case(case), cfg, rng)?;
        rankings.push((r.trace.prior_zk, case.target().1));
        // Ids map one-to-one onto tokens; an empty output scores as a lone [UNK].
        hyps.push(if r.tokens.is_empty() { vec![SpecialToken::Unk.id()] } else { r.tokens });
        refs.push(case.response.clone());
    }
    Ok(EvalReport {
        metrics: MetricsReport::compute(&hyps, &refs, &rankings)?,
        n_cases: cases.len(),
    })
}

/// Recall@{1,2,5,10} of `p(Zk | C, top-m Zp)` for every `m` in `ms`.
/// Selection is by argmax so the grid is a pure function of the models.
pub fn m_sweep(
    models: &LatentModels,
    cases: &[EncodedCase],
    ms: &[usize],
) -> Result<BTreeMap<usize, BTreeMap<usize, f64>>> {
    if cases.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut grid = BTreeMap::new();
    for &m in ms {
        let mut rankings = Vec::with_capacity(cases.len());
        for case in cases {
            let v = case.view();
            let zp = models.prior_zp(&v)?.dist.top_m(m);
            rankings.push((models.prior_zk(&v, &zp)?.dist.probs().to_vec(), case.target().1));
        }
        let min_k = rankings.iter().map(|(s, _)| s.len()).min().unwrap_or(0);
        let row = RECALL_KS
            .into_iter()
            .filter(|&k| k <= min_k)
            .map(|k| Ok((k, recall_at_k(&rankings, k)?)))
            .collect::<Result<_>>()?;
        grid.insert(m, row);
    }
    Ok(grid)
}
