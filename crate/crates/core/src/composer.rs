//! Input layouts for the five scoring models.
//!
//! Every sequence starts with `[CLS]`; each utterance, fragment, knowledge
//! sentence and the response is followed by `[SEP]`. Segment order per model:
//!
//! | kind       | layout           |
//! |------------|------------------|
//! | `PriorZp`  | C, P_i           |
//! | `PriorZk`  | C, P_sel, K_i    |
//! | `PostZp`   | C, R, P_i        |
//! | `PostZk`   | C, R, P_sel, K_i |
//! | `AuxZp`    | C, R, K_sel, P_i |

use serde::{Deserialize, Serialize};

use crate::corpus::SpecialToken;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistributionKind {
    PriorZp,
    PriorZk,
    PostZp,
    PostZk,
    AuxZp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Context,
    Response,
    Memory,
    Knowledge,
}

impl SegmentKind {
    pub const COUNT: usize = 4;

    pub fn slot(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        match self {
            SegmentKind::Context => "context",
            SegmentKind::Response => "response",
            SegmentKind::Memory => "memory",
            SegmentKind::Knowledge => "knowledge",
        }
    }
}

impl DistributionKind {
    pub fn layout(self, memory_conditions_knowledge: bool) -> &'static [SegmentKind] {
        use SegmentKind::*;
        match (self, memory_conditions_knowledge) {
            (DistributionKind::PriorZp, _) => &[Context, Memory],
            (DistributionKind::PriorZk, true) => &[Context, Memory, Knowledge],
            (DistributionKind::PriorZk, false) => &[Context, Knowledge],
            (DistributionKind::PostZp, _) => &[Context, Response, Memory],
            (DistributionKind::PostZk, true) => &[Context, Response, Memory, Knowledge],
            (DistributionKind::PostZk, false) => &[Context, Response, Knowledge],
            (DistributionKind::AuxZp, _) => &[Context, Response, Knowledge, Memory],
        }
    }
}

/// Half-open token range `[start, end)` of one piece, separators excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSpan {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedSequence {
    pub tokens: Vec<u32>,
    pub spans: Vec<SegmentSpan>,
    pub truncation_applied: bool,
}

impl ComposedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token ids belonging to segments of `kind`, in order.
    pub fn segment_tokens(&self, kind: SegmentKind) -> impl Iterator<Item = u32> + '_ {
        self.spans
            .iter()
            .filter(move |s| s.kind == kind)
            .flat_map(move |s| self.tokens[s.start..s.end].iter().copied())
    }
}

/// The raw pieces a layout draws from. Memory may hold several fragments.
#[derive(Debug, Clone, Copy, Default)]
pub struct Segments<'a> {
    pub context: &'a [Vec<u32>],
    pub response: Option<&'a [u32]>,
    pub memory: Option<&'a [&'a [u32]]>,
    pub knowledge: Option<&'a [u32]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Composer {
    pub max_seq_len: usize,
    /// Context tokens kept before any other segment is shortened.
    pub context_floor: usize,
    /// Separate context utterances with `[SEP]` instead of joining them.
    pub sep_per_utterance: bool,
    /// Include the selected memory fragment in knowledge layouts.
    pub memory_conditions_knowledge: bool,
}

impl Default for Composer {
    fn default() -> Self {
        Composer {
            max_seq_len: 256,
            context_floor: 8,
            sep_per_utterance: true,
            memory_conditions_knowledge: true,
        }
    }
}

impl Composer {
    pub fn compose(&self, kind: DistributionKind, seg: &Segments<'_>) -> Result<ComposedSequence> {
        let layout = kind.layout(self.memory_conditions_knowledge);
        let mut pieces: Vec<(SegmentKind, Vec<u32>)> = Vec::new();
        for &s in layout {
            let missing = || Error::Composition {
                kind,
                segment: s.name(),
            };
            match s {
                SegmentKind::Context => {
                    if seg.context.is_empty() {
                        return Err(missing());
                    }
                    if self.sep_per_utterance {
                        pieces.extend(seg.context.iter().map(|u| (s, u.clone())));
                    } else {
                        pieces.push((s, seg.context.concat()));
                    }
                }
                SegmentKind::Response => {
                    let r = seg.response.ok_or_else(missing)?;
                    pieces.push((s, r.to_vec()));
                }
                SegmentKind::Memory => {
                    let m = seg.memory.filter(|m| !m.is_empty()).ok_or_else(missing)?;
                    pieces.extend(m.iter().map(|f| (s, f.to_vec())));
                }
                SegmentKind::Knowledge => {
                    let k = seg.knowledge.ok_or_else(missing)?;
                    pieces.push((s, k.to_vec()));
                }
            }
        }
        let truncated = self.truncate(&mut pieces)?;

        let mut tokens = vec![SpecialToken::Cls.id()];
        let mut spans = Vec::with_capacity(pieces.len());
        for (kind, piece) in pieces {
            if piece.is_empty() {
                continue;
            }
            let start = tokens.len();
            tokens.extend_from_slice(&piece);
            spans.push(SegmentSpan {
                kind,
                start,
                end: tokens.len(),
            });
            tokens.push(SpecialToken::Sep.id());
        }
        Ok(ComposedSequence {
            tokens,
            spans,
            truncation_applied: truncated,
        })
    }

    /// Shorten pieces in place until the layout fits `max_seq_len`.
    ///
    /// Oldest context tokens go first, down to `context_floor`; after that the
    /// remaining pieces lose tail tokens (response first, candidate last), each
    /// keeping at least one token.
    fn truncate(&self, pieces: &mut [(SegmentKind, Vec<u32>)]) -> Result<bool> {
        let length = |pieces: &[(SegmentKind, Vec<u32>)]| {
            1 + pieces
                .iter()
                .filter(|(_, p)| !p.is_empty())
                .map(|(_, p)| p.len() + 1)
                .sum::<usize>()
        };
        let mut excess = length(pieces).saturating_sub(self.max_seq_len);
        if excess == 0 {
            return Ok(false);
        }
        let context_len: usize = pieces
            .iter()
            .filter(|(k, _)| *k == SegmentKind::Context)
            .map(|(_, p)| p.len())
            .sum();
        let mut droppable = context_len.saturating_sub(self.context_floor);
        for (kind, piece) in pieces.iter_mut() {
            if *kind != SegmentKind::Context {
                continue;
            }
            while excess > 0 && droppable > 0 && !piece.is_empty() {
                piece.remove(0);
                droppable -= 1;
                excess -= 1;
                if piece.is_empty() {
                    // the utterance's separator goes with it
                    excess = excess.saturating_sub(1);
                }
            }
        }
        if excess > 0 {
            let n = pieces.len();
            let mut order: Vec<usize> = (0..n)
                .filter(|&i| pieces[i].0 != SegmentKind::Context)
                .collect();
            order.sort_by_key(|&i| (pieces[i].0 != SegmentKind::Response, i));
            for i in order {
                let piece = &mut pieces[i].1;
                while excess > 0 && piece.len() > 1 {
                    piece.pop();
                    excess -= 1;
                }
            }
        }
        if excess > 0 {
            return Err(Error::Argument(format!(
                "layout cannot fit max_seq_len = {}",
                self.max_seq_len
            )));
        }
        Ok(true)
    }
}
