//! Automatic response metrics: unigram F1, BLEU, ROUGE, Distinct-n and Recall@k.
//!
//! All functions are generic over the token type so they run on surface
//! strings and on vocabulary ids alike.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Clipped overlap of the n-gram multisets of `hyp` and `reference`.
fn clipped_overlap<T: Hash + Eq>(hyp: &[T], reference: &[T], n: usize) -> usize {
    let r = ngram_counts(reference, n);
    ngram_counts(hyp, n)
        .into_iter()
        .map(|(g, c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

fn f_measure(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

fn non_empty<T>(hyp: &[T], reference: &[T]) -> Result<()> {
    if hyp.is_empty() || reference.is_empty() {
        Err(Error::EmptyInput)
    } else {
        Ok(())
    }
}

/// F1 of the clipped unigram overlap.
pub fn unigram_f1<T: Hash + Eq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    non_empty(hyp, reference)?;
    Ok(f_measure(
        clipped_overlap(hyp, reference, 1),
        hyp.len(),
        reference.len(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// Add one to numerator and denominator of every order >= 2.
    AddOneHigherOrders,
}

/// Corpus-level BLEU-1..=max_n: clipped n-gram precision pooled over all
/// pairs, geometric mean over orders, brevity penalty on total lengths.
pub fn corpus_bleu<T: Hash + Eq>(
    pairs: &[(&[T], &[T])],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BTreeMap<usize, f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if max_n == 0 {
        return Err(Error::Argument("max_n must be positive".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        non_empty(hyp, reference)?;
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            matched[n - 1] += clipped_overlap(hyp, reference, n);
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    let log_precision: Vec<f64> = (0..max_n)
        .map(|i| {
            let (m, t) = match (smoothing, i) {
                (Smoothing::AddOneHigherOrders, i) if i >= 1 => (matched[i] + 1, total[i] + 1),
                _ => (matched[i], total[i]),
            };
            if m == 0 || t == 0 {
                f64::NEG_INFINITY
            } else {
                (m as f64 / t as f64).ln()
            }
        })
        .collect();
    let brevity = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok((1..=max_n)
        .map(|n| {
            let mean = log_precision[..n].iter().sum::<f64>() / n as f64;
            let score = if mean.is_finite() { brevity * mean.exp() } else { 0.0 };
            (n, score)
        })
        .collect())
}

/// Sentence-level BLEU with add-one smoothing on orders >= 2.
pub fn bleu<T: Hash + Eq>(hyp: &[T], reference: &[T], max_n: usize) -> Result<BTreeMap<usize, f64>> {
    corpus_bleu(&[(hyp, reference)], max_n, Smoothing::AddOneHigherOrders)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1/2 n-gram F-measures and the LCS-based ROUGE-L F-measure.
pub fn rouge<T: Hash + Eq>(hyp: &[T], reference: &[T]) -> Result<Rouge> {
    non_empty(hyp, reference)?;
    let ngram_f = |n: usize| {
        f_measure(
            clipped_overlap(hyp, reference, n),
            hyp.len().saturating_sub(n - 1),
            reference.len().saturating_sub(n - 1),
        )
    };
    Ok(Rouge {
        r1: ngram_f(1),
        r2: ngram_f(2),
        rl: f_measure(lcs_len(hyp, reference), hyp.len(), reference.len()),
    })
}

/// Unique n-grams over total n-grams across all hypotheses.
pub fn distinct<T: Hash + Eq, S: AsRef<[T]>>(hyps: &[S], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Argument("n must be positive".into()));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        for w in h.as_ref().windows(n) {
            unique.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric(format!("no {n}-grams in any hypothesis")));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Rank of `target` under `scores`, ties broken by lower index first.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

/// Fraction of rankings whose true index is among the `k` best.
pub fn recall_at_k(rankings: &[(Vec<f64>, usize)], k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::UndefinedMetric("no rankings".into()));
    }
    let mut hits = 0usize;
    for (scores, target) in rankings {
        if k == 0 || k > scores.len() {
            return Err(Error::Argument(format!(
                "k = {k} outside 1..={} candidates",
                scores.len()
            )));
        }
        if *target >= scores.len() {
            return Err(Error::Index {
                index: *target,
                len: scores.len(),
            });
        }
        if rank_of(scores, *target) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

pub const RECALL_KS: [usize; 4] = [1, 2, 5, 10];

/// Aggregate report; every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu: BTreeMap<usize, f64>,
    pub rouge: BTreeMap<String, f64>,
    pub distinct: BTreeMap<usize, f64>,
    pub f1: f64,
    pub recall: BTreeMap<usize, f64>,
}

impl MetricsReport {
    /// Score hypotheses against references. `rankings` feed Recall@k for every
    /// k in {1, 2, 5, 10} that does not exceed the smallest candidate count.
    pub fn compute<T: Hash + Eq>(
        hyps: &[Vec<T>],
        refs: &[Vec<T>],
        rankings: &[(Vec<f64>, usize)],
    ) -> Result<MetricsReport> {
        if hyps.len() != refs.len() {
            return Err(Error::Argument(format!(
                "{} hypotheses for {} references",
                hyps.len(),
                refs.len()
            )));
        }
        let pairs: Vec<(&[T], &[T])> = hyps
            .iter()
            .zip(refs)
            .map(|(h, r)| (h.as_slice(), r.as_slice()))
            .collect();
        let bleu = corpus_bleu(&pairs, 4, Smoothing::None)?;
        let (mut r1, mut r2, mut rl, mut f1) = (0.0, 0.0, 0.0, 0.0);
        for (h, r) in &pairs {
            let s = rouge(h, r)?;
            r1 += s.r1;
            r2 += s.r2;
            rl += s.rl;
            f1 += unigram_f1(h, r)?;
        }
        let n = pairs.len() as f64;
        let rouge = BTreeMap::from([
            ("R1".to_string(), r1 / n),
            ("R2".to_string(), r2 / n),
            ("RL".to_string(), rl / n),
        ]);
        let distinct = BTreeMap::from([(1, distinct(hyps, 1)?), (2, distinct(hyps, 2)?)]);
        let mut recall = BTreeMap::new();
        if !rankings.is_empty() {
            let min_candidates = rankings.iter().map(|(s, _)| s.len()).min().unwrap_or(0);
            for k in RECALL_KS.into_iter().filter(|&k| k <= min_candidates) {
                recall.insert(k, recall_at_k(rankings, k)?);
            }
        }
        Ok(MetricsReport {
            bleu,
            rouge,
            distinct,
            f1: f1 / n,
            recall,
        })
    }

    /// Fixed-order percentage table: B-1..B-4, R-1, R-2, R-L, D-1, D-2, F1.
    pub fn table(&self) -> String {
        let pct = |v: Option<&f64>| match v {
            Some(v) => format!("{:>6.2}", 100.0 * v),
            None => format!("{:>6}", "-"),
        };
        let header = ["B-1", "B-2", "B-3", "B-4", "R-1", "R-2", "R-L", "D-1", "D-2", "F1"]
            .map(|h| format!("{h:>6}"))
            .join(" ");
        let values = [
            pct(self.bleu.get(&1)),
            pct(self.bleu.get(&2)),
            pct(self.bleu.get(&3)),
            pct(self.bleu.get(&4)),
            pct(self.rouge.get("R1")),
            pct(self.rouge.get("R2")),
            pct(self.rouge.get("RL")),
            pct(self.distinct.get(&1)),
            pct(self.distinct.get(&2)),
            pct(Some(&self.f1)),
        ]
        .join(" ");
        format!("{header}\n{values}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn unigram_f1_fixtures() {
        assert_eq!(unigram_f1(&t("a b c"), &t("a b c")).unwrap(), 1.0);
        assert_eq!(unigram_f1(&t("a b"), &t("c d")).unwrap(), 0.0);
        assert!((unigram_f1(&t("a b c"), &t("a b d")).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(unigram_f1::<&str>(&[], &t("a")), Err(Error::EmptyInput)));
    }

    #[test]
    fn unigram_overlap_is_clipped() {
        // hyp "a a a" vs ref "a b": overlap 1, P = 1/3, R = 1/2
        let f = unigram_f1(&t("a a a"), &t("a b")).unwrap();
        assert!((f - 0.4).abs() < 1e-12);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let r = t("the cat sat on the mat");
        let b = bleu(&r, &r, 4).unwrap();
        for n in 1..=4 {
            assert!((b[&n] - 1.0).abs() < 1e-12);
        }
        assert_eq!(bleu(&t("x y z"), &t("a b c"), 4).unwrap()[&1], 0.0);
    }

    #[test]
    fn brevity_penalty_applies_to_short_hypotheses() {
        let b = corpus_bleu(&[(&t("a b")[..], &t("a b c d")[..])], 1, Smoothing::None).unwrap();
        assert!((b[&1] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_identity_disjoint_and_lcs() {
        let r = rouge(&t("a b c"), &t("a b c")).unwrap();
        assert_eq!((r.r1, r.r2, r.rl), (1.0, 1.0, 1.0));
        let r = rouge(&t("a b"), &t("c d")).unwrap();
        assert_eq!((r.r1, r.r2, r.rl), (0.0, 0.0, 0.0));
        // LCS("a x b y c", "a b c z") = 3: P = 3/5, R = 3/4
        let r = rouge(&t("a x b y c"), &t("a b c z")).unwrap();
        let (p, rec) = (0.6, 0.75);
        assert!((r.rl - 2.0 * p * rec / (p + rec)).abs() < 1e-12);
    }

    #[test]
    fn distinct_fixtures() {
        assert_eq!(distinct(&[t("a b c")], 1).unwrap(), 1.0);
        assert_eq!(distinct(&[t("a a a a")], 1).unwrap(), 0.25);
        let single = distinct(&[t("a b c")], 2).unwrap();
        let doubled = distinct(&[t("a b c"), t("a b c")], 2).unwrap();
        assert_eq!(doubled, single / 2.0);
        assert!(matches!(distinct(&[t("a")], 2), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn recall_fixtures() {
        let r = vec![(vec![0.1, 0.7, 0.2], 1), (vec![0.5, 0.2, 0.3], 0)];
        assert_eq!(recall_at_k(&r, 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&r, 3).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&r, 4), Err(Error::Argument(_))));
        assert!(matches!(recall_at_k(&r, 0), Err(Error::Argument(_))));
        // ties resolve to the lower index
        let tie = vec![(vec![0.5, 0.5], 1)];
        assert_eq!(recall_at_k(&tie, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[(vec![0.5, 0.5], 0)], 1).unwrap(), 1.0);
    }

    #[test]
    fn report_table_has_fixed_columns() {
        let hyps = vec![t("a b c d")];
        let refs = vec![t("a b c e")];
        let rep = MetricsReport::compute(&hyps, &refs, &[(vec![0.9, 0.1], 0)]).unwrap();
        assert_eq!(rep.recall.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        let table = rep.table();
        assert!(table.starts_with("   B-1    B-2"));
        assert_eq!(table.lines().count(), 2);
    }
}
