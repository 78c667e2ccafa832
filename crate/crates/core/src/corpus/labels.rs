use super::{DialogueCase, MemorySet};

/// Indices of the knowledge candidate and memory fragment most similar to the response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PseudoLabels {
    pub k_bar: usize,
    pub p_bar: usize,
}

fn argmax_by<F: Fn(&[String]) -> f64>(items: &[Vec<String>], score: F) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, item) in items.iter().enumerate() {
        let s = score(item);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Tag each case with the candidates that maximize `sim(candidate, response)`.
/// Ties go to the lowest index.
pub fn pseudo_labels<F>(case: &DialogueCase, memory: &MemorySet, sim: F) -> PseudoLabels
where
    F: Fn(&[String], &[String]) -> f64,
{
    PseudoLabels {
        k_bar: argmax_by(&case.knowledge, |k| sim(k, &case.response)),
        p_bar: argmax_by(&memory.fragments, |p| sim(p, &case.response)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::unigram_f1;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn f1(a: &[String], b: &[String]) -> f64 {
        unigram_f1(a, b).unwrap()
    }

    #[test]
    fn exact_copy_of_response_wins() {
        let case = DialogueCase {
            id: "c".into(),
            user_key: "u".into(),
            context: vec![toks("hello")],
            knowledge: vec![toks("x y"), toks("the cat sat")],
            response: toks("the cat sat"),
        };
        let mem = MemorySet {
            fragments: vec![toks("a b"), toks("cat")],
        };
        let l = pseudo_labels(&case, &mem, f1);
        assert_eq!(l.k_bar, 1);
        assert_eq!(l.p_bar, 1);
    }

    #[test]
    fn zero_overlap_ties_break_to_first() {
        let case = DialogueCase {
            id: "c".into(),
            user_key: "u".into(),
            context: vec![toks("hello")],
            knowledge: vec![toks("a"), toks("b"), toks("c")],
            response: toks("z"),
        };
        let mem = MemorySet {
            fragments: vec![toks("q"), toks("r")],
        };
        assert_eq!(pseudo_labels(&case, &mem, f1), PseudoLabels { k_bar: 0, p_bar: 0 });
    }
}
