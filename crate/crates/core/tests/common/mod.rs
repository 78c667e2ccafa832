#![allow(dead_code)]

use persona_kgc::corpus::{encode_cases, generate_synthetic, EncodedCase, SyntheticCorpus, SyntheticSpec, Vocab};

pub fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_users: 10,
        cases_per_user: 6,
        memory_size: 6,
        knowledge_size: 4,
        vocab_size: 80,
        dependency_strength: 0.9,
        seed,
    }
}

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// Encode a synthetic corpus with its own vocabulary and ground truth.
pub fn encoded(corpus: &SyntheticCorpus) -> (Vocab, Vec<EncodedCase>) {
    let vocab = Vocab::build(&corpus.cases, &corpus.repo);
    let cases = encode_cases(&corpus.cases, &corpus.repo, &vocab, Some(&corpus.truth)).unwrap();
    (vocab, cases)
}

pub fn small_corpus(seed: u64) -> (Vocab, Vec<EncodedCase>) {
    encoded(&generate_synthetic(&spec(seed)).unwrap())
}
