//! Dialogue cases, the user-keyed memory repository, pseudo labels and the
//! planted-ground-truth synthetic generator.

mod io;
mod labels;
mod repository;
mod synthetic;
mod vocab;

pub use io::{
    load_corpus, load_memory, load_truth, read_corpus, read_memory, write_corpus, write_memory,
    write_truth, GroundTruth,
};
pub use labels::{pseudo_labels, PseudoLabels};
pub use repository::{
    filter_repository, retrieve_memory, FilterRule, MemoryRepository, MemorySet, MIN_FRAGMENTS,
};
pub use synthetic::{generate_synthetic, planted_row, SyntheticCorpus, SyntheticSpec};
pub use vocab::{SpecialToken, Vocab};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics;

/// A token sequence in surface form.
pub type Tokens = Vec<String>;

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueCase {
    pub id: String,
    pub user_key: String,
    pub context: Vec<Tokens>,
    pub knowledge: Vec<Tokens>,
    pub response: Tokens,
}

impl DialogueCase {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Error::Data(format!("case `{}`: {what}", self.id));
        if self.context.is_empty() {
            return Err(bad("context is empty"));
        }
        if self.knowledge.is_empty() {
            return Err(bad("knowledge set is empty"));
        }
        if self.response.is_empty() {
            return Err(bad("response is empty"));
        }
        if self.context.iter().any(Vec::is_empty) {
            return Err(bad("context utterance is empty after tokenization"));
        }
        if self.knowledge.iter().any(Vec::is_empty) {
            return Err(bad("knowledge candidate is empty after tokenization"));
        }
        Ok(())
    }
}

/// Whitespace tokenizer over lowercased text with punctuation removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Tokens {
        let cleaned: String = text
            .chars()
            .filter(|c| !self.strip_punctuation || c.is_alphanumeric() || c.is_whitespace())
            .collect();
        let cleaned = if self.lowercase {
            cleaned.to_lowercase()
        } else {
            cleaned
        };
        cleaned.split_whitespace().map(str::to_owned).collect()
    }
}

/// One-way digest of an account name, used as the repository key.
///
/// SHA-256 truncated to 128 bits, hex encoded.
pub fn hash_user_key(account: &str) -> String {
    let digest = Sha256::digest(account.as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Name of the digest recorded in generated corpus metadata.
pub const USER_KEY_DIGEST: &str = "sha256-128";

/// A case with its memory, token ids and pseudo labels resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCase {
    pub id: String,
    pub user_key: String,
    pub context: Vec<Vec<u32>>,
    pub knowledge: Vec<Vec<u32>>,
    pub response: Vec<u32>,
    pub memory: Vec<Vec<u32>>,
    pub labels: PseudoLabels,
    /// Planted `(z^p*, z^k*)` when the corpus is synthetic.
    pub truth: Option<(usize, usize)>,
}

impl EncodedCase {
    /// Labels used for probes and recall: ground truth when known, pseudo labels otherwise.
    pub fn target(&self) -> (usize, usize) {
        self.truth
            .unwrap_or((self.labels.p_bar, self.labels.k_bar))
    }
}

/// Resolve memory, compute unigram-F1 pseudo labels and map tokens to ids.
pub fn encode_cases(
    cases: &[DialogueCase],
    repo: &MemoryRepository,
    vocab: &Vocab,
    truth: Option<&[GroundTruth]>,
) -> Result<Vec<EncodedCase>> {
    if let Some(t) = truth {
        if t.len() != cases.len() {
            return Err(Error::Data(format!(
                "ground truth has {} records for {} cases",
                t.len(),
                cases.len()
            )));
        }
    }
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            case.validate()?;
            let memory = retrieve_memory(repo, &case.user_key).map_err(|_| {
                Error::Data(format!(
                    "case `{}`: user `{}` has no memory",
                    case.id, case.user_key
                ))
            })?;
            let labels = pseudo_labels(case, &memory, |a, b| {
                metrics::unigram_f1(a, b).unwrap_or(0.0)
            });
            let truth = match truth {
                Some(t) => {
                    let g = &t[i];
                    if g.id != case.id {
                        return Err(Error::Data(format!(
                            "ground truth record {} is for `{}`, expected `{}`",
                            i + 1,
                            g.id,
                            case.id
                        )));
                    }
                    if g.zp >= memory.len() || g.zk >= case.knowledge.len() {
                        return Err(Error::Data(format!(
                            "ground truth for `{}` out of range",
                            case.id
                        )));
                    }
                    Some((g.zp, g.zk))
                }
                None => None,
            };
            Ok(EncodedCase {
                id: case.id.clone(),
                user_key: case.user_key.clone(),
                context: case.context.iter().map(|u| vocab.encode(u)).collect(),
                knowledge: case.knowledge.iter().map(|k| vocab.encode(k)).collect(),
                response: vocab.encode(&case.response),
                memory: memory.fragments.iter().map(|f| vocab.encode(f)).collect(),
                labels,
                truth,
            })
        })
        .collect()
}
