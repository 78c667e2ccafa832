use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{DialogueCase, MemoryRepository};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialToken {
    Unk,
    Cls,
    Sep,
    Bos,
    Eos,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 5] = [
        SpecialToken::Unk,
        SpecialToken::Cls,
        SpecialToken::Sep,
        SpecialToken::Bos,
        SpecialToken::Eos,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn text(self) -> &'static str {
        match self {
            SpecialToken::Unk => "[UNK]",
            SpecialToken::Cls => "[CLS]",
            SpecialToken::Sep => "[SEP]",
            SpecialToken::Bos => "[BOS]",
            SpecialToken::Eos => "[EOS]",
        }
    }
}

/// Token <-> id map. Ids `0..5` are the reserved special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Vocabulary over every word in the cases and the repository, sorted.
    pub fn build(cases: &[DialogueCase], repo: &MemoryRepository) -> Vocab {
        let mut words = BTreeSet::new();
        for case in cases {
            for seq in case.context.iter().chain(&case.knowledge) {
                words.extend(seq.iter().cloned());
            }
            words.extend(case.response.iter().cloned());
        }
        for fragments in repo.entries.values() {
            for f in fragments {
                words.extend(f.iter().cloned());
            }
        }
        Self::from_words(words)
    }

    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Vocab {
        let mut tokens: Vec<String> = SpecialToken::ALL
            .iter()
            .map(|s| s.text().to_owned())
            .collect();
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index
            .get(token)
            .copied()
            .unwrap_or(SpecialToken::Unk.id())
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Surface text, dropping special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i as usize >= SpecialToken::ALL.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
