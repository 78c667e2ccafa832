use std::collections::BTreeMap;

use super::Tokens;
use crate::error::{Error, Result};

/// Minimum number of fragments a user needs to stay in the repository.
pub const MIN_FRAGMENTS: usize = 5;

/// Memory fragments keyed by hashed user key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryRepository {
    pub entries: BTreeMap<String, Vec<Tokens>>,
}

/// The memory of one user, in repository order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemorySet {
    pub fragments: Vec<Tokens>,
}

impl MemorySet {
    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterRule {
    pub min_fragments: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for FilterRule {
    fn default() -> Self {
        FilterRule {
            min_fragments: MIN_FRAGMENTS,
            min_len: 4,
            max_len: 128,
        }
    }
}

/// Drop fragments outside `[min_len, max_len]`, then drop users left with
/// fewer than `min_fragments`.
pub fn filter_repository(repo: &MemoryRepository, rule: FilterRule) -> MemoryRepository {
    let entries = repo
        .entries
        .iter()
        .filter_map(|(user, fragments)| {
            let kept: Vec<Tokens> = fragments
                .iter()
                .filter(|f| (rule.min_len..=rule.max_len).contains(&f.len()))
                .cloned()
                .collect();
            (kept.len() >= rule.min_fragments).then(|| (user.clone(), kept))
        })
        .collect();
    MemoryRepository { entries }
}

pub fn retrieve_memory(repo: &MemoryRepository, user_key: &str) -> Result<MemorySet> {
    repo.entries
        .get(user_key)
        .filter(|f| !f.is_empty())
        .map(|f| MemorySet {
            fragments: f.clone(),
        })
        .ok_or_else(|| Error::MissingUser(user_key.to_owned()))
}
