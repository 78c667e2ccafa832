//! Synthetic corpora with a planted memory -> knowledge dependency.
//!
//! Every user owns `memory_size` fragments, each carrying one *topic* word and
//! one *attribute* word. A case picks the true fragment `z^p*`, mentions its
//! topic in the context, and lays out the knowledge candidates so that
//! candidate `z^p* mod |K|` carries the fragment's attribute (its *link*). The
//! true candidate is the link with probability `dependency_strength`, and
//! uniform otherwise. The response repeats the topic of the true fragment and
//! the attribute of the true candidate, so unigram-F1 pseudo labels can find
//! both.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{hash_user_key, DialogueCase, GroundTruth, MemoryRepository, Tokens, MIN_FRAGMENTS};
use crate::error::{Error, Result};

const FRAGMENT_FILLERS: usize = 3;
const KNOWLEDGE_FILLERS: usize = 4;
const CONTEXT_FILLERS: usize = 3;
const RESPONSE_NOISE: usize = 2;
const MIN_FILLER_WORDS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub cases_per_user: usize,
    pub memory_size: usize,
    pub knowledge_size: usize,
    pub vocab_size: usize,
    pub dependency_strength: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn n_topics(&self) -> usize {
        2 * self.memory_size
    }

    fn n_attributes(&self) -> usize {
        self.memory_size + self.knowledge_size
    }

    fn n_fillers(&self) -> usize {
        self.vocab_size
            .saturating_sub(self.n_topics() + self.n_attributes())
    }

    /// Every violated constraint, in a fixed order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("num_users", self.num_users),
            ("cases_per_user", self.cases_per_user),
            ("knowledge_size", self.knowledge_size),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if self.memory_size < MIN_FRAGMENTS {
            out.push(format!(
                "memory_size must be at least {MIN_FRAGMENTS} (repository retention rule)"
            ));
        }
        if !(0.0..=1.0).contains(&self.dependency_strength) {
            out.push("dependency_strength must lie in [0, 1]".into());
        }
        let markers = self.memory_size * self.knowledge_size;
        if self.vocab_size < markers {
            out.push(format!(
                "vocab_size {} is smaller than |P|*|K| = {markers}",
                self.vocab_size
            ));
        }
        if self.n_fillers() < MIN_FILLER_WORDS {
            out.push(format!(
                "vocab_size {} leaves fewer than {MIN_FILLER_WORDS} filler words after {} topics and {} attributes",
                self.vocab_size,
                self.n_topics(),
                self.n_attributes()
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Knowledge position that carries the attribute of memory fragment `zp`.
    pub fn link(&self, zp: usize) -> usize {
        zp % self.knowledge_size
    }
}

/// Row `p*(Z^k | Z^p)` of the planted table: a `strength` point mass on the
/// link mixed with a uniform distribution.
pub fn planted_row(strength: f64, knowledge_size: usize, link: usize) -> Vec<f64> {
    let base = (1.0 - strength) / knowledge_size as f64;
    (0..knowledge_size)
        .map(|k| if k == link { strength + base } else { base })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub cases: Vec<DialogueCase>,
    pub repo: MemoryRepository,
    pub truth: Vec<GroundTruth>,
}

impl SyntheticCorpus {
    /// The full planted conditional table, one row per memory index.
    pub fn planted_table(&self) -> Vec<Vec<f64>> {
        let s = &self.spec;
        (0..s.memory_size)
            .map(|zp| planted_row(s.dependency_strength, s.knowledge_size, s.link(zp)))
            .collect()
    }
}

struct User {
    key: String,
    topics: Vec<usize>,
    attributes: Vec<usize>,
    foreign_attributes: Vec<usize>,
    fragments: Vec<Tokens>,
    fragment_fillers: Vec<Vec<usize>>,
}

fn topic(i: usize) -> String {
    format!("topic{i}")
}

fn attribute(i: usize) -> String {
    format!("attr{i}")
}

fn filler(i: usize) -> String {
    format!("w{i}")
}

struct Sampler<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn fillers(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| self.rng.gen_range(0..self.spec.n_fillers()))
            .collect()
    }

    fn shuffled(&mut self, mut words: Tokens) -> Tokens {
        words.shuffle(&mut self.rng);
        words
    }

    fn user(&mut self, u: usize) -> User {
        let s = self.spec;
        let topics = index::sample(&mut self.rng, s.n_topics(), s.memory_size).into_vec();
        let mut attrs: Vec<usize> = (0..s.n_attributes()).collect();
        attrs.shuffle(&mut self.rng);
        let foreign_attributes = attrs.split_off(s.memory_size);
        let mut fragments = Vec::with_capacity(s.memory_size);
        let mut fragment_fillers = Vec::with_capacity(s.memory_size);
        for j in 0..s.memory_size {
            let fill = self.fillers(FRAGMENT_FILLERS);
            let mut words = vec![topic(topics[j]), attribute(attrs[j])];
            words.extend(fill.iter().map(|&f| filler(f)));
            let words = self.shuffled(words);
            fragments.push(words);
            fragment_fillers.push(fill);
        }
        User {
            key: hash_user_key(&format!("user{u}")),
            topics,
            attributes: attrs,
            foreign_attributes,
            fragments,
            fragment_fillers,
        }
    }

    fn case(&mut self, id: String, user: &User) -> (DialogueCase, GroundTruth) {
        let s = self.spec;
        let zp = self.rng.gen_range(0..s.memory_size);
        let link = s.link(zp);
        let zk = if self.rng.gen::<f64>() < s.dependency_strength {
            link
        } else {
            self.rng.gen_range(0..s.knowledge_size)
        };

        let mut knowledge = Vec::with_capacity(s.knowledge_size);
        let mut knowledge_fillers = Vec::with_capacity(s.knowledge_size);
        for i in 0..s.knowledge_size {
            let attr = if i == link {
                user.attributes[zp]
            } else if i < s.memory_size {
                user.attributes[i]
            } else {
                user.foreign_attributes[i - s.memory_size]
            };
            let fill = self.fillers(KNOWLEDGE_FILLERS);
            let mut words = vec![attribute(attr)];
            words.extend(fill.iter().map(|&f| filler(f)));
            knowledge.push(self.shuffled(words));
            knowledge_fillers.push((attr, fill));
        }

        let own: Vec<usize> = user.topics.clone();
        let distractor = loop {
            let t = self.rng.gen_range(0..s.n_topics());
            if !own.contains(&t) {
                break t;
            }
        };
        let mut cue = vec![topic(user.topics[zp])];
        cue.extend(self.fillers(CONTEXT_FILLERS).into_iter().map(filler));
        let mut other = vec![topic(distractor)];
        other.extend(self.fillers(CONTEXT_FILLERS).into_iter().map(filler));
        let context = vec![self.shuffled(cue), self.shuffled(other)];

        let (k_attr, k_fill) = &knowledge_fillers[zk];
        let p_fill = &user.fragment_fillers[zp];
        let mut response = vec![topic(user.topics[zp]), attribute(*k_attr)];
        response.extend(k_fill.iter().take(2).map(|&f| filler(f)));
        response.push(filler(p_fill[0]));
        response.extend(self.fillers(RESPONSE_NOISE).into_iter().map(filler));
        let response = self.shuffled(response);

        let case = DialogueCase {
            id: id.clone(),
            user_key: user.key.clone(),
            context,
            knowledge,
            response,
        };
        (case, GroundTruth { id, zp, zk })
    }
}

/// Generate a corpus, its memory repository and the planted assignments.
/// Identical specs produce identical output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut sampler = Sampler {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let users: Vec<User> = (0..spec.num_users).map(|u| sampler.user(u)).collect();
    let mut repo = MemoryRepository::default();
    for u in &users {
        repo.entries.insert(u.key.clone(), u.fragments.clone());
    }
    let mut cases = Vec::with_capacity(spec.num_users * spec.cases_per_user);
    let mut truth = Vec::with_capacity(cases.capacity());
    for round in 0..spec.cases_per_user {
        for (u, user) in users.iter().enumerate() {
            let id = format!("case{:06}", round * spec.num_users + u);
            let (c, t) = sampler.case(id, user);
            cases.push(c);
            truth.push(t);
        }
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        cases,
        repo,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(ds: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_users: 6,
            cases_per_user: 5,
            memory_size: 6,
            knowledge_size: 4,
            vocab_size: 80,
            dependency_strength: ds,
            seed: 3,
        }
    }

    #[test]
    fn zero_cases_per_user_is_rejected() {
        let mut s = spec(0.5);
        s.cases_per_user = 0;
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
    }

    #[test]
    fn small_vocab_is_rejected() {
        let mut s = spec(0.5);
        s.vocab_size = 20;
        let p = s.problems();
        assert_eq!(p.len(), 2, "{p:?}");
    }

    #[test]
    fn planted_rows_are_distributions() {
        for ds in [0.0, 0.3, 1.0] {
            let row = planted_row(ds, 5, 2);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(planted_row(1.0, 3, 1), vec![0.0, 1.0, 0.0]);
        assert!(planted_row(0.0, 4, 0).iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn link_candidate_carries_the_fragment_attribute() {
        let corpus = generate_synthetic(&spec(1.0)).unwrap();
        for (case, t) in corpus.cases.iter().zip(&corpus.truth) {
            let frag = &corpus.repo.entries[&case.user_key][t.zp];
            let attr = frag.iter().find(|w| w.starts_with("attr")).unwrap();
            assert!(case.knowledge[t.zk].contains(attr));
            assert_eq!(t.zk, corpus.spec.link(t.zp));
        }
    }
}
