//! Deterministic synthetic corpus, queries, and mock-environment fixture.
//!
//! The corpus is organized into topics. Each topic has a family of short
//! "helpful" documents carrying the topic's content tokens — the only
//! documents whose overlap with `H(q)` clears the generation threshold —
//! and those documents deliberately share no token with the topic's query
//! text. Longer "lure" documents share the query's surface tokens and
//! contain the answer string but do not help generation. A subset of topics
//! is IR-misleading: their answer tokens appear in every document of the
//! corpus, so top-1 IR accuracy on them is 1.0 no matter what is retrieved,
//! while RAG accuracy depends entirely on retrieving the helpful family.

use std::path::Path;

use crate::corpus::{load_corpus, Datastore, Query, TaskKind};
use crate::env::MockFixtureEntry;
use crate::error::Result;

pub const N_TOPICS: usize = 32;
pub const N_MISLEADING: usize = 8;
pub const HELPFUL_PER_TOPIC: usize = 4;
pub const LURES_PER_TOPIC: usize = 2;
pub const N_FILLER: usize = 8;
pub const SURFACE_PER_TOPIC: usize = 6;
pub const CONTENT_PER_TOPIC: usize = 6;
const JUNK_POOL: usize = 150;
const JUNK_PER_LURE: usize = 20;
const JUNK_PER_FILLER: usize = 28;

#[derive(Debug, Clone)]
pub struct RawDocument {
    pub id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub documents: Vec<RawDocument>,
    pub train_queries: Vec<Query>,
    pub test_queries: Vec<Query>,
    pub fixture: Vec<MockFixtureEntry>,
    /// Test queries of the IR-misleading topics.
    pub misleading_test_ids: Vec<String>,
}

fn surface(topic: usize, j: usize) -> String {
    format!("srf{topic:02}w{j}")
}

fn content(topic: usize, j: usize) -> String {
    format!("cnt{topic:02}w{j}")
}

fn answer(topic: usize) -> String {
    format!("answer{topic:02}x")
}

fn junk(j: usize) -> String {
    format!("junk{:03}", j % JUNK_POOL)
}

/// Build the fixed synthetic world: 200 documents, 64 train and 32 test
/// queries, one helpful-token fixture entry per query.
pub fn synthetic_world() -> SyntheticWorld {
    let universal: Vec<String> = (0..N_MISLEADING).map(answer).collect();
    let mut documents = Vec::new();

    for t in 0..N_TOPICS {
        for m in 0..HELPFUL_PER_TOPIC {
            // Every family member carries the full content set; a private
            // filler token keeps the members distinct documents.
            let mut words: Vec<String> = (0..CONTENT_PER_TOPIC).map(|j| content(t, j)).collect();
            words.push(format!("extra{t:02}m{m}"));
            words.push(answer(t));
            words.extend(universal.iter().cloned());
            let id = format!("help{t:02}m{m}");
            documents.push(RawDocument { id: id.clone(), title: id, text: words.join(" ") });
        }
        for m in 0..LURES_PER_TOPIC {
            // Each lure mirrors one training query's surface tokens.
            let picks: [usize; 4] = if m == 0 { [0, 1, 2, 3] } else { [2, 3, 4, 5] };
            let mut words: Vec<String> = picks.iter().map(|&j| surface(t, j)).collect();
            words.push(answer(t));
            if m == 0 {
                words.push(content(t, 0));
            }
            words.extend(universal.iter().cloned());
            let start = t * 31 + m * 17;
            words.extend((0..JUNK_PER_LURE).map(|i| junk(start + i)));
            let id = format!("lure{t:02}m{m}");
            documents.push(RawDocument { id: id.clone(), title: id, text: words.join(" ") });
        }
    }
    for f in 0..N_FILLER {
        let mut words: Vec<String> = (0..JUNK_PER_FILLER).map(|i| junk(f * 19 + i)).collect();
        words.extend(universal.iter().cloned());
        let id = format!("fill{f:02}");
        documents.push(RawDocument { id: id.clone(), title: id, text: words.join(" ") });
    }

    let query = |t: usize, suffix: char, picks: &[usize]| Query {
        id: format!("q{t:02}{suffix}"),
        text: {
            let words: Vec<String> = picks.iter().map(|&j| surface(t, j)).collect();
            format!("what is {}", words.join(" "))
        },
        answers: vec![answer(t)],
        task_kind: TaskKind::OpenQa,
        options: None,
        token_ids: Vec::new(),
    };

    let mut train_queries = Vec::new();
    let mut test_queries = Vec::new();
    let mut fixture = Vec::new();
    let mut misleading_test_ids = Vec::new();
    for t in 0..N_TOPICS {
        train_queries.push(query(t, 'a', &[0, 1, 2, 3]));
        train_queries.push(query(t, 'b', &[2, 3, 4, 5]));
        // The test query is an unseen phrasing covering the topic's whole
        // surface set, so success measures the learned token mapping rather
        // than which particular surface token the max-pool latched onto.
        let test = query(t, 'c', &[0, 1, 2, 3, 4, 5]);
        if t < N_MISLEADING {
            misleading_test_ids.push(test.id.clone());
        }
        test_queries.push(test);
        for suffix in ['a', 'b', 'c'] {
            fixture.push(MockFixtureEntry {
                query_id: format!("q{t:02}{suffix}"),
                helpful_tokens: (0..CONTENT_PER_TOPIC).map(|j| content(t, j)).collect(),
            });
        }
    }

    SyntheticWorld { documents, train_queries, test_queries, fixture, misleading_test_ids }
}

impl SyntheticWorld {
    /// Materialize the datastore with a vocabulary covering every token.
    pub fn datastore(&self, train: &mut [Query], test: &mut [Query]) -> Result<Datastore> {
        // Round-trip through the JSONL loaders so file-based and in-memory
        // construction agree exactly.
        let dir = std::env::temp_dir().join(format!("synth-world-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let paths = self.write_files(&dir)?;
        let mut all: Vec<Query> = train.to_vec();
        all.extend_from_slice(test);
        let ds = load_corpus(&paths.corpus, &mut all, 5000)?;
        let (tokenized_train, tokenized_test) = all.split_at(train.len());
        for (q, t) in train.iter_mut().zip(tokenized_train) {
            q.token_ids = t.token_ids.clone();
        }
        for (q, t) in test.iter_mut().zip(tokenized_test) {
            q.token_ids = t.token_ids.clone();
        }
        let _ = std::fs::remove_dir_all(&dir);
        Ok(ds)
    }

    pub fn write_files(&self, dir: &Path) -> Result<SyntheticPaths> {
        use std::io::Write;
        std::fs::create_dir_all(dir)?;
        let corpus = dir.join("corpus.jsonl");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&corpus)?);
            for d in &self.documents {
                let line = serde_json::json!({"id": d.id, "title": d.title, "text": d.text});
                writeln!(f, "{line}")?;
            }
        }
        let train = dir.join("train_queries.jsonl");
        let test = dir.join("test_queries.jsonl");
        for (path, queries) in [(&train, &self.train_queries), (&test, &self.test_queries)] {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            for q in queries {
                let mut line = serde_json::json!({
                    "id": q.id, "text": q.text, "answers": q.answers,
                    "task_kind": "open-qa",
                });
                if let Some(options) = &q.options {
                    line["options"] = serde_json::json!(options);
                }
                writeln!(f, "{line}")?;
            }
        }
        let fixture = dir.join("helpful_tokens.jsonl");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&fixture)?);
            for entry in &self.fixture {
                writeln!(f, "{}", serde_json::to_string(entry)?)?;
            }
        }
        Ok(SyntheticPaths { corpus, train, test, fixture })
    }
}

pub struct SyntheticPaths {
    pub corpus: std::path::PathBuf,
    pub train: std::path::PathBuf,
    pub test: std::path::PathBuf,
    pub fixture: std::path::PathBuf,
}

/// Convenience: the fully tokenized world ready for training.
pub struct LoadedWorld {
    pub datastore: Datastore,
    pub train_queries: Vec<Query>,
    pub test_queries: Vec<Query>,
    pub fixture: Vec<MockFixtureEntry>,
    pub misleading_test_ids: Vec<String>,
}

pub fn load_synthetic() -> Result<LoadedWorld> {
    let world = synthetic_world();
    let mut train = world.train_queries.clone();
    let mut test = world.test_queries.clone();
    let datastore = world.datastore(&mut train, &mut test)?;
    Ok(LoadedWorld {
        datastore,
        train_queries: train,
        test_queries: test,
        fixture: world.fixture,
        misleading_test_ids: world.misleading_test_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::normalize;

    #[test]
    fn world_has_expected_shape() {
        let world = synthetic_world();
        assert_eq!(world.documents.len(), 200);
        assert_eq!(world.train_queries.len(), 64);
        assert_eq!(world.test_queries.len(), 32);
        assert_eq!(world.fixture.len(), 96);
        assert_eq!(world.misleading_test_ids.len(), 8);
    }

    #[test]
    fn misleading_answers_appear_in_every_document() {
        let world = synthetic_world();
        for t in 0..N_MISLEADING {
            let ans = normalize(&answer(t));
            for d in &world.documents {
                assert!(
                    normalize(&d.text).contains(&ans),
                    "doc {} lacks universal answer {ans}",
                    d.id
                );
            }
        }
    }

    #[test]
    fn helpful_family_is_lexically_disjoint_from_its_queries() {
        let world = synthetic_world();
        for t in 0..N_TOPICS {
            let queries: Vec<&Query> = world
                .train_queries
                .iter()
                .chain(&world.test_queries)
                .filter(|q| q.id.starts_with(&format!("q{t:02}")))
                .collect();
            assert_eq!(queries.len(), 3);
            for m in 0..HELPFUL_PER_TOPIC {
                let doc = world
                    .documents
                    .iter()
                    .find(|d| d.id == format!("help{t:02}m{m}"))
                    .unwrap();
                let doc_words: std::collections::HashSet<&str> =
                    doc.text.split_whitespace().collect();
                for q in &queries {
                    for w in q.text.split_whitespace() {
                        if w == "what" || w == "is" {
                            continue;
                        }
                        assert!(!doc_words.contains(w), "{} shares {w} with {}", doc.id, q.id);
                    }
                }
            }
        }
    }

    #[test]
    fn loads_into_a_datastore_with_full_vocabulary() {
        let world = load_synthetic().unwrap();
        assert_eq!(world.datastore.len(), 200);
        // Every document and query tokenizes without unknowns.
        for d in &world.datastore.documents {
            assert!(d.token_ids.iter().all(|&t| t != 0), "{} has unknown tokens", d.id);
            assert!(!d.token_ids.is_empty());
        }
        for q in world.train_queries.iter().chain(&world.test_queries) {
            assert!(q.token_ids.iter().all(|&t| t != 0));
            assert!(!q.token_ids.is_empty());
        }
    }
}
