//! Tokenization, vocabulary management, and datastore/query loading.
//!
//! The tokenizer is a deliberately simple lowercase + punctuation-strip +
//! whitespace splitter; the vocabulary is built from the loaded corpus with
//! id 0 reserved for unknown tokens. Id 0 never participates in indexing or
//! scoring downstream.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseVector;

pub const UNK_ID: u32 = 0;

/// Bijective token-string <-> dense-id mapping with id 0 reserved.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
    #[serde(skip)]
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "open-qa")]
    OpenQa,
    #[serde(rename = "fact-check")]
    FactCheck,
    #[serde(rename = "multi-choice")]
    MultiChoice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub answers: Vec<String>,
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<(String, String)>>,
    #[serde(skip)]
    pub token_ids: Vec<u32>,
}

impl Query {
    fn validate(&self) -> Result<()> {
        if self.answers.is_empty() {
            return Err(Error::Validation(format!("query {} has no answers", self.id)));
        }
        if self.task_kind == TaskKind::MultiChoice {
            let options = self
                .options
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("multi-choice query {} has no options", self.id)))?;
            if options.len() < 2 {
                return Err(Error::Validation(format!(
                    "multi-choice query {} needs >= 2 options",
                    self.id
                )));
            }
            let gold = &self.answers[0];
            if !options.iter().any(|(label, _)| label == gold) {
                return Err(Error::Validation(format!(
                    "multi-choice query {}: gold answer {gold:?} is not an option label",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Option labels used for closed-set classification. Fact-checking has
    /// the implicit true/false pair.
    pub fn option_labels(&self) -> Vec<String> {
        match self.task_kind {
            TaskKind::MultiChoice => self
                .options
                .as_ref()
                .map(|opts| opts.iter().map(|(l, _)| l.clone()).collect())
                .unwrap_or_default(),
            TaskKind::FactCheck => vec!["true".to_string(), "false".to_string()],
            TaskKind::OpenQa => Vec::new(),
        }
    }

    /// Gold label for closed-set tasks (first answer, normalized to the
    /// option-label casing where possible).
    pub fn gold_label(&self) -> String {
        let raw = self.answers[0].trim();
        for label in self.option_labels() {
            if label.eq_ignore_ascii_case(raw) {
                return label;
            }
        }
        raw.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct Datastore {
    pub documents: Vec<Document>,
    pub vocabulary: Vocabulary,
    ordinal_by_id: HashMap<String, usize>,
}

impl Datastore {
    pub fn new(documents: Vec<Document>, vocabulary: Vocabulary) -> Result<Self> {
        let mut ordinal_by_id = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if ordinal_by_id.insert(doc.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate document id {:?}", doc.id)));
            }
        }
        Ok(Self { documents, vocabulary, ordinal_by_id })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.ordinal_by_id.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn ordinal(&self, doc_id: &str) -> Option<usize> {
        self.ordinal_by_id.get(doc_id).copied()
    }
}

/// Lowercase, strip punctuation, split on whitespace, map through the
/// vocabulary. Unknown tokens map to id 0; empty text gives an empty list.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    split_words(text).map(|w| vocab.id(&w)).collect()
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Normalize for containment checks: lowercase, punctuation stripped,
/// whitespace collapsed to single spaces.
pub fn normalize(text: &str) -> String {
    split_words(text).collect::<Vec<_>>().join(" ")
}

/// Binary presence vector over the vocabulary. Duplicates collapse to 1.0
/// and the unknown id is excluded.
pub fn bag_of_tokens(token_ids: &[u32], dim: usize) -> Result<SparseVector> {
    let mut seen: Vec<u32> = Vec::with_capacity(token_ids.len());
    for &id in token_ids {
        if id as usize >= dim {
            return Err(Error::TokenOutOfRange { id, dim });
        }
        if id != UNK_ID {
            seen.push(id);
        }
    }
    seen.sort_unstable();
    seen.dedup();
    let values = vec![1.0; seen.len()];
    SparseVector::new(seen, values, dim)
}

/// Build a vocabulary from documents and queries: the `max_size - 1` most
/// frequent tokens get ids 1.., ties broken lexicographically; id 0 is
/// reserved for unknown tokens.
pub fn build_vocabulary<'a, I>(texts: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_size < 2 {
        return Err(Error::Config(format!("vocabulary max_size must be >= 2, got {max_size}")));
    }
    let mut freq: HashMap<String, u64> = HashMap::new();
    for text in texts {
        for w in split_words(text) {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut pairs: Vec<(String, u64)> = freq.into_iter().collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut id_to_token = vec!["<unk>".to_string()];
    let mut token_to_id = HashMap::new();
    for (word, _) in pairs.into_iter().take(max_size - 1) {
        token_to_id.insert(word.clone(), id_to_token.len() as u32);
        id_to_token.push(word);
    }
    Ok(Vocabulary { token_to_id, id_to_token })
}

pub fn corpus_texts<'a>(documents: &'a [Document], queries: &'a [Query]) -> Vec<&'a str> {
    documents
        .iter()
        .flat_map(|d| [d.title.as_str(), d.text.as_str()])
        .chain(queries.iter().map(|q| q.text.as_str()))
        .collect()
}

#[derive(Deserialize)]
struct DocumentLine {
    id: String,
    title: String,
    text: String,
}

/// Load a corpus JSONL file (`{"id", "title", "text"}` per line), build the
/// vocabulary together with `queries`, and tokenize everything.
pub fn load_corpus(path: &Path, queries: &mut [Query], vocab_max_size: usize) -> Result<Datastore> {
    let raw = read_jsonl::<DocumentLine>(path)?;
    let mut documents: Vec<Document> = raw
        .into_iter()
        .map(|l| Document { id: l.id, title: l.title, text: l.text, token_ids: Vec::new() })
        .collect();
    let texts = corpus_texts(&documents, queries);
    let vocabulary = build_vocabulary(texts.into_iter(), vocab_max_size)?;
    for doc in &mut documents {
        doc.token_ids = tokenize(&doc.text, &vocabulary);
    }
    for query in queries.iter_mut() {
        query.token_ids = tokenize(&query.text, &vocabulary);
    }
    Datastore::new(documents, vocabulary)
}

/// Load queries from JSONL; tokenization happens in [`load_corpus`] once the
/// vocabulary exists.
pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let queries = read_jsonl::<Query>(path)?;
    let mut seen = HashMap::new();
    for (i, q) in queries.iter().enumerate() {
        if let Some(prev) = seen.insert(q.id.clone(), i) {
            return Err(Error::Validation(format!(
                "duplicate query id {:?} (lines {} and {})",
                q.id,
                prev + 1,
                i + 1
            )));
        }
        q.validate()?;
    }
    Ok(queries)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Parse { path: path.display().to_string(), line: 0, msg: e.to_string() })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn vocab(words: &[&str]) -> Vocabulary {
        let mut token_to_id = HashMap::new();
        let mut id_to_token = vec!["<unk>".to_string()];
        for w in words {
            token_to_id.insert(w.to_string(), id_to_token.len() as u32);
            id_to_token.push(w.to_string());
        }
        Vocabulary { token_to_id, id_to_token }
    }

    #[test]
    fn tokenize_lowercases_and_strips_punctuation() {
        let v = vocab(&["the", "cat"]);
        assert_eq!(tokenize("The Cat cat!", &v), vec![1, 2, 2]);
        assert_eq!(tokenize("", &v), Vec::<u32>::new());
        assert_eq!(tokenize("zyzzyva", &v), vec![0]);
    }

    #[test]
    fn bag_of_tokens_is_binary_presence() {
        let bag = bag_of_tokens(&[1, 2, 2], 8).unwrap();
        assert_eq!(bag.indices(), &[1, 2]);
        assert_eq!(bag.values(), &[1.0, 1.0]);
        assert!(bag_of_tokens(&[], 8).unwrap().is_empty());
        let bag = bag_of_tokens(&[0, 3], 8).unwrap();
        assert_eq!(bag.indices(), &[3]);
        assert!(matches!(bag_of_tokens(&[9], 8), Err(Error::TokenOutOfRange { id: 9, dim: 8 })));
    }

    #[test]
    fn vocabulary_orders_by_frequency_then_lexicographic() {
        let v = build_vocabulary(["a a b"], 3).unwrap();
        assert_eq!(v.id("a"), 1);
        assert_eq!(v.id("b"), 2);

        let v = build_vocabulary(["a b"], 3).unwrap();
        assert_eq!(v.id("a"), 1);
        assert_eq!(v.id("b"), 2);

        let v = build_vocabulary(["a b"], 2).unwrap();
        assert_eq!(v.id("a"), 1);
        assert_eq!(v.id("b"), UNK_ID);
        assert!(build_vocabulary(["a"], 1).is_err());
    }

    #[test]
    fn load_corpus_preserves_order_and_reports_bad_lines() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, r#"{{"id":"d1","title":"T1","text":"alpha beta"}}"#).unwrap();
        writeln!(file, r#"{{"id":"d2","title":"T2","text":"gamma"}}"#).unwrap();
        let ds = load_corpus(file.path(), &mut [], 100).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.documents[0].id, "d1");
        assert_eq!(ds.ordinal("d2"), Some(1));

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, r#"{{"id":"d1","title":"T1"}}"#).unwrap();
        let err = load_corpus(bad.path(), &mut [], 100).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":1"), "error should carry the line number: {msg}");
        assert!(msg.contains("text"), "error should name the missing field: {msg}");
    }

    #[test]
    fn load_corpus_rejects_duplicate_ids() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, r#"{{"id":"d1","title":"a","text":"x"}}"#).unwrap();
        writeln!(file, r#"{{"id":"d1","title":"b","text":"y"}}"#).unwrap();
        assert!(load_corpus(file.path(), &mut [], 100).is_err());
    }

    #[test]
    fn empty_corpus_file_loads_but_vocab_build_rejects() {
        let file = tempfile::NamedTempFile::new().unwrap();
        let err = load_corpus(file.path(), &mut [], 100).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn query_validation() {
        let q = Query {
            id: "q1".into(),
            text: "pick one".into(),
            answers: vec!["B".into()],
            task_kind: TaskKind::MultiChoice,
            options: Some(vec![("A".into(), "first".into()), ("B".into(), "second".into())]),
            token_ids: Vec::new(),
        };
        q.validate().unwrap();
        assert_eq!(q.gold_label(), "B");

        let bad = Query { options: None, ..q.clone() };
        assert!(bad.validate().is_err());

        let fc = Query {
            task_kind: TaskKind::FactCheck,
            answers: vec!["True".into()],
            options: None,
            ..q
        };
        assert_eq!(fc.option_labels(), vec!["true", "false"]);
        assert_eq!(fc.gold_label(), "true");
    }

    #[test]
    fn normalize_collapses_whitespace_and_case() {
        assert_eq!(normalize("Rebecca St. James\n### Explanation:"), "rebecca st james explanation");
    }
}
