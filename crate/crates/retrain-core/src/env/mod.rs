//! The RAG environment: prompt construction, conditional log-probabilities,
//! generation, and the binary scoring function.
//!
//! Two interchangeable backends implement [`EnvironmentClient`]: a
//! deterministic mock oracle for tests and desk-scale runs, and a remote
//! completions-style endpoint.

mod mock;
mod remote;

pub use mock::{MockEnv, MockEnvSpec, MockFixtureEntry};
pub use remote::{RemoteEnv, RemoteEnvConfig};

use crate::corpus::{normalize, Document, Query, TaskKind};
use crate::error::{Error, Result};

/// Maximum generated tokens: 100 for free-form tasks, 20 for closed-set.
pub fn max_gen_tokens(task_kind: TaskKind) -> usize {
    match task_kind {
        TaskKind::OpenQa => 100,
        TaskKind::FactCheck | TaskKind::MultiChoice => 20,
    }
}

/// A rendered prompt plus the identifiers it was built from.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub text: String,
    pub task_kind: TaskKind,
    pub query_id: String,
    pub doc_ids: Vec<String>,
}

/// One environment interaction: the generation, its binary score, and the
/// conditional log-probability of the gold answer.
#[derive(Debug, Clone)]
pub struct EnvironmentOutcome {
    pub generation: String,
    pub score: u8,
    pub logprob_of_gold: f64,
}

/// Abstract environment backend. Implementations are safe for concurrent
/// calls and count every outbound call for cache-completeness accounting.
pub trait EnvironmentClient: Send + Sync {
    /// Natural-log probability of generating `continuation` after the prompt,
    /// summed over its tokens; always <= 0.
    fn cond_logprob(&self, prompt: &Prompt, continuation: &str) -> Result<f64>;

    /// Greedy completion truncated at `max_tokens`.
    fn generate(&self, prompt: &Prompt, max_tokens: usize) -> Result<String>;

    /// Probability of each option label as the next token after the prompt.
    fn next_token_option_probs(&self, prompt: &Prompt, options: &[String]) -> Result<Vec<f64>>;

    /// Total calls made so far (monotonic).
    fn call_count(&self) -> u64;
}

/// 1 iff the normalized generation contains any normalized answer as a
/// substring.
pub fn score_generation(generation: &str, answers: &[String]) -> u8 {
    let gen = normalize(generation);
    for answer in answers {
        let answer = normalize(answer);
        if !answer.is_empty() && gen.contains(&answer) {
            return 1;
        }
    }
    0
}

const PREAMBLE: &str =
    "Below is an instruction that describes a task. Write a response that appropriately completes the request.\n\n";

/// Render the task prompt for a query over one retrieved document.
pub fn build_prompt(query: &Query, doc: &Document) -> Result<Prompt> {
    build_prompt_multi(query, &[doc])
}

/// Render the task prompt with `docs` as numbered paragraph blocks in
/// retrieval order.
pub fn build_prompt_multi(query: &Query, docs: &[&Document]) -> Result<Prompt> {
    if docs.is_empty() {
        return Err(Error::Validation(format!("query {}: prompt needs >= 1 document", query.id)));
    }
    let mut paragraphs = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            paragraphs.push('\n');
        }
        paragraphs.push_str(&format!("[{}] {}\n{}", i + 1, doc.title, doc.text));
    }
    let text = match query.task_kind {
        TaskKind::OpenQa => format!(
            "### Paragraph:\n{paragraphs}\n\n### Instruction: \n{}\n\n### Response: ",
            query.text
        ),
        TaskKind::FactCheck => format!(
            "{PREAMBLE}### Paragraph:\n{paragraphs}\n\n### Instruction:\n\
             Is the following statement correct or not? Say true if it's correct; otherwise say false.\n\n\
             ### Input:\n{}\n\n### Response: ",
            query.text
        ),
        TaskKind::MultiChoice => {
            let options = query
                .options
                .as_ref()
                .filter(|o| !o.is_empty())
                .ok_or_else(|| {
                    Error::Validation(format!("multi-choice query {} has no options", query.id))
                })?;
            let labels: Vec<&str> = options.iter().map(|(l, _)| l.as_str()).collect();
            let mut input = query.text.clone();
            for (label, text) in options {
                input.push_str(&format!("\n{label}: {text}"));
            }
            format!(
                "{PREAMBLE}### Paragraph:\n{paragraphs}\n\n### Instruction:\n\
                 Given {} answer candidates, {}, choose the best answer choice.\n\n\
                 ### Input:\n{input}\n\n### Response: ",
                count_word(labels.len()),
                label_list(&labels)
            )
        }
    };
    Ok(Prompt {
        text,
        task_kind: query.task_kind,
        query_id: query.id.clone(),
        doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
    })
}

fn label_list(labels: &[&str]) -> String {
    match labels.len() {
        0 => String::new(),
        1 => labels[0].to_string(),
        n => format!("{} and {}", labels[..n - 1].join(", "), labels[n - 1]),
    }
}

fn count_word(n: usize) -> String {
    const WORDS: [&str; 13] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve",
    ];
    WORDS.get(n).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc() -> Document {
        Document {
            id: "d1".into(),
            title: "For King & Country (band)".into(),
            text: "Their father was a music promoter.".into(),
            token_ids: Vec::new(),
        }
    }

    fn open_query() -> Query {
        Query {
            id: "q1".into(),
            text: "Who is the sister of for king and country?".into(),
            answers: vec!["Rebecca St. James".into()],
            task_kind: TaskKind::OpenQa,
            options: None,
            token_ids: Vec::new(),
        }
    }

    #[test]
    fn open_qa_prompt_format() {
        let p = build_prompt(&open_query(), &doc()).unwrap();
        assert!(p.text.starts_with("### Paragraph:\n[1] "));
        assert!(p.text.ends_with("### Response: "));
        assert!(p.text.contains("### Instruction: \nWho is the sister"));
    }

    #[test]
    fn fact_check_prompt_format() {
        let q = Query {
            task_kind: TaskKind::FactCheck,
            answers: vec!["true".into()],
            ..open_query()
        };
        let p = build_prompt(&q, &doc()).unwrap();
        assert!(p.text.starts_with("Below is an instruction"));
        assert!(p.text.contains("Say true if it's correct; otherwise say false."));
        assert!(p.text.contains("### Input:\n"));
        assert!(p.text.ends_with("### Response: "));
    }

    #[test]
    fn multi_choice_prompt_format() {
        let q = Query {
            task_kind: TaskKind::MultiChoice,
            answers: vec!["B".into()],
            options: Some(vec![
                ("A".into(), "a leg muscle relaxing after exercise".into()),
                ("B".into(), "a bacterial population in the bloodstream".into()),
                ("C".into(), "several viral particles on the skin".into()),
                ("D".into(), "carbohydrates being digested in the stomach".into()),
            ]),
            ..open_query()
        };
        let p = build_prompt(&q, &doc()).unwrap();
        assert!(p.text.contains("Given four answer candidates, A, B, C and D, choose the best answer choice."));
        assert!(p.text.contains("\nB: a bacterial population in the bloodstream"));

        let missing = Query { options: None, ..q };
        assert!(build_prompt(&missing, &doc()).is_err());
    }

    #[test]
    fn multi_doc_prompt_numbers_paragraphs_in_order() {
        let d2 = Document { id: "d2".into(), title: "Second".into(), text: "More text.".into(), token_ids: vec![] };
        let p = build_prompt_multi(&open_query(), &[&doc(), &d2]).unwrap();
        assert!(p.text.contains("[1] For King & Country (band)\n"));
        assert!(p.text.contains("\n[2] Second\nMore text."));
        assert_eq!(p.doc_ids, vec!["d1".to_string(), "d2".to_string()]);
    }

    #[test]
    fn score_generation_is_normalized_containment() {
        let answers = vec!["Rebecca St. James".to_string()];
        assert_eq!(score_generation("Rebecca St. James\n### Explanation: she is...", &answers), 1);
        assert_eq!(score_generation("Courtney Helm\n### Explanation:", &answers), 0);
        assert_eq!(score_generation("x", &["X".to_string()]), 1);
        assert_eq!(score_generation("exact", &["exact".to_string()]), 1);
    }
}
