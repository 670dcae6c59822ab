//! Remote LLM backend speaking a completions-style HTTP API.
//!
//! Scoring sends one POST per (prompt, continuation) pair with
//! `{"model", "prompt": x + y, "max_tokens": 0, "echo": true, "logprobs": true}`
//! and sums the returned `token_logprobs` over the continuation's token
//! positions (located via `text_offset`). Generation sends
//! `{"model", "prompt": x, "max_tokens": n, "temperature": 0}`. Retryable
//! transport failures back off exponentially; in-flight requests are bounded
//! by `max_in_flight`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{EnvironmentClient, Prompt};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteEnvConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_timeout_s() -> u64 {
    60
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    echo: bool,
    logprobs: bool,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    logprobs: Option<LogProbs>,
}

#[derive(Deserialize)]
struct LogProbs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

/// Tiny counting semaphore bounding concurrent requests.
struct Slots {
    state: Mutex<usize>,
    cond: Condvar,
}

impl Slots {
    fn new(n: usize) -> Self {
        Self { state: Mutex::new(n.max(1)), cond: Condvar::new() }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.state.lock().unwrap();
        while *free == 0 {
            free = self.cond.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard { slots: self }
    }
}

struct SlotGuard<'a> {
    slots: &'a Slots,
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.slots.state.lock().unwrap() += 1;
        self.slots.cond.notify_one();
    }
}

pub struct RemoteEnv {
    config: RemoteEnvConfig,
    client: reqwest::blocking::Client,
    slots: Slots,
    calls: AtomicU64,
}

impl RemoteEnv {
    pub fn new(config: RemoteEnvConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let slots = Slots::new(config.max_in_flight);
        Ok(Self { config, client, slots, calls: AtomicU64::new(0) })
    }

    fn post(&self, request: &CompletionRequest<'_>) -> Result<CompletionResponse> {
        let _slot = self.slots.acquire();
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(&self.config.endpoint).json(request);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            let outcome = req.send();
            let retryable = match &outcome {
                Ok(resp) if resp.status().is_success() => {
                    let resp = outcome.unwrap();
                    return resp.json().map_err(|e| Error::Transport(e.to_string()));
                }
                Ok(resp) => resp.status().is_server_error(),
                Err(e) => e.is_timeout() || e.is_connect() || e.is_request(),
            };
            attempt += 1;
            if !retryable || attempt > self.config.max_retries {
                let msg = match outcome {
                    Ok(resp) => format!("HTTP {}", resp.status()),
                    Err(e) => e.to_string(),
                };
                return Err(Error::Transport(msg));
            }
            std::thread::sleep(backoff);
            backoff *= 2;
        }
    }

    /// Echoed logprobs for `prompt + continuation`, keeping only the token
    /// positions that fall inside the continuation.
    fn continuation_logprobs(&self, prompt: &str, continuation: &str) -> Result<Vec<f64>> {
        let full = format!("{prompt}{continuation}");
        let request = CompletionRequest {
            model: &self.config.model,
            prompt: &full,
            max_tokens: 0,
            temperature: 0.0,
            echo: true,
            logprobs: true,
        };
        let response = self.post(&request)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Scoring("response has no choices".into()))?;
        let lp = choice.logprobs.ok_or_else(|| Error::Scoring("response has no logprobs".into()))?;
        if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
            return Err(Error::Scoring("misaligned logprob arrays".into()));
        }
        let cut = prompt.len();
        let mut out = Vec::new();
        for ((offset, token), logprob) in
            lp.text_offset.iter().zip(&lp.tokens).zip(&lp.token_logprobs)
        {
            if *offset >= cut {
                match logprob {
                    Some(v) => out.push(*v),
                    None => {
                        return Err(Error::Scoring(format!(
                            "no logprob for continuation token {token:?}"
                        )))
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Scoring(
                "continuation tokens did not align with the echoed prompt".into(),
            ));
        }
        Ok(out)
    }
}

impl EnvironmentClient for RemoteEnv {
    fn cond_logprob(&self, prompt: &Prompt, continuation: &str) -> Result<f64> {
        if continuation.is_empty() {
            return Err(Error::Scoring("empty continuation".into()));
        }
        Ok(self.continuation_logprobs(&prompt.text, continuation)?.iter().sum())
    }

    fn generate(&self, prompt: &Prompt, max_tokens: usize) -> Result<String> {
        assert!(max_tokens >= 1, "max_tokens must be >= 1");
        let request = CompletionRequest {
            model: &self.config.model,
            prompt: &prompt.text,
            max_tokens,
            temperature: 0.0,
            echo: false,
            logprobs: false,
        };
        let response = self.post(&request)?;
        response
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| Error::Scoring("response has no choices".into()))
    }

    fn next_token_option_probs(&self, prompt: &Prompt, options: &[String]) -> Result<Vec<f64>> {
        if options.is_empty() {
            return Err(Error::Scoring("no options provided".into()));
        }
        let mut probs = Vec::with_capacity(options.len());
        for label in options {
            let lps = self.continuation_logprobs(&prompt.text, label)?;
            if lps.len() != 1 {
                return Err(Error::Scoring(format!(
                    "option label {label:?} spans {} tokens, expected 1",
                    lps.len()
                )));
            }
            probs.push(lps[0].exp());
        }
        Ok(probs)
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TaskKind;
    use std::io::{Read as _, Write as _};
    use std::net::TcpListener;

    /// Minimal stub server: answers every POST with the JSON produced by
    /// `respond(request_body)`.
    fn spawn_stub<F>(respond: F) -> String
    where
        F: Fn(&str) -> String + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut buf = vec![0u8; 65536];
                let mut read = 0;
                let body_start = loop {
                    let n = stream.read(&mut buf[read..]).unwrap_or(0);
                    if n == 0 {
                        break None;
                    }
                    read += n;
                    if let Some(pos) = find_header_end(&buf[..read]) {
                        break Some(pos);
                    }
                };
                let Some(body_start) = body_start else { continue };
                let headers = String::from_utf8_lossy(&buf[..body_start]).to_string();
                let content_length: usize = headers
                    .lines()
                    .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
                    .unwrap_or(0);
                while read - body_start < content_length {
                    let n = stream.read(&mut buf[read..]).unwrap_or(0);
                    if n == 0 {
                        break;
                    }
                    read += n;
                }
                let body = String::from_utf8_lossy(&buf[body_start..read]).to_string();
                let json = respond(&body);
                let response = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                    json.len(),
                    json
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    fn find_header_end(buf: &[u8]) -> Option<usize> {
        buf.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
    }

    fn env(endpoint: String) -> RemoteEnv {
        RemoteEnv::new(RemoteEnvConfig {
            endpoint,
            model: "stub".into(),
            api_key: None,
            max_in_flight: 2,
            max_retries: 0,
            initial_backoff_ms: 1,
            timeout_s: 5,
        })
        .unwrap()
    }

    fn prompt() -> Prompt {
        Prompt { text: "### Response: ".into(), task_kind: TaskKind::OpenQa, query_id: "q".into(), doc_ids: vec!["d".into()] }
    }

    #[test]
    fn generation_passes_stub_text_through() {
        let endpoint = spawn_stub(|_| r#"{"choices":[{"text":"fixed text"}]}"#.to_string());
        let env = env(endpoint);
        assert_eq!(env.generate(&prompt(), 10).unwrap(), "fixed text");
        assert_eq!(env.call_count(), 1);
    }

    #[test]
    fn cond_logprob_sums_continuation_tokens_only() {
        // Echo stub: prompt is 14 bytes; two continuation tokens at offsets
        // 14 and 18 carry -1.5 and -0.25; the prompt token carries -9.0.
        let endpoint = spawn_stub(|_| {
            r#"{"choices":[{"text":"","logprobs":{
                "tokens":["prompt","gold"," ans"],
                "token_logprobs":[-9.0,-1.5,-0.25],
                "text_offset":[0,14,18]}}]}"#
                .to_string()
        });
        let env = env(endpoint);
        let lp = env.cond_logprob(&prompt(), "gold ans").unwrap();
        assert!((lp - (-1.75)).abs() < 1e-12);
    }

    #[test]
    fn option_probs_match_arc_style_fixture() {
        // One POST per option; the stub reads the option label from the end
        // of the echoed prompt.
        let endpoint = spawn_stub(|body| {
            let lp = if body.contains("Response: A") {
                (0.121f64).ln()
            } else if body.contains("Response: B") {
                (0.309f64).ln()
            } else if body.contains("Response: C") {
                (0.061f64).ln()
            } else {
                (0.100f64).ln()
            };
            format!(
                r#"{{"choices":[{{"text":"","logprobs":{{"tokens":["x","L"],"token_logprobs":[null,{lp}],"text_offset":[0,14]}}}}]}}"#
            )
        });
        let env = env(endpoint);
        let options: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let probs = env.next_token_option_probs(&prompt(), &options).unwrap();
        assert!((probs[0] - 0.121).abs() < 1e-9);
        assert!((probs[1] - 0.309).abs() < 1e-9);
        assert!((probs[2] - 0.061).abs() < 1e-9);
        assert!((probs[3] - 0.100).abs() < 1e-9);
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        assert_eq!(options[argmax], "B");
    }

    #[test]
    fn multi_token_label_is_a_scoring_error() {
        let endpoint = spawn_stub(|_| {
            r#"{"choices":[{"text":"","logprobs":{
                "tokens":["p","la","bel"],
                "token_logprobs":[null,-1.0,-1.0],
                "text_offset":[0,14,16]}}]}"#
                .to_string()
        });
        let env = env(endpoint);
        let err = env.next_token_option_probs(&prompt(), &["label".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Scoring(_)));
    }
}
