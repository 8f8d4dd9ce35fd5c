//! Blocking JSON-over-HTTP client for chat-completion and embedding
//! endpoints, with bounded retries.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Environment variable holding the bearer token for chat endpoints.
pub const API_KEY_ENV: &str = "COOKANYTHING_LLM_KEY";

pub const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    /// A plain string or an array of content parts.
    pub content: Value,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: Value::String(text.into()),
        }
    }

    pub fn user(content: impl Into<Value>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

/// Where and how to reach an HTTP endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Endpoint {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Extra attempts after the first failure.
    pub max_retries: u32,
    pub timeout: Duration,
    pub retry_delay: Duration,
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: DEFAULT_MODEL.into(),
            api_key: None,
            max_retries: 2,
            timeout: Duration::from_secs(60),
            retry_delay: Duration::from_millis(200),
        }
    }

    /// Like [`Endpoint::new`], with the bearer token read from
    /// [`API_KEY_ENV`] when set.
    pub fn from_env(url: impl Into<String>) -> Self {
        Self {
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            ..Self::new(url)
        }
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    /// POSTs `body` and decodes the JSON reply. Transport failures and 5xx
    /// or 429 replies are retried; other statuses fail at once.
    pub fn post_json(&self, body: &impl Serialize) -> Result<Value> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.retry_delay);
            }
            let mut req = agent.post(&self.url).header("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = match req.send_json(body) {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let text = match resp.body_mut().read_to_string() {
                Ok(t) => t,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            if status == 429 || status >= 500 {
                last = format!("HTTP {status}: {}", truncate(&text));
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(Error::Transport {
                    retries: attempt,
                    message: format!("HTTP {status}: {}", truncate(&text)),
                });
            }
            return serde_json::from_str(&text).map_err(|e| Error::Schema(format!("response is not JSON: {e}")));
        }
        Err(Error::Transport {
            retries: self.max_retries,
            message: last,
        })
    }

    /// Sends a chat request and returns the first choice's text.
    pub fn chat(&self, messages: Vec<ChatMessage>) -> Result<String> {
        let request = ChatRequest {
            model: self.model.clone(),
            messages,
        };
        first_choice_text(&self.post_json(&request)?)
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion reply.
pub fn first_choice_text(reply: &Value) -> Result<String> {
    let content = reply
        .pointer("/choices/0/message/content")
        .ok_or_else(|| Error::Schema("reply has no choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(Error::Schema("choices[0].message.content is not text".into())),
    }
}

/// Extracts the first JSON object from model output, tolerating prose or
/// code fences around it.
pub fn extract_json_object(text: &str) -> Result<Value> {
    let start = text
        .find('{')
        .ok_or_else(|| Error::Schema("no JSON object in reply".into()))?;
    let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
    match stream.next() {
        Some(Ok(v @ Value::Object(_))) => Ok(v),
        Some(Ok(_)) => Err(Error::Schema("reply JSON is not an object".into())),
        Some(Err(e)) => Err(Error::Schema(format!("malformed JSON in reply: {e}"))),
        None => Err(Error::Schema("no JSON object in reply".into())),
    }
}


#[cfg(test)]
mod tests {
    use super::test_server::{chat_reply, serve};
    use super::*;

    fn fast(url: String) -> Endpoint {
        Endpoint {
            retry_delay: Duration::from_millis(1),
            timeout: Duration::from_secs(5),
            ..Endpoint::new(url)
        }
    }

    #[test]
    fn chat_sends_model_messages_and_bearer() {
        let (url, rx) = serve(vec![(200, chat_reply("hello"))]);
        let ep = Endpoint {
            api_key: Some("secret".into()),
            ..fast(url)
        };
        let out = ep
            .chat(vec![ChatMessage::system("sys"), ChatMessage::user("hi")])
            .unwrap();
        assert_eq!(out, "hello");
        let req = rx.recv().unwrap();
        assert!(req
            .headers
            .iter()
            .any(|h| h == "authorization: Bearer secret" || h == "Authorization: Bearer secret"));
        let body: Value = serde_json::from_str(&req.body).unwrap();
        assert_eq!(body["model"], DEFAULT_MODEL);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hi");
    }

    #[test]
    fn server_errors_are_retried() {
        let (url, _rx) = serve(vec![(503, "{}".into()), (200, chat_reply("ok"))]);
        assert_eq!(fast(url).chat(vec![ChatMessage::user("x")]).unwrap(), "ok");
    }

    #[test]
    fn exhausted_retries_report_count() {
        let (url, _rx) = serve(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
        match fast(url).chat(vec![ChatMessage::user("x")]) {
            Err(Error::Transport { retries: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        drop(listener);
        let ep = Endpoint {
            max_retries: 1,
            ..fast(url)
        };
        assert!(matches!(ep.chat(vec![]), Err(Error::Transport { retries: 1, .. })));
    }

    #[test]
    fn malformed_reply_is_schema_error() {
        let (url, _rx) = serve(vec![(200, "{\"nope\": 1}".into())]);
        assert!(matches!(fast(url).chat(vec![]), Err(Error::Schema(_))));
    }

    #[test]
    fn json_extraction() {
        let v = extract_json_object("sure:\n```json\n{\"a\": [1, 2]}\n```").unwrap();
        assert_eq!(v["a"][1], 2);
        assert!(extract_json_object("no json here").is_err());
        assert!(extract_json_object("{\"a\": ").is_err());
    }
}
