//! JSON-over-HTTP adapters.
//!
//! * `openai-chat`: chat-completions style generation.
//! * `nli-http`: `{"premise", "hypothesis"}` in, a label or per-label scores out.
//! * `openai-embeddings`: embeddings endpoint returning `data[0].embedding`.

use std::time::Duration;

use async_trait::async_trait;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{Adapter, BackendDescriptor, BackendRequest, Transport, TransportError};
use crate::error::{Error, Result};
use crate::model::NliLabel;

#[derive(Debug)]
pub struct HttpTransport {
    descriptor: BackendDescriptor,
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new(descriptor: &BackendDescriptor) -> Result<Self> {
        if descriptor.adapter == Adapter::Mock {
            return Err(Error::Precondition(format!("backend {} uses the mock adapter", descriptor.name)));
        }
        reqwest::Url::parse(&descriptor.endpoint).map_err(|e| {
            Error::from(super::BackendError::Config(format!(
                "backend {} has an invalid endpoint {:?}: {e}",
                descriptor.name, descriptor.endpoint
            )))
        })?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::from(super::BackendError::Config(e.to_string())))?;
        Ok(HttpTransport { descriptor: descriptor.clone(), client })
    }

    fn body(&self, request: &BackendRequest) -> std::result::Result<Value, TransportError> {
        let params = &self.descriptor.params;
        match (self.descriptor.adapter, request) {
            (Adapter::OpenaiChat, BackendRequest::Generate { prompt }) => Ok(json!({
                "model": params.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": params.temperature,
                "max_tokens": params.max_tokens,
            })),
            (Adapter::NliHttp, BackendRequest::Classify { premise, hypothesis }) => {
                Ok(json!({"premise": premise, "hypothesis": hypothesis}))
            }
            (Adapter::OpenaiEmbeddings, BackendRequest::Embed { text }) => {
                Ok(json!({"model": params.model, "input": text}))
            }
            (adapter, request) => Err(TransportError::Fatal(format!("adapter {adapter:?} cannot serve {request:?}"))),
        }
    }

    fn extract(&self, response: Value) -> std::result::Result<Value, TransportError> {
        let bad = |what: &str| TransportError::Fatal(format!("unexpected response shape: {what}"));
        match self.descriptor.adapter {
            Adapter::OpenaiChat => response
                .pointer("/choices/0/message/content")
                .or_else(|| response.pointer("/choices/0/text"))
                .and_then(Value::as_str)
                .map(|s| Value::String(s.to_string()))
                .ok_or_else(|| bad("missing choices[0].message.content")),
            Adapter::NliHttp => parse_classifier_response(&response)
                .map(|label| Value::String(label.as_str().to_string()))
                .ok_or_else(|| bad("no label or scores")),
            Adapter::OpenaiEmbeddings => response
                .pointer("/data/0/embedding")
                .or_else(|| response.get("embedding"))
                .filter(|v| v.is_array())
                .cloned()
                .ok_or_else(|| bad("missing data[0].embedding")),
            Adapter::Mock => Err(bad("mock adapter")),
        }
    }
}

/// Accepts `{"label": "..."}`, `{"scores": {"entailment": p, ...}}`, or a list
/// of `{"label", "score"}` objects.
fn parse_classifier_response(response: &Value) -> Option<NliLabel> {
    if let Some(label) = response.get("label").and_then(Value::as_str) {
        return label.parse().ok();
    }
    let mut scores = Vec::new();
    if let Some(map) = response.get("scores").and_then(Value::as_object) {
        for (k, v) in map {
            scores.push((k.parse::<NliLabel>().ok()?, v.as_f64()?));
        }
    } else if let Some(items) = response.as_array().or_else(|| response.get("scores").and_then(Value::as_array)) {
        for item in items {
            let label = item.get("label")?.as_str()?.parse::<NliLabel>().ok()?;
            scores.push((label, item.get("score")?.as_f64()?));
        }
    }
    decide_label(&scores)
}

/// Argmax over label scores; ties resolve toward neutral.
pub fn decide_label(scores: &[(NliLabel, f64)]) -> Option<NliLabel> {
    let best = scores.iter().map(|(_, s)| *s).filter(|s| s.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return None;
    }
    let winners: Vec<NliLabel> = scores.iter().filter(|(_, s)| *s == best).map(|(l, _)| *l).collect();
    if winners.len() > 1 && winners.contains(&NliLabel::Neutral) {
        Some(NliLabel::Neutral)
    } else {
        winners.into_iter().min()
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn send(&self, request: &BackendRequest) -> std::result::Result<Value, TransportError> {
        let body = self.body(request)?;
        let mut builder = self.client.post(&self.descriptor.endpoint).json(&body);
        if let Some(var) = &self.descriptor.auth_env_var {
            let token = std::env::var(var).map_err(|_| TransportError::MissingCredential(var.clone()))?;
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().await.map_err(|e| TransportError::Retryable(e.to_string()))?;
        let status = response.status();
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(TransportError::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            return Err(TransportError::Fatal(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        let value: Value = response.json().await.map_err(|e| TransportError::Fatal(format!("invalid JSON: {e}")))?;
        self.extract(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_toward_neutral() {
        use NliLabel::*;
        assert_eq!(decide_label(&[(Entailment, 0.4), (Neutral, 0.4), (Contradiction, 0.2)]), Some(Neutral));
        assert_eq!(decide_label(&[(Entailment, 0.7), (Neutral, 0.2), (Contradiction, 0.1)]), Some(Entailment));
        assert_eq!(decide_label(&[]), None);
    }

    #[test]
    fn classifier_response_shapes() {
        assert_eq!(parse_classifier_response(&json!({"label": "entailment"})), Some(NliLabel::Entailment));
        assert_eq!(
            parse_classifier_response(&json!({"scores": {"entailment": 0.1, "neutral": 0.2, "contradiction": 0.7}})),
            Some(NliLabel::Contradiction)
        );
        assert_eq!(
            parse_classifier_response(&json!([{"label": "ENTAILMENT", "score": 0.9}, {"label": "NEUTRAL", "score": 0.1}])),
            Some(NliLabel::Entailment)
        );
        assert_eq!(parse_classifier_response(&json!({"foo": 1})), None);
    }

    #[test]
    fn rejects_bad_endpoints() {
        let mut d = BackendDescriptor::mock("x");
        assert!(HttpTransport::new(&d).is_err());
        d.adapter = Adapter::OpenaiChat;
        d.endpoint = "not a url".into();
        assert!(HttpTransport::new(&d).is_err());
    }
}
