//! Chat-completions wire format and the HTTP transport behind it.

use std::time::Duration;

use serde_json::{json, Value};

use super::request::{ChatRequest, ImageSource, Part};

/// Raw HTTP outcome: a status and the response body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Connection-level failure (DNS, refused, reset, timeout).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError(pub String);

/// Something that can POST a JSON body. Swappable so tests can observe or
/// forbid network activity.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value) -> Result<HttpReply, TransportError>;
}

/// Blocking transport over `ureq`. Non-2xx statuses are returned as replies,
/// not errors, so the gateway can tell upstream errors from transport ones.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        Self { agent: config.into() }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value) -> Result<HttpReply, TransportError> {
        let mut req = self.agent.post(url);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send_json(body).map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

/// Builds the JSON body for `POST {base_url}/chat/completions`.
///
/// A message holding a single text part is sent with string content; anything
/// else uses the typed parts array.
pub fn wire_body(req: &ChatRequest) -> Value {
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|m| {
            let content = match m.parts.as_slice() {
                [Part::Text { text }] => Value::String(text.clone()),
                parts => Value::Array(parts.iter().map(wire_part).collect()),
            };
            json!({ "role": m.role.as_str(), "content": content })
        })
        .collect();
    json!({
        "model": req.model,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    })
}

fn wire_part(part: &Part) -> Value {
    match part {
        Part::Text { text } => json!({ "type": "text", "text": text }),
        Part::Image { media_type, source } => {
            let url = match source {
                ImageSource::Base64(payload) => format!("data:{media_type};base64,{payload}"),
                ImageSource::Url(url) => url.clone(),
            };
            json!({ "type": "image_url", "image_url": { "url": url } })
        }
    }
}

pub fn completions_url(base_url: &str) -> String {
    format!("{}/chat/completions", base_url.trim_end_matches('/'))
}

/// `choices[0].message.content`, with null content read as empty.
pub fn extract_content(body: &str) -> Result<String, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| "missing choices[0].message.content".to_string())?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Null => Ok(String::new()),
        other => Err(format!("content is not a string: {other}")),
    }
}

/// Message of a well-formed error body (`{"error": ...}`), if there is one.
pub fn error_message(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    let err = v.get("error")?;
    Some(match err {
        Value::String(s) => s.clone(),
        Value::Object(o) => o
            .get("message")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| err.to_string()),
        other => other.to_string(),
    })
}
