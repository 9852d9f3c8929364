use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    /// Base64 payload of the raw image bytes.
    Base64(String),
    Url(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Image { media_type: String, source: ImageSource },
}

impl Part {
    pub fn text(text: impl Into<String>) -> Self {
        Part::Text { text: text.into() }
    }

    pub fn image_bytes(media_type: impl Into<String>, bytes: &[u8]) -> Self {
        use base64::Engine;
        Part::Image {
            media_type: media_type.into(),
            source: ImageSource::Base64(base64::engine::general_purpose::STANDARD.encode(bytes)),
        }
    }

    pub fn image_url(url: impl Into<String>) -> Self {
        Part::Image {
            media_type: String::new(),
            source: ImageSource::Url(url.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![Part::text(text)],
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            parts: vec![Part::text(text)],
        }
    }

    /// Concatenated text of all text parts.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub backend_id: String,
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return invalid("at least one user message is required");
        }
        let stray_image = self
            .messages
            .iter()
            .any(|m| m.role != Role::User && m.parts.iter().any(|p| matches!(p, Part::Image { .. })));
        if stray_image {
            return invalid("image parts are only allowed on user messages");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return invalid("temperature must be a finite number >= 0");
        }
        if self.max_tokens == 0 {
            return invalid("max_tokens must be > 0");
        }
        Ok(())
    }

    /// Text of the last user message; what scripted mocks usually inspect.
    pub fn last_user_text(&self) -> String {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(Message::text)
            .unwrap_or_default()
    }
}

const DIGEST_DOMAIN: &str = "ensemble-vqa/chat-request/v1";

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    domain: &'static str,
    backend_id: &'a str,
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
}

/// Hex SHA-256 over a fixed-field-order JSON rendering of the request.
///
/// Struct fields serialize in declaration order, so the digest never depends
/// on how a request was read from disk.
pub fn request_digest(req: &ChatRequest) -> String {
    let canonical = CanonicalRequest {
        domain: DIGEST_DOMAIN,
        backend_id: &req.backend_id,
        model: &req.model,
        messages: &req.messages,
        temperature: req.temperature,
        max_tokens: req.max_tokens,
    };
    let bytes = serde_json::to_vec(&canonical).expect("request serializes");
    hex::encode(Sha256::digest(&bytes))
}
