//! Generic JSON-over-HTTP mLLM adapter.
//!
//! Request body:
//! `{"model": ..., "prompt": ..., "images": [{"mime_type": "image/png", "data": <base64>}, ...]}`
//! with `Authorization: Bearer <key>` when a key is configured. The reply is
//! either a JSON object with a string field `answer` or a plain-text body;
//! both go through [`parse_answer`].

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::mllm::{parse_answer, MllmAnswer, MllmClient, MllmError, MllmRequest};
use crate::geometry::LabelImage;

#[derive(Debug, Clone, PartialEq)]
pub struct HttpMllmConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

#[derive(Debug, Clone)]
pub struct HttpMllmClient {
    config: HttpMllmConfig,
    agent: ureq::Agent,
}

impl HttpMllmClient {
    pub fn new(config: HttpMllmConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(true)
            .build()
            .new_agent();
        Self { config, agent }
    }

    pub fn request_body(&self, request: &MllmRequest<'_>) -> Result<Value, MllmError> {
        let images = request
            .images
            .iter()
            .map(|f| {
                encode_label_png(&f.appearance).map(|png| {
                    json!({
                        "mime_type": "image/png",
                        "data": base64::engine::general_purpose::STANDARD.encode(png),
                    })
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(json!({
            "model": self.config.model,
            "prompt": request.prompt,
            "images": images,
        }))
    }
}

impl MllmClient for HttpMllmClient {
    fn answer(&self, request: &MllmRequest<'_>) -> Result<MllmAnswer, MllmError> {
        let body = self.request_body(request)?;
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| MllmError::Transport(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| MllmError::Transport(e.to_string()))?;
        let raw = match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(obj)) => match obj.get("answer") {
                Some(Value::String(s)) => s.clone(),
                _ => return Err(MllmError::Malformed(text)),
            },
            _ => text,
        };
        parse_answer(&raw)
    }
}

/// Renders a label image as an 8-bit RGB PNG with a fixed per-label palette.
pub(crate) fn encode_label_png(image: &LabelImage) -> Result<Vec<u8>, MllmError> {
    let mut rgb = Vec::with_capacity(image.labels.len() * 3);
    for &l in &image.labels {
        rgb.extend_from_slice(&palette(l));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| MllmError::Transport(format!("png encode: {e}")))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| MllmError::Transport(format!("png encode: {e}")))?;
    }
    Ok(out)
}

fn palette(label: u16) -> [u8; 3] {
    if label == 0 {
        return [0, 0, 0];
    }
    let x = (label as u32).wrapping_mul(2_654_435_761);
    [(x >> 24) as u8 | 0x20, (x >> 16) as u8 | 0x20, (x >> 8) as u8 | 0x20]
}
