//! Scorer wire protocol: newline-delimited JSON, one response line per
//! request line, ids echoed back.
//!
//! ```text
//! -> {"id": 7, "context": "...", "passages": ["..."], "target": "...", "want_embedding": true}
//! <- {"id": 7, "logprobs": [[-1.2, -0.3]], "token_count": 2, "embeddings": [[...]], "fingerprint": "..."}
//! ```
//!
//! Two auxiliary request kinds share the channel: `{"id", "embed": [texts]}`
//! answered by `{"id", "embeddings", "fingerprint"}`, and `{"id", "health": true}`
//! answered by `{"id", "fingerprint"}`.

use serde::Serialize;
use serde_json::{Map, Value};

use super::{Result, ScoreRequest, ScoreResponse, ScoringError};

#[derive(Debug, Clone, Serialize)]
pub struct WireScoreRequest<'a> {
    pub id: u64,
    pub context: &'a str,
    pub passages: &'a [String],
    pub target: &'a str,
    pub want_embedding: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct WireEmbedRequest<'a> {
    pub id: u64,
    pub embed: &'a [&'a str],
}

#[derive(Debug, Clone, Serialize)]
pub struct WireHealthRequest {
    pub id: u64,
    pub health: bool,
}

pub fn encode_score_request(id: u64, request: &ScoreRequest) -> String {
    serde_json::to_string(&WireScoreRequest {
        id,
        context: &request.context,
        passages: &request.passages,
        target: &request.target,
        want_embedding: request.want_embedding,
    })
    .expect("request serialises")
}

/// A parsed score response line with its echoed id.
#[derive(Debug, Clone, PartialEq)]
pub struct WireScoreResponse {
    pub id: u64,
    pub response: ScoreResponse,
}

fn object(line: &str) -> Result<Map<String, Value>> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| ScoringError::protocol("<line>", format!("not valid JSON: {e}")))?;
    let Value::Object(map) = value else {
        return Err(ScoringError::protocol("<line>", "response is not a JSON object"));
    };
    if let Some(err) = map.get("error") {
        return Err(ScoringError::Unavailable {
            block_id: None,
            cause: format!("sidecar error: {err}"),
        });
    }
    Ok(map)
}

fn id_field(map: &Map<String, Value>) -> Result<u64> {
    map.get("id")
        .and_then(Value::as_u64)
        .ok_or_else(|| ScoringError::protocol("id", "missing or not a non-negative integer"))
}

fn fingerprint_field(map: &Map<String, Value>) -> Result<String> {
    map.get("fingerprint")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ScoringError::protocol("fingerprint", "missing or not a string"))
}

fn matrix(value: &Value, field: &str) -> Result<Vec<Vec<f64>>> {
    let rows = value
        .as_array()
        .ok_or_else(|| ScoringError::protocol(field, "not an array"))?;
    rows.iter()
        .enumerate()
        .map(|(r, row)| {
            let row = row
                .as_array()
                .ok_or_else(|| ScoringError::protocol(field, format!("row {r} is not an array")))?;
            row.iter()
                .enumerate()
                .map(|(c, v)| {
                    v.as_f64()
                        .ok_or_else(|| ScoringError::protocol(field, format!("entry [{r}][{c}] is not a number")))
                })
                .collect()
        })
        .collect()
}

/// Parses a score response line. Field-level problems are reported as
/// [`ScoringError::Protocol`] naming the field; shape checks against the
/// originating request are left to [`ScoreResponse::validate`].
pub fn parse_score_response(line: &str) -> Result<WireScoreResponse> {
    let map = object(line)?;
    let id = id_field(&map)?;
    let logprobs = matrix(
        map.get("logprobs")
            .ok_or_else(|| ScoringError::protocol("logprobs", "missing"))?,
        "logprobs",
    )?;
    let token_count = map
        .get("token_count")
        .and_then(Value::as_u64)
        .ok_or_else(|| ScoringError::protocol("token_count", "missing or not a non-negative integer"))?
        as usize;
    let embeddings = match map.get("embeddings") {
        None | Some(Value::Null) => None,
        Some(v) => Some(matrix(v, "embeddings")?),
    };
    let truncated = match map.get("truncated") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(ScoringError::protocol("truncated", "not a boolean")),
    };
    Ok(WireScoreResponse {
        id,
        response: ScoreResponse {
            logprobs,
            token_count,
            embeddings,
            fingerprint: fingerprint_field(&map)?,
            truncated,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireEmbedResponse {
    pub id: u64,
    pub embeddings: Vec<Vec<f64>>,
    pub fingerprint: String,
}

pub fn parse_embed_response(line: &str) -> Result<WireEmbedResponse> {
    let map = object(line)?;
    Ok(WireEmbedResponse {
        id: id_field(&map)?,
        embeddings: matrix(
            map.get("embeddings")
                .ok_or_else(|| ScoringError::protocol("embeddings", "missing"))?,
            "embeddings",
        )?,
        fingerprint: fingerprint_field(&map)?,
    })
}

pub fn parse_health_response(line: &str) -> Result<(u64, String)> {
    let map = object(line)?;
    Ok((id_field(&map)?, fingerprint_field(&map)?))
}

/// Serialises a response line the way a conforming sidecar would.
pub fn encode_score_response(id: u64, response: &ScoreResponse) -> String {
    let mut map = Map::new();
    map.insert("id".into(), Value::from(id));
    map.insert(
        "logprobs".into(),
        serde_json::to_value(&response.logprobs).expect("finite"),
    );
    map.insert("token_count".into(), Value::from(response.token_count));
    map.insert(
        "embeddings".into(),
        serde_json::to_value(&response.embeddings).expect("finite"),
    );
    map.insert("fingerprint".into(), Value::from(response.fingerprint.clone()));
    if response.truncated {
        map.insert("truncated".into(), Value::Bool(true));
    }
    Value::Object(map).to_string()
}
