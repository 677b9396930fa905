//! JSON wire format of the remote scoring service.
//!
//! Request: `{"version":1,"prompts":[[r]],"batch":[{"tokens":[i],"mask":i,"label":i}]}`.
//! Response: `{"probs":[[r]],"loss":r}`; failures answer `{"error":"..."}`.
//! Documents are single lines. Reals are written with 17 significant digits
//! so they parse back to the identical `f64`.

use std::fmt::Write as _;

use serde::Deserialize;

use super::{BatchItem, OracleRequest, OracleResponse};
use crate::error::OracleError;

pub const WIRE_VERSION: u32 = 1;

fn push_real(out: &mut String, v: f64) -> Result<(), OracleError> {
    if !v.is_finite() {
        return Err(OracleError::Protocol(format!("cannot encode non-finite value {v}")));
    }
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
    Ok(())
}

fn push_reals(out: &mut String, values: &[f64]) -> Result<(), OracleError> {
    out.push('[');
    for (i, &v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_real(out, v)?;
    }
    out.push(']');
    Ok(())
}

fn push_matrix(out: &mut String, rows: &[Vec<f64>]) -> Result<(), OracleError> {
    out.push('[');
    for (i, row) in rows.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_reals(out, row)?;
    }
    out.push(']');
    Ok(())
}

pub fn encode_request(request: &OracleRequest) -> Result<String, OracleError> {
    let mut out = format!("{{\"version\":{WIRE_VERSION},\"prompts\":");
    push_matrix(&mut out, &request.prompts)?;
    out.push_str(",\"batch\":[");
    for (i, item) in request.batch.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("{\"tokens\":[");
        for (j, t) in item.tokens.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{t}").expect("writing to a String cannot fail");
        }
        write!(out, "],\"mask\":{},\"label\":{}}}", item.mask, item.label).expect("writing to a String cannot fail");
    }
    out.push_str("]}");
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRequest {
    version: u32,
    prompts: Vec<Vec<f64>>,
    batch: Vec<BatchItem>,
}

/// Parses a request body; `id` is assigned by the receiver.
pub fn decode_request(body: &[u8], id: u64) -> Result<OracleRequest, OracleError> {
    let wire: WireRequest =
        serde_json::from_slice(body).map_err(|e| OracleError::Protocol(format!("malformed request: {e}")))?;
    if wire.version != WIRE_VERSION {
        return Err(OracleError::Protocol(format!("unsupported version {}", wire.version)));
    }
    Ok(OracleRequest {
        prompts: wire.prompts,
        batch: wire.batch,
        id,
    })
}

pub fn encode_response(response: &OracleResponse) -> Result<String, OracleError> {
    let mut out = String::from("{\"probs\":");
    push_matrix(&mut out, &response.probs)?;
    out.push_str(",\"loss\":");
    push_real(&mut out, response.loss)?;
    out.push('}');
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireResponse {
    probs: Vec<Vec<f64>>,
    loss: f64,
}

/// Parses and sanity-checks a response body for a batch of `batch_len`.
pub fn decode_response(body: &[u8], batch_len: usize) -> Result<OracleResponse, OracleError> {
    let wire: WireResponse =
        serde_json::from_slice(body).map_err(|e| OracleError::Protocol(format!("malformed response: {e}")))?;
    if wire.probs.len() != batch_len {
        return Err(OracleError::Protocol(format!(
            "{} probability vectors for a batch of {batch_len}",
            wire.probs.len()
        )));
    }
    if !wire.loss.is_finite() {
        return Err(OracleError::Protocol("loss is not finite".into()));
    }
    for p in &wire.probs {
        let total: f64 = p.iter().sum();
        if p.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(OracleError::Protocol("probability vector is not a distribution".into()));
        }
    }
    Ok(OracleResponse {
        probs: wire.probs,
        loss: wire.loss,
        calls: 0,
    })
}

pub fn encode_error(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

#[derive(Deserialize)]
struct WireError {
    error: String,
}

/// Message of an `{"error": ...}` body, if the body is one.
pub fn decode_error(body: &[u8]) -> Option<String> {
    serde_json::from_slice::<WireError>(body).ok().map(|e| e.error)
}
