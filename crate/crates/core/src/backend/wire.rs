//! JSON bodies of the sidecar protocol.
//!
//! ```text
//! GET  /info           -> {"model_id": str, "hidden_size": int, "num_layers": int}
//! POST /hidden_states  {"prompts": [str], "layers": [int], "want_offsets": bool}
//!                      -> {"results": [{"tokens": [str], "offsets": [[int,int]],
//!                                       "states": {"-1": [[float]], ...}}]}
//! errors               -> {"error": str}
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BackendError, HiddenStates};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoBody {
    pub model_id: String,
    pub hidden_size: usize,
    pub num_layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library_version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenStatesBody {
    pub prompts: Vec<String>,
    pub layers: Vec<i32>,
    pub want_offsets: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsBody {
    pub results: Vec<PromptResult>,
}

/// Vectors travel as 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub offsets: Vec<[usize; 2]>,
    pub states: BTreeMap<String, Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl PromptResult {
    pub fn into_hidden_states(self) -> Result<HiddenStates, BackendError> {
        let states = self
            .states
            .into_iter()
            .map(|(key, vectors)| {
                let layer = key
                    .parse::<i32>()
                    .map_err(|_| BackendError::ProtocolError(format!("bad layer key `{key}`")))?;
                let widened = vectors
                    .into_iter()
                    .map(|v| v.into_iter().map(f64::from).collect())
                    .collect();
                Ok((layer, widened))
            })
            .collect::<Result<_, BackendError>>()?;
        Ok(HiddenStates {
            tokens: self.tokens,
            offsets: self.offsets.into_iter().map(|[s, e]| (s, e)).collect(),
            states,
        })
    }
}

/// `serde_json` rejects the bare `NaN` / `Infinity` literals that Python's
/// encoder emits; tell those apart from other schema errors.
pub(crate) fn mentions_non_finite(body: &str) -> bool {
    let bytes = body.as_bytes();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'N' if body[i..].starts_with("NaN") => return true,
            b'I' if body[i..].starts_with("Infinity") => return true,
            _ => {}
        }
    }
    false
}
