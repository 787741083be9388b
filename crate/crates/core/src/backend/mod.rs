//! Models that return per-token hidden states.
//!
//! Two implementations share the [`Backend`] trait: [`HttpBackend`] talks to
//! an inference sidecar over JSON/HTTP and [`MockBackend`] derives
//! deterministic vectors from a hash of its inputs.
//!
//! Layer indices use the negative form throughout: `-1` is the last hidden
//! layer, `-2` the penultimate one. Non-negative indices count from the
//! first layer and are normalized on entry.

mod http;
mod mock;
pub mod wire;

use std::collections::BTreeMap;

use thiserror::Error;

pub use http::{HttpBackend, HttpConfig, ENV_BACKEND_TIMEOUT, ENV_BACKEND_URL};
pub use mock::{mock_states, tokenize, MockBackend, MOCK_DEFAULT_HIDDEN_SIZE, MOCK_DEFAULT_LAYERS};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("cannot reach backend at {endpoint}: {reason}")]
    ConnectFailed { endpoint: String, reason: String },
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("layer {layer} out of range for a model with {num_layers} layers")]
    LayerOutOfRange { layer: i64, num_layers: usize },
    #[error("non-finite value in prompt {prompt}, layer {layer}")]
    NonFiniteValues { prompt: usize, layer: i32 },
    #[error("backend rejected request: {0}")]
    Rejected(String),
    #[error("backend unavailable (HTTP {status}) after {attempts} attempts")]
    Unavailable { status: u16, attempts: usize },
    #[error("request must name at least one layer")]
    NoLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

/// What a backend reported about itself at connect time.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_id: String,
    pub hidden_size: usize,
    pub num_layers: usize,
    /// Token text the model uses for masks; `None` for causal models.
    pub mask_token: Option<String>,
    /// Free-form provenance string (library version, seed).
    pub fingerprint: String,
}

impl BackendDescriptor {
    pub fn is_mask_capable(&self) -> bool {
        self.mask_token.is_some()
    }

    /// Maps `layer` into `[-num_layers, -1]`.
    pub fn normalize_layer(&self, layer: i64) -> Result<i32, BackendError> {
        normalize_layer(layer, self.num_layers)
    }
}

pub fn normalize_layer(layer: i64, num_layers: usize) -> Result<i32, BackendError> {
    let n = num_layers as i64;
    let out = if layer < 0 { layer } else { layer - n };
    if out < -n || out >= 0 {
        return Err(BackendError::LayerOutOfRange { layer, num_layers });
    }
    Ok(out as i32)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenStatesRequest {
    pub prompts: Vec<String>,
    pub layers: Vec<i64>,
    pub want_offsets: bool,
}

impl HiddenStatesRequest {
    pub fn new(prompts: Vec<String>, layers: Vec<i64>) -> Self {
        Self {
            prompts,
            layers,
            want_offsets: true,
        }
    }
}

/// Hidden states for one rendered prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub tokens: Vec<String>,
    /// Character spans `[start, end)` into the prompt, one per token.
    pub offsets: Vec<(usize, usize)>,
    /// Layer (negative form) to one vector per token.
    pub states: BTreeMap<i32, Vec<Vec<f64>>>,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn layer(&self, layer: i32) -> Option<&[Vec<f64>]> {
        self.states.get(&layer).map(Vec::as_slice)
    }

    /// Checks the shape invariants against the prompt it was computed for.
    pub fn validate(
        &self,
        prompt: &str,
        prompt_index: usize,
        layers: &[i32],
        hidden_size: usize,
    ) -> Result<(), BackendError> {
        let bad = |msg: String| BackendError::ProtocolError(format!("prompt {prompt_index}: {msg}"));
        let n = self.tokens.len();
        if n == 0 {
            return Err(bad("no tokens".into()));
        }
        if self.offsets.len() != n {
            return Err(bad(format!("{} offsets for {n} tokens", self.offsets.len())));
        }
        let prompt_chars = prompt.chars().count();
        let mut last_start = 0;
        for &(start, end) in &self.offsets {
            if start > end || end > prompt_chars || start < last_start {
                return Err(bad(format!("offset ({start}, {end}) is out of order or out of bounds")));
            }
            last_start = start;
        }
        for &layer in layers {
            let vectors = self
                .states
                .get(&layer)
                .ok_or_else(|| bad(format!("layer {layer} missing from response")))?;
            if vectors.len() != n {
                return Err(bad(format!(
                    "layer {layer} has {} vectors for {n} tokens",
                    vectors.len()
                )));
            }
            for v in vectors {
                if v.len() != hidden_size {
                    return Err(bad(format!("vector of length {} (expected {hidden_size})", v.len())));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(BackendError::NonFiniteValues {
                        prompt: prompt_index,
                        layer,
                    });
                }
            }
        }
        Ok(())
    }
}

/// A model that returns hidden states for rendered prompts.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// One response per prompt, in request order, keyed by normalized layer.
    fn fetch_hidden_states(&self, request: &HiddenStatesRequest) -> Result<Vec<HiddenStates>, BackendError>;

    /// Upper bound on concurrent `fetch_hidden_states` calls worth issuing.
    fn max_in_flight(&self) -> usize {
        1
    }
}

pub(crate) fn normalize_layers(desc: &BackendDescriptor, layers: &[i64]) -> Result<Vec<i32>, BackendError> {
    if layers.is_empty() {
        return Err(BackendError::NoLayers);
    }
    let mut out: Vec<i32> = layers
        .iter()
        .map(|&l| desc.normalize_layer(l))
        .collect::<Result<_, _>>()?;
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_normalization() {
        assert_eq!(normalize_layer(-1, 4).unwrap(), -1);
        assert_eq!(normalize_layer(-4, 4).unwrap(), -4);
        assert_eq!(normalize_layer(0, 4).unwrap(), -4);
        assert_eq!(normalize_layer(3, 4).unwrap(), -1);
        assert!(matches!(
            normalize_layer(-5, 4),
            Err(BackendError::LayerOutOfRange { .. })
        ));
        assert!(matches!(
            normalize_layer(4, 4),
            Err(BackendError::LayerOutOfRange { .. })
        ));
    }

    fn response() -> HiddenStates {
        let mut states = BTreeMap::new();
        states.insert(-1, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        HiddenStates {
            tokens: vec!["a".into(), "b".into()],
            offsets: vec![(0, 1), (2, 3)],
            states,
        }
    }

    #[test]
    fn validation_accepts_well_formed() {
        response().validate("a b", 0, &[-1], 2).unwrap();
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut r = response();
        r.offsets.pop();
        assert!(matches!(
            r.validate("a b", 0, &[-1], 2),
            Err(BackendError::ProtocolError(_))
        ));

        let mut r = response();
        r.offsets = vec![(2, 3), (0, 1)];
        assert!(matches!(
            r.validate("a b", 0, &[-1], 2),
            Err(BackendError::ProtocolError(_))
        ));

        let mut r = response();
        r.offsets = vec![(0, 1), (2, 9)];
        assert!(matches!(
            r.validate("a b", 0, &[-1], 2),
            Err(BackendError::ProtocolError(_))
        ));

        assert!(matches!(
            response().validate("a b", 0, &[-2], 2),
            Err(BackendError::ProtocolError(_))
        ));
        assert!(matches!(
            response().validate("a b", 0, &[-1], 3),
            Err(BackendError::ProtocolError(_))
        ));
    }

    #[test]
    fn validation_rejects_non_finite() {
        let mut r = response();
        r.states.get_mut(&-1).unwrap()[1][0] = f64::NAN;
        assert!(matches!(
            r.validate("a b", 3, &[-1], 2),
            Err(BackendError::NonFiniteValues { prompt: 3, layer: -1 })
        ));
    }
}
