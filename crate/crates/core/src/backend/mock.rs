use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{
    normalize_layers, Backend, BackendDescriptor, BackendError, BackendKind, HiddenStates, HiddenStatesRequest,
};
use crate::templates::{MASK_TOKEN, SEP_TOKEN};

pub const MOCK_DEFAULT_HIDDEN_SIZE: usize = 64;
pub const MOCK_DEFAULT_LAYERS: usize = 8;
const POSITIONAL_WEIGHT: f64 = 0.1;

/// Deterministic stand-in for a language model.
///
/// Two unit vectors are drawn per token, each from SHA-256 over a tag and its
/// inputs (first 8 digest bytes, LE, seed a splitmix64 stream; each draw maps
/// to `[-1, 1)` via its top 53 bits; the result is L2-normalized):
///
/// - a positional vector from `"peb-mock-v1" || seed (u64 LE) || layer (i64
///   LE) || index (u64 LE) || text`;
/// - a word vector from `"peb-mock-word-v1" || seed (u64 LE) || lowercase text`.
///
/// The hidden state at position `i` is
/// `0.1 * positional_i + 0.5 * mean(word_0..=i) + 0.5 * mean(word_0..n)`,
/// L2-normalized and rounded to `f32` as if it had crossed the wire. The word
/// means stand in for attention: every position summarizes the prompt, so
/// sentences sharing words get similar vectors.
#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    descriptor: BackendDescriptor,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self::with_shape(seed, MOCK_DEFAULT_HIDDEN_SIZE, MOCK_DEFAULT_LAYERS)
    }

    pub fn with_shape(seed: u64, hidden_size: usize, num_layers: usize) -> Self {
        assert!(hidden_size > 0 && num_layers > 0, "mock shape must be positive");
        Self {
            seed,
            descriptor: BackendDescriptor {
                kind: BackendKind::Mock,
                endpoint: None,
                model_id: format!("mock-s{seed}-d{hidden_size}-l{num_layers}"),
                hidden_size,
                num_layers,
                mask_token: Some(MASK_TOKEN.to_string()),
                fingerprint: format!("mock-v1 seed={seed}"),
            },
        }
    }

    /// Drops the mask token so the mock behaves like a causal model.
    pub fn without_mask_token(mut self) -> Self {
        self.descriptor.mask_token = None;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn states(&self, prompt: &str, layers: &[i32]) -> HiddenStates {
        states_for(self.seed, prompt, layers, self.descriptor.hidden_size)
    }
}

impl Backend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn fetch_hidden_states(&self, request: &HiddenStatesRequest) -> Result<Vec<HiddenStates>, BackendError> {
        let layers = normalize_layers(&self.descriptor, &request.layers)?;
        Ok(request.prompts.iter().map(|p| self.states(p, &layers)).collect())
    }

    fn max_in_flight(&self) -> usize {
        4
    }
}

/// Mock hidden states at the default hidden size; `layers` are used as keys verbatim.
pub fn mock_states(seed: u64, prompt: &str, layers: &[i32]) -> HiddenStates {
    states_for(seed, prompt, layers, MOCK_DEFAULT_HIDDEN_SIZE)
}

fn states_for(seed: u64, prompt: &str, layers: &[i32], hidden_size: usize) -> HiddenStates {
    let pieces = tokenize(prompt, &[MASK_TOKEN, SEP_TOKEN]);
    let words: Vec<Vec<f64>> = pieces
        .iter()
        .map(|(text, _)| {
            unit_vector(
                &[b"peb-mock-word-v1", &seed.to_le_bytes(), text.to_lowercase().as_bytes()],
                hidden_size,
            )
        })
        .collect();
    let total = words.len().max(1) as f64;
    let full: Vec<f64> = (0..hidden_size)
        .map(|d| words.iter().map(|w| w[d]).sum::<f64>() / total)
        .collect();
    let mut context = Vec::with_capacity(pieces.len());
    let mut running = vec![0.0; hidden_size];
    for (i, w) in words.iter().enumerate() {
        for (r, x) in running.iter_mut().zip(w) {
            *r += x;
        }
        let n = (i + 1) as f64;
        context.push(
            running
                .iter()
                .zip(&full)
                .map(|(r, f)| 0.5 * r / n + 0.5 * f)
                .collect::<Vec<f64>>(),
        );
    }
    let states: BTreeMap<i32, Vec<Vec<f64>>> = layers
        .iter()
        .map(|&layer| {
            let vectors = pieces
                .iter()
                .zip(&context)
                .enumerate()
                .map(|(i, ((text, _), ctx))| token_vector(seed, layer, i, text, ctx))
                .collect();
            (layer, vectors)
        })
        .collect();
    HiddenStates {
        tokens: pieces.iter().map(|(t, _)| t.clone()).collect(),
        offsets: pieces.iter().map(|&(_, span)| span).collect(),
        states,
    }
}

/// Whitespace-separated pieces, with each special token and each
/// punctuation character split off on its own. Spans are in characters.
pub fn tokenize(text: &str, specials: &[&str]) -> Vec<(String, (usize, usize))> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (byte, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if let Some(special) = specials.iter().find(|s| text[byte..].starts_with(**s)) {
            let len = special.chars().count();
            out.push((special.to_string(), (i, i + len)));
            i += len;
            continue;
        }
        if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].1.is_alphanumeric() {
                i += 1;
            }
            let end_byte = chars.get(i).map_or(text.len(), |&(b, _)| b);
            out.push((text[byte..end_byte].to_string(), (start, i)));
            continue;
        }
        out.push((c.to_string(), (i, i + 1)));
        i += 1;
    }
    out
}

fn token_vector(seed: u64, layer: i32, index: usize, text: &str, context: &[f64]) -> Vec<f64> {
    let positional = unit_vector(
        &[
            b"peb-mock-v1",
            &seed.to_le_bytes(),
            &i64::from(layer).to_le_bytes(),
            &(index as u64).to_le_bytes(),
            text.as_bytes(),
        ],
        context.len(),
    );
    let mut v: Vec<f64> = positional
        .iter()
        .zip(context)
        .map(|(p, c)| POSITIONAL_WEIGHT * p + c)
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x = f64::from((*x / norm) as f32);
    }
    v
}

fn unit_vector(parts: &[&[u8]], dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
    }
    let digest = hasher.finalize();
    let mut state = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let v: Vec<f64> = (0..dim)
        .map(|_| {
            let z = splitmix64(&mut state);
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
