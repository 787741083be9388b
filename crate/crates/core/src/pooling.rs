//! Turning per-token hidden states into one sentence vector.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::backend::HiddenStates;
use crate::templates::{CaptureRule, PromptTemplate, MASK_TOKEN};

#[derive(Debug, Error, PartialEq)]
pub enum PoolingError {
    #[error("layer {0} is not present in the response")]
    LayerMissing(i32),
    #[error("expected {expected} mask positions, located {found}")]
    MaskPositionsNotFound { expected: usize, found: usize },
    #[error("{rule} pooling does not apply to template `{template}`")]
    RuleMismatch { rule: PoolingRule, template: String },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("response has no tokens")]
    EmptyResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingRule {
    LastToken,
    MeanOverMasks,
}

impl PoolingRule {
    pub fn name(self) -> &'static str {
        match self {
            PoolingRule::LastToken => "last_token",
            PoolingRule::MeanOverMasks => "mean_over_masks",
        }
    }

    pub fn for_capture(capture: CaptureRule) -> Self {
        match capture {
            CaptureRule::LastToken => PoolingRule::LastToken,
            CaptureRule::MaskTokens(_) => PoolingRule::MeanOverMasks,
        }
    }
}

impl fmt::Display for PoolingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which layer and rule produce the sentence vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ExtractionSpec {
    pub layer: i32,
    pub rule: PoolingRule,
    pub normalize: bool,
}

impl ExtractionSpec {
    /// The rule implied by the template's capture rule.
    pub fn for_template(template: &PromptTemplate, layer: i32, normalize: bool) -> Self {
        Self {
            layer,
            rule: PoolingRule::for_capture(template.capture()),
            normalize,
        }
    }

    pub fn check_template(&self, template: &PromptTemplate) -> Result<(), PoolingError> {
        if PoolingRule::for_capture(template.capture()) != self.rule {
            return Err(PoolingError::RuleMismatch {
                rule: self.rule,
                template: template.id().to_string(),
            });
        }
        Ok(())
    }
}

/// Layer used when none is given: the penultimate layer for the prefixed
/// EOL variants, the last layer otherwise.
pub fn default_layer(template_id: &str) -> i32 {
    match template_id {
        "pretended_cot" | "knowledge_enhancement" => -2,
        _ => -1,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Provenance {
    pub model_id: String,
    pub template_id: String,
    pub layer: i32,
    pub rule: PoolingRule,
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

/// Inputs to [`pool`] beyond the response itself.
#[derive(Debug, Clone, Copy)]
pub struct PoolingContext<'a> {
    pub model_id: &'a str,
    /// Token text the backend uses for masks.
    pub mask_token: &'a str,
    /// The rendered prompt, used to locate masks by offset when token text
    /// does not match.
    pub prompt: Option<&'a str>,
}

impl<'a> PoolingContext<'a> {
    pub fn new(model_id: &'a str) -> Self {
        Self {
            model_id,
            mask_token: MASK_TOKEN,
            prompt: None,
        }
    }
}

pub fn pool(
    response: &HiddenStates,
    spec: &ExtractionSpec,
    template: &PromptTemplate,
    ctx: &PoolingContext<'_>,
) -> Result<SentenceEmbedding, PoolingError> {
    spec.check_template(template)?;
    let vectors = response
        .layer(spec.layer)
        .ok_or(PoolingError::LayerMissing(spec.layer))?;
    if vectors.is_empty() {
        return Err(PoolingError::EmptyResponse);
    }
    let mut vector = match (spec.rule, template.capture()) {
        (PoolingRule::MeanOverMasks, CaptureRule::MaskTokens(count)) => {
            let positions = mask_positions(response, template, count, ctx)?;
            mean(positions.iter().map(|&i| vectors[i].as_slice()))
        }
        _ => vectors[vectors.len() - 1].clone(),
    };
    if spec.normalize {
        l2_normalize(&mut vector)?;
    }
    Ok(SentenceEmbedding {
        vector,
        provenance: Provenance {
            model_id: ctx.model_id.to_string(),
            template_id: template.id().to_string(),
            layer: spec.layer,
            rule: spec.rule,
            normalize: spec.normalize,
        },
    })
}

/// Token indices of the template's masks. Exact token-text matches come
/// first; when too few are found, masks in the rendered suffix are mapped
/// to tokens by character offset.
fn mask_positions(
    response: &HiddenStates,
    template: &PromptTemplate,
    count: usize,
    ctx: &PoolingContext<'_>,
) -> Result<Vec<usize>, PoolingError> {
    let exact: Vec<usize> = response
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_str() == ctx.mask_token)
        .map(|(i, _)| i)
        .collect();
    if exact.len() >= count {
        // Template masks follow the sentence, so a sentence that itself
        // contains mask text only adds earlier matches.
        return Ok(exact[exact.len() - count..].to_vec());
    }
    let Some(prompt) = ctx.prompt else {
        return Err(PoolingError::MaskPositionsNotFound {
            expected: count,
            found: exact.len(),
        });
    };
    let suffix_start = template.suffix_start(prompt);
    let mut by_offset = Vec::new();
    for (byte, _) in template.suffix().match_indices(MASK_TOKEN) {
        let start = suffix_start + template.suffix()[..byte].chars().count();
        let end = start + MASK_TOKEN.chars().count();
        if let Some(i) = response
            .offsets
            .iter()
            .position(|&(s, e)| e > s && s >= start && e <= end)
        {
            by_offset.push(i);
        }
    }
    if by_offset.len() < count {
        return Err(PoolingError::MaskPositionsNotFound {
            expected: count,
            found: by_offset.len().max(exact.len()),
        });
    }
    Ok(by_offset)
}

fn mean<'v>(vectors: impl Iterator<Item = &'v [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for v in vectors {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    acc
}

pub fn l2_normalize(v: &mut [f64]) -> Result<(), PoolingError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(PoolingError::ZeroVector);
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(())
}
