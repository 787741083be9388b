//! Per-token contribution of the sentence's own tokens to its embedding,
//! measured as cosine similarity between the embedding and each token's
//! output vector at the same layer.

use serde::Serialize;
use thiserror::Error;

use crate::backend::HiddenStates;
use crate::metrics::{cosine, MetricError};
use crate::pooling::SentenceEmbedding;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("no tokens fall inside the sentence span")]
    SpanEmpty,
    #[error("layer {0} is not present in the response")]
    LayerMissing(i32),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenClass {
    Core,
    Modifier,
    Other,
}

impl TokenClass {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenClass::Core => "core",
            TokenClass::Modifier => "modifier",
            TokenClass::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenContribution {
    pub token: String,
    /// Character span into the original sentence.
    pub span: (usize, usize),
    /// Raw cosine similarity, before any shift.
    pub similarity: f64,
    pub proportion: f64,
    pub cls: TokenClass,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContributionReport {
    pub sentence: String,
    pub template_id: String,
    pub layer: i32,
    pub contributions: Vec<TokenContribution>,
    pub core_mass: f64,
}

impl ContributionReport {
    pub fn new(sentence: &str, template_id: &str, layer: i32, contributions: Vec<TokenContribution>) -> Self {
        let core_mass = contributions
            .iter()
            .filter(|c| c.cls == TokenClass::Core)
            .map(|c| c.proportion)
            .sum::<f64>()
            .clamp(0.0, 1.0);
        Self {
            sentence: sentence.to_string(),
            template_id: template_id.to_string(),
            layer,
            contributions,
            core_mass,
        }
    }

    /// `token,start,end,similarity,proportion,class`
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["token", "start", "end", "similarity", "proportion", "class"])
            .expect("write to Vec");
        for c in &self.contributions {
            w.write_record([
                c.token.clone(),
                c.span.0.to_string(),
                c.span.1.to_string(),
                c.similarity.to_string(),
                c.proportion.to_string(),
                c.cls.as_str().to_string(),
            ])
            .expect("write to Vec");
        }
        String::from_utf8(w.into_inner().expect("flush Vec")).expect("csv output is UTF-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Converts raw similarities to proportions after shifting by
/// `max(0, -min)` so the denominator is positive.
pub fn proportions(similarities: &[f64]) -> Vec<f64> {
    let min = similarities.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = (-min).max(0.0);
    let shifted: Vec<f64> = similarities.iter().map(|s| s + shift).collect();
    let total: f64 = shifted.iter().sum();
    if total <= 0.0 {
        let n = similarities.len() as f64;
        return vec![1.0 / n; similarities.len()];
    }
    shifted.iter().map(|s| s / total).collect()
}

/// Contributions of the tokens whose offsets overlap `sentence_span`
/// (character offsets into the rendered prompt). Zero-width tokens are skipped.
pub fn token_contributions(
    response: &HiddenStates,
    embedding: &SentenceEmbedding,
    sentence_span: (usize, usize),
) -> Result<Vec<TokenContribution>, AnalysisError> {
    let layer = embedding.provenance.layer;
    let vectors = response.layer(layer).ok_or(AnalysisError::LayerMissing(layer))?;
    let (lo, hi) = sentence_span;
    let mut picked = Vec::new();
    for (i, (&(start, end), token)) in response.offsets.iter().zip(&response.tokens).enumerate() {
        if end > start && start < hi && end > lo {
            let span = (start.max(lo) - lo, end.min(hi) - lo);
            picked.push((i, token.clone(), span));
        }
    }
    if picked.is_empty() {
        return Err(AnalysisError::SpanEmpty);
    }
    let similarities = picked
        .iter()
        .map(|&(i, _, _)| cosine(&embedding.vector, &vectors[i]))
        .collect::<Result<Vec<_>, _>>()?;
    let props = proportions(&similarities);
    Ok(picked
        .into_iter()
        .zip(similarities.into_iter().zip(props))
        .map(|((_, token, span), (similarity, proportion))| TokenContribution {
            token,
            span,
            similarity,
            proportion,
            cls: TokenClass::Other,
        })
        .collect())
}

/// Tokens overlapping any core span become `Core`, the rest `Modifier`.
pub fn classify_tokens(contributions: &[TokenContribution], core_spans: &[(usize, usize)]) -> Vec<TokenContribution> {
    contributions
        .iter()
        .map(|c| {
            let core = core_spans.iter().any(|&(s, e)| c.span.0 < e && c.span.1 > s);
            TokenContribution {
                cls: if core { TokenClass::Core } else { TokenClass::Modifier },
                ..c.clone()
            }
        })
        .collect()
}

/// Character spans of whole-word occurrences of `words` in `sentence`.
pub fn word_spans(sentence: &str, words: &[&str]) -> Vec<(usize, usize)> {
    let chars: Vec<char> = sentence.chars().collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_alphanumeric() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_alphanumeric() {
            i += 1;
        }
        let word: String = chars[start..i].iter().collect();
        if words.iter().any(|w| w.trim() == word) {
            spans.push((start, i));
        }
    }
    spans
}

/// Joins sub-word pieces whose spans touch into one entry per word. Raw
/// similarities are averaged and proportions summed; a merged entry is core
/// if any piece was.
pub fn merge_by_offset(contributions: &[TokenContribution], sentence: &str) -> Vec<TokenContribution> {
    let chars: Vec<char> = sentence.chars().collect();
    let mut out: Vec<(TokenContribution, usize)> = Vec::new();
    for c in contributions {
        match out.last_mut() {
            Some((prev, n)) if prev.span.1 == c.span.0 && c.span.0 > 0 => {
                prev.span.1 = c.span.1;
                prev.similarity += c.similarity;
                prev.proportion += c.proportion;
                if c.cls == TokenClass::Core || prev.cls == TokenClass::Core {
                    prev.cls = TokenClass::Core;
                }
                *n += 1;
            }
            _ => out.push((c.clone(), 1)),
        }
    }
    out.into_iter()
        .map(|(mut c, n)| {
            c.similarity /= n as f64;
            c.token = chars[c.span.0..c.span.1].iter().collect();
            c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::pooling::{PoolingRule, Provenance};

    fn embedding(vector: Vec<f64>, layer: i32) -> SentenceEmbedding {
        SentenceEmbedding {
            vector,
            provenance: Provenance {
                model_id: "m".into(),
                template_id: "prompt_eol".into(),
                layer,
                rule: PoolingRule::LastToken,
                normalize: false,
            },
        }
    }

    fn response(tokens: &[(&str, (usize, usize))], vectors: Vec<Vec<f64>>) -> HiddenStates {
        let mut states = BTreeMap::new();
        states.insert(-1, vectors);
        HiddenStates {
            tokens: tokens.iter().map(|(t, _)| t.to_string()).collect(),
            offsets: tokens.iter().map(|&(_, s)| s).collect(),
            states,
        }
    }

    #[test]
    fn single_token_gets_everything() {
        let r = response(&[("x", (3, 4)), ("\"", (4, 5))], vec![vec![1.0, 0.2], vec![0.0, 1.0]]);
        let c = token_contributions(&r, &embedding(vec![0.5, 0.5], -1), (3, 4)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].proportion, 1.0);
        assert_eq!(c[0].span, (0, 1));
    }

    #[test]
    fn equal_similarity_splits_evenly() {
        let r = response(&[("a", (0, 1)), ("b", (2, 3))], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = token_contributions(&r, &embedding(vec![1.0, 1.0], -1), (0, 3)).unwrap();
        assert!((c[0].proportion - 0.5).abs() < 1e-15);
        assert!((c[1].proportion - 0.5).abs() < 1e-15);
    }

    #[test]
    fn negative_similarities_are_shifted() {
        let p = proportions(&[-0.5, 0.0, 0.5]);
        assert_eq!(p, vec![0.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(proportions(&[-0.2]), vec![1.0]);
        assert_eq!(proportions(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn span_errors() {
        let r = response(&[("a", (0, 1))], vec![vec![1.0]]);
        assert_eq!(
            token_contributions(&r, &embedding(vec![1.0], -1), (5, 9)),
            Err(AnalysisError::SpanEmpty)
        );
        assert_eq!(
            token_contributions(&r, &embedding(vec![1.0], -2), (0, 1)),
            Err(AnalysisError::LayerMissing(-2))
        );
    }

    #[test]
    fn classification() {
        let sentence = "a man is driving a car";
        let words = ["a", "man", "is", "driving", "a", "car"];
        let mut pos = 0;
        let contributions: Vec<TokenContribution> = words
            .iter()
            .map(|w| {
                let start = sentence[pos..].find(w).unwrap() + pos;
                pos = start + w.len();
                TokenContribution {
                    token: w.to_string(),
                    span: (start, start + w.len()),
                    similarity: 0.1,
                    proportion: 1.0 / 6.0,
                    cls: TokenClass::Other,
                }
            })
            .collect();
        let core = word_spans(sentence, &["man", "driving", "car"]);
        assert_eq!(core, vec![(2, 5), (9, 16), (19, 22)]);
        let classified = classify_tokens(&contributions, &core);
        let classes: Vec<TokenClass> = classified.iter().map(|c| c.cls).collect();
        use TokenClass::*;
        assert_eq!(classes, vec![Modifier, Core, Modifier, Core, Modifier, Core]);

        assert!(classify_tokens(&contributions, &[]).iter().all(|c| c.cls == Modifier));
        let all = classify_tokens(&contributions, &[(0, sentence.len())]);
        let report = ContributionReport::new(sentence, "prompt_eol", -1, all);
        assert!((report.core_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn merges_subword_pieces() {
        let c = |token: &str, span, proportion, cls| TokenContribution {
            token: token.into(),
            span,
            similarity: proportion,
            proportion,
            cls,
        };
        let merged = merge_by_offset(
            &[
                c("dri", (0, 3), 0.2, TokenClass::Core),
                c("ving", (3, 7), 0.3, TokenClass::Modifier),
                c("fast", (8, 12), 0.5, TokenClass::Modifier),
            ],
            "driving fast",
        );
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].token, "driving");
        assert!((merged[0].proportion - 0.5).abs() < 1e-15);
        assert!((merged[0].similarity - 0.25).abs() < 1e-15);
        assert_eq!(merged[0].cls, TokenClass::Core);
    }

    #[test]
    fn csv_shape() {
        let report = ContributionReport::new(
            "a, b",
            "prompt_eol",
            -1,
            vec![TokenContribution {
                token: ",".into(),
                span: (1, 2),
                similarity: 0.25,
                proportion: 1.0,
                cls: TokenClass::Modifier,
            }],
        );
        assert_eq!(
            report.to_csv(),
            "token,start,end,similarity,proportion,class\n\",\",1,2,0.25,1,modifier\n"
        );
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["contributions"][0]["cls"], "modifier");
    }
}
