//! Scalar quality measures: cosine, Pearson, Spearman (average ranks for
//! ties), alignment and uniformity. Everything is computed in `f64`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

/// Allowed deviation from unit norm for alignment/uniformity inputs.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero vector")]
    ZeroVector,
    #[error("need at least {needed} values, got {got}")]
    EmptyInput { needed: usize, got: usize },
    #[error("constant series has no correlation")]
    DegenerateInput,
    #[error("embedding {index} has norm {norm}, expected 1")]
    NotNormalized { index: usize, norm: f64 },
    #[error("non-finite input")]
    NonFinite,
}

/// Correlations of predicted similarities against gold scores, ×100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub spearman_x100: f64,
    pub pearson_x100: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn compute(predicted: &[f64], gold: &[f64]) -> Result<Self, MetricError> {
        Ok(Self {
            spearman_x100: spearman(predicted, gold)? * 100.0,
            pearson_x100: pearson(predicted, gold)? * 100.0,
            n: predicted.len(),
        })
    }
}

/// Predicted cosine joined with the gold score of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredPair {
    pub predicted: f64,
    pub gold: f64,
}

/// Sum with a fixed pairwise tree, so the result depends only on input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    let c = dot(a, b) / (na * nb);
    if !c.is_finite() {
        return Err(MetricError::NonFinite);
    }
    Ok(c.clamp(-1.0, 1.0))
}

fn check_series(xs: &[f64], ys: &[f64]) -> Result<(), MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricError::EmptyInput {
            needed: 2,
            got: xs.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    check_series(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::DegenerateInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    check_series(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

fn check_normalized<'a>(embeddings: impl Iterator<Item = &'a [f64]>) -> Result<(), MetricError> {
    for (index, e) in embeddings.enumerate() {
        let norm = dot(e, e).sqrt();
        if !norm.is_finite() {
            return Err(MetricError::NonFinite);
        }
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(MetricError::NotNormalized { index, norm });
        }
    }
    Ok(())
}

/// Mean squared distance between the embeddings of each similar pair.
pub fn alignment<A: AsRef<[f64]>>(pairs: &[(A, A)]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput { needed: 1, got: 0 });
    }
    check_normalized(pairs.iter().flat_map(|(a, b)| [a.as_ref(), b.as_ref()]))?;
    for (a, b) in pairs {
        if a.as_ref().len() != b.as_ref().len() {
            return Err(MetricError::LengthMismatch(a.as_ref().len(), b.as_ref().len()));
        }
    }
    let distances: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| squared_distance(a.as_ref(), b.as_ref()))
        .collect();
    Ok(pairwise_sum(&distances) / pairs.len() as f64)
}

/// Log of the mean Gaussian potential `exp(-2‖x − y‖²)` over all unordered
/// pairs of distinct positions.
pub fn uniformity<A: AsRef<[f64]> + Sync>(embeddings: &[A]) -> Result<f64, MetricError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(MetricError::EmptyInput { needed: 2, got: n });
    }
    check_normalized(embeddings.iter().map(AsRef::as_ref))?;
    let dim = embeddings[0].as_ref().len();
    if let Some(e) = embeddings.iter().find(|e| e.as_ref().len() != dim) {
        return Err(MetricError::LengthMismatch(dim, e.as_ref().len()));
    }
    // Rows are summed independently and then combined in row order.
    let rows: Vec<f64> = (0..n - 1)
        .into_par_iter()
        .map(|i| {
            let a = embeddings[i].as_ref();
            let terms: Vec<f64> = embeddings[i + 1..]
                .iter()
                .map(|b| (-2.0 * squared_distance(a, b.as_ref())).exp())
                .collect();
            pairwise_sum(&terms)
        })
        .collect();
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((pairwise_sum(&rows) / pairs).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cosine_anchors() {
        assert!(close(cosine(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]).unwrap(), 1.0, 1e-12));
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(
            cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            1e-12
        ));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(MetricError::ZeroVector));
        assert_eq!(cosine(&[1.0], &[1.0, 0.0]), Err(MetricError::LengthMismatch(1, 2)));
    }

    #[test]
    fn spearman_anchors() {
        assert!(close(
            spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0,
            1e-12
        ));
        assert!(close(
            spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0,
            1e-12
        ));
        // scipy.stats.spearmanr([1,2,2,3],[1,3,2,4]) = 3/sqrt(10)
        assert!(close(
            spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(),
            0.9486832980505139,
            1e-12
        ));
        assert_eq!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(MetricError::DegenerateInput)
        );
        assert_eq!(spearman(&[1.0, 2.0], &[1.0]), Err(MetricError::LengthMismatch(2, 1)));
        assert_eq!(
            spearman(&[1.0], &[1.0]),
            Err(MetricError::EmptyInput { needed: 2, got: 1 })
        );
    }

    #[test]
    fn average_rank_table() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 20.0, 5.0, 20.0]),
            vec![2.0, 4.0, 4.0, 1.0, 4.0]
        );
    }

    #[test]
    fn pearson_anchors() {
        let xs = [0.5, 1.5, -2.0, 4.0];
        assert!(close(pearson(&xs, &xs).unwrap(), 1.0, 1e-12));
        let ys: Vec<f64> = xs.iter().map(|x| -2.0 * x + 7.0).collect();
        assert!(close(pearson(&xs, &ys).unwrap(), -1.0, 1e-12));
        assert_eq!(pearson(&xs, &[2.0; 4]), Err(MetricError::DegenerateInput));
    }

    #[test]
    fn alignment_anchors() {
        let u = vec![1.0, 0.0, 0.0];
        let v = vec![0.0, 1.0, 0.0];
        assert_eq!(alignment(&[(u.clone(), u.clone())]).unwrap(), 0.0);
        assert_eq!(alignment(&[(u.clone(), v.clone())]).unwrap(), 2.0);
        assert_eq!(
            alignment::<Vec<f64>>(&[]),
            Err(MetricError::EmptyInput { needed: 1, got: 0 })
        );
        assert!(matches!(
            alignment(&[(vec![2.0, 0.0], vec![1.0, 0.0])]),
            Err(MetricError::NotNormalized { index: 0, .. })
        ));
    }

    #[test]
    fn uniformity_anchors() {
        let u = vec![1.0, 0.0];
        let v = vec![0.0, 1.0];
        assert_eq!(uniformity(&[u.clone(), u.clone()]).unwrap(), 0.0);
        assert_eq!(uniformity(&[u.clone(), v.clone()]).unwrap(), -4.0);
        assert_eq!(uniformity(&[u]), Err(MetricError::EmptyInput { needed: 2, got: 1 }));
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }
}
