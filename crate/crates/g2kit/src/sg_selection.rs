//! Confidence-driven triplet selection and token weighting.
//!
//! Generated scene graphs are long and noisy; downstream readers want the
//! believable core. Selection works on per-triplet confidence scores:
//! normalize them to a distribution, rank triplets by score, and keep the
//! shortest prefix whose cumulative mass reaches a threshold θ — so a
//! peaked distribution keeps few triplets and a flat one keeps many.
//!
//! For training-time use the same scores become per-token loss weights:
//! tokens inside a triplet's span are weighted by its confidence (rescaled
//! to mean 1 across graph tokens), tokens outside graph spans keep weight 1.
//!
//! Scores come from a [`ConfidenceProvider`]: a JSON score file, scores
//! inlined in graph records, or a seeded stub for pipeline tests.

use crate::sg_model::{SceneGraph, NONE_PREDICATE};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
    #[error("score {index} is negative ({value})")]
    NegativeScore { index: usize, value: f64 },
    #[error("scores sum to zero; cannot normalize")]
    ZeroMass,
    #[error("{context}: expected {expected} scores, got {got}")]
    LengthMismatch { context: String, expected: usize, got: usize },
    #[error("span {span:?} does not fit a sequence of {len} tokens")]
    SpanOutOfBounds { span: (usize, usize), len: usize },
    #[error("spans {first:?} and {second:?} overlap")]
    OverlappingSpans { first: (usize, usize), second: (usize, usize) },
    #[error("no confidence scores for image {image_id:?}")]
    MissingImage { image_id: String },
    #[error("confidence file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("confidence file json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Tolerance on the cumulative-mass comparison, so a threshold that the
/// scores reach only up to float rounding still counts as reached.
const THRESHOLD_EPS: f64 = 1e-9;

/// Weight floor inside graph spans, keeping every in-span weight positive
/// even for zero-confidence triplets.
const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizeMode {
    /// Divide non-negative scores by their sum.
    #[default]
    SumToOne,
    /// Softmax over arbitrary finite scores.
    Softmax,
}

fn check_finite(scores: &[f64]) -> Result<(), SelectionError> {
    for (index, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(SelectionError::NonFinite { index });
        }
    }
    Ok(())
}

/// Normalize raw scores into a distribution (empty input stays empty).
pub fn normalize_confidences(
    scores: &[f64],
    mode: NormalizeMode,
) -> Result<Vec<f64>, SelectionError> {
    check_finite(scores)?;
    if scores.is_empty() {
        return Ok(Vec::new());
    }
    match mode {
        NormalizeMode::SumToOne => {
            for (index, &s) in scores.iter().enumerate() {
                if s < 0.0 {
                    return Err(SelectionError::NegativeScore { index, value: s });
                }
            }
            let sum: f64 = scores.iter().sum();
            if sum <= 0.0 {
                return Err(SelectionError::ZeroMass);
            }
            Ok(scores.iter().map(|s| s / sum).collect())
        }
        NormalizeMode::Softmax => {
            let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exped: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exped.iter().sum();
            Ok(exped.into_iter().map(|e| e / sum).collect())
        }
    }
}

/// Rank triplets by normalized confidence (ties keep the earlier triplet
/// first) and take the shortest prefix whose cumulative mass reaches
/// `theta`. Returns the picked indices in pick order. A non-positive
/// threshold picks nothing; a threshold the scores never reach picks
/// everything.
pub fn select_by_threshold(normalized: &[f64], theta: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    order.sort_by(|&a, &b| normalized[b].total_cmp(&normalized[a]).then(a.cmp(&b)));
    let mut picked = Vec::new();
    let mut mass = 0.0;
    for i in order {
        if mass >= theta - THRESHOLD_EPS {
            break;
        }
        mass += normalized[i];
        picked.push(i);
    }
    picked
}

/// The picked triplets as a graph, back in generation order.
pub fn subgraph(g: &SceneGraph, picked: &[usize]) -> SceneGraph {
    let mut order: Vec<usize> = picked.to_vec();
    order.sort_unstable();
    SceneGraph::new(
        g.image_id.clone(),
        order.iter().filter_map(|&i| g.triplets.get(i).cloned()).collect(),
    )
}

/// Token spans of a serialized graph: triplet k covers tokens
/// `[3k, 3k+3)` (subject, object, relation — multiword relations serialize
/// as one underscored token).
pub fn graph_token_spans(n_triplets: usize) -> Vec<(usize, usize)> {
    (0..n_triplets).map(|k| (3 * k, 3 * k + 3)).collect()
}

/// Per-token loss weights over a sequence of `seq_len` tokens. Tokens in
/// `spans[k]` get triplet k's confidence, floored at a small positive value
/// and rescaled so in-span weights average exactly 1; tokens outside every
/// span keep weight 1. Spans are half-open, must fit the sequence, and must
/// not overlap; one confidence per span.
pub fn token_weights(
    seq_len: usize,
    spans: &[(usize, usize)],
    confidences: &[f64],
) -> Result<Vec<f64>, SelectionError> {
    if spans.len() != confidences.len() {
        return Err(SelectionError::LengthMismatch {
            context: "one confidence per span".into(),
            expected: spans.len(),
            got: confidences.len(),
        });
    }
    check_finite(confidences)?;
    for (index, &c) in confidences.iter().enumerate() {
        if c < 0.0 {
            return Err(SelectionError::NegativeScore { index, value: c });
        }
    }
    for &span in spans {
        let (start, end) = span;
        if start >= end || end > seq_len {
            return Err(SelectionError::SpanOutOfBounds { span, len: seq_len });
        }
    }
    let mut sorted: Vec<(usize, usize)> = spans.to_vec();
    sorted.sort_unstable();
    for pair in sorted.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(SelectionError::OverlappingSpans { first: pair[0], second: pair[1] });
        }
    }

    let mut weights = vec![1.0; seq_len];
    let mut in_span_total = 0.0;
    let mut in_span_count = 0usize;
    for (&(start, end), &c) in spans.iter().zip(confidences) {
        let w = c.max(WEIGHT_FLOOR);
        for token in weights.iter_mut().take(end).skip(start) {
            *token = w;
        }
        in_span_total += w * (end - start) as f64;
        in_span_count += end - start;
    }
    if in_span_count > 0 {
        let mean = in_span_total / in_span_count as f64;
        for (token, w) in weights.iter_mut().enumerate() {
            if spans.iter().any(|&(s, e)| token >= s && token < e) {
                *w /= mean;
            }
        }
    }
    Ok(weights)
}

// ---------------------------------------------------------------------------
// Confidence providers
// ---------------------------------------------------------------------------

/// A source of per-triplet confidence scores for a graph.
pub trait ConfidenceProvider {
    /// One score per triplet, aligned with `graph.triplets`.
    fn confidences(&self, graph: &SceneGraph) -> Result<Vec<f64>, SelectionError>;
}

/// Scores loaded from a JSON object `{"<image_id>": [s0, s1, ...], ...}`.
#[derive(Debug, Clone, Default)]
pub struct FileProvider {
    by_image: BTreeMap<String, Vec<f64>>,
}

impl FileProvider {
    pub fn from_path(path: &Path) -> Result<Self, SelectionError> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self { by_image: serde_json::from_str(&text)? })
    }

    pub fn from_map(by_image: BTreeMap<String, Vec<f64>>) -> Self {
        Self { by_image }
    }
}

impl ConfidenceProvider for FileProvider {
    fn confidences(&self, graph: &SceneGraph) -> Result<Vec<f64>, SelectionError> {
        let scores = self
            .by_image
            .get(&graph.image_id)
            .ok_or_else(|| SelectionError::MissingImage { image_id: graph.image_id.clone() })?;
        if scores.len() != graph.len() {
            return Err(SelectionError::LengthMismatch {
                context: format!("scores for image {:?}", graph.image_id),
                expected: graph.len(),
                got: scores.len(),
            });
        }
        check_finite(scores)?;
        Ok(scores.clone())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, used so stub scores are stable across runs and toolchains.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Deterministic pseudo-scores for wiring up pipelines without a scorer:
/// each triplet's score is a hash of the seed, the image id, and the
/// triplet text (with explicit instance indices), mapped into [0, 1).
#[derive(Debug, Clone, Copy)]
pub struct StubProvider {
    pub seed: u64,
}

impl ConfidenceProvider for StubProvider {
    fn confidences(&self, graph: &SceneGraph) -> Result<Vec<f64>, SelectionError> {
        Ok(graph
            .triplets
            .iter()
            .map(|t| {
                let text = format!(
                    "{} {} {}",
                    t.subject,
                    t.object,
                    t.predicate.as_deref().unwrap_or(NONE_PREDICATE)
                );
                let mut bytes = self.seed.to_le_bytes().to_vec();
                bytes.extend_from_slice(graph.image_id.as_bytes());
                bytes.push(0);
                bytes.extend_from_slice(text.as_bytes());
                // 53 mantissa bits give a uniform value in [0, 1).
                (fnv1a64(&bytes) >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sg_model::parse_sequence_as;
    use proptest::prelude::*;

    #[test]
    fn sum_to_one_normalization() {
        let n = normalize_confidences(&[2.0, 1.0, 1.0], NormalizeMode::SumToOne).unwrap();
        assert_eq!(n, vec![0.5, 0.25, 0.25]);
        assert!(normalize_confidences(&[], NormalizeMode::SumToOne).unwrap().is_empty());
    }

    #[test]
    fn sum_to_one_rejects_bad_input() {
        assert!(matches!(
            normalize_confidences(&[1.0, -0.1], NormalizeMode::SumToOne),
            Err(SelectionError::NegativeScore { index: 1, .. })
        ));
        assert!(matches!(
            normalize_confidences(&[0.0, 0.0], NormalizeMode::SumToOne),
            Err(SelectionError::ZeroMass)
        ));
        assert!(matches!(
            normalize_confidences(&[f64::NAN], NormalizeMode::SumToOne),
            Err(SelectionError::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn softmax_normalization() {
        let n = normalize_confidences(&[0.0, 0.0], NormalizeMode::Softmax).unwrap();
        assert!((n[0] - 0.5).abs() < 1e-12);
        // Shift invariance.
        let a = normalize_confidences(&[1.0, 2.0, 3.0], NormalizeMode::Softmax).unwrap();
        let b = normalize_confidences(&[101.0, 102.0, 103.0], NormalizeMode::Softmax).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_selection_takes_shortest_prefix() {
        assert_eq!(select_by_threshold(&[0.5, 0.3, 0.2], 0.8), vec![0, 1]);
        assert_eq!(select_by_threshold(&[0.4, 0.3, 0.2, 0.1], 0.8), vec![0, 1, 2]);
        // Out-of-order scores get ranked first.
        assert_eq!(select_by_threshold(&[0.2, 0.5, 0.3], 0.8), vec![1, 2]);
    }

    #[test]
    fn threshold_edge_cases() {
        assert_eq!(select_by_threshold(&[0.6, 0.4], 0.0), Vec::<usize>::new());
        assert_eq!(select_by_threshold(&[0.6, 0.4], 1.0), vec![0, 1]);
        // Unreachable threshold keeps everything rather than failing.
        assert_eq!(select_by_threshold(&[0.6, 0.4], 2.0), vec![0, 1]);
        assert_eq!(select_by_threshold(&[], 0.8), Vec::<usize>::new());
        // Ties pick the earlier triplet first.
        assert_eq!(select_by_threshold(&[0.25, 0.25, 0.25, 0.25], 0.5), vec![0, 1]);
    }

    #[test]
    fn threshold_tolerates_rounding() {
        // Eight 0.1 shares sum to 0.7999999... in floats; the epsilon keeps
        // the comparison honest.
        let scores = vec![0.1; 10];
        let picked = select_by_threshold(&scores, 0.8);
        assert_eq!(picked.len(), 8);
    }

    #[test]
    fn subgraph_restores_generation_order() {
        let (g, _) = parse_sequence_as("i", "a b r; c d s; e f t");
        let cut = subgraph(&g, &[2, 0]);
        assert_eq!(cut.len(), 2);
        assert_eq!(cut.triplets[0], g.triplets[0]);
        assert_eq!(cut.triplets[1], g.triplets[2]);
    }

    #[test]
    fn graph_spans_are_three_tokens_each() {
        assert_eq!(graph_token_spans(3), vec![(0, 3), (3, 6), (6, 9)]);
    }

    #[test]
    fn token_weights_mean_one_in_spans() {
        let w = token_weights(9, &graph_token_spans(3), &[0.9, 0.3, 0.3]).unwrap();
        let mean: f64 = w.iter().sum::<f64>() / 9.0;
        assert!((mean - 1.0).abs() < 1e-12);
        // Higher-confidence triplet gets proportionally more weight.
        assert!((w[0] / w[3] - 3.0).abs() < 1e-12);
        assert_eq!(w[3], w[6]);
    }

    #[test]
    fn token_weights_outside_spans_are_one() {
        let w = token_weights(8, &[(2, 5)], &[0.4]).unwrap();
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 1.0);
        assert_eq!(w[5], 1.0);
        assert_eq!(w[7], 1.0);
        // The single span rescales to mean 1 regardless of its raw score.
        assert!((w[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn token_weights_zero_confidence_stays_positive() {
        let w = token_weights(6, &graph_token_spans(2), &[1.0, 0.0]).unwrap();
        assert!(w.iter().all(|&x| x > 0.0));
        let mean: f64 = w.iter().sum::<f64>() / 6.0;
        assert!((mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn token_weights_validation() {
        assert!(matches!(
            token_weights(6, &[(0, 3)], &[0.5, 0.5]),
            Err(SelectionError::LengthMismatch { .. })
        ));
        assert!(matches!(
            token_weights(4, &[(2, 6)], &[0.5]),
            Err(SelectionError::SpanOutOfBounds { .. })
        ));
        assert!(matches!(
            token_weights(4, &[(3, 3)], &[0.5]),
            Err(SelectionError::SpanOutOfBounds { .. })
        ));
        assert!(matches!(
            token_weights(8, &[(0, 4), (3, 6)], &[0.5, 0.5]),
            Err(SelectionError::OverlappingSpans { .. })
        ));
    }

    #[test]
    fn file_provider_lookup_and_validation() {
        let (g, _) = parse_sequence_as("img1", "a b r; c d s");
        let mut map = BTreeMap::new();
        map.insert("img1".to_string(), vec![0.7, 0.3]);
        let p = FileProvider::from_map(map.clone());
        assert_eq!(p.confidences(&g).unwrap(), vec![0.7, 0.3]);

        let (other, _) = parse_sequence_as("img2", "a b r");
        assert!(matches!(
            p.confidences(&other),
            Err(SelectionError::MissingImage { .. })
        ));

        map.insert("img1".to_string(), vec![0.7]);
        let p = FileProvider::from_map(map);
        assert!(matches!(
            p.confidences(&g),
            Err(SelectionError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn stub_provider_is_deterministic_and_bounded() {
        let (g, _) = parse_sequence_as("img1", "person cup holding; table dog None");
        let p = StubProvider { seed: 7 };
        let a = p.confidences(&g).unwrap();
        let b = p.confidences(&g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|&s| (0.0..1.0).contains(&s)));
        // Seed changes scores.
        let c = StubProvider { seed: 8 }.confidences(&g).unwrap();
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn normalized_scores_sum_to_one(
            scores in proptest::collection::vec(0.01f64..10.0, 1..20),
            softmax in proptest::bool::ANY,
        ) {
            let mode = if softmax { NormalizeMode::Softmax } else { NormalizeMode::SumToOne };
            let n = normalize_confidences(&scores, mode).unwrap();
            let sum: f64 = n.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(n.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn selection_is_minimal_prefix(
            scores in proptest::collection::vec(0.01f64..10.0, 1..20),
            theta in 0.05f64..1.0,
        ) {
            let n = normalize_confidences(&scores, NormalizeMode::SumToOne).unwrap();
            let picked = select_by_threshold(&n, theta);
            let mass: f64 = picked.iter().map(|&i| n[i]).sum();
            // Reached the threshold...
            prop_assert!(mass >= theta - 1e-9);
            // ...and not before the last pick.
            if let Some(&last) = picked.last() {
                prop_assert!(mass - n[last] < theta - 1e-9 + 1e-12);
            }
            // Picks are ranked descending.
            for pair in picked.windows(2) {
                prop_assert!(n[pair[0]] >= n[pair[1]]);
            }
        }

        #[test]
        fn weights_positive_and_mean_one(
            confidences in proptest::collection::vec(0.0f64..1.0, 1..8),
            padding in 0usize..5,
        ) {
            let spans = graph_token_spans(confidences.len());
            let len = 3 * confidences.len() + padding;
            let w = token_weights(len, &spans, &confidences).unwrap();
            prop_assert!(w.iter().all(|&x| x > 0.0));
            let in_span: f64 = w[..3 * confidences.len()].iter().sum();
            prop_assert!((in_span / (3.0 * confidences.len() as f64) - 1.0).abs() < 1e-9);
            for &x in &w[3 * confidences.len()..] {
                prop_assert_eq!(x, 1.0);
            }
        }
    }
}
