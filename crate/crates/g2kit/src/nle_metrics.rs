//! Metrics for generated answers and natural-language explanations.
//!
//! Generated output has the shape `"<answer> because <explanation>"`.
//! [`split_answer_explanation`] separates the two halves, and the metric
//! functions score explanations against references: BLEU, ROUGE-L, a
//! lightweight exact-match METEOR, CIDEr-D, and an embedding-based
//! BERT-style score with pluggable token embeddings.
//!
//! [`evaluate_corpus`] ties them together the way leaderboard scoring does:
//! an answer counts as correct when its embedding score against the gold
//! answer clears a threshold; the task score `S_T` is the correct fraction;
//! the explanation score `S_E` is the harmonic mean of the configured
//! metrics computed over the correctly-answered subset; and the overall
//! score is `S_O = S_T · S_E`, so a model cannot buy explanation quality
//! with wrong answers.
//!
//! All metrics work on [`tokenize`] output: lowercased alphanumeric runs.

use crate::sg_selection::fnv1a64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use thiserror::Error;

/// Accept ids written either as JSON strings or as bare numbers.
pub(crate) fn de_string_or_number<'de, D: serde::Deserializer<'de>>(
    deserializer: D,
) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Text(String),
        Number(serde_json::Number),
    }
    Ok(match Id::deserialize(deserializer)? {
        Id::Text(s) => s,
        Id::Number(n) => n.to_string(),
    })
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("candidates and references differ in length ({candidates} vs {references})")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("candidate {index} has no references")]
    EmptyReferences { index: usize },
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
    #[error("cannot evaluate an empty corpus")]
    EmptyCorpus,
    #[error("duplicate id {id:?}")]
    DuplicateId { id: String },
    #[error("id {id:?} present on only one side of the evaluation")]
    UnmatchedId { id: String },
}

// ---------------------------------------------------------------------------
// Tokenization and answer splitting
// ---------------------------------------------------------------------------

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Split generated text at the first standalone `because` (any case) into
/// answer and explanation. A single colon directly after the marker — the
/// `Because:` form produced by the combined answer/explanation target — is
/// consumed. Text without a marker is all answer; a trailing `because` with
/// nothing after it yields no explanation.
pub fn split_answer_explanation(text: &str) -> (String, Option<String>) {
    const NEEDLE: &str = "because";
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = NEEDLE.len();
    for i in 0..chars.len().saturating_sub(n - 1) {
        let word = chars[i..i + n]
            .iter()
            .zip(NEEDLE.chars())
            .all(|(&(_, c), e)| c.to_ascii_lowercase() == e);
        let before_ok = i == 0 || !chars[i - 1].1.is_alphanumeric();
        let after_ok = i + n == chars.len() || !chars[i + n].1.is_alphanumeric();
        if word && before_ok && after_ok {
            let start = chars[i].0;
            let end = chars
                .get(i + n)
                .map(|&(b, _)| b)
                .unwrap_or(text.len());
            let answer = text[..start].trim().to_string();
            let tail = text[end..].trim_start();
            let explanation = tail.strip_prefix(':').unwrap_or(tail).trim();
            return (
                answer,
                if explanation.is_empty() { None } else { Some(explanation.to_string()) },
            );
        }
    }
    (text.trim().to_string(), None)
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus_shape(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<(), MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    for (index, refs) in references.iter().enumerate() {
        if refs.is_empty() {
            return Err(MetricError::EmptyReferences { index });
        }
    }
    Ok(())
}

/// Corpus BLEU-n: geometric mean of clipped n-gram precisions for orders
/// 1..=n, times the brevity penalty. Candidate n-gram counts are clipped at
/// the maximum count in any reference; the effective reference length is the
/// closest to the candidate's (shorter wins ties). Any zero precision makes
/// the score 0 — no smoothing.
pub fn bleu_n(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    n: usize,
) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    check_corpus_shape(candidates, references)?;

    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    let mut clipped = vec![0usize; n];
    let mut total = vec![0usize; n];

    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for order in 1..=n {
            let counts = ngram_counts(cand, order);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, order) {
                    let e = max_ref.entry(gram).or_insert(0);
                    *e = (*e).max(count);
                }
            }
            for (gram, &count) in &counts {
                total[order - 1] += count;
                clipped[order - 1] += count.min(max_ref.get(gram).copied().unwrap_or(0));
            }
        }
    }

    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    for order in 0..n {
        if clipped[order] == 0 || total[order] == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped[order] as f64 / total[order] as f64).ln();
    }
    let brevity = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(brevity * (log_sum / n as f64).exp())
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(curr[j]) };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L: the F-measure of longest-common-subsequence precision
/// and recall, with recall weighted by `beta` (the usual 1.2).
pub fn rouge_l_sentence(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(candidate, reference) as f64;
    let recall = lcs / reference.len() as f64;
    let precision = lcs / candidate.len() as f64;
    let denom = recall + beta * beta * precision;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta * beta) * recall * precision / denom
    }
}

/// Corpus ROUGE-L: per candidate the best score over its references, then
/// the mean over candidates.
pub fn rouge_l(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    beta: f64,
) -> Result<f64, MetricError> {
    check_corpus_shape(candidates, references)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            refs.iter()
                .map(|r| rouge_l_sentence(c, r, beta))
                .fold(0.0f64, f64::max)
        })
        .sum();
    Ok(sum / candidates.len() as f64)
}

// ---------------------------------------------------------------------------
// METEOR (exact-match variant)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeteorParams {
    /// Precision weight in the harmonic mean.
    pub alpha: f64,
    /// Fragmentation penalty exponent.
    pub beta: f64,
    /// Fragmentation penalty weight.
    pub gamma: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self { alpha: 0.9, beta: 3.0, gamma: 0.5 }
    }
}

/// Longest contiguous run of equal tokens over still-unmatched positions;
/// ties take the earliest candidate start, then the earliest reference
/// start. Returns (candidate start, reference start, length).
fn longest_free_fragment(
    cand: &[String],
    reference: &[String],
    cand_used: &[bool],
    ref_used: &[bool],
) -> Option<(usize, usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    for i in 0..cand.len() {
        for j in 0..reference.len() {
            let mut len = 0;
            while i + len < cand.len()
                && j + len < reference.len()
                && !cand_used[i + len]
                && !ref_used[j + len]
                && cand[i + len] == reference[j + len]
            {
                len += 1;
            }
            if len > 0 {
                let better = match best {
                    None => true,
                    Some((bi, bj, bl)) => len > bl || (len == bl && (i, j) < (bi, bj)),
                };
                if better {
                    best = Some((i, j, len));
                }
            }
        }
    }
    best
}

/// Exact-match METEOR for one sentence pair. Unigrams are aligned greedily
/// by longest contiguous fragment first, which always reaches the maximum
/// match count (per-token-type minimum of the two sides); the number of
/// fragments is the chunk count in the fragmentation penalty
/// `gamma * (chunks/matches)^beta` applied to the weighted harmonic mean
/// `P*R / (alpha*P + (1-alpha)*R)`.
pub fn meteor_lite(candidate: &[String], reference: &[String], params: MeteorParams) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut cand_used = vec![false; candidate.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut matches = 0usize;
    let mut chunks = 0usize;
    while let Some((i, j, len)) = longest_free_fragment(candidate, reference, &cand_used, &ref_used)
    {
        for k in 0..len {
            cand_used[i + k] = true;
            ref_used[j + k] = true;
        }
        matches += len;
        chunks += 1;
    }
    if matches == 0 {
        return 0.0;
    }
    let precision = matches as f64 / candidate.len() as f64;
    let recall = matches as f64 / reference.len() as f64;
    let f_mean = precision * recall / (params.alpha * precision + (1.0 - params.alpha) * recall);
    let penalty = params.gamma * (chunks as f64 / matches as f64).powf(params.beta);
    f_mean * (1.0 - penalty)
}

/// Corpus METEOR: best score over references per candidate, averaged.
pub fn meteor_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    params: MeteorParams,
) -> Result<f64, MetricError> {
    check_corpus_shape(candidates, references)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            refs.iter()
                .map(|r| meteor_lite(c, r, params))
                .fold(0.0f64, f64::max)
        })
        .sum();
    Ok(sum / candidates.len() as f64)
}

// ---------------------------------------------------------------------------
// CIDEr-D
// ---------------------------------------------------------------------------

const CIDER_MAX_N: usize = 4;

#[derive(Debug, Clone)]
pub struct CiderOutcome {
    /// Corpus mean, on the conventional 0..10 scale.
    pub mean: f64,
    pub per_candidate: Vec<f64>,
    pub warnings: Vec<String>,
}

type NgramVec = HashMap<Vec<String>, f64>;

fn cider_vectors(tokens: &[String], idf: &HashMap<Vec<String>, f64>, n_docs: f64) -> (Vec<NgramVec>, Vec<f64>) {
    let mut vecs: Vec<NgramVec> = vec![HashMap::new(); CIDER_MAX_N];
    let mut norms = vec![0.0f64; CIDER_MAX_N];
    for n in 1..=CIDER_MAX_N {
        if tokens.len() < n {
            continue;
        }
        let mut counts: HashMap<Vec<String>, f64> = HashMap::new();
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
        for (gram, tf) in counts {
            let weight = idf
                .get(&gram)
                .map(|&df| (n_docs / df.max(1.0)).ln())
                .unwrap_or_else(|| n_docs.ln());
            let value = tf * weight;
            norms[n - 1] += value * value;
            vecs[n - 1].insert(gram, value);
        }
    }
    (vecs, norms.into_iter().map(f64::sqrt).collect())
}

/// CIDEr-D: consensus TF-IDF similarity over 1- to 4-grams. Document
/// frequency counts how many reference sets contain each n-gram; each
/// candidate/reference pair scores a clipped cosine
/// `Σ min(c,r)·r / (‖c‖‖r‖)` per order, damped by a Gaussian length
/// penalty `exp(−(Δlen)²/(2σ²))`, averaged over references and orders, and
/// scaled by 10. A corpus with a single reference set has no usable
/// document frequencies; term frequency alone is used and a warning says so.
pub fn cider_d(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    sigma: f64,
) -> Result<CiderOutcome, MetricError> {
    check_corpus_shape(candidates, references)?;
    let n_images = references.len();
    let mut warnings = Vec::new();

    // Document frequency over reference sets (each set counts once).
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    let n_docs = if n_images >= 2 {
        for refs in references {
            let mut seen: HashSet<Vec<String>> = HashSet::new();
            for r in refs {
                for n in 1..=CIDER_MAX_N {
                    if r.len() >= n {
                        for w in r.windows(n) {
                            seen.insert(w.to_vec());
                        }
                    }
                }
            }
            for gram in seen {
                *df.entry(gram).or_insert(0.0) += 1.0;
            }
        }
        n_images as f64
    } else {
        // ln(e * 1) = 1: uniform weight, plain term-frequency cosine.
        warnings.push(
            "corpus has a single reference set; using term frequency without idf".to_string(),
        );
        std::f64::consts::E
    };

    let mut per_candidate = Vec::with_capacity(candidates.len());
    for (cand, refs) in candidates.iter().zip(references) {
        let (c_vecs, c_norms) = cider_vectors(cand, &df, n_docs);
        let mut ref_avg = 0.0f64;
        for r in refs {
            let (r_vecs, r_norms) = cider_vectors(r, &df, n_docs);
            let delta = cand.len() as f64 - r.len() as f64;
            let damp = (-delta * delta / (2.0 * sigma * sigma)).exp();
            let mut order_sum = 0.0;
            for n in 0..CIDER_MAX_N {
                if c_norms[n] == 0.0 || r_norms[n] == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (gram, &cv) in &c_vecs[n] {
                    if let Some(&rv) = r_vecs[n].get(gram) {
                        dot += cv.min(rv) * rv;
                    }
                }
                order_sum += damp * dot / (c_norms[n] * r_norms[n]);
            }
            ref_avg += order_sum / CIDER_MAX_N as f64;
        }
        per_candidate.push(10.0 * ref_avg / refs.len() as f64);
    }

    let mean = per_candidate.iter().sum::<f64>() / per_candidate.len() as f64;
    Ok(CiderOutcome { mean, per_candidate, warnings })
}

// ---------------------------------------------------------------------------
// Embedding-based scoring
// ---------------------------------------------------------------------------

/// Provides one vector per token; swap in real model embeddings here.
pub trait TokenEmbedder {
    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>>;
}

/// Deterministic stand-in embedder: each token hashes to a fixed unit
/// vector, so identical tokens always score 1 and unrelated tokens are
/// uncorrelated. Good enough to exercise thresholds and pipelines without
/// a model.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder {
    pub dim_seed: u64,
}

impl TokenEmbedder for HashEmbedder {
    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        tokens
            .iter()
            .map(|t| {
                let seed = fnv1a64(t.as_bytes()) ^ self.dim_seed;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in &mut v {
                        *x /= norm;
                    }
                }
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy embedding match: precision averages each candidate token's best
/// cosine against the reference, recall the reverse, F1 combines them.
/// Two empty texts count as a perfect match; one empty side scores 0.
pub fn bert_score(
    candidate: &[String],
    reference: &[String],
    embedder: &dyn TokenEmbedder,
) -> BertScore {
    if candidate.is_empty() && reference.is_empty() {
        return BertScore { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    if candidate.is_empty() || reference.is_empty() {
        return BertScore { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let c_emb = embedder.embed(candidate);
    let r_emb = embedder.embed(reference);
    let best = |from: &[Vec<f64>], against: &[Vec<f64>]| -> f64 {
        from.iter()
            .map(|v| against.iter().map(|w| cosine(v, w)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    let precision = best(&c_emb, &r_emb);
    let recall = best(&r_emb, &c_emb);
    let f1 = if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    BertScore { precision, recall, f1 }
}

// ---------------------------------------------------------------------------
// Corpus evaluation
// ---------------------------------------------------------------------------

/// One generated output, answer and explanation still joined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NlePrediction {
    #[serde(deserialize_with = "de_string_or_number")]
    pub id: String,
    pub text: String,
}

/// Gold answer plus one or more reference explanations. The wire form also
/// accepts a single `"explanation"` string.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NleGold {
    #[serde(deserialize_with = "de_string_or_number")]
    pub id: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default, alias = "explanation", deserialize_with = "de_one_or_many")]
    pub explanations: Vec<String>,
}

/// Accept a reference list or one bare reference string.
fn de_one_or_many<'de, D: serde::Deserializer<'de>>(
    deserializer: D,
) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(deserializer)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExplanationMetric {
    RougeL,
    Meteor,
    CiderD,
    BertScore,
}

impl fmt::Display for ExplanationMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExplanationMetric::RougeL => "ROUGE-L",
            ExplanationMetric::Meteor => "METEOR",
            ExplanationMetric::CiderD => "CIDEr-D",
            ExplanationMetric::BertScore => "BERTScore",
        })
    }
}

#[derive(Debug, Clone)]
pub struct EvilConfig {
    /// Embedding-score threshold above which an answer counts as correct.
    pub answer_filter: f64,
    /// Metrics whose harmonic mean forms the explanation score.
    pub metrics: Vec<ExplanationMetric>,
    pub cider_sigma: f64,
    pub rouge_beta: f64,
    pub meteor: MeteorParams,
}

impl Default for EvilConfig {
    fn default() -> Self {
        Self {
            answer_filter: 0.92,
            metrics: vec![
                ExplanationMetric::RougeL,
                ExplanationMetric::Meteor,
                ExplanationMetric::CiderD,
                ExplanationMetric::BertScore,
            ],
            cider_sigma: 6.0,
            rouge_beta: 1.2,
            meteor: MeteorParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusEvaluation {
    pub pairs: usize,
    pub correct: usize,
    /// Fraction of answers clearing the filter.
    pub s_t: f64,
    /// Harmonic mean of explanation metrics over correct pairs.
    pub s_e: f64,
    /// `s_t * s_e`.
    pub s_o: f64,
    /// Each configured metric over the correct subset (CIDEr-D on 0..1).
    pub explanation_metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// The overall score folds task accuracy into explanation quality.
pub fn overall_score(s_t: f64, s_e: f64) -> f64 {
    s_t * s_e
}

/// Score a prediction corpus against gold records (matched by id, both
/// sides exactly once). See the module docs for the S_T / S_E / S_O
/// construction. CIDEr-D enters the harmonic mean on a 0..1 scale.
pub fn evaluate_corpus(
    predictions: &[NlePrediction],
    golds: &[NleGold],
    cfg: &EvilConfig,
    embedder: &dyn TokenEmbedder,
) -> Result<CorpusEvaluation, MetricError> {
    if predictions.is_empty() || golds.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut gold_by_id: BTreeMap<&str, &NleGold> = BTreeMap::new();
    for g in golds {
        if gold_by_id.insert(&g.id, g).is_some() {
            return Err(MetricError::DuplicateId { id: g.id.clone() });
        }
    }
    let mut seen: HashSet<&str> = HashSet::new();
    let mut warnings = Vec::new();

    let mut correct_pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = Vec::new();
    let mut correct = 0usize;
    for p in predictions {
        if !seen.insert(&p.id) {
            return Err(MetricError::DuplicateId { id: p.id.clone() });
        }
        let gold = gold_by_id
            .get(p.id.as_str())
            .ok_or_else(|| MetricError::UnmatchedId { id: p.id.clone() })?;
        if gold.explanations.is_empty() {
            return Err(MetricError::EmptyReferences { index: correct_pairs.len() });
        }
        let (answer, explanation) = split_answer_explanation(&p.text);
        let score = bert_score(&tokenize(&answer), &tokenize(&gold.answer), embedder);
        if score.f1 >= cfg.answer_filter {
            correct += 1;
            let cand = explanation.as_deref().map(tokenize).unwrap_or_default();
            if cand.is_empty() {
                warnings.push(format!("prediction {:?} has no explanation", p.id));
            }
            correct_pairs
                .push((cand, gold.explanations.iter().map(|e| tokenize(e)).collect()));
        }
    }
    if let Some(missing) = golds.iter().find(|g| !seen.contains(g.id.as_str())) {
        return Err(MetricError::UnmatchedId { id: missing.id.clone() });
    }

    let pairs = predictions.len();
    let s_t = correct as f64 / pairs as f64;
    let mut explanation_metrics = BTreeMap::new();
    let mut s_e = 0.0;

    if correct == 0 {
        warnings.push("no answers cleared the filter; explanation score is 0".to_string());
    } else {
        let cands: Vec<Vec<String>> = correct_pairs.iter().map(|(c, _)| c.clone()).collect();
        let refs: Vec<Vec<Vec<String>>> = correct_pairs.iter().map(|(_, r)| r.clone()).collect();
        for metric in &cfg.metrics {
            let value = match metric {
                ExplanationMetric::RougeL => rouge_l(&cands, &refs, cfg.rouge_beta)?,
                ExplanationMetric::Meteor => meteor_corpus(&cands, &refs, cfg.meteor)?,
                ExplanationMetric::CiderD => {
                    let outcome = cider_d(&cands, &refs, cfg.cider_sigma)?;
                    warnings.extend(outcome.warnings);
                    outcome.mean / 10.0
                }
                ExplanationMetric::BertScore => {
                    let sum: f64 = cands
                        .iter()
                        .zip(&refs)
                        .map(|(c, rs)| {
                            rs.iter()
                                .map(|r| bert_score(c, r, embedder).f1)
                                .fold(0.0f64, f64::max)
                        })
                        .sum();
                    sum / cands.len() as f64
                }
            };
            explanation_metrics.insert(metric.to_string(), value);
        }
        if let Some((name, _)) = explanation_metrics.iter().find(|(_, &v)| v <= 0.0) {
            warnings.push(format!("{name} is 0 over the correct subset; explanation score is 0"));
        } else if !explanation_metrics.is_empty() {
            let inv: f64 = explanation_metrics.values().map(|v| 1.0 / v).sum();
            s_e = explanation_metrics.len() as f64 / inv;
        }
    }

    Ok(CorpusEvaluation {
        pairs,
        correct,
        s_t,
        s_e,
        s_o: overall_score(s_t, s_e),
        explanation_metrics,
        warnings,
    })
}
