//! Graph matching and recall for location-free scene graphs.
//!
//! Without boxes there is no IoU to anchor instances, so scoring a predicted
//! graph against a gold graph means finding a correspondence between their
//! object instances. Two same-label instances may only map to each other
//! (`person1` in the prediction can stand for `person0` in the gold), the
//! map must be injective within each label, and a gold edge counts as
//! matched when its mapped endpoints plus relation exist in the prediction.
//! Recall is the best achievable matched fraction over correspondences.
//!
//! Two searches are provided: [`exact_best_match`] enumerates every
//! correspondence (guarded, for small graphs and for calibrating), and
//! [`hts_match`] is a beam search over gold nodes in descending degree order
//! that scales to real graphs. [`recall_at_k`] truncates the prediction to
//! its top-k triplets before matching, and [`corpus_recall`] aggregates over
//! a corpus in parallel.

use crate::sg_model::{normalize_predicate, to_graph, GraphView, ObjectRef, SceneGraph};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error(
        "exact matching would enumerate about {bound} correspondences (limit {limit}); \
         use the heuristic search for graphs this size"
    )]
    ComplexityGuard { bound: u128, limit: u64 },
    #[error("confidence ranking requested but the prediction carries no confidence scores")]
    MissingConfidence,
    #[error("cannot aggregate over an empty corpus")]
    EmptyCorpus,
}

/// How to search for the best instance correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMethod {
    /// Enumerate every correspondence; errors out past the complexity guard.
    Exact,
    /// Beam search keeping `branching` partial mappings per step.
    Heuristic { branching: usize },
}

/// How to pick the top-k triplets of a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ranking {
    /// Keep the first k triplets as generated.
    GenerationOrder,
    /// Keep the k highest-confidence triplets (ties keep generation order).
    ConfidenceDesc,
}

#[derive(Debug, Clone, Copy)]
pub struct MatchConfig {
    pub method: MatchMethod,
    pub ranking: Ranking,
    /// Maximum number of correspondences [`MatchMethod::Exact`] may enumerate.
    pub guard_limit: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            method: MatchMethod::Heuristic { branching: 5 },
            ranking: Ranking::GenerationOrder,
            guard_limit: 1_000_000,
        }
    }
}

/// Outcome of matching one prediction against one gold graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Gold edges reproduced under the best correspondence found.
    pub matched: usize,
    /// Distinct gold edges after relation normalization (the denominator).
    pub gold_total: usize,
    /// Best gold-to-prediction instance correspondence found.
    pub mapping: BTreeMap<ObjectRef, ObjectRef>,
}

impl MatchResult {
    /// Matched fraction; an edgeless gold graph counts as fully recalled.
    pub fn recall(&self) -> f64 {
        if self.gold_total == 0 {
            1.0
        } else {
            self.matched as f64 / self.gold_total as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Shared problem setup
// ---------------------------------------------------------------------------

/// Both graphs indexed into dense node ids and interned relation ids, with
/// relations compared in normalized form and gold edges deduplicated.
struct Problem {
    gold_nodes: Vec<ObjectRef>,
    pred_nodes: Vec<ObjectRef>,
    /// (subject, relation, object) over gold node ids; set semantics.
    gold_edges: Vec<(usize, u32, usize)>,
    /// Prediction edges over prediction node ids, for O(1) membership.
    pred_edges: HashSet<(usize, u32, usize)>,
    /// Per label: (gold node ids, prediction node ids), both sorted.
    groups: Vec<(Vec<usize>, Vec<usize>)>,
}

impl Problem {
    fn new(pred: &GraphView, gold: &GraphView) -> Self {
        let gold_nodes: Vec<ObjectRef> = gold.nodes.iter().cloned().collect();
        let pred_nodes: Vec<ObjectRef> = pred.nodes.iter().cloned().collect();
        let gold_id: BTreeMap<&ObjectRef, usize> =
            gold_nodes.iter().enumerate().map(|(i, n)| (n, i)).collect();
        let pred_id: BTreeMap<&ObjectRef, usize> =
            pred_nodes.iter().enumerate().map(|(i, n)| (n, i)).collect();

        let mut relation_ids: BTreeMap<String, u32> = BTreeMap::new();
        let mut intern = |p: &str| {
            let next = relation_ids.len() as u32;
            *relation_ids.entry(normalize_predicate(p)).or_insert(next)
        };

        let gold_edges: Vec<(usize, u32, usize)> = gold
            .edges
            .iter()
            .map(|e| (gold_id[&e.subject], intern(&e.predicate), gold_id[&e.object]))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let pred_edges: HashSet<(usize, u32, usize)> = pred
            .edges
            .iter()
            .map(|e| (pred_id[&e.subject], intern(&e.predicate), pred_id[&e.object]))
            .collect();

        let mut by_name: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, n) in gold_nodes.iter().enumerate() {
            by_name.entry(n.name()).or_default().0.push(i);
        }
        for (i, n) in pred_nodes.iter().enumerate() {
            by_name.entry(n.name()).or_default().1.push(i);
        }
        let groups = by_name.into_values().collect();

        Self { gold_nodes, pred_nodes, gold_edges, pred_edges, groups }
    }

    fn score(&self, mapping: &[Option<usize>]) -> usize {
        self.gold_edges
            .iter()
            .filter(|&&(s, r, o)| match (mapping[s], mapping[o]) {
                (Some(ms), Some(mo)) => self.pred_edges.contains(&(ms, r, mo)),
                _ => false,
            })
            .count()
    }

    fn result(&self, matched: usize, mapping: &[Option<usize>]) -> MatchResult {
        let map = mapping
            .iter()
            .enumerate()
            .filter_map(|(g, p)| {
                p.map(|p| (self.gold_nodes[g].clone(), self.pred_nodes[p].clone()))
            })
            .collect();
        MatchResult { matched, gold_total: self.gold_edges.len(), mapping: map }
    }
}

/// Falling factorial `n * (n-1) * ... * (n-k+1)`, saturating.
fn permutations(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128))
}

/// Number of correspondences exact search enumerates: per label, every
/// injective assignment between the smaller and larger instance set.
pub fn exact_search_space(pred: &GraphView, gold: &GraphView) -> u128 {
    Problem::new(pred, gold)
        .groups
        .iter()
        .fold(1u128, |acc, (g, p)| {
            acc.saturating_mul(permutations(g.len().max(p.len()), g.len().min(p.len())))
        })
}

// ---------------------------------------------------------------------------
// Exact search
// ---------------------------------------------------------------------------

/// Enumerate ordered selections of `k` distinct values from `0..n`.
fn for_each_injection(k: usize, n: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(k: usize, n: usize, chosen: &mut Vec<usize>, used: &mut [bool], f: &mut impl FnMut(&[usize])) {
        if chosen.len() == k {
            f(chosen);
            return;
        }
        for v in 0..n {
            if !used[v] {
                used[v] = true;
                chosen.push(v);
                rec(k, n, chosen, used, f);
                chosen.pop();
                used[v] = false;
            }
        }
    }
    rec(k, n, &mut Vec::with_capacity(k), &mut vec![false; n], f);
}

/// Best correspondence by exhaustive enumeration. Within each label the
/// smaller instance set maps injectively into the larger one (leaving a
/// node unmapped can never score better than mapping it), and every
/// combination across labels is scored. The search space is capped by
/// `guard_limit`; larger problems return [`MatchError::ComplexityGuard`].
pub fn exact_best_match(
    pred: &GraphView,
    gold: &GraphView,
    guard_limit: u64,
) -> Result<MatchResult, MatchError> {
    let problem = Problem::new(pred, gold);
    let bound = problem.groups.iter().fold(1u128, |acc, (g, p)| {
        acc.saturating_mul(permutations(g.len().max(p.len()), g.len().min(p.len())))
    });
    if bound > guard_limit as u128 {
        return Err(MatchError::ComplexityGuard { bound, limit: guard_limit });
    }

    let mut mapping: Vec<Option<usize>> = vec![None; problem.gold_nodes.len()];
    let mut best_matched = 0usize;
    let mut best_mapping = mapping.clone();
    let mut first = true;

    // Depth-first over labels; within a label, over injective assignments.
    fn rec(
        problem: &Problem,
        group: usize,
        mapping: &mut Vec<Option<usize>>,
        best_matched: &mut usize,
        best_mapping: &mut Vec<Option<usize>>,
        first: &mut bool,
    ) {
        if group == problem.groups.len() {
            let matched = problem.score(mapping);
            if *first || matched > *best_matched {
                *first = false;
                *best_matched = matched;
                best_mapping.clone_from(mapping);
            }
            return;
        }
        let (gold_ids, pred_ids) = &problem.groups[group];
        if gold_ids.len() <= pred_ids.len() {
            // Choose a prediction node for every gold node of this label.
            for_each_injection(gold_ids.len(), pred_ids.len(), &mut |choice| {
                for (slot, &pick) in gold_ids.iter().zip(choice) {
                    mapping[*slot] = Some(pred_ids[pick]);
                }
                rec(problem, group + 1, mapping, best_matched, best_mapping, first);
                for slot in gold_ids {
                    mapping[*slot] = None;
                }
            });
        } else {
            // More gold than prediction nodes: choose a gold node for every
            // prediction node; the rest stay unmapped.
            for_each_injection(pred_ids.len(), gold_ids.len(), &mut |choice| {
                for (&pred_node, &pick) in pred_ids.iter().zip(choice) {
                    mapping[gold_ids[pick]] = Some(pred_node);
                }
                rec(problem, group + 1, mapping, best_matched, best_mapping, first);
                for &pick in choice {
                    mapping[gold_ids[pick]] = None;
                }
            });
        }
    }
    rec(&problem, 0, &mut mapping, &mut best_matched, &mut best_mapping, &mut first);

    Ok(problem.result(best_matched, &best_mapping))
}

// ---------------------------------------------------------------------------
// Heuristic tree search
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct BeamState {
    /// gold node id -> prediction node id.
    mapping: Vec<Option<usize>>,
    /// Bitset over prediction node ids already taken.
    used: Vec<u64>,
    matched: usize,
}

impl BeamState {
    fn uses(&self, p: usize) -> bool {
        self.used[p / 64] >> (p % 64) & 1 == 1
    }

    fn take(&mut self, p: usize) {
        self.used[p / 64] |= 1 << (p % 64);
    }

    /// Deterministic order among equal scores: lexicographic on the mapping
    /// with unmapped slots last.
    fn tiebreak_key(&self) -> Vec<usize> {
        self.mapping.iter().map(|m| m.unwrap_or(usize::MAX)).collect()
    }
}

/// Beam search for a good correspondence. Gold nodes are visited in
/// descending degree order; each step extends every kept state with each
/// free same-label prediction node (or leaves the node unmapped) and keeps
/// the `branching` best states. Ties prefer mapping over not mapping, then
/// the candidate whose instance index matches, then the nearest index.
/// Never fails; `branching` is clamped to at least 1.
pub fn hts_match(pred: &GraphView, gold: &GraphView, branching: usize) -> MatchResult {
    let problem = Problem::new(pred, gold);
    let branching = branching.max(1);
    let n_gold = problem.gold_nodes.len();
    let words = problem.pred_nodes.len().div_ceil(64).max(1);

    // Same-label prediction candidates per gold node.
    let mut candidates: Vec<Vec<usize>> = vec![Vec::new(); n_gold];
    for (gold_ids, pred_ids) in &problem.groups {
        for &g in gold_ids {
            candidates[g] = pred_ids.clone();
        }
    }

    // Incident edges per gold node, for incremental scoring.
    let mut incident: Vec<Vec<(usize, u32, usize)>> = vec![Vec::new(); n_gold];
    for &(s, r, o) in &problem.gold_edges {
        incident[s].push((s, r, o));
        if o != s {
            incident[o].push((s, r, o));
        }
    }

    let mut order: Vec<usize> = (0..n_gold).collect();
    order.sort_by(|&a, &b| {
        incident[b]
            .len()
            .cmp(&incident[a].len())
            .then_with(|| problem.gold_nodes[a].cmp(&problem.gold_nodes[b]))
    });

    let mut beam = vec![BeamState {
        mapping: vec![None; n_gold],
        used: vec![0; words],
        matched: 0,
    }];

    for &u in &order {
        let mut next: Vec<BeamState> = Vec::with_capacity(beam.len() * (candidates[u].len() + 1));
        for state in &beam {
            // Score gain: gold edges at `u` whose other endpoint is mapped
            // and whose image exists in the prediction.
            let gain = |v: usize| -> usize {
                incident[u]
                    .iter()
                    .filter(|&&(s, r, o)| {
                        let ms = if s == u { Some(v) } else { state.mapping[s] };
                        let mo = if o == u { Some(v) } else { state.mapping[o] };
                        match (ms, mo) {
                            (Some(ms), Some(mo)) => problem.pred_edges.contains(&(ms, r, mo)),
                            _ => false,
                        }
                    })
                    .count()
            };
            for &v in &candidates[u] {
                if state.uses(v) {
                    continue;
                }
                let mut child = state.clone();
                child.mapping[u] = Some(v);
                child.take(v);
                child.matched += gain(v);
                next.push(child);
            }
            next.push(state.clone());
        }
        next.sort_by(|a, b| {
            b.matched.cmp(&a.matched).then_with(|| {
                let key = |s: &BeamState| match s.mapping[u] {
                    // Mapped beats unmapped; identity index beats near index.
                    Some(v) => {
                        let vi = problem.pred_nodes[v].index();
                        let ui = problem.gold_nodes[u].index();
                        (0u8, u32::abs_diff(vi, ui), vi)
                    }
                    None => (1u8, u32::MAX, u32::MAX),
                };
                key(a).cmp(&key(b)).then_with(|| a.tiebreak_key().cmp(&b.tiebreak_key()))
            })
        });
        next.truncate(branching);
        beam = next;
    }

    let best = beam
        .into_iter()
        .min_by(|a, b| b.matched.cmp(&a.matched).then_with(|| a.tiebreak_key().cmp(&b.tiebreak_key())))
        .expect("beam never empty");
    problem.result(best.matched, &best.mapping)
}

/// Match two graph views under the configured method.
pub fn match_views(
    pred: &GraphView,
    gold: &GraphView,
    cfg: &MatchConfig,
) -> Result<MatchResult, MatchError> {
    match cfg.method {
        MatchMethod::Exact => exact_best_match(pred, gold, cfg.guard_limit),
        MatchMethod::Heuristic { branching } => Ok(hts_match(pred, gold, branching)),
    }
}

// ---------------------------------------------------------------------------
// Recall@k
// ---------------------------------------------------------------------------

/// Indices of the top-k triplets under the configured ranking.
fn top_k_triplets(
    pred: &SceneGraph,
    confidences: Option<&[f64]>,
    k: usize,
    ranking: Ranking,
) -> Result<SceneGraph, MatchError> {
    match ranking {
        Ranking::GenerationOrder => Ok(pred.truncated(k)),
        Ranking::ConfidenceDesc => {
            let scores = confidences.ok_or(MatchError::MissingConfidence)?;
            let mut order: Vec<usize> = (0..pred.triplets.len()).collect();
            order.sort_by(|&a, &b| {
                let ca = scores.get(a).copied().unwrap_or(f64::NEG_INFINITY);
                let cb = scores.get(b).copied().unwrap_or(f64::NEG_INFINITY);
                cb.total_cmp(&ca).then(a.cmp(&b))
            });
            order.truncate(k);
            order.sort_unstable(); // keep generation order inside the cut
            Ok(SceneGraph::new(
                pred.image_id.clone(),
                order.iter().map(|&i| pred.triplets[i].clone()).collect(),
            ))
        }
    }
}

/// Recall at each requested k: the prediction is cut to its top-k triplets
/// (no-relation pairs spend budget too), then matched against the full gold
/// graph.
pub fn recall_at_k(
    pred: &SceneGraph,
    confidences: Option<&[f64]>,
    gold: &SceneGraph,
    ks: &[usize],
    cfg: &MatchConfig,
) -> Result<BTreeMap<usize, MatchResult>, MatchError> {
    let gold_view = to_graph(gold);
    let mut out = BTreeMap::new();
    for &k in ks {
        let cut = top_k_triplets(pred, confidences, k, cfg.ranking)?;
        out.insert(k, match_views(&to_graph(&cut), &gold_view, cfg)?);
    }
    Ok(out)
}

/// One evaluation pair for [`corpus_recall`].
#[derive(Debug, Clone)]
pub struct RecallPair {
    pub gold: SceneGraph,
    pub pred: SceneGraph,
    pub confidences: Option<Vec<f64>>,
}

/// Corpus aggregate at one k.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct KRecall {
    /// Pooled recall: total matched over total gold edges.
    pub micro: f64,
    /// Mean of per-pair recalls.
    #[serde(rename = "macro")]
    pub macro_: f64,
    pub matched: u64,
    pub gold: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusRecallReport {
    pub pairs: usize,
    /// Keyed by k.
    pub recall: BTreeMap<usize, KRecall>,
}

/// Evaluate every pair (in parallel) and aggregate micro and macro recall
/// per k. Results are independent of thread count and schedule.
pub fn corpus_recall(
    pairs: &[RecallPair],
    ks: &[usize],
    cfg: &MatchConfig,
) -> Result<CorpusRecallReport, MatchError> {
    if pairs.is_empty() {
        return Err(MatchError::EmptyCorpus);
    }
    let per_pair: Vec<BTreeMap<usize, MatchResult>> = pairs
        .par_iter()
        .map(|p| recall_at_k(&p.pred, p.confidences.as_deref(), &p.gold, ks, cfg))
        .collect::<Result<_, _>>()?;

    let mut recall = BTreeMap::new();
    for &k in ks {
        let mut matched = 0u64;
        let mut gold = 0u64;
        let mut recall_sum = 0.0f64;
        for results in &per_pair {
            let r = &results[&k];
            matched += r.matched as u64;
            gold += r.gold_total as u64;
            recall_sum += r.recall();
        }
        let micro = if gold == 0 { 1.0 } else { matched as f64 / gold as f64 };
        recall.insert(
            k,
            KRecall { micro, macro_: recall_sum / per_pair.len() as f64, matched, gold },
        );
    }
    Ok(CorpusRecallReport { pairs: pairs.len(), recall })
}
