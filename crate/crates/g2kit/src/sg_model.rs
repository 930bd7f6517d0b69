//! Location-free scene-graph data model and the triplet sequence text
//! format.
//!
//! A scene graph is an ordered list of triplets over indexed object
//! instances. Instances of the same label are told apart by a left-to-right
//! ordinal (`person0`, `person1`, ...), not by boxes. The wire text format
//! is one graph per line, each a `"; "`-joined list of segments:
//!
//! ```text
//! subject object relation; subject object relation; ...
//! ```
//!
//! Segment token order is subject, object, relation. An index suffix is the
//! trailing digits of a label token and defaults to 0 when absent. The
//! relation token `None` (any case) is the distinguished no-relation marker
//! used to pair unrelated objects. Underscores inside a relation token
//! stand for spaces (`sitting_in` reads back as `"sitting in"`), which keeps
//! every segment exactly three whitespace tokens wide.
//!
//! Parsing is total: malformed segments are skipped and reported as
//! warnings, never as errors. Serialization emits an index suffix for a
//! label only when the graph holds a higher-indexed instance of the same
//! label, so singletons stay bare (`person cup holding`).

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid object name {name:?}: {reason}")]
    BadName { name: String, reason: &'static str },
    #[error("invalid predicate {predicate:?}: {reason}")]
    BadPredicate { predicate: String, reason: &'static str },
    #[error("self relation on {node}: subject equals object with a non-None predicate")]
    SelfRelation { node: String },
    #[error("non-finite coordinate for object {name:?}")]
    BadCoordinate { name: String },
    #[error("graph {image_id:?}: only some triplets carry a confidence score")]
    PartialConfidence { image_id: String },
    #[error("graph file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph json (line {line}): {source}")]
    Json { line: usize, source: serde_json::Error },
}

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// One object instance: a lowercase label plus a left-to-right ordinal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ObjectRef {
    name: String,
    index: u32,
}

#[derive(Deserialize)]
struct RawObjectRef {
    name: String,
    index: u32,
}

impl<'de> Deserialize<'de> for ObjectRef {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawObjectRef::deserialize(deserializer)?;
        ObjectRef::new(&raw.name, raw.index).map_err(serde::de::Error::custom)
    }
}

impl ObjectRef {
    /// Validate and build a reference. Names are lowercased; they must be
    /// non-empty, contain no whitespace or semicolons, and must not end in a
    /// digit (trailing digits are the index suffix in the text format)
    /// unless the whole name is digits.
    pub fn new(name: &str, index: u32) -> Result<Self, ModelError> {
        let name = name.to_lowercase();
        if name.is_empty() {
            return Err(ModelError::BadName { name, reason: "empty" });
        }
        if name.chars().any(|c| c.is_whitespace() || c == ';') {
            return Err(ModelError::BadName { name, reason: "contains whitespace or ';'" });
        }
        let all_digits = name.chars().all(|c| c.is_ascii_digit());
        if !all_digits && name.ends_with(|c: char| c.is_ascii_digit()) {
            return Err(ModelError::BadName {
                name,
                reason: "trailing digits are reserved for the instance index",
            });
        }
        Ok(Self { name, index })
    }

    /// Split a sequence token into label and index suffix. `"person12"`
    /// parses as `person` #12; a token without trailing digits gets index 0;
    /// an all-digit token is kept whole as the name.
    pub fn parse_token(token: &str) -> Self {
        let token = token.to_lowercase();
        let split = token.len() - token.chars().rev().take_while(|c| c.is_ascii_digit()).count();
        if split == 0 || split == token.len() {
            Self { name: token, index: 0 }
        } else {
            let index = token[split..].parse().unwrap_or(0);
            Self { name: token[..split].to_string(), index }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn index(&self) -> u32 {
        self.index
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.name, self.index)
    }
}

/// The distinguished no-relation marker as spelled in the text format.
pub const NONE_PREDICATE: &str = "None";

/// One `subject --predicate--> object` statement. `predicate: None` is the
/// distinguished no-relation pairing.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub subject: ObjectRef,
    pub predicate: Option<String>,
    pub object: ObjectRef,
}

impl Triplet {
    /// Validating constructor: a predicate must be non-empty and free of
    /// semicolons, and subject may equal object only for no-relation pairs.
    pub fn new(
        subject: ObjectRef,
        predicate: Option<String>,
        object: ObjectRef,
    ) -> Result<Self, ModelError> {
        if let Some(p) = &predicate {
            if p.trim().is_empty() {
                return Err(ModelError::BadPredicate { predicate: p.clone(), reason: "empty" });
            }
            if p.contains(';') {
                return Err(ModelError::BadPredicate {
                    predicate: p.clone(),
                    reason: "contains ';'",
                });
            }
            if subject == object {
                return Err(ModelError::SelfRelation { node: subject.to_string() });
            }
        }
        Ok(Self { subject, predicate, object })
    }

    pub fn is_none_pair(&self) -> bool {
        self.predicate.is_none()
    }
}

/// An ordered scene graph; generation order of triplets is preserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneGraph {
    pub image_id: String,
    pub triplets: Vec<Triplet>,
}

impl SceneGraph {
    pub fn new(image_id: impl Into<String>, triplets: Vec<Triplet>) -> Self {
        Self { image_id: image_id.into(), triplets }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// The first `k` triplets in generation order, as a new graph.
    pub fn truncated(&self, k: usize) -> SceneGraph {
        SceneGraph {
            image_id: self.image_id.clone(),
            triplets: self.triplets.iter().take(k).cloned().collect(),
        }
    }

    /// Indices of triplets that repeat an earlier one. Duplicates are legal
    /// on input but worth surfacing.
    pub fn duplicate_indices(&self) -> Vec<usize> {
        let mut seen = HashSet::new();
        let mut dups = Vec::new();
        for (i, t) in self.triplets.iter().enumerate() {
            if !seen.insert(t) {
                dups.push(i);
            }
        }
        dups
    }
}

/// Directed edge in a [`GraphView`]; no-relation pairs never become edges.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub subject: ObjectRef,
    pub predicate: String,
    pub object: ObjectRef,
}

/// Set view of a scene graph: deduplicated nodes and relation edges.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GraphView {
    pub nodes: BTreeSet<ObjectRef>,
    pub edges: BTreeSet<Edge>,
}

impl GraphView {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// Collapse a triplet list into node and edge sets. Endpoints of no-relation
/// pairs still count as nodes; only non-None triplets become edges, and
/// repeats collapse.
pub fn to_graph(g: &SceneGraph) -> GraphView {
    let mut view = GraphView::default();
    for t in &g.triplets {
        view.nodes.insert(t.subject.clone());
        view.nodes.insert(t.object.clone());
        if let Some(p) = &t.predicate {
            view.edges.insert(Edge {
                subject: t.subject.clone(),
                predicate: p.clone(),
                object: t.object.clone(),
            });
        }
    }
    view
}

/// Canonical predicate form for comparison: lowercase with underscores read
/// as spaces and whitespace runs collapsed.
pub fn normalize_predicate(p: &str) -> String {
    p.to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// Sequence text format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WarningKind {
    /// Fewer than three tokens; the segment is dropped.
    TooFewTokens { count: usize },
    /// More than three tokens; extra tokens are folded into the relation.
    ExtraTokens { count: usize },
    /// Subject equals object with a real relation; the segment is dropped.
    SelfRelation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWarning {
    pub segment_index: usize,
    pub segment: String,
    pub kind: WarningKind,
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            WarningKind::TooFewTokens { count } => write!(
                f,
                "segment {} {:?}: {} token(s), need 3; skipped",
                self.segment_index, self.segment, count
            ),
            WarningKind::ExtraTokens { count } => write!(
                f,
                "segment {} {:?}: {} tokens, extras folded into the relation",
                self.segment_index, self.segment, count
            ),
            WarningKind::SelfRelation => write!(
                f,
                "segment {} {:?}: subject equals object; skipped",
                self.segment_index, self.segment
            ),
        }
    }
}

/// Parse one sequence line into a graph. Total: any text yields a graph
/// plus warnings. Segments are split on `';'`; blank chunks between
/// separators are not segments. A segment with three tokens is read as
/// subject, object, relation; extra tokens are folded into the relation
/// (space-joined) with a warning; short segments are skipped with a warning.
pub fn parse_sequence(text: &str) -> (SceneGraph, Vec<ParseWarning>) {
    parse_sequence_as("", text)
}

/// [`parse_sequence`] with an explicit image id on the resulting graph.
pub fn parse_sequence_as(image_id: &str, text: &str) -> (SceneGraph, Vec<ParseWarning>) {
    let mut triplets = Vec::new();
    let mut warnings = Vec::new();
    let mut segment_index = 0usize;
    for chunk in text.split(';') {
        let tokens: Vec<&str> = chunk.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let index = segment_index;
        segment_index += 1;
        if tokens.len() < 3 {
            warnings.push(ParseWarning {
                segment_index: index,
                segment: chunk.trim().to_string(),
                kind: WarningKind::TooFewTokens { count: tokens.len() },
            });
            continue;
        }
        if tokens.len() > 3 {
            warnings.push(ParseWarning {
                segment_index: index,
                segment: chunk.trim().to_string(),
                kind: WarningKind::ExtraTokens { count: tokens.len() },
            });
        }
        let subject = ObjectRef::parse_token(tokens[0]);
        let object = ObjectRef::parse_token(tokens[1]);
        let relation = tokens[2..].join(" ");
        let predicate = if relation.eq_ignore_ascii_case(NONE_PREDICATE) {
            None
        } else {
            Some(relation.replace('_', " "))
        };
        if predicate.is_some() && subject == object {
            // Replace any extra-token warning for this segment: it is dropped.
            warnings.retain(|w| w.segment_index != index);
            warnings.push(ParseWarning {
                segment_index: index,
                segment: chunk.trim().to_string(),
                kind: WarningKind::SelfRelation,
            });
            continue;
        }
        triplets.push(Triplet { subject, predicate, object });
    }
    (SceneGraph::new(image_id, triplets), warnings)
}

fn max_index_by_name<'a>(refs: impl Iterator<Item = &'a ObjectRef>) -> BTreeMap<&'a str, u32> {
    let mut max: BTreeMap<&str, u32> = BTreeMap::new();
    for r in refs {
        let e = max.entry(r.name()).or_insert(0);
        *e = (*e).max(r.index());
    }
    max
}

fn render_ref(r: &ObjectRef, max: &BTreeMap<&str, u32>) -> String {
    if max.get(r.name()).copied().unwrap_or(0) > 0 {
        format!("{}{}", r.name(), r.index())
    } else {
        r.name().to_string()
    }
}

fn render_predicate(p: Option<&String>) -> String {
    match p {
        None => NONE_PREDICATE.to_string(),
        Some(p) => p.split_whitespace().collect::<Vec<_>>().join("_"),
    }
}

/// Serialize the first `min(max_triplets, len)` triplets to sequence text.
/// Index suffixes appear only for labels that occur with a higher index
/// somewhere in the graph (not just in the emitted prefix).
pub fn serialize_sequence(g: &SceneGraph, max_triplets: usize) -> String {
    let max = max_index_by_name(
        g.triplets.iter().flat_map(|t| [&t.subject, &t.object]),
    );
    g.triplets
        .iter()
        .take(max_triplets)
        .map(|t| {
            format!(
                "{} {} {}",
                render_ref(&t.subject, &max),
                render_ref(&t.object, &max),
                render_predicate(t.predicate.as_ref())
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Render subject/object pairs as an object prompt: `"sub obj; sub obj"`,
/// with the same suffix rule as [`serialize_sequence`] computed over the
/// pairs themselves.
pub fn build_object_prompt(pairs: &[(ObjectRef, ObjectRef)]) -> String {
    let max = max_index_by_name(pairs.iter().flat_map(|(s, o)| [s, o]));
    pairs
        .iter()
        .map(|(s, o)| format!("{} {}", render_ref(s, &max), render_ref(o, &max)))
        .collect::<Vec<_>>()
        .join("; ")
}

// ---------------------------------------------------------------------------
// Left-to-right instance indexing
// ---------------------------------------------------------------------------

/// Assign instance ordinals per label from horizontal position: within each
/// name group, 0, 1, ... by ascending x, ties by ascending y, then input
/// order. Output is aligned with the input slice.
pub fn assign_indices<S: AsRef<str>>(
    objects: &[(S, f64, f64)],
) -> Result<Vec<ObjectRef>, ModelError> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, (name, x, y)) in objects.iter().enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(ModelError::BadCoordinate { name: name.as_ref().to_string() });
        }
        // Validate the name up front so every output ref is well-formed.
        let r = ObjectRef::new(name.as_ref(), 0)?;
        groups.entry(r.name().to_string()).or_default().push(i);
    }
    let mut out: Vec<Option<ObjectRef>> = vec![None; objects.len()];
    for (name, mut members) in groups {
        members.sort_by(|&a, &b| {
            let (_, xa, ya) = &objects[a];
            let (_, xb, yb) = &objects[b];
            xa.total_cmp(xb).then(ya.total_cmp(yb)).then(a.cmp(&b))
        });
        for (ordinal, &i) in members.iter().enumerate() {
            out[i] = Some(ObjectRef::new(&name, ordinal as u32)?);
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every input indexed")).collect())
}

// ---------------------------------------------------------------------------
// JSON and .sgl file formats
// ---------------------------------------------------------------------------

/// Wire form of one triplet; `predicate: null` is the no-relation pairing
/// and `confidence` is an optional per-triplet score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripletRecord {
    pub subject: ObjectRef,
    pub predicate: Option<String>,
    pub object: ObjectRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// Wire form of one scene graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneGraphRecord {
    pub image_id: String,
    pub triplets: Vec<TripletRecord>,
}

impl SceneGraphRecord {
    pub fn from_graph(g: &SceneGraph, confidences: Option<&[f64]>) -> Self {
        Self {
            image_id: g.image_id.clone(),
            triplets: g
                .triplets
                .iter()
                .enumerate()
                .map(|(i, t)| TripletRecord {
                    subject: t.subject.clone(),
                    predicate: t.predicate.clone(),
                    object: t.object.clone(),
                    confidence: confidences.and_then(|c| c.get(i).copied()),
                })
                .collect(),
        }
    }

    /// Validate into a graph plus inline confidences. Scores must be on
    /// every triplet or on none.
    pub fn into_graph(self) -> Result<(SceneGraph, Option<Vec<f64>>), ModelError> {
        let with_conf = self.triplets.iter().filter(|t| t.confidence.is_some()).count();
        if with_conf != 0 && with_conf != self.triplets.len() {
            return Err(ModelError::PartialConfidence { image_id: self.image_id });
        }
        let mut triplets = Vec::with_capacity(self.triplets.len());
        let mut confidences = Vec::new();
        for t in self.triplets {
            if let Some(c) = t.confidence {
                confidences.push(c);
            }
            triplets.push(Triplet::new(t.subject, t.predicate, t.object)?);
        }
        let conf = if with_conf > 0 { Some(confidences) } else { None };
        Ok((SceneGraph::new(self.image_id, triplets), conf))
    }
}

/// One graph loaded from disk, whatever the source format.
#[derive(Debug, Clone)]
pub struct LoadedGraph {
    pub graph: SceneGraph,
    pub confidences: Option<Vec<f64>>,
    pub warnings: Vec<ParseWarning>,
}

/// Load graphs from a file. `.sgl` files hold one sequence line per graph
/// (the 0-based line number becomes the image id); everything else is
/// scene-graph JSON, either a top-level array or one record per line.
pub fn load_graph_file(path: &Path) -> Result<Vec<LoadedGraph>, ModelError> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("sgl")) {
        return Ok(text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                let (graph, warnings) = parse_sequence_as(&i.to_string(), line);
                LoadedGraph { graph, confidences: None, warnings }
            })
            .collect());
    }
    let records: Vec<SceneGraphRecord> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| ModelError::Json { line: 1, source: e })?
    } else {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(line)
                    .map_err(|e| ModelError::Json { line: i + 1, source: e })?,
            );
        }
        records
    };
    records
        .into_iter()
        .map(|r| {
            let (graph, confidences) = r.into_graph()?;
            Ok(LoadedGraph { graph, confidences, warnings: Vec::new() })
        })
        .collect()
}
