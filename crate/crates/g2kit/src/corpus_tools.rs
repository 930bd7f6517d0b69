//! Corpus preparation: region-graph cleaning, no-relation pair
//! augmentation, prompt/label rendering, corpus statistics, and patch
//! feature files.
//!
//! The input side speaks Visual Genome-style scene-graph JSON (objects with
//! pixel boxes and names, relationships by object id). [`clean_vg`] ranks an
//! image's relationships by the mean box area of their endpoints and keeps
//! the largest ones; [`scene_graph_from_vg`] turns the kept relationships
//! into a [`SceneGraph`] with left-to-right instance indices derived from
//! box centers. [`augment_none_pairs`] appends seeded no-relation pairs so a
//! generator also sees negative examples.
//!
//! The output side renders training text: [`build_prompt`] substitutes a
//! graph, question, and answer into the versioned templates under
//! `data/templates/` and returns matching prompt/label strings for each of
//! the four task formats. [`corpus_stats`] reports how often lexicon objects
//! and relations appear in question/answer/explanation text, and the patch
//! feature helpers read and write the `G2PF` binary matrix format used for
//! precomputed visual features.

use crate::matrix::{self, Matrix, MatrixError};
use crate::nle_metrics::{de_string_or_number as de_id, tokenize};
use crate::sg_model::{
    assign_indices, build_object_prompt, serialize_sequence, ModelError, ObjectRef, SceneGraph,
    Triplet,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("image {image_id:?}: relationship references unknown object id {object_id}")]
    DanglingReference { image_id: String, object_id: u64 },
    #[error("image {image_id:?}: object {object_id} has an invalid box (w, h must be positive and finite)")]
    BadBox { image_id: String, object_id: u64 },
    #[error("image {image_id:?}: object {object_id} has no name")]
    MissingObjectName { image_id: String, object_id: u64 },
    #[error("prompt task {task} requires a non-empty {component}")]
    MissingComponent { task: Task, component: &'static str },
    #[error("lexicon contains no usable phrases")]
    EmptyLexicon,
    #[error("no records to analyze")]
    EmptyCorpus,
    #[error("{path}: bad patch feature file: {reason}")]
    BadFeatureFile { path: String, reason: String },
    #[error("{path}: patch features must form a non-empty matrix of finite values")]
    BadFeatures { path: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("corpus file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus json (line {line}): {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// Default cap shared by relationship cleaning (how many relationships an
/// image keeps) and graph serialization (how many triplets a prompt shows).
pub const DEFAULT_TOP: usize = 50;

// ---------------------------------------------------------------------------
// Region-graph records
// ---------------------------------------------------------------------------

/// One detected object with its pixel box. `name`/`names` mirror the two
/// field spellings found in the wild; [`VgObject::label`] prefers `name`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VgObject {
    pub object_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub names: Vec<String>,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl VgObject {
    /// First non-empty name, if any.
    pub fn label(&self) -> Option<&str> {
        std::iter::once(self.name.as_deref())
            .flatten()
            .chain(self.names.iter().map(String::as_str))
            .map(str::trim)
            .find(|s| !s.is_empty())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// One directed relationship between two object ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VgRelationship {
    pub predicate: String,
    pub subject_id: u64,
    pub object_id: u64,
}

/// One image's objects and relationships.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VgImageRecord {
    #[serde(deserialize_with = "de_id")]
    pub image_id: String,
    #[serde(default)]
    pub objects: Vec<VgObject>,
    #[serde(default)]
    pub relationships: Vec<VgRelationship>,
}


/// Validated box area for every object, keyed by id.
fn object_areas(rec: &VgImageRecord) -> Result<HashMap<u64, f64>, CorpusError> {
    let mut areas = HashMap::with_capacity(rec.objects.len());
    for o in &rec.objects {
        let finite = [o.x, o.y, o.w, o.h].iter().all(|v| v.is_finite());
        if !finite || o.w <= 0.0 || o.h <= 0.0 {
            return Err(CorpusError::BadBox {
                image_id: rec.image_id.clone(),
                object_id: o.object_id,
            });
        }
        areas.insert(o.object_id, o.area());
    }
    Ok(areas)
}

/// Keep the `top` relationships with the largest mean endpoint box area.
///
/// Each relationship is scored by `(area(subject) + area(object)) / 2`,
/// sorted descending, and the first `min(top, count)` survive; equal scores
/// keep their original relative order. Endpoints must resolve to objects of
/// the record, and every box must be positive and finite.
pub fn clean_vg(rec: &VgImageRecord, top: usize) -> Result<Vec<VgRelationship>, CorpusError> {
    let areas = object_areas(rec)?;
    let score_of = |id: u64| -> Result<f64, CorpusError> {
        areas.get(&id).copied().ok_or_else(|| CorpusError::DanglingReference {
            image_id: rec.image_id.clone(),
            object_id: id,
        })
    };
    let mut scored = Vec::with_capacity(rec.relationships.len());
    for rel in &rec.relationships {
        let score = (score_of(rel.subject_id)? + score_of(rel.object_id)?) / 2.0;
        scored.push((score, rel));
    }
    // Stable sort, so ties stay in original order.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(top);
    Ok(scored.into_iter().map(|(_, rel)| rel.clone()).collect())
}

/// A non-fatal oddity found while converting a region-graph record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VgIssue {
    /// Relationship relates an object to itself; dropped.
    SelfLoop { relationship: usize },
    /// Relationship has a blank predicate; dropped.
    EmptyPredicate { relationship: usize },
    /// Object name was adjusted to fit the label grammar.
    Renamed { object_id: u64, given: String, used: String },
}

impl fmt::Display for VgIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VgIssue::SelfLoop { relationship } => {
                write!(f, "relationship {relationship}: subject equals object; dropped")
            }
            VgIssue::EmptyPredicate { relationship } => {
                write!(f, "relationship {relationship}: empty predicate; dropped")
            }
            VgIssue::Renamed { object_id, given, used } => {
                write!(f, "object {object_id}: name {given:?} written as {used:?}")
            }
        }
    }
}

/// Rewrite a raw object name so it forms a valid label: lowercase, inner
/// whitespace and `;` become `_`, and a trailing digit (which the text
/// format would read as an instance index) is escaped with a final `_`.
fn sanitize_object_name(raw: &str) -> String {
    let mut name = String::new();
    let mut last_sep = true;
    for c in raw.trim().to_lowercase().chars() {
        if c.is_whitespace() || c == ';' {
            if !last_sep {
                name.push('_');
                last_sep = true;
            }
        } else {
            name.push(c);
            last_sep = false;
        }
    }
    while name.ends_with('_') {
        name.pop();
    }
    if name.is_empty() {
        return "object".to_string();
    }
    let all_digits = name.chars().all(|c| c.is_ascii_digit());
    if !all_digits && name.ends_with(|c: char| c.is_ascii_digit()) {
        name.push('_');
    }
    name
}

/// Build a [`SceneGraph`] from a record and a chosen relationship subset
/// (typically the output of [`clean_vg`], so triplet order is importance
/// order). Instance indices come from box centers via [`assign_indices`];
/// self-loops and blank predicates are dropped and reported as issues.
pub fn scene_graph_from_vg(
    rec: &VgImageRecord,
    relationships: &[VgRelationship],
) -> Result<(SceneGraph, Vec<VgIssue>), CorpusError> {
    object_areas(rec)?; // box validation
    let mut issues = Vec::new();

    let mut positions = Vec::with_capacity(rec.objects.len());
    for o in &rec.objects {
        let given = o.label().ok_or_else(|| CorpusError::MissingObjectName {
            image_id: rec.image_id.clone(),
            object_id: o.object_id,
        })?;
        let used = sanitize_object_name(given);
        if used != given {
            issues.push(VgIssue::Renamed {
                object_id: o.object_id,
                given: given.to_string(),
                used: used.clone(),
            });
        }
        let (cx, cy) = o.center();
        positions.push((used, cx, cy));
    }
    let refs = assign_indices(&positions)?;
    let by_id: HashMap<u64, &ObjectRef> =
        rec.objects.iter().map(|o| o.object_id).zip(refs.iter()).collect();

    let mut triplets = Vec::with_capacity(relationships.len());
    for (i, rel) in relationships.iter().enumerate() {
        let resolve = |id: u64| -> Result<&ObjectRef, CorpusError> {
            by_id.get(&id).copied().ok_or_else(|| CorpusError::DanglingReference {
                image_id: rec.image_id.clone(),
                object_id: id,
            })
        };
        let subject = resolve(rel.subject_id)?.clone();
        let object = resolve(rel.object_id)?.clone();
        if rel.subject_id == rel.object_id {
            issues.push(VgIssue::SelfLoop { relationship: i });
            continue;
        }
        let predicate = rel.predicate.replace(';', " ").trim().to_string();
        if predicate.is_empty() {
            issues.push(VgIssue::EmptyPredicate { relationship: i });
            continue;
        }
        let t = Triplet::new(subject, Some(predicate), object)
            .expect("distinct instances with a cleaned predicate form a valid triplet");
        triplets.push(t);
    }
    Ok((SceneGraph::new(rec.image_id.clone(), triplets), issues))
}

// ---------------------------------------------------------------------------
// No-relation pair augmentation
// ---------------------------------------------------------------------------

/// Distinct object instances of a graph, in first-appearance order.
pub fn graph_inventory(g: &SceneGraph) -> Vec<ObjectRef> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in g.triplets.iter().flat_map(|t| [&t.subject, &t.object]) {
        if seen.insert(r.clone()) {
            out.push(r.clone());
        }
    }
    out
}

/// Append up to `count` no-relation pairs drawn from `inventory`.
///
/// Candidates are unordered pairs of distinct inventory members with no
/// existing triplet between them in either direction; the subject of an
/// appended pair is the member listed earlier in `inventory`. The draw is a
/// seeded shuffle, so results are deterministic; fewer pairs are added when
/// the inventory has too few unrelated pairs left.
pub fn augment_none_pairs(
    g: &SceneGraph,
    inventory: &[ObjectRef],
    count: usize,
    seed: u64,
) -> SceneGraph {
    let key = |a: &ObjectRef, b: &ObjectRef| -> (ObjectRef, ObjectRef) {
        if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) }
    };
    let related: BTreeSet<_> =
        g.triplets.iter().map(|t| key(&t.subject, &t.object)).collect();

    let mut seen = BTreeSet::new();
    let members: Vec<&ObjectRef> =
        inventory.iter().filter(|r| seen.insert((*r).clone())).collect();

    let mut candidates = Vec::new();
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            if !related.contains(&key(members[i], members[j])) {
                candidates.push((i, j));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);

    let mut out = g.clone();
    for &(i, j) in candidates.iter().take(count) {
        let t = Triplet::new(members[i].clone(), None, members[j].clone())
            .expect("no-relation pairs are always constructible");
        out.triplets.push(t);
    }
    out
}

// ---------------------------------------------------------------------------
// Prompt and label rendering
// ---------------------------------------------------------------------------

/// The four text-generation task formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Object pairs in, scene graph out.
    Sgg,
    /// Question in, combined answer-plus-explanation out.
    AnswerExplain,
    /// Question in, answer out.
    Answer,
    /// Question and answer in, explanation out.
    Explain,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Sgg, Task::AnswerExplain, Task::Answer, Task::Explain];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sgg => "sgg",
            Task::AnswerExplain => "answer-explain",
            Task::Answer => "answer",
            Task::Explain => "explain",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Prompt/label template pairs for every task. Placeholders are written
/// `{X_o}` (object pairs), `{G}` (serialized graph), `{Q}` (question),
/// `{A}` (answer), and `{R}` (explanation). The defaults are the versioned
/// resources under `data/templates/`, with the trailing newline trimmed.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub sgg_prompt: String,
    pub sgg_label: String,
    pub answer_explain_prompt: String,
    pub answer_explain_label: String,
    pub answer_prompt: String,
    pub answer_label: String,
    pub explain_prompt: String,
    pub explain_label: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        fn baked(raw: &str) -> String {
            raw.strip_suffix('\n').unwrap_or(raw).to_string()
        }
        Self {
            sgg_prompt: baked(include_str!("../data/templates/sgg_prompt.txt")),
            sgg_label: baked(include_str!("../data/templates/sgg_label.txt")),
            answer_explain_prompt: baked(include_str!(
                "../data/templates/answer_explain_prompt.txt"
            )),
            answer_explain_label: baked(include_str!(
                "../data/templates/answer_explain_label.txt"
            )),
            answer_prompt: baked(include_str!("../data/templates/answer_prompt.txt")),
            answer_label: baked(include_str!("../data/templates/answer_label.txt")),
            explain_prompt: baked(include_str!("../data/templates/explain_prompt.txt")),
            explain_label: baked(include_str!("../data/templates/explain_label.txt")),
        }
    }
}

impl PromptTemplates {
    pub fn prompt(&self, task: Task) -> &str {
        match task {
            Task::Sgg => &self.sgg_prompt,
            Task::AnswerExplain => &self.answer_explain_prompt,
            Task::Answer => &self.answer_prompt,
            Task::Explain => &self.explain_prompt,
        }
    }

    pub fn label(&self, task: Task) -> &str {
        match task {
            Task::Sgg => &self.sgg_label,
            Task::AnswerExplain => &self.answer_explain_label,
            Task::Answer => &self.answer_label,
            Task::Explain => &self.explain_label,
        }
    }
}

/// Substitute `{name}` placeholders left to right. Unknown placeholders are
/// kept verbatim, and substituted values are never re-scanned, so a value
/// containing braces cannot inject further expansion.
pub fn render_template(template: &str, fields: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match fields.iter().find(|(k, _)| *k == name) {
                    Some((_, value)) => out.push_str(value),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Task, serialization cap, and the templates to render with.
#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub task: Task,
    pub max_triplets: usize,
    pub templates: PromptTemplates,
}

impl PromptSpec {
    pub fn new(task: Task) -> Self {
        Self { task, max_triplets: DEFAULT_TOP, templates: PromptTemplates::default() }
    }
}

/// One question/answer/explanation record tied to an image.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QaRecord {
    #[serde(default, deserialize_with = "de_id")]
    pub id: String,
    #[serde(default, alias = "scene_graph_ref", deserialize_with = "de_id")]
    pub image_id: String,
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default)]
    pub explanation: String,
}

/// Render the prompt and label for one task instance.
///
/// The graph is serialized with the [`PromptSpec`] triplet cap; the object-pair
/// listing of the graph-generation task covers the same capped triplets.
/// QA-task components must be present and non-blank: the question for every
/// QA task, the answer except when it is the only target, the explanation
/// where one is emitted. `qa` may be `None` for [`Task::Sgg`] only.
pub fn build_prompt(
    spec: &PromptSpec,
    g: &SceneGraph,
    qa: Option<&QaRecord>,
) -> Result<(String, String), CorpusError> {
    let task = spec.task;
    let graph_text = serialize_sequence(g, spec.max_triplets);
    let require = |component: &'static str, value: Option<&str>| -> Result<String, CorpusError> {
        match value.map(str::trim) {
            Some(v) if !v.is_empty() => Ok(v.to_string()),
            _ => Err(CorpusError::MissingComponent { task, component }),
        }
    };

    if task == Task::Sgg {
        let pairs: Vec<_> = g
            .triplets
            .iter()
            .take(spec.max_triplets)
            .map(|t| (t.subject.clone(), t.object.clone()))
            .collect();
        let objects = build_object_prompt(&pairs);
        let prompt = render_template(spec.templates.prompt(task), &[("X_o", objects.as_str())]);
        let label = render_template(spec.templates.label(task), &[("G", graph_text.as_str())]);
        return Ok((prompt, label));
    }

    let question = require("question", qa.map(|q| q.question.as_str()))?;
    let mut prompt_fields = vec![("G", graph_text.clone()), ("Q", question)];
    let mut label_fields = Vec::new();
    match task {
        Task::Sgg => unreachable!("handled above"),
        Task::AnswerExplain => {
            label_fields.push(("A", require("answer", qa.map(|q| q.answer.as_str()))?));
            label_fields.push(("R", require("explanation", qa.map(|q| q.explanation.as_str()))?));
        }
        Task::Answer => {
            label_fields.push(("A", require("answer", qa.map(|q| q.answer.as_str()))?));
        }
        Task::Explain => {
            prompt_fields.push(("A", require("answer", qa.map(|q| q.answer.as_str()))?));
            label_fields.push(("R", require("explanation", qa.map(|q| q.explanation.as_str()))?));
        }
    }
    let prompt_refs: Vec<(&str, &str)> =
        prompt_fields.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let label_refs: Vec<(&str, &str)> =
        label_fields.iter().map(|(k, v)| (*k, v.as_str())).collect();
    Ok((
        render_template(spec.templates.prompt(task), &prompt_refs),
        render_template(spec.templates.label(task), &label_refs),
    ))
}

// ---------------------------------------------------------------------------
// Corpus statistics
// ---------------------------------------------------------------------------

/// A phrase list matched against text by longest-match, non-overlapping
/// scanning over the shared tokenizer's output.
#[derive(Debug, Clone)]
pub struct Lexicon {
    phrases: HashSet<Vec<String>>,
    max_len: usize,
}

impl Lexicon {
    /// Build from phrases; each is tokenized, and blank ones are dropped.
    pub fn new<S: AsRef<str>>(phrases: impl IntoIterator<Item = S>) -> Result<Self, CorpusError> {
        let mut set = HashSet::new();
        let mut max_len = 0;
        for phrase in phrases {
            let tokens = tokenize(phrase.as_ref());
            if !tokens.is_empty() {
                max_len = max_len.max(tokens.len());
                set.insert(tokens);
            }
        }
        if set.is_empty() {
            return Err(CorpusError::EmptyLexicon);
        }
        Ok(Self { phrases: set, max_len })
    }

    /// Parse a lexicon file: one phrase per line, `#` lines are comments.
    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')))
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Count non-overlapping matches, preferring the longest phrase at each
    /// position and skipping one token when nothing matches.
    pub fn count_matches(&self, text: &str) -> usize {
        let tokens = tokenize(text);
        let mut count = 0;
        let mut i = 0;
        while i < tokens.len() {
            let longest = (1..=self.max_len.min(tokens.len() - i))
                .rev()
                .find(|&n| self.phrases.contains(&tokens[i..i + n]));
            match longest {
                Some(n) => {
                    count += 1;
                    i += n;
                }
                None => i += 1,
            }
        }
        count
    }
}

/// Built-in object phrases (see `data/lexicons/objects.txt`).
pub fn default_object_lexicon() -> Lexicon {
    Lexicon::from_text(include_str!("../data/lexicons/objects.txt"))
        .expect("built-in object lexicon is non-empty")
}

/// Built-in relation phrases (see `data/lexicons/relations.txt`).
pub fn default_relation_lexicon() -> Lexicon {
    Lexicon::from_text(include_str!("../data/lexicons/relations.txt"))
        .expect("built-in relation lexicon is non-empty")
}

/// Lexicon-hit statistics for one text field across a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldStats {
    /// Mean object matches per record.
    pub mean_objects: f64,
    /// Mean relation matches per record.
    pub mean_relations: f64,
    /// Fraction of records whose field has at least one object match and at
    /// least one relation match.
    pub proportion: f64,
}

/// Per-field statistics over a question/answer/explanation corpus.
#[derive(Debug, Clone, Serialize)]
pub struct CorpusStats {
    pub records: usize,
    pub question: FieldStats,
    pub answer: FieldStats,
    pub explanation: FieldStats,
}

/// Count lexicon hits per field across the corpus. Empty fields contribute
/// zero counts but stay in every denominator.
pub fn corpus_stats(
    records: &[QaRecord],
    objects: &Lexicon,
    relations: &Lexicon,
) -> Result<CorpusStats, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let counts: Vec<[(usize, usize); 3]> = records
        .par_iter()
        .map(|r| {
            [&r.question, &r.answer, &r.explanation]
                .map(|field| (objects.count_matches(field), relations.count_matches(field)))
        })
        .collect();

    let n = records.len() as f64;
    let field = |k: usize| -> FieldStats {
        let objects: usize = counts.iter().map(|c| c[k].0).sum();
        let relations: usize = counts.iter().map(|c| c[k].1).sum();
        let both = counts.iter().filter(|c| c[k].0 >= 1 && c[k].1 >= 1).count();
        FieldStats {
            mean_objects: objects as f64 / n,
            mean_relations: relations as f64 / n,
            proportion: both as f64 / n,
        }
    };
    Ok(CorpusStats {
        records: records.len(),
        question: field(0),
        answer: field(1),
        explanation: field(2),
    })
}

// ---------------------------------------------------------------------------
// Patch feature files
// ---------------------------------------------------------------------------

/// Magic prefix of the binary patch feature format: the magic, row and
/// column counts as little-endian `u32`, then row-major little-endian `f32`
/// values.
pub const PATCH_MAGIC: [u8; 5] = *b"G2PF\0";

/// Precomputed visual features for one image: one row per patch.
#[derive(Debug, Clone)]
pub struct PatchFeatures {
    pub image_id: String,
    pub features: Matrix,
}

impl PatchFeatures {
    /// Read features from `path`; the file stem becomes the image id.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let features = read_patch_matrix(path)?;
        if features.rows() == 0 || features.cols() == 0 || !features.is_finite() {
            return Err(CorpusError::BadFeatures { path: path.display().to_string() });
        }
        let image_id =
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self { image_id, features })
    }
}

/// Read a patch matrix. Files starting with [`PATCH_MAGIC`] parse as the
/// binary format regardless of extension; anything else goes through the
/// text matrix reader (CSV or JSON by extension).
pub fn read_patch_matrix(path: &Path) -> Result<Matrix, CorpusError> {
    let bytes = std::fs::read(path)?;
    if !bytes.starts_with(&PATCH_MAGIC) {
        return Ok(matrix::read_matrix(path)?);
    }
    let bad = |reason: &str| CorpusError::BadFeatureFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < PATCH_MAGIC.len() + 8 {
        return Err(bad("truncated header"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let rows = word(PATCH_MAGIC.len()) as usize;
    let cols = word(PATCH_MAGIC.len() + 4) as usize;
    let body = &bytes[PATCH_MAGIC.len() + 8..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("dimension product overflows"))?;
    if body.len() != expected {
        return Err(bad(&format!(
            "expected {rows}x{cols} ({expected} bytes of data), found {}",
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Matrix::new(rows, cols, data)?)
}

/// Write a patch matrix: the binary format for a `.g2pf` extension, the
/// text matrix writer otherwise. Binary values are stored as `f32`.
pub fn write_patch_matrix(path: &Path, m: &Matrix) -> Result<(), CorpusError> {
    let binary = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("g2pf"));
    if !binary {
        return Ok(matrix::write_matrix(path, m)?);
    }
    let dim = |n: usize| -> Result<u32, CorpusError> {
        u32::try_from(n).map_err(|_| CorpusError::BadFeatureFile {
            path: path.display().to_string(),
            reason: "dimension exceeds the 32-bit header".to_string(),
        })
    };
    let mut bytes = Vec::with_capacity(PATCH_MAGIC.len() + 8 + m.data().len() * 4);
    bytes.extend_from_slice(&PATCH_MAGIC);
    bytes.extend_from_slice(&dim(m.rows())?.to_le_bytes());
    bytes.extend_from_slice(&dim(m.cols())?.to_le_bytes());
    for &v in m.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(std::fs::write(path, bytes)?)
}

// ---------------------------------------------------------------------------
// File loading
// ---------------------------------------------------------------------------

/// Parse a file of records: a top-level JSON array, or one record per line.
pub fn load_json_records<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<Vec<T>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| CorpusError::Json { line: 1, source: e });
    }
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(line).map_err(|e| CorpusError::Json { line: i + 1, source: e })?,
        );
    }
    Ok(records)
}

/// Load region-graph records (JSON array or JSON lines).
pub fn load_vg_file(path: &Path) -> Result<Vec<VgImageRecord>, CorpusError> {
    load_json_records(path)
}

/// Load question/answer/explanation records (JSON array or JSON lines).
pub fn load_qa_file(path: &Path) -> Result<Vec<QaRecord>, CorpusError> {
    load_json_records(path)
}
