//! String representations of scenarios fed to the scenario encoder.
//!
//! Besides the raw canonical form there are seven intrinsic renderings that
//! combine a categorical type (`intent` / `slot`), a natural-language
//! description of each label (automatic or curated), and optionally a few
//! example slot values:
//!
//! ```text
//! type_only                 [ intent [ slot ] ]
//! automatic_type_span       [ intent | add time timer [ slot | measurement unit ] ]
//! curated_type_span_exs     [ intent | add time to timer [ slot | unit of measurement | sec / min / hr ] ]
//! ```
//!
//! Leaf variables are not rendered; a leaf slot is located by the `]` that
//! closes it (see [`RenderedScenario::var_positions`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::frame::{Node, Scenario, Variable, INTENT_PREFIX, SLOT_PREFIX};

pub const DEFAULT_MAX_EXAMPLES: usize = 3;
pub const EXAMPLE_SEPARATOR: &str = "/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprKind {
    Canonical,
    TypeOnly,
    AutomaticSpan,
    AutomaticTypeSpan,
    AutomaticTypeSpanExs,
    CuratedSpan,
    CuratedTypeSpan,
    CuratedTypeSpanExs,
}

impl ReprKind {
    /// The seven intrinsic kinds (everything except `Canonical`).
    pub const INTRINSIC: [ReprKind; 7] = [
        ReprKind::TypeOnly,
        ReprKind::AutomaticSpan,
        ReprKind::AutomaticTypeSpan,
        ReprKind::AutomaticTypeSpanExs,
        ReprKind::CuratedSpan,
        ReprKind::CuratedTypeSpan,
        ReprKind::CuratedTypeSpanExs,
    ];

    pub const ALL: [ReprKind; 8] = [
        ReprKind::Canonical,
        ReprKind::TypeOnly,
        ReprKind::AutomaticSpan,
        ReprKind::AutomaticTypeSpan,
        ReprKind::AutomaticTypeSpanExs,
        ReprKind::CuratedSpan,
        ReprKind::CuratedTypeSpan,
        ReprKind::CuratedTypeSpanExs,
    ];

    /// Singleton used at inference unless configured otherwise.
    pub const INFERENCE_DEFAULT: ReprKind = ReprKind::CuratedTypeSpanExs;

    pub fn name(self) -> &'static str {
        match self {
            ReprKind::Canonical => "canonical",
            ReprKind::TypeOnly => "type_only",
            ReprKind::AutomaticSpan => "automatic_span",
            ReprKind::AutomaticTypeSpan => "automatic_type_span",
            ReprKind::AutomaticTypeSpanExs => "automatic_type_span_exs",
            ReprKind::CuratedSpan => "curated_span",
            ReprKind::CuratedTypeSpan => "curated_type_span",
            ReprKind::CuratedTypeSpanExs => "curated_type_span_exs",
        }
    }

    fn with_type(self) -> bool {
        matches!(
            self,
            ReprKind::TypeOnly
                | ReprKind::AutomaticTypeSpan
                | ReprKind::AutomaticTypeSpanExs
                | ReprKind::CuratedTypeSpan
                | ReprKind::CuratedTypeSpanExs
        )
    }

    fn description(self) -> Option<DescriptionSource> {
        match self {
            ReprKind::AutomaticSpan | ReprKind::AutomaticTypeSpan | ReprKind::AutomaticTypeSpanExs => {
                Some(DescriptionSource::Automatic)
            }
            ReprKind::CuratedSpan | ReprKind::CuratedTypeSpan | ReprKind::CuratedTypeSpanExs => {
                Some(DescriptionSource::Curated)
            }
            _ => None,
        }
    }

    fn with_examples(self) -> bool {
        matches!(
            self,
            ReprKind::AutomaticTypeSpanExs | ReprKind::CuratedTypeSpanExs
        )
    }
}

impl fmt::Display for ReprKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReprKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        ReprKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown representation kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DescriptionSource {
    Automatic,
    Curated,
}

/// `IN:GET_WEATHER` -> `get weather`.
pub fn automatic_span(label: &str) -> Result<String> {
    let body = label
        .strip_prefix(INTENT_PREFIX)
        .or_else(|| label.strip_prefix(SLOT_PREFIX))
        .filter(|b| !b.is_empty())
        .ok_or_else(|| Error::MalformedLabel(label.to_string()))?;
    let words: Vec<String> = body
        .split('_')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    if words.is_empty() {
        return Err(Error::MalformedLabel(label.to_string()));
    }
    Ok(words.join(" "))
}

fn has_reserved(s: &str) -> bool {
    s.contains(['[', ']', '|'])
}

/// Curated label descriptions plus sampled example values per slot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OntologyRegistry {
    pub handmade: BTreeMap<String, String>,
    pub examples: BTreeMap<String, Vec<String>>,
}

impl OntologyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_description(&mut self, label: &str, description: &str) -> Result<()> {
        validate_description(description).map_err(|reason| Error::Registry { line: 0, reason })?;
        self.handmade
            .insert(label.to_string(), description.to_string());
        Ok(())
    }

    /// Parses `label<TAB>description` lines.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut reg = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (label, desc) = line.split_once('\t').ok_or_else(|| Error::Registry {
                line: i + 1,
                reason: "expected `label<TAB>description`".into(),
            })?;
            let label = label.trim();
            let desc = desc.trim();
            automatic_span(label).map_err(|_| Error::Registry {
                line: i + 1,
                reason: format!("malformed label `{label}`"),
            })?;
            validate_description(desc).map_err(|reason| Error::Registry {
                line: i + 1,
                reason,
            })?;
            reg.handmade.insert(label.to_string(), desc.to_string());
        }
        Ok(reg)
    }

    pub fn to_tsv(&self) -> String {
        self.handmade
            .iter()
            .map(|(l, d)| format!("{l}\t{d}\n"))
            .collect()
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_tsv(&text)
    }

    /// Loads an examples cache (`{"SL:X": ["a", "b"]}`), replacing current examples.
    pub fn set_examples_json(&mut self, text: &str) -> Result<()> {
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
        for (label, values) in &map {
            if let Some(bad) = values.iter().find(|v| has_reserved(v)) {
                return Err(Error::Registry {
                    line: 0,
                    reason: format!("example `{bad}` for {label} contains reserved characters"),
                });
            }
        }
        self.examples = map;
        Ok(())
    }

    pub fn examples_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.examples)?)
    }

    /// Curated description, falling back to the automatic span.
    pub fn lookup_handmade(&self, label: &str) -> String {
        if let Some(d) = self.handmade.get(label) {
            return d.clone();
        }
        log::warn!("no curated description for {label}; using automatic span");
        automatic_span(label).unwrap_or_else(|_| label.to_lowercase())
    }

    /// Samples example values for every slot label observed in `samples`.
    pub fn collect_all_examples<R: Rng + ?Sized>(
        &mut self,
        samples: &[Sample],
        rng: &mut R,
        max_examples: usize,
    ) {
        let labels: BTreeSet<String> = samples
            .iter()
            .flat_map(|s| s.scenario().leaf_slot_labels().into_iter().map(String::from).collect::<Vec<_>>())
            .collect();
        self.examples.clear();
        for label in labels {
            let ex = collect_examples(&label, samples, rng, max_examples);
            if !ex.is_empty() {
                self.examples.insert(label, ex);
            }
        }
    }

    fn description(&self, label: &str, source: DescriptionSource) -> String {
        match source {
            DescriptionSource::Curated => self.lookup_handmade(label),
            DescriptionSource::Automatic => {
                automatic_span(label).unwrap_or_else(|_| label.to_lowercase())
            }
        }
    }
}

fn validate_description(desc: &str) -> std::result::Result<(), String> {
    if desc.is_empty() {
        return Err("empty description".into());
    }
    if desc != desc.to_lowercase() {
        return Err(format!("description `{desc}` is not lowercase"));
    }
    if has_reserved(desc) {
        return Err(format!("description `{desc}` contains reserved characters"));
    }
    Ok(())
}

/// Up to `max_examples` distinct leaf texts of `slot_label`, sampled uniformly
/// without replacement and returned in first-seen order.
pub fn collect_examples<R: Rng + ?Sized>(
    slot_label: &str,
    samples: &[Sample],
    rng: &mut R,
    max_examples: usize,
) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut distinct = Vec::new();
    for s in samples {
        collect_label_texts(&s.frame.root, slot_label, &s.utterance, &mut |t| {
            if !has_reserved(&t) && seen.insert(t.clone()) {
                distinct.push(t);
            }
        });
    }
    if max_examples == 0 || distinct.is_empty() {
        return Vec::new();
    }
    if distinct.len() <= max_examples {
        return distinct;
    }
    let mut picks = rand::seq::index::sample(rng, distinct.len(), max_examples).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| distinct[i].clone()).collect()
}

fn collect_label_texts(
    node: &Node<crate::frame::Span>,
    label: &str,
    utt: &crate::frame::Utterance,
    out: &mut dyn FnMut(String),
) {
    if node.label == label {
        if let Some(span) = node.leaf {
            out(utt.span_text(span).to_lowercase());
        }
    }
    for c in &node.children {
        collect_label_texts(c, label, utt, out);
    }
}

/// Token sequence of a rendered scenario and the position of each leaf slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedScenario {
    pub tokens: Vec<String>,
    /// Index into `tokens` of the `]` closing the leaf slot of `x_i` (i = 1..m).
    pub var_positions: Vec<usize>,
}

impl RenderedScenario {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

pub fn render_tokens(s: &Scenario, kind: ReprKind, registry: &OntologyRegistry) -> RenderedScenario {
    let mut out = RenderedScenario {
        tokens: Vec::new(),
        var_positions: Vec::new(),
    };
    if kind == ReprKind::Canonical {
        for tok in s.canonical().split_whitespace() {
            if tok == "]" && out.tokens.last().is_some_and(|t| is_variable(t)) {
                out.var_positions.push(out.tokens.len());
            }
            out.tokens.push(tok.to_string());
        }
        return out;
    }
    render_node(s.root(), kind, registry, &mut out);
    out
}

fn is_variable(tok: &str) -> bool {
    tok.strip_prefix('x')
        .is_some_and(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()))
}

fn render_node(
    node: &Node<Variable>,
    kind: ReprKind,
    registry: &OntologyRegistry,
    out: &mut RenderedScenario,
) {
    let push_words = |out: &mut RenderedScenario, s: &str| {
        out.tokens.extend(s.split_whitespace().map(String::from));
    };
    out.tokens.push("[".into());
    let type_word = if node.is_intent() { "intent" } else { "slot" };
    if kind.with_type() {
        out.tokens.push(type_word.into());
    }
    if let Some(source) = kind.description() {
        if kind.with_type() {
            out.tokens.push("|".into());
        }
        push_words(out, &registry.description(&node.label, source));
    }
    if kind.with_examples() && node.is_slot() {
        if let Some(ex) = registry.examples.get(&node.label).filter(|e| !e.is_empty()) {
            out.tokens.push("|".into());
            for (i, e) in ex.iter().enumerate() {
                if i > 0 {
                    out.tokens.push(EXAMPLE_SEPARATOR.into());
                }
                push_words(out, e);
            }
        }
    }
    for c in &node.children {
        render_node(c, kind, registry, out);
    }
    if node.leaf.is_some() {
        out.var_positions.push(out.tokens.len());
    }
    out.tokens.push("]".into());
}

pub fn render(s: &Scenario, kind: ReprKind, registry: &OntologyRegistry) -> String {
    render_tokens(s, kind, registry).text()
}

/// Uniform draw over the enabled kinds (training-time stochastic representation).
pub fn sample_repr_kind<R: Rng + ?Sized>(rng: &mut R, enabled: &[ReprKind]) -> Result<ReprKind> {
    if enabled.is_empty() {
        return Err(Error::Config("no representation kinds enabled".into()));
    }
    Ok(enabled[rng.random_range(0..enabled.len())])
}

/// Deterministic singleton used at evaluation; ignores any generator.
pub fn fixed_repr_kind(configured: Option<ReprKind>) -> ReprKind {
    configured.unwrap_or(ReprKind::INFERENCE_DEFAULT)
}
