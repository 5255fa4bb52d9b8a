//! Utterances, frames and scenarios in bracketed form.
//!
//! A frame is an intent/slot tree whose leaf slots hold token spans of the
//! paired utterance. A scenario has the same shape with each leaf span
//! replaced by a variable `x1..xm`, numbered in left-to-right leaf order.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub const INTENT_PREFIX: &str = "IN:";
pub const SLOT_PREFIX: &str = "SL:";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    raw_text: String,
    tokens: Vec<String>,
}

impl Utterance {
    /// Lowercases and splits on runs of whitespace.
    pub fn new(raw: &str) -> Result<Self> {
        let tokens: Vec<String> = raw.split_whitespace().map(str::to_lowercase).collect();
        if tokens.is_empty() {
            return Err(Error::EmptyUtterance);
        }
        Ok(Self {
            raw_text: raw.to_string(),
            tokens,
        })
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Normalized text: tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn span_text(&self, span: Span) -> String {
        self.tokens[span.start..span.end].join(" ")
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Variable index of a scenario leaf (1-based, as in `x1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Variable(pub usize);

/// Tree node. Slot nodes hold either children or a leaf value, never both.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Node<L> {
    pub label: String,
    pub children: Vec<Node<L>>,
    pub leaf: Option<L>,
}

impl<L> Node<L> {
    pub fn is_intent(&self) -> bool {
        self.label.starts_with(INTENT_PREFIX)
    }

    pub fn is_slot(&self) -> bool {
        self.label.starts_with(SLOT_PREFIX)
    }

    /// Leaf values in depth-first, left-to-right order.
    pub fn leaves(&self) -> Vec<&L> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a L>) {
        if let Some(l) = &self.leaf {
            out.push(l);
        }
        for c in &self.children {
            c.collect_leaves(out);
        }
    }

    /// Same shape with every leaf mapped through `f` in left-to-right order.
    pub fn map_leaves<M, F: FnMut(&L) -> M>(&self, f: &mut F) -> Node<M> {
        let leaf = self.leaf.as_ref().map(&mut *f);
        Node {
            label: self.label.clone(),
            children: self.children.iter().map(|c| c.map_leaves(f)).collect(),
            leaf,
        }
    }

    fn write_with(&self, out: &mut String, leaf: &dyn Fn(&L) -> String) {
        out.push('[');
        out.push_str(&self.label);
        out.push(' ');
        if let Some(l) = &self.leaf {
            out.push_str(&leaf(l));
            out.push(' ');
        }
        for c in &self.children {
            c.write_with(out, leaf);
            out.push(' ');
        }
        out.push(']');
    }

    pub fn render_with(&self, leaf: &dyn Fn(&L) -> String) -> String {
        let mut s = String::new();
        self.write_with(&mut s, leaf);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub root: Node<Span>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Scenario {
    root: Node<Variable>,
    canonical: String,
}

impl Scenario {
    pub fn new(root: Node<Variable>) -> Self {
        let canonical = root.render_with(&|v| format!("x{}", v.0));
        Self { root, canonical }
    }

    pub fn root(&self) -> &Node<Variable> {
        &self.root
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    pub fn num_variables(&self) -> usize {
        self.root.leaves().len()
    }

    pub fn top_intent(&self) -> &str {
        &self.root.label
    }

    /// Slot labels of the leaf slots, in variable order.
    pub fn leaf_slot_labels(&self) -> Vec<&str> {
        fn walk<'a>(n: &'a Node<Variable>, out: &mut Vec<&'a str>) {
            if n.leaf.is_some() {
                out.push(&n.label);
            }
            for c in &n.children {
                walk(c, out);
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    /// Every ontology label in the tree, pre-order.
    pub fn labels(&self) -> Vec<&str> {
        fn walk<'a>(n: &'a Node<Variable>, out: &mut Vec<&'a str>) {
            out.push(&n.label);
            for c in &n.children {
                walk(c, out);
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unbalanced brackets")]
    Unbalanced,
    #[error("unknown bracket token `{0}`")]
    UnknownToken(String),
    #[error("leaf text `{0}` not found in utterance")]
    LeafNotInUtterance(String),
    #[error("slot has no content")]
    EmptySlot,
    #[error("text outside a slot")]
    TextOutsideSlot,
    #[error("slot mixes text and nested nodes")]
    MixedSlot,
    #[error("root must be an intent, found `{0}`")]
    RootNotIntent(String),
    #[error("trailing input after root node")]
    TrailingInput,
    #[error("empty frame")]
    Empty,
    #[error("bad scenario variable `{0}`")]
    BadVariable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at offset {offset}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    /// Character offset into the bracketed text.
    pub offset: usize,
}

/// Unbound tree produced by the bracket tokenizer: leaves are raw words with
/// the character offset of their first word.
type RawNode = Node<(Vec<String>, usize)>;

fn parse_raw(text: &str) -> std::result::Result<RawNode, ParseError> {
    let err = |kind, offset| ParseError { kind, offset };
    let mut words: Vec<(usize, &str)> = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    for (char_pos, (byte, ch)) in text.char_indices().enumerate() {
        if ch.is_whitespace() {
            if let Some((cs, bs)) = start.take() {
                words.push((cs, &text[bs..byte]));
            }
        } else if start.is_none() {
            start = Some((char_pos, byte));
        }
    }
    if let Some((cs, bs)) = start {
        words.push((cs, &text[bs..]));
    }
    if words.is_empty() {
        return Err(err(ParseErrorKind::Empty, 0));
    }

    let mut stack: Vec<(RawNode, usize)> = Vec::new();
    let mut root: Option<RawNode> = None;
    for &(offset, w) in &words {
        if root.is_some() {
            return Err(err(ParseErrorKind::TrailingInput, offset));
        }
        if let Some(label) = w.strip_prefix('[') {
            if !(label.starts_with(INTENT_PREFIX) || label.starts_with(SLOT_PREFIX))
                || label.len() <= 3
                || label.contains('[')
                || label.contains(']')
            {
                return Err(err(ParseErrorKind::UnknownToken(w.to_string()), offset));
            }
            stack.push((
                Node {
                    label: label.to_string(),
                    children: Vec::new(),
                    leaf: None,
                },
                offset,
            ));
        } else if w == "]" {
            let (node, node_offset) = stack
                .pop()
                .ok_or_else(|| err(ParseErrorKind::Unbalanced, offset))?;
            if node.is_slot() && node.leaf.is_none() && node.children.is_empty() {
                return Err(err(ParseErrorKind::EmptySlot, node_offset));
            }
            match stack.last_mut() {
                Some((parent, _)) => {
                    if parent.leaf.is_some() {
                        return Err(err(ParseErrorKind::MixedSlot, node_offset));
                    }
                    parent.children.push(node);
                }
                None => root = Some(node),
            }
        } else if w.contains('[') || w.contains(']') {
            return Err(err(ParseErrorKind::UnknownToken(w.to_string()), offset));
        } else {
            let (node, _) = stack
                .last_mut()
                .ok_or_else(|| err(ParseErrorKind::TextOutsideSlot, offset))?;
            if !node.is_slot() {
                return Err(err(ParseErrorKind::TextOutsideSlot, offset));
            }
            if !node.children.is_empty() {
                return Err(err(ParseErrorKind::MixedSlot, offset));
            }
            match &mut node.leaf {
                Some((ws, _)) => ws.push(w.to_lowercase()),
                None => node.leaf = Some((vec![w.to_lowercase()], offset)),
            }
        }
    }
    let root = match root {
        Some(r) => r,
        None => {
            let offset = stack.last().map_or(0, |(_, o)| *o);
            return Err(err(ParseErrorKind::Unbalanced, offset));
        }
    };
    if !root.is_intent() {
        return Err(err(ParseErrorKind::RootNotIntent(root.label.clone()), 0));
    }
    Ok(root)
}

/// Parses a bracketed frame, binding each leaf's text to the leftmost
/// occurrence in `utt` that does not overlap an earlier leaf.
pub fn parse_frame(text: &str, utt: &Utterance) -> std::result::Result<Frame, ParseError> {
    let raw = parse_raw(text)?;
    let mut consumed = vec![false; utt.len()];
    let mut failure: Option<ParseError> = None;
    let root = raw.map_leaves(&mut |(words, offset): &(Vec<String>, usize)| {
        if failure.is_some() {
            return Span::new(0, 0);
        }
        match find_unconsumed(utt.tokens(), words, &consumed) {
            Some(start) => {
                let span = Span::new(start, start + words.len());
                consumed[span.start..span.end].iter_mut().for_each(|c| *c = true);
                span
            }
            None => {
                failure = Some(ParseError {
                    kind: ParseErrorKind::LeafNotInUtterance(words.join(" ")),
                    offset: *offset,
                });
                Span::new(0, 0)
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(Frame { root }),
    }
}

fn find_unconsumed(tokens: &[String], words: &[String], consumed: &[bool]) -> Option<usize> {
    if words.len() > tokens.len() {
        return None;
    }
    (0..=tokens.len() - words.len()).find(|&s| {
        tokens[s..s + words.len()] == *words && !consumed[s..s + words.len()].iter().any(|&c| c)
    })
}

/// Parses a canonical scenario string such as `[IN:GET_WEATHER [SL:LOCATION x1 ] ]`.
pub fn parse_scenario(text: &str) -> std::result::Result<Scenario, ParseError> {
    let raw = parse_raw(text)?;
    let mut next = 1;
    let mut failure: Option<ParseError> = None;
    let root = raw.map_leaves(&mut |(words, offset): &(Vec<String>, usize)| {
        let expected = format!("x{next}");
        if failure.is_none() && (words.len() != 1 || words[0] != expected) {
            failure = Some(ParseError {
                kind: ParseErrorKind::BadVariable(words.join(" ")),
                offset: *offset,
            });
        }
        next += 1;
        Variable(next - 1)
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(Scenario::new(root)),
    }
}

/// Canonical bracketed form with leaf spans rendered as utterance text.
pub fn serialize_frame(frame: &Frame, utt: &Utterance) -> String {
    frame.root.render_with(&|s: &Span| utt.span_text(*s))
}

/// Strips leaf text, numbering variables left to right.
pub trait ToScenario {
    fn to_scenario(&self) -> Scenario;
}

impl ToScenario for Frame {
    fn to_scenario(&self) -> Scenario {
        let mut next = 0;
        Scenario::new(self.root.map_leaves(&mut |_| {
            next += 1;
            Variable(next)
        }))
    }
}

impl ToScenario for Scenario {
    fn to_scenario(&self) -> Scenario {
        let mut next = 0;
        Scenario::new(self.root.map_leaves(&mut |_| {
            next += 1;
            Variable(next)
        }))
    }
}

pub fn scenario_of(frame: &Frame) -> Scenario {
    frame.to_scenario()
}

impl Frame {
    /// Checks structural invariants against the paired utterance.
    pub fn validate(&self, utt: &Utterance) -> Result<()> {
        fn walk(n: &Node<Span>, len: usize) -> Result<()> {
            if n.leaf.is_some() && !n.children.is_empty() {
                return Err(Error::Span(format!("slot {} has both text and children", n.label)));
            }
            if let Some(s) = n.leaf {
                if s.start >= s.end || s.end > len {
                    return Err(Error::Span(format!(
                        "span [{}, {}) invalid for {len} tokens",
                        s.start, s.end
                    )));
                }
            }
            n.children.iter().try_for_each(|c| walk(c, len))
        }
        if !self.root.is_intent() {
            return Err(Error::Span(format!("root `{}` is not an intent", self.root.label)));
        }
        walk(&self.root, utt.len())
    }

    /// Leaf spans in variable order.
    pub fn spans(&self) -> Vec<Span> {
        self.root.leaves().into_iter().copied().collect()
    }
}

/// Exact match of full frames (identical canonical serializations).
pub fn exact_match(pred: &Frame, gold: &Frame, utt: &Utterance) -> bool {
    serialize_frame(pred, utt) == serialize_frame(gold, utt)
}

/// Exact match of scenarios (frames with leaf text stripped).
pub fn exact_match_scenario(pred: &Frame, gold: &Frame) -> bool {
    scenario_of(pred).canonical() == scenario_of(gold).canonical()
}
