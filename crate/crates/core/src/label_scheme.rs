//! The closed clinical label universe and its BIOES grammar.
//!
//! Nine event/medication categories, each carried by four positional tags,
//! plus `O` for ordinary text: 37 labels in total. Indices are fixed so
//! that lattices, transition matrices and emission files stay portable:
//! `O` is index 0, then categories in ascending name order with the
//! positions `B, I, E, S` inside each category.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Ade,
    Dosage,
    Drug,
    Duration,
    Form,
    Frequency,
    Reason,
    Route,
    Strength,
}

impl Category {
    /// All categories, sorted by their display name.
    pub const ALL: [Category; 9] = [
        Category::Ade,
        Category::Dosage,
        Category::Drug,
        Category::Duration,
        Category::Form,
        Category::Frequency,
        Category::Reason,
        Category::Route,
        Category::Strength,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Ade => "ADE",
            Category::Dosage => "Dosage",
            Category::Drug => "Drug",
            Category::Duration => "Duration",
            Category::Form => "Form",
            Category::Frequency => "Frequency",
            Category::Reason => "Reason",
            Category::Route => "Route",
            Category::Strength => "Strength",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidLabel(s.to_string()))
    }
}

/// Position of a token inside an entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    Begin,
    Inside,
    End,
    Single,
}

impl Position {
    pub const ALL: [Position; 4] = [
        Position::Begin,
        Position::Inside,
        Position::End,
        Position::Single,
    ];

    pub fn prefix(self) -> char {
        match self {
            Position::Begin => 'B',
            Position::Inside => 'I',
            Position::End => 'E',
            Position::Single => 'S',
        }
    }

    fn from_prefix(c: &str) -> Option<Self> {
        match c {
            "B" => Some(Position::Begin),
            "I" => Some(Position::Inside),
            "E" => Some(Position::End),
            "S" => Some(Position::Single),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Outside,
    Tagged(Position, Category),
}

impl Label {
    /// Number of labels in the universe.
    pub const COUNT: usize = 1 + 4 * 9;

    pub fn index(self) -> usize {
        match self {
            Label::Outside => 0,
            Label::Tagged(pos, cat) => 1 + cat.index() * 4 + pos as usize,
        }
    }

    pub fn from_index(index: usize) -> Option<Label> {
        match index {
            0 => Some(Label::Outside),
            i if i < Self::COUNT => {
                let k = i - 1;
                Some(Label::Tagged(Position::ALL[k % 4], Category::ALL[k / 4]))
            }
            _ => None,
        }
    }

    pub fn category(self) -> Option<Category> {
        match self {
            Label::Outside => None,
            Label::Tagged(_, c) => Some(c),
        }
    }

    pub fn position(self) -> Option<Position> {
        match self {
            Label::Outside => None,
            Label::Tagged(p, _) => Some(p),
        }
    }

    pub fn is_outside(self) -> bool {
        self == Label::Outside
    }

    /// Whether a grammatical sequence may start with this label.
    pub fn can_start(self) -> bool {
        matches!(
            self,
            Label::Outside | Label::Tagged(Position::Begin | Position::Single, _)
        )
    }

    /// Whether a grammatical sequence may end with this label.
    pub fn can_end(self) -> bool {
        matches!(
            self,
            Label::Outside | Label::Tagged(Position::End | Position::Single, _)
        )
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Outside => f.write_str("O"),
            Label::Tagged(p, c) => write!(f, "{}-{}", p.prefix(), c),
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(Label::Outside);
        }
        let bad = || Error::InvalidLabel(s.to_string());
        let (prefix, cat) = s.split_once('-').ok_or_else(bad)?;
        let pos = Position::from_prefix(prefix).ok_or_else(bad)?;
        let cat = cat.parse::<Category>().map_err(|_| bad())?;
        Ok(Label::Tagged(pos, cat))
    }
}

/// Ordered label universe with a bijective integer index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<Label>,
}

impl LabelSet {
    pub fn clinical() -> Self {
        let labels = (0..Label::COUNT)
            .map(|i| Label::from_index(i).expect("index in range"))
            .collect();
        LabelSet { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, index: usize) -> Option<Label> {
        self.labels.get(index).copied()
    }

    pub fn index_of(&self, label: Label) -> usize {
        label.index()
    }

    /// Comma-joined label strings in index order.
    pub fn joined(&self) -> String {
        self.labels
            .iter()
            .map(Label::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        Self::clinical()
    }
}

/// A labelled entity over the half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub category: Category,
}

impl Span {
    pub fn new(category: Category, start: usize, end: usize) -> Self {
        Span {
            start,
            end,
            category,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{},{})", self.category, self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Strict,
    Lenient,
}

pub fn is_valid_transition(from: Label, to: Label) -> bool {
    match from {
        Label::Outside | Label::Tagged(Position::End | Position::Single, _) => to.can_start(),
        Label::Tagged(Position::Begin | Position::Inside, c) => matches!(
            to,
            Label::Tagged(Position::Inside | Position::End, d) if d == c
        ),
    }
}

/// Index of the first adjacent pair (or implicit boundary) that breaks the
/// grammar. Boundary violations report position 0 (start) or `len` (end).
pub fn first_violation(labels: &[Label]) -> Option<usize> {
    let first = labels.first()?;
    if !first.can_start() {
        return Some(0);
    }
    for (i, pair) in labels.windows(2).enumerate() {
        if !is_valid_transition(pair[0], pair[1]) {
            return Some(i + 1);
        }
    }
    if !labels[labels.len() - 1].can_end() {
        return Some(labels.len());
    }
    None
}

pub fn is_grammatical(labels: &[Label]) -> bool {
    first_violation(labels).is_none()
}

/// Number of adjacent pairs (plus the two implicit boundaries) that break
/// the grammar.
pub fn invalid_transition_count(labels: &[Label]) -> usize {
    let Some(first) = labels.first() else {
        return 0;
    };
    let mut n = usize::from(!first.can_start());
    n += labels
        .windows(2)
        .filter(|w| !is_valid_transition(w[0], w[1]))
        .count();
    n + usize::from(!labels[labels.len() - 1].can_end())
}

pub fn spans_to_labels(spans: &[Span], length: usize) -> Result<Vec<Label>> {
    let mut labels = vec![Label::Outside; length];
    let mut taken = vec![false; length];
    for span in spans {
        let invalid = |reason| Error::InvalidSpan {
            category: span.category.to_string(),
            start: span.start,
            end: span.end,
            length,
            reason,
        };
        if span.is_empty() {
            return Err(invalid("empty span"));
        }
        if span.end > length {
            return Err(invalid("out of range"));
        }
        if taken[span.start..span.end].iter().any(|&t| t) {
            return Err(invalid("overlaps another span"));
        }
        taken[span.start..span.end].fill(true);
        let c = span.category;
        if span.len() == 1 {
            labels[span.start] = Label::Tagged(Position::Single, c);
        } else {
            labels[span.start] = Label::Tagged(Position::Begin, c);
            for l in &mut labels[span.start + 1..span.end - 1] {
                *l = Label::Tagged(Position::Inside, c);
            }
            labels[span.end - 1] = Label::Tagged(Position::End, c);
        }
    }
    Ok(labels)
}

pub fn labels_to_spans(labels: &[Label], mode: DecodeMode) -> Result<Vec<Span>> {
    match mode {
        DecodeMode::Strict => decode_strict(labels),
        DecodeMode::Lenient => Ok(decode_lenient(labels)),
    }
}

fn decode_strict(labels: &[Label]) -> Result<Vec<Span>> {
    if let Some(position) = first_violation(labels) {
        let detail = if position == labels.len() {
            format!("sequence ends inside a span ({})", labels[position - 1])
        } else if position == 0 {
            format!("sequence cannot start with {}", labels[0])
        } else {
            format!("{} cannot follow {}", labels[position], labels[position - 1])
        };
        return Err(Error::Grammar { position, detail });
    }
    Ok(decode_lenient(labels))
}

fn decode_lenient(labels: &[Label]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(Category, usize)> = None;
    for (i, &label) in labels.iter().enumerate() {
        match label {
            Label::Outside => {
                if let Some((c, s)) = open.take() {
                    spans.push(Span::new(c, s, i));
                }
            }
            Label::Tagged(pos, c) => {
                let continues = matches!(open, Some((oc, _)) if oc == c);
                match pos {
                    Position::Begin | Position::Single => {
                        if let Some((oc, s)) = open.take() {
                            spans.push(Span::new(oc, s, i));
                        }
                        if pos == Position::Single {
                            spans.push(Span::new(c, i, i + 1));
                        } else {
                            open = Some((c, i));
                        }
                    }
                    Position::Inside => {
                        if !continues {
                            if let Some((oc, s)) = open.take() {
                                spans.push(Span::new(oc, s, i));
                            }
                            open = Some((c, i));
                        }
                    }
                    Position::End => {
                        let start = if continues {
                            open.take().map(|(_, s)| s).unwrap_or(i)
                        } else {
                            if let Some((oc, s)) = open.take() {
                                spans.push(Span::new(oc, s, i));
                            }
                            i
                        };
                        spans.push(Span::new(c, start, i + 1));
                    }
                }
            }
        }
    }
    if let Some((c, s)) = open {
        spans.push(Span::new(c, s, labels.len()));
    }
    spans
}
