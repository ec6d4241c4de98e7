//! CoNLL-style two-column corpora, vocabularies and label statistics.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label_scheme::{labels_to_spans, spans_to_labels, DecodeMode, Label, LabelSet};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub gold: Vec<Label>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, gold: Vec<Label>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("sentence has no tokens".into()));
        }
        if tokens.len() != gold.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tokens but {} labels",
                tokens.len(),
                gold.len()
            )));
        }
        if let Some(t) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::InvalidArgument(format!("bad token {t:?}")));
        }
        Ok(Sentence { tokens, gold })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Splits the sentence into chunks of at most `max` tokens, cutting at
    /// entity boundaries where possible. A chunk cut through an entity has
    /// its labels re-encoded so that every chunk stays grammatical.
    pub fn windows(&self, max: usize) -> Vec<Sentence> {
        window_ranges(self.len(), Some(&self.gold), max)
            .into_iter()
            .map(|r| {
                let tokens = self.tokens[r.clone()].to_vec();
                let mut gold = self.gold[r].to_vec();
                if !crate::label_scheme::is_grammatical(&gold) {
                    let spans = labels_to_spans(&gold, DecodeMode::Lenient)
                        .expect("lenient decoding never fails");
                    gold = spans_to_labels(&spans, gold.len()).expect("lenient spans are valid");
                }
                Sentence { tokens, gold }
            })
            .collect()
    }
}

/// Consecutive ranges covering `0..len`, each at most `max` long. With
/// labels supplied, a cut is moved back to the nearest entity boundary when
/// one exists inside the window.
pub fn window_ranges(len: usize, labels: Option<&[Label]>, max: usize) -> Vec<Range<usize>> {
    assert!(max >= 1, "window size must be positive");
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let mut end = (start + max).min(len);
        if end < len {
            if let Some(labels) = labels {
                if let Some(e) = (start + 1..=end).rev().find(|&e| labels[e - 1].can_end()) {
                    end = e;
                }
            }
        }
        out.push(start..end);
        start = end;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub name: String,
    pub sentences: Vec<Sentence>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, sentences: Vec<Sentence>) -> Self {
        Dataset {
            name: name.into(),
            sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    pub fn gold(&self) -> Vec<Vec<Label>> {
        self.sentences.iter().map(|s| s.gold.clone()).collect()
    }
}

/// Reads a whitespace-separated `token label` corpus with blank lines
/// between sentences. Extra middle columns are ignored; the label is the
/// last field on the line.
pub fn read_conll<R: BufRead>(name: &str, reader: R) -> Result<Dataset> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut gold = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => Error::Parse {
                line: lineno,
                message: "stream is not valid UTF-8".into(),
            },
            _ => Error::Io(e),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if !tokens.is_empty() {
                sentences.push(Sentence {
                    tokens: std::mem::take(&mut tokens),
                    gold: std::mem::take(&mut gold),
                });
            }
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected `token label`, found {trimmed:?}"),
            });
        }
        let label = fields[fields.len() - 1]
            .parse::<Label>()
            .map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        tokens.push(fields[0].to_string());
        gold.push(label);
    }
    if !tokens.is_empty() {
        sentences.push(Sentence { tokens, gold });
    }
    Ok(Dataset::new(name, sentences))
}

/// Reads tokens for prediction. Lines may carry a single token or any
/// number of columns; only the first field is used and every gold label is
/// set to `O`.
pub fn read_unlabelled<R: BufRead>(name: &str, reader: R) -> Result<Dataset> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let close = |tokens: &mut Vec<String>, out: &mut Vec<Sentence>| {
        if !tokens.is_empty() {
            let n = tokens.len();
            out.push(Sentence {
                tokens: std::mem::take(tokens),
                gold: vec![Label::Outside; n],
            });
        }
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => Error::Parse {
                line: i + 1,
                message: "stream is not valid UTF-8".into(),
            },
            _ => Error::Io(e),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            close(&mut tokens, &mut sentences);
        } else if !trimmed.starts_with("-DOCSTART-") {
            tokens.push(trimmed.split_whitespace().next().unwrap_or_default().to_string());
        }
    }
    close(&mut tokens, &mut sentences);
    Ok(Dataset::new(name, sentences))
}

/// Writes the canonical form: `token label` lines, single blank line
/// between sentences, no trailing blank line.
pub fn write_conll<W: Write>(writer: &mut W, sentences: &[Sentence]) -> Result<()> {
    write_tagged(writer, sentences.iter().map(|s| (&s.tokens[..], &s.gold[..])))
}

/// Same layout as [`write_conll`] but with caller-supplied labels, used for
/// prediction files.
pub fn write_predictions<W: Write>(
    writer: &mut W,
    sentences: &[Sentence],
    predictions: &[Vec<Label>],
) -> Result<()> {
    if let Some((i, (s, p))) = sentences
        .iter()
        .zip(predictions)
        .enumerate()
        .find(|(_, (s, p))| s.len() != p.len())
    {
        return Err(Error::LengthMismatch {
            sentence: i,
            expected: s.len(),
            found: p.len(),
        });
    }
    write_tagged(
        writer,
        sentences
            .iter()
            .zip(predictions)
            .map(|(s, p)| (&s.tokens[..], &p[..])),
    )
}

fn write_tagged<'a, W: Write>(
    writer: &mut W,
    rows: impl Iterator<Item = (&'a [String], &'a [Label])>,
) -> Result<()> {
    for (i, (tokens, labels)) in rows.enumerate() {
        if i > 0 {
            writeln!(writer)?;
        }
        for (t, l) in tokens.iter().zip(labels) {
            writeln!(writer, "{t} {l}")?;
        }
    }
    Ok(())
}

/// Sentence-level random split. Both halves keep the input order.
pub fn split_train_dev(d: &Dataset, dev_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dev fraction must lie in (0, 1), got {dev_fraction}"
        )));
    }
    let n = d.len();
    let dev_n = (dev_fraction * n as f64).round() as usize;
    if dev_n == 0 || dev_n >= n {
        return Err(Error::InvalidArgument(format!(
            "dev split of {dev_n} sentences out of {n} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_dev = vec![false; n];
    for &i in &order[..dev_n] {
        is_dev[i] = true;
    }
    let (mut train, mut dev) = (Vec::with_capacity(n - dev_n), Vec::with_capacity(dev_n));
    for (s, dev_flag) in d.sentences.iter().zip(is_dev) {
        if dev_flag {
            dev.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((Dataset::new("train", train), Dataset::new("dev", dev)))
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    min_frequency: usize,
}

impl Vocabulary {
    const PAD: &'static str = "<pad>";
    const UNK: &'static str = "<unk>";

    /// Rebuilds a vocabulary from its id-ordered token list (as stored in
    /// checkpoints). The first two entries must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != Self::PAD || tokens[UNK_ID] != Self::UNK {
            return Err(Error::InvalidArgument(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        let ids = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            tokens,
            ids,
            min_frequency,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

pub fn build_vocabulary(d: &Dataset, min_frequency: usize) -> Result<Vocabulary> {
    if min_frequency < 1 {
        return Err(Error::InvalidArgument("min_frequency must be at least 1".into()));
    }
    if d.is_empty() {
        return Err(Error::InvalidArgument("cannot build a vocabulary from an empty dataset".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in d.sentences.iter().flat_map(|s| &s.tokens) {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_frequency)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = [Vocabulary::PAD, Vocabulary::UNK]
        .into_iter()
        .chain(kept.into_iter().map(|(t, _)| t))
        .map(str::to_string)
        .collect();
    Vocabulary::from_tokens(tokens, min_frequency)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDistribution {
    pub split: String,
    pub counts: Vec<usize>,
    pub total: usize,
}

impl SplitDistribution {
    pub fn percent(&self, label: Label) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.counts[label.index()] as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    pub splits: Vec<SplitDistribution>,
}

impl LabelDistribution {
    /// CSV with header `split,label,count,percent`, one row per split and label.
    pub fn to_csv(&self) -> String {
        let labels = LabelSet::clinical();
        let mut out = String::from("split,label,count,percent\n");
        for s in &self.splits {
            for &l in labels.labels() {
                out.push_str(&format!(
                    "{},{},{},{:.4}\n",
                    s.split,
                    l,
                    s.counts[l.index()],
                    s.percent(l)
                ));
            }
        }
        out
    }
}

pub fn label_distribution(splits: &[&Dataset]) -> LabelDistribution {
    let splits = splits
        .iter()
        .map(|d| {
            let mut counts = vec![0; Label::COUNT];
            for l in d.sentences.iter().flat_map(|s| &s.gold) {
                counts[l.index()] += 1;
            }
            SplitDistribution {
                split: d.name.clone(),
                total: counts.iter().sum(),
                counts,
            }
        })
        .collect();
    LabelDistribution { splits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_scheme::{Category, Position};

    fn read(s: &str) -> Result<Dataset> {
        read_conll("t", s.as_bytes())
    }

    fn sent(words: &str, labels: &str) -> Sentence {
        Sentence::new(
            words.split_whitespace().map(str::to_string).collect(),
            labels.split_whitespace().map(|l| l.parse().unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn unlabelled_input_takes_first_field() {
        let d = read_unlabelled("u", "take\n2 B-Dosage\n\n\nnow\n".as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.sentences[0].tokens, ["take", "2"]);
        assert!(d.sentences[1].gold.iter().all(|l| l.is_outside()));
        assert!(read_unlabelled("u", "".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn reads_worked_example() {
        let d = read("20 B-Strength\nmg I-Strength\nper I-Strength\nday E-Strength\n\n").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.sentences[0].len(), 4);
        assert_eq!(
            d.sentences[0].gold[3],
            Label::Tagged(Position::End, Category::Strength)
        );
    }

    #[test]
    fn empty_input_and_repeated_blanks() {
        assert!(read("").unwrap().is_empty());
        let d = read("\n\na O\n\n\n\nb O\nc O\n\n\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.sentences[1].tokens, ["b", "c"]);
    }

    #[test]
    fn bad_label_reports_line() {
        match read("aspirin S-Drug\n\nx Q-Drug\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match read("lonely\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_utf8_is_an_error() {
        let bytes: &[u8] = b"a O\n\xff\xfe O\n";
        assert!(matches!(
            read_conll("t", bytes),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn canonical_write_is_identity() {
        let text = "20 B-Strength\nmg E-Strength\n\naspirin S-Drug\ndaily S-Frequency\n";
        let d = read(text).unwrap();
        let mut out = Vec::new();
        write_conll(&mut out, &d.sentences).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    fn numbered(n: usize) -> Dataset {
        Dataset::new(
            "all",
            (0..n).map(|i| sent(&format!("w{i}"), "O")).collect(),
        )
    }

    #[test]
    fn split_sizes_and_partition() {
        let d = numbered(100);
        let (train, dev) = split_train_dev(&d, 0.10, 7).unwrap();
        assert_eq!((train.len(), dev.len()), (90, 10));
        let mut all: Vec<_> = train
            .sentences
            .iter()
            .chain(&dev.sentences)
            .map(|s| s.tokens[0].clone())
            .collect();
        all.sort();
        let mut expected: Vec<_> = d.sentences.iter().map(|s| s.tokens[0].clone()).collect();
        expected.sort();
        assert_eq!(all, expected);
        assert_eq!(split_train_dev(&d, 0.10, 7).unwrap(), (train, dev));
    }

    #[test]
    fn split_reproduces_reported_dev_size() {
        let d = numbered(41_497 + 4_536);
        let (_, dev) = split_train_dev(&d, 0.0985, 3).unwrap();
        assert!((dev.len() as i64 - 4_536).abs() <= 5, "{}", dev.len());
    }

    #[test]
    fn degenerate_splits_are_rejected() {
        let d = numbered(3);
        assert!(split_train_dev(&d, 0.01, 1).is_err());
        assert!(split_train_dev(&d, 0.99, 1).is_err());
        assert!(split_train_dev(&d, 0.0, 1).is_err());
        assert!(split_train_dev(&d, 1.0, 1).is_err());
    }

    #[test]
    fn vocabulary_ordering_and_threshold() {
        let d = Dataset::new("t", vec![sent("a a b", "O O O")]);
        let v = build_vocabulary(&d, 1).unwrap();
        assert_eq!((v.id("a"), v.id("b")), (2, 3));
        assert_eq!(v.id("zzz"), UNK_ID);
        let v2 = build_vocabulary(&d, 2).unwrap();
        assert_eq!(v2.id("a"), 2);
        assert_eq!(v2.id("b"), UNK_ID);
        let v3 = build_vocabulary(&d, 5).unwrap();
        assert_eq!(v3.len(), 2);
        assert_eq!(v3.token(PAD_ID), Some("<pad>"));
        assert!(build_vocabulary(&d, 0).is_err());
    }

    #[test]
    fn vocabulary_ties_break_lexicographically() {
        let d = Dataset::new("t", vec![sent("c b a", "O O O")]);
        let v = build_vocabulary(&d, 1).unwrap();
        assert_eq!(&v.tokens()[2..], ["a", "b", "c"]);
    }

    #[test]
    fn distribution_percentages() {
        let d = Dataset::new("test", vec![sent("a b c d", "O O S-Drug O")]);
        let dist = label_distribution(&[&d]);
        let s = &dist.splits[0];
        assert_eq!(s.percent("S-Drug".parse().unwrap()), 25.0);
        assert_eq!(s.percent(Label::Outside), 75.0);
        let csv = dist.to_csv();
        assert_eq!(csv.lines().count(), 1 + 37);
        assert!(csv.contains("test,S-Drug,1,25.0000"));
    }

    #[test]
    fn windows_cut_at_entity_boundaries() {
        let s = sent("a b c d e", "O B-Drug E-Drug O O");
        let w = s.windows(2);
        let lens: Vec<_> = w.iter().map(Sentence::len).collect();
        assert_eq!(lens, [1, 2, 2]);
        assert!(w.iter().all(|c| crate::label_scheme::is_grammatical(&c.gold)));
        let long = sent("a b c", "B-Drug I-Drug E-Drug");
        let w = long.windows(2);
        assert_eq!(w[0].gold, [
            Label::Tagged(Position::Begin, Category::Drug),
            Label::Tagged(Position::End, Category::Drug)
        ]);
        assert_eq!(w[1].gold, [Label::Tagged(Position::Single, Category::Drug)]);
    }
}
