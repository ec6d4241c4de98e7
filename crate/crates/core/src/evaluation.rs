//! Entity-, token-, BIOES- and binary-level scoring plus confusion matrices.
//!
//! Scoring works on per-sentence [`Tally`] values that merge associatively,
//! so a corpus can be tallied in parallel and reduced in order. Every rate
//! with a zero denominator is defined as 0.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::label_scheme::{labels_to_spans, Category, DecodeMode, Label, LabelSet, Span};
use crate::par::{self, Parallelism};

const NUM_CATEGORIES: usize = 9;

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Raw counts for one or more sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tally {
    pub tokens: u64,
    pub exact_tokens: u64,
    /// Entity counts per category: (correct, predicted, gold).
    pub entities: [(u64, u64, u64); NUM_CATEGORIES],
    /// Category-level token counts: (correct, predicted, gold).
    pub category_tokens: [(u64, u64, u64); NUM_CATEGORIES],
    /// Full confusion counts, row = gold label index, column = predicted.
    pub confusion: Vec<u64>,
}

impl Default for Tally {
    fn default() -> Self {
        Tally {
            tokens: 0,
            exact_tokens: 0,
            entities: [(0, 0, 0); NUM_CATEGORIES],
            category_tokens: [(0, 0, 0); NUM_CATEGORIES],
            confusion: vec![0; Label::COUNT * Label::COUNT],
        }
    }
}

impl Tally {
    pub fn sentence(gold: &[Label], pred: &[Label]) -> Tally {
        debug_assert_eq!(gold.len(), pred.len());
        let mut t = Tally {
            tokens: gold.len() as u64,
            ..Tally::default()
        };
        for (&g, &p) in gold.iter().zip(pred) {
            t.confusion[g.index() * Label::COUNT + p.index()] += 1;
            if g == p {
                t.exact_tokens += 1;
            }
            if let Some(c) = p.category() {
                t.category_tokens[c.index()].1 += 1;
            }
            if let Some(c) = g.category() {
                t.category_tokens[c.index()].2 += 1;
                if p.category() == Some(c) {
                    t.category_tokens[c.index()].0 += 1;
                }
            }
        }
        let gold_spans = decode(gold);
        let pred_spans = decode(pred);
        let gold_set: HashSet<Span> = gold_spans.iter().copied().collect();
        for s in &gold_spans {
            t.entities[s.category.index()].2 += 1;
        }
        for s in &pred_spans {
            let row = &mut t.entities[s.category.index()];
            row.1 += 1;
            if gold_set.contains(s) {
                row.0 += 1;
            }
        }
        t
    }

    pub fn merge(&mut self, other: &Tally) {
        self.tokens += other.tokens;
        self.exact_tokens += other.exact_tokens;
        for (a, b) in self.entities.iter_mut().zip(&other.entities) {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
        }
        for (a, b) in self.category_tokens.iter_mut().zip(&other.category_tokens) {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
    }

    fn confusion_at(&self, gold: usize, pred: usize) -> u64 {
        self.confusion[gold * Label::COUNT + pred]
    }
}

fn decode(labels: &[Label]) -> Vec<Span> {
    labels_to_spans(labels, DecodeMode::Lenient).expect("lenient decoding never fails")
}

fn check_lengths(gold: &[Vec<Label>], pred: &[Vec<Label>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::LengthMismatch {
                sentence: i,
                expected: g.len(),
                found: p.len(),
            });
        }
    }
    Ok(())
}

/// Tallies a whole corpus, sentence by sentence, merged in input order.
pub fn tally(gold: &[Vec<Label>], pred: &[Vec<Label>], mode: Parallelism) -> Result<Tally> {
    check_lengths(gold, pred)?;
    let parts = par::map(mode, gold, |i, g| Tally::sentence(g, &pred[i]));
    let mut total = Tally::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryRow {
    pub category: Category,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    /// Predicted entities of this category, right or wrong.
    pub found: u64,
    pub correct: u64,
    pub gold: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityReport {
    pub acc: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub corr: u64,
    pub found: u64,
    pub gold: u64,
    pub per_category: Vec<CategoryRow>,
}

impl EntityReport {
    pub fn from_tally(t: &Tally) -> Self {
        let per_category: Vec<CategoryRow> = Category::ALL
            .iter()
            .map(|&c| {
                let (correct, found, gold) = t.entities[c.index()];
                let pre = ratio(correct, found);
                let rec = ratio(correct, gold);
                CategoryRow {
                    category: c,
                    pre,
                    rec,
                    f1: harmonic(pre, rec),
                    found,
                    correct,
                    gold,
                }
            })
            .collect();
        let corr = per_category.iter().map(|r| r.correct).sum();
        let found = per_category.iter().map(|r| r.found).sum();
        let gold = per_category.iter().map(|r| r.gold).sum();
        let pre = ratio(corr, found);
        let rec = ratio(corr, gold);
        EntityReport {
            acc: ratio(t.exact_tokens, t.tokens),
            pre,
            rec,
            f1: harmonic(pre, rec),
            corr,
            found,
            gold,
            per_category,
        }
    }

    pub fn category(&self, c: Category) -> &CategoryRow {
        &self.per_category[c.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRow {
    pub category: Category,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub support: u64,
    pub predicted: u64,
    pub correct: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenReport {
    pub rows: Vec<TokenRow>,
}

impl TokenReport {
    pub fn from_tally(t: &Tally) -> Self {
        let rows = Category::ALL
            .iter()
            .map(|&c| {
                let (correct, predicted, support) = t.category_tokens[c.index()];
                let pre = ratio(correct, predicted);
                let rec = ratio(correct, support);
                TokenRow {
                    category: c,
                    pre,
                    rec,
                    f1: harmonic(pre, rec),
                    support,
                    predicted,
                    correct,
                }
            })
            .collect();
        TokenReport { rows }
    }

    pub fn category(&self, c: Category) -> &TokenRow {
        &self.rows[c.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub label: Label,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BioesReport {
    pub rows: Vec<LabelRow>,
}

impl BioesReport {
    pub fn from_tally(t: &Tally) -> Self {
        let n = Label::COUNT;
        let rows = LabelSet::clinical()
            .labels()
            .iter()
            .map(|&label| {
                let k = label.index();
                let correct = t.confusion_at(k, k);
                let support: u64 = (0..n).map(|p| t.confusion_at(k, p)).sum();
                let predicted: u64 = (0..n).map(|g| t.confusion_at(g, k)).sum();
                let pre = ratio(correct, predicted);
                let rec = ratio(correct, support);
                LabelRow {
                    label,
                    pre,
                    rec,
                    f1: harmonic(pre, rec),
                    support,
                }
            })
            .collect();
        BioesReport { rows }
    }

    pub fn label(&self, l: Label) -> &LabelRow {
        &self.rows[l.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryReport {
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub acc: f64,
}

impl BinaryReport {
    pub fn from_tally(t: &Tally) -> Self {
        let c = ConfusionMatrix::binary(t);
        let (tp, fn_, fp, tn) = (c.counts[0][0], c.counts[0][1], c.counts[1][0], c.counts[1][1]);
        let pre = ratio(tp, tp + fp);
        let rec = ratio(tp, tp + fn_);
        BinaryReport {
            pre,
            rec,
            f1: harmonic(pre, rec),
            acc: ratio(tp + tn, tp + fn_ + fp + tn),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfusionMode {
    Full,
    Binary,
}

/// Square count matrix; rows are gold, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn full(t: &Tally) -> Self {
        let n = Label::COUNT;
        ConfusionMatrix {
            labels: LabelSet::clinical().labels().iter().map(Label::to_string).collect(),
            counts: (0..n)
                .map(|g| (0..n).map(|p| t.confusion_at(g, p)).collect())
                .collect(),
        }
    }

    /// Two classes in the order `special`, `O`.
    pub fn binary(t: &Tally) -> Self {
        let mut counts = vec![vec![0; 2]; 2];
        let class = |i: usize| usize::from(i == 0);
        for g in 0..Label::COUNT {
            for p in 0..Label::COUNT {
                counts[class(g)][class(p)] += t.confusion_at(g, p);
            }
        }
        ConfusionMatrix {
            labels: vec!["special".into(), "O".into()],
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(j, &v)| i == j || v == 0))
    }
}

pub fn entity_level_eval(gold: &[Vec<Label>], pred: &[Vec<Label>]) -> Result<EntityReport> {
    Ok(EntityReport::from_tally(&tally(gold, pred, Parallelism::default())?))
}

pub fn token_level_eval(gold: &[Vec<Label>], pred: &[Vec<Label>]) -> Result<TokenReport> {
    Ok(TokenReport::from_tally(&tally(gold, pred, Parallelism::default())?))
}

pub fn bioes_level_eval(gold: &[Vec<Label>], pred: &[Vec<Label>]) -> Result<BioesReport> {
    Ok(BioesReport::from_tally(&tally(gold, pred, Parallelism::default())?))
}

pub fn binary_eval(gold: &[Vec<Label>], pred: &[Vec<Label>]) -> Result<BinaryReport> {
    Ok(BinaryReport::from_tally(&tally(gold, pred, Parallelism::default())?))
}

pub fn confusion(gold: &[Vec<Label>], pred: &[Vec<Label>], mode: ConfusionMode) -> Result<ConfusionMatrix> {
    let t = tally(gold, pred, Parallelism::default())?;
    Ok(match mode {
        ConfusionMode::Full => ConfusionMatrix::full(&t),
        ConfusionMode::Binary => ConfusionMatrix::binary(&t),
    })
}

/// Every report computed from one pass over the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBundle {
    pub entity: EntityReport,
    pub token: TokenReport,
    pub bioes: BioesReport,
    pub binary: BinaryReport,
    pub confusion_full: ConfusionMatrix,
    pub confusion_binary: ConfusionMatrix,
}

impl EvalBundle {
    pub fn compute(gold: &[Vec<Label>], pred: &[Vec<Label>], mode: Parallelism) -> Result<Self> {
        let t = tally(gold, pred, mode)?;
        Ok(EvalBundle {
            entity: EntityReport::from_tally(&t),
            token: TokenReport::from_tally(&t),
            bioes: BioesReport::from_tally(&t),
            binary: BinaryReport::from_tally(&t),
            confusion_full: ConfusionMatrix::full(&t),
            confusion_binary: ConfusionMatrix::binary(&t),
        })
    }

    /// `(file name, contents)` for each rendered artifact.
    pub fn render(&self) -> Vec<(&'static str, String)> {
        vec![
            ("entity.csv", render_entity_csv(&self.entity)),
            ("token.csv", render_token_csv(&self.token)),
            ("bioes.csv", render_bioes_csv(&self.bioes)),
            ("binary.csv", render_binary_csv(&self.binary)),
            ("confusion_full.csv", render_confusion_csv(&self.confusion_full)),
            ("confusion_binary.csv", render_confusion_csv(&self.confusion_binary)),
        ]
    }
}

/// A rate as a percentage with two decimals, e.g. `0.7501 -> "75.01"`.
pub fn pct(rate: f64) -> String {
    format!("{:.2}", 100.0 * rate)
}

/// Overall row (`Acc,Pre,Rec,F1,Corr`) followed by one row per category
/// (`Category,Pre,Rec,F1,found`). Rates are percentages.
pub fn render_entity_csv(r: &EntityReport) -> String {
    let mut out = String::from("Acc,Pre,Rec,F1,Corr\n");
    let _ = writeln!(
        out,
        "{},{},{},{},{}",
        pct(r.acc),
        pct(r.pre),
        pct(r.rec),
        pct(r.f1),
        r.corr
    );
    out.push_str("Category,Pre,Rec,F1,found\n");
    for row in &r.per_category {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.category,
            pct(row.pre),
            pct(row.rec),
            pct(row.f1),
            row.found
        );
    }
    out
}

/// Human-readable entity table with `%` cells.
pub fn render_entity_table(r: &EntityReport, title: &str) -> String {
    let mut out = String::new();
    if !title.is_empty() {
        let _ = writeln!(out, "{title}");
    }
    let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8} {:>8}", "Acc", "Pre", "Rec", "F1", "Corr");
    let _ = writeln!(
        out,
        "{:<10} {:>8} {:>8} {:>8} {:>8}",
        format!("{}%", pct(r.acc)),
        format!("{}%", pct(r.pre)),
        format!("{}%", pct(r.rec)),
        format!("{}%", pct(r.f1)),
        r.corr
    );
    let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8} {:>8}", "Category", "Pre", "Rec", "F1", "found");
    for row in &r.per_category {
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>8} {:>8} {:>8}",
            row.category.name(),
            format!("{}%", pct(row.pre)),
            format!("{}%", pct(row.rec)),
            format!("{}%", pct(row.f1)),
            row.found
        );
    }
    out
}

pub fn render_token_csv(r: &TokenReport) -> String {
    let mut out = String::from("category,pre,rec,f1,support\n");
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.category,
            pct(row.pre),
            pct(row.rec),
            pct(row.f1),
            row.support
        );
    }
    out
}

pub fn render_bioes_csv(r: &BioesReport) -> String {
    let mut out = String::from("label,pre,rec,f1,support\n");
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.label,
            pct(row.pre),
            pct(row.rec),
            pct(row.f1),
            row.support
        );
    }
    out
}

pub fn render_binary_csv(r: &BinaryReport) -> String {
    format!(
        "pre,rec,f1,acc\n{},{},{},{}\n",
        pct(r.pre),
        pct(r.rec),
        pct(r.f1),
        pct(r.acc)
    )
}

pub fn render_confusion_csv(c: &ConfusionMatrix) -> String {
    let mut out = String::from("gold\\pred");
    for l in &c.labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (label, row) in c.labels.iter().zip(&c.counts) {
        out.push_str(label);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Trainable-parameter table: model names, then counts, then each count as
/// a ratio of the first model's (with signed percentage change).
pub fn render_model_summary(models: &[(&str, usize)]) -> String {
    let names: Vec<&str> = models.iter().map(|(n, _)| *n).collect();
    let counts: Vec<String> = models.iter().map(|(_, c)| c.to_string()).collect();
    let base = models.first().map_or(0, |m| m.1) as f64;
    let ratios: Vec<String> = models
        .iter()
        .enumerate()
        .map(|(i, &(_, c))| {
            if i == 0 || base == 0.0 {
                "--".to_string()
            } else {
                let r = c as f64 / base;
                format!("{r:.4} ({:+.2}%)", (r - 1.0) * 100.0)
            }
        })
        .collect();
    format!("{}\n{}\n{}\n", names.join(","), counts.join(","), ratios.join(","))
}
