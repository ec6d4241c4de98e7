//! Decoding heads over emission lattices.
//!
//! Two heads share the same `T x L` lattice input:
//!
//! * an independent per-token softmax classifier ([`classify_decode`],
//!   [`softmax_xent`]);
//! * a linear-chain CRF with transition, start and end scores
//!   ([`crf_log_partition`], [`crf_nll`], [`crf_viterbi`], [`crf_marginals`]).
//!
//! Path score for labels `y`:
//!
//! ```text
//! start[y0] + sum_t e[t, yt] + sum_t trans[y(t-1), yt] + end[y(T-1)]
//! ```
//!
//! All lattice sums run in the log domain with max-subtraction. The CRF
//! code is generic in `L`; BIOES constraints only apply to the 37-label
//! clinical set.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::corpus::Dataset;
use crate::encoder::scaled_uniform;
use crate::error::{Error, Result};
use crate::label_scheme::{is_valid_transition, Label, LabelSet};
use crate::tensor::{matrix_mut, matrix_ref, vector_mut, vector_ref, ParamSet, TensorMut, TensorRef};

/// Score pinned onto transitions the BIOES grammar forbids.
pub const FORBIDDEN_SCORE: f64 = -1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionSource {
    EncoderHead,
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionLattice {
    pub scores: Array2<f64>,
    pub source: EmissionSource,
}

impl EmissionLattice {
    pub fn new(scores: Array2<f64>, source: EmissionSource) -> Result<Self> {
        if let Some(((t, l), _)) = scores.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite emission at position {t}, label {l}"
            )));
        }
        Ok(EmissionLattice { scores, source })
    }

    pub fn from_encoder(scores: Array2<f64>) -> Self {
        EmissionLattice {
            scores,
            source: EmissionSource::EncoderHead,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.nrows() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.scores.ncols()
    }
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn argmax_lowest(row: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.enumerate() {
        if v > best_v || i == 0 {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Per-position argmax; ties go to the lowest label index.
pub fn classify_decode(e: &EmissionLattice) -> Vec<usize> {
    e.scores
        .rows()
        .into_iter()
        .map(|r| argmax_lowest(r.iter().copied()))
        .collect()
}

/// Mean token cross-entropy and its gradient with respect to the lattice.
pub fn softmax_xent(e: &EmissionLattice, gold: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_gold(e, gold)?;
    let t = e.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(e.scores.dim());
    for ((row, mut g), &y) in e.scores.rows().into_iter().zip(grad.rows_mut()).zip(gold) {
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[y];
        g.assign(&row.mapv(|v| (v - lse).exp()));
        g[y] -= 1.0;
    }
    grad /= t;
    Ok((loss / t, grad))
}

fn check_gold(e: &EmissionLattice, gold: &[usize]) -> Result<()> {
    if e.is_empty() {
        return Err(Error::EmptyLattice);
    }
    if gold.len() != e.len() {
        return Err(Error::LengthMismatch {
            sentence: 0,
            expected: e.len(),
            found: gold.len(),
        });
    }
    if let Some(&y) = gold.iter().find(|&&y| y >= e.num_labels()) {
        return Err(Error::InvalidArgument(format!(
            "gold label index {y} outside lattice width {}",
            e.num_labels()
        )));
    }
    Ok(())
}

/// Linear-chain CRF transition parameters. Doubles as its own gradient
/// container.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub trans: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
    constrain_bioes: bool,
}

impl TransitionMatrix {
    pub fn zeros(num_labels: usize) -> Self {
        TransitionMatrix {
            trans: Array2::zeros((num_labels, num_labels)),
            start: Array1::zeros(num_labels),
            end: Array1::zeros(num_labels),
            constrain_bioes: false,
        }
    }

    pub fn from_parts(trans: Array2<f64>, start: Array1<f64>, end: Array1<f64>) -> Result<Self> {
        let l = start.len();
        if trans.dim() != (l, l) || end.len() != l {
            return Err(Error::InvalidArgument("transition shapes disagree".into()));
        }
        Ok(TransitionMatrix {
            trans,
            start,
            end,
            constrain_bioes: false,
        })
    }

    /// Zero-initialised matrix over the clinical label set, with
    /// ungrammatical transitions (and starts/ends) pinned when `constrain`.
    pub fn clinical(constrain: bool) -> Self {
        let mut t = Self::zeros(Label::COUNT);
        if constrain {
            t.constrain_bioes = true;
            t.apply_pins();
        }
        t
    }

    pub fn num_labels(&self) -> usize {
        self.start.len()
    }

    pub fn is_constrained(&self) -> bool {
        self.constrain_bioes
    }

    pub fn trans_allowed(&self, from: usize, to: usize) -> bool {
        !self.constrain_bioes || is_valid_transition(label(from), label(to))
    }

    pub fn start_allowed(&self, y: usize) -> bool {
        !self.constrain_bioes || label(y).can_start()
    }

    pub fn end_allowed(&self, y: usize) -> bool {
        !self.constrain_bioes || label(y).can_end()
    }

    fn apply_pins(&mut self) {
        let l = self.num_labels();
        for i in 0..l {
            if !self.start_allowed(i) {
                self.start[i] = FORBIDDEN_SCORE;
            }
            if !self.end_allowed(i) {
                self.end[i] = FORBIDDEN_SCORE;
            }
            for j in 0..l {
                if !self.trans_allowed(i, j) {
                    self.trans[[i, j]] = FORBIDDEN_SCORE;
                }
            }
        }
    }

    /// Zeroes gradient entries that belong to pinned scores.
    fn mask_gradient(&self, g: &mut TransitionMatrix) {
        if !self.constrain_bioes {
            return;
        }
        let l = self.num_labels();
        for i in 0..l {
            if !self.start_allowed(i) {
                g.start[i] = 0.0;
            }
            if !self.end_allowed(i) {
                g.end[i] = 0.0;
            }
            for j in 0..l {
                if !self.trans_allowed(i, j) {
                    g.trans[[i, j]] = 0.0;
                }
            }
        }
    }

    pub fn path_score(&self, e: &EmissionLattice, path: &[usize]) -> f64 {
        let mut s = self.start[path[0]] + self.end[path[path.len() - 1]];
        for (t, &y) in path.iter().enumerate() {
            s += e.scores[[t, y]];
            if t > 0 {
                s += self.trans[[path[t - 1], y]];
            }
        }
        s
    }
}

fn label(i: usize) -> Label {
    Label::from_index(i).expect("constrained transitions require the clinical label set")
}

impl ParamSet for TransitionMatrix {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            matrix_ref("crf.trans", &self.trans),
            vector_ref("crf.start", &self.start),
            vector_ref("crf.end", &self.end),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            matrix_mut("crf.trans", &mut self.trans),
            vector_mut("crf.start", &mut self.start),
            vector_mut("crf.end", &mut self.end),
        ]
    }
}

fn check_lattice(e: &EmissionLattice, t: &TransitionMatrix) -> Result<()> {
    if e.is_empty() {
        return Err(Error::EmptyLattice);
    }
    if e.num_labels() != t.num_labels() {
        return Err(Error::InvalidArgument(format!(
            "lattice has {} labels, transitions {}",
            e.num_labels(),
            t.num_labels()
        )));
    }
    Ok(())
}

/// Forward log-scores `alpha` (T x L) and log Z.
fn forward_table(e: &EmissionLattice, t: &TransitionMatrix) -> (Array2<f64>, f64) {
    let (n, l) = e.scores.dim();
    let mut alpha = Array2::zeros((n, l));
    alpha.row_mut(0).assign(&(&t.start + &e.scores.row(0)));
    for pos in 1..n {
        for j in 0..l {
            let prev = alpha.row(pos - 1);
            let col = t.trans.column(j);
            alpha[[pos, j]] = log_sum_exp(prev.iter().zip(col.iter()).map(|(a, b)| a + b))
                + e.scores[[pos, j]];
        }
    }
    let log_z = log_sum_exp(alpha.row(n - 1).iter().zip(t.end.iter()).map(|(a, b)| a + b));
    (alpha, log_z)
}

/// Backward log-scores `beta` (T x L), with `beta[T-1] = end`.
fn backward_table(e: &EmissionLattice, t: &TransitionMatrix) -> Array2<f64> {
    let (n, l) = e.scores.dim();
    let mut beta = Array2::zeros((n, l));
    beta.row_mut(n - 1).assign(&t.end);
    for pos in (0..n - 1).rev() {
        let next: Array1<f64> = &e.scores.row(pos + 1) + &beta.row(pos + 1);
        for i in 0..l {
            let row = t.trans.row(i);
            beta[[pos, i]] = log_sum_exp(row.iter().zip(next.iter()).map(|(a, b)| a + b));
        }
    }
    beta
}

pub fn crf_log_partition(e: &EmissionLattice, t: &TransitionMatrix) -> Result<f64> {
    check_lattice(e, t)?;
    Ok(forward_table(e, t).1)
}

pub fn crf_marginals(e: &EmissionLattice, t: &TransitionMatrix) -> Result<Array2<f64>> {
    check_lattice(e, t)?;
    let (alpha, log_z) = forward_table(e, t);
    let beta = backward_table(e, t);
    Ok((alpha + beta).mapv(|v| (v - log_z).exp()))
}

#[derive(Debug, Clone)]
pub struct CrfLoss {
    pub loss: f64,
    pub grad_emissions: Array2<f64>,
    pub grad_transitions: TransitionMatrix,
}

/// Negative log-likelihood of `gold` with expected-minus-observed gradients.
pub fn crf_nll(e: &EmissionLattice, t: &TransitionMatrix, gold: &[usize]) -> Result<CrfLoss> {
    check_lattice(e, t)?;
    check_gold(e, gold)?;
    if t.constrain_bioes {
        if !t.start_allowed(gold[0]) {
            return Err(Error::Grammar {
                position: 0,
                detail: format!("gold cannot start with {}", label(gold[0])),
            });
        }
        for (i, w) in gold.windows(2).enumerate() {
            if !t.trans_allowed(w[0], w[1]) {
                return Err(Error::Grammar {
                    position: i + 1,
                    detail: format!("gold pair ({}, {}) is forbidden", label(w[0]), label(w[1])),
                });
            }
        }
        let last = gold[gold.len() - 1];
        if !t.end_allowed(last) {
            return Err(Error::Grammar {
                position: gold.len(),
                detail: format!("gold cannot end with {}", label(last)),
            });
        }
    }
    let (n, l) = e.scores.dim();
    let (alpha, log_z) = forward_table(e, t);
    let beta = backward_table(e, t);
    let mut grad_e = (&alpha + &beta).mapv(|v| (v - log_z).exp());
    let mut g = t.zeros_like();
    g.start.assign(&grad_e.row(0));
    g.end.assign(&grad_e.row(n - 1));
    for pos in 0..n - 1 {
        let next: Array1<f64> = &e.scores.row(pos + 1) + &beta.row(pos + 1);
        for i in 0..l {
            let a = alpha[[pos, i]] - log_z;
            for j in 0..l {
                g.trans[[i, j]] += (a + t.trans[[i, j]] + next[j]).exp();
            }
        }
    }
    for (pos, &y) in gold.iter().enumerate() {
        grad_e[[pos, y]] -= 1.0;
        if pos > 0 {
            g.trans[[gold[pos - 1], y]] -= 1.0;
        }
    }
    g.start[gold[0]] -= 1.0;
    g.end[gold[n - 1]] -= 1.0;
    t.mask_gradient(&mut g);
    let loss = (log_z - t.path_score(e, gold)).max(0.0);
    Ok(CrfLoss {
        loss,
        grad_emissions: grad_e,
        grad_transitions: g,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPath {
    pub path: Vec<usize>,
    pub score: f64,
}

impl DecodedPath {
    /// The path as clinical labels; `None` if an index is out of range.
    pub fn labels(&self) -> Option<Vec<Label>> {
        self.path.iter().map(|&i| Label::from_index(i)).collect()
    }
}

pub fn crf_viterbi(e: &EmissionLattice, t: &TransitionMatrix) -> Result<DecodedPath> {
    check_lattice(e, t)?;
    let (n, l) = e.scores.dim();
    let mut delta = Array2::zeros((n, l));
    let mut back = Array2::<usize>::zeros((n, l));
    delta.row_mut(0).assign(&(&t.start + &e.scores.row(0)));
    for pos in 1..n {
        for j in 0..l {
            let best = argmax_lowest((0..l).map(|i| delta[[pos - 1, i]] + t.trans[[i, j]]));
            back[[pos, j]] = best;
            delta[[pos, j]] = delta[[pos - 1, best]] + t.trans[[best, j]] + e.scores[[pos, j]];
        }
    }
    let finals = delta.row(n - 1).to_owned() + &t.end;
    let mut y = argmax_lowest(finals.iter().copied());
    let score = finals[y];
    let mut path = vec![0; n];
    for pos in (0..n).rev() {
        path[pos] = y;
        if pos > 0 {
            y = back[[pos, y]];
        }
    }
    Ok(DecodedPath { path, score })
}

/// Linear map from encoder representations to label scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl EmissionHead {
    pub fn init(d_model: usize, num_labels: usize, rng: &mut impl Rng) -> Self {
        EmissionHead {
            weight: scaled_uniform(rng, d_model, num_labels),
            bias: Array1::zeros(num_labels),
        }
    }

    pub fn forward(&self, h: &Array2<f64>) -> Array2<f64> {
        h.dot(&self.weight) + &self.bias
    }

    /// Returns the head gradient and the gradient with respect to `h`.
    pub fn backward(&self, h: &Array2<f64>, d_scores: &Array2<f64>) -> (EmissionHead, Array2<f64>) {
        let g = EmissionHead {
            weight: h.t().dot(d_scores),
            bias: d_scores.sum_axis(Axis(0)),
        };
        (g, d_scores.dot(&self.weight.t()))
    }
}

impl ParamSet for EmissionHead {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            matrix_ref("head.weight", &self.weight),
            vector_ref("head.bias", &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            matrix_mut("head.weight", &mut self.weight),
            vector_mut("head.bias", &mut self.bias),
        ]
    }
}

const EMISSION_HEADER: &str = "#labels: ";

/// Writes lattices in the emission file format: a `#labels:` header fixing
/// column order, one line of scores per token, blank lines between
/// sentences. Values carry 17 significant digits so they re-read exactly.
pub fn write_emissions<W: Write>(
    writer: &mut W,
    lattices: &[EmissionLattice],
    labelset: &LabelSet,
) -> Result<()> {
    writeln!(writer, "{EMISSION_HEADER}{}", labelset.joined())?;
    for (i, lat) in lattices.iter().enumerate() {
        if lat.num_labels() != labelset.len() {
            return Err(Error::InvalidArgument(format!(
                "lattice {i} has {} columns, label set {}",
                lat.num_labels(),
                labelset.len()
            )));
        }
        if i > 0 {
            writeln!(writer)?;
        }
        for row in lat.scores.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(writer, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub fn load_emissions<R: BufRead>(reader: R, labelset: &LabelSet) -> Result<Vec<EmissionLattice>> {
    let width = labelset.len();
    let mut lattices = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut seen_header = false;
    let flush = |rows: &mut Vec<f64>, out: &mut Vec<EmissionLattice>| {
        if !rows.is_empty() {
            let t = rows.len() / width;
            let scores = Array2::from_shape_vec((t, width), std::mem::take(rows))
                .expect("row widths were checked");
            out.push(EmissionLattice {
                scores,
                source: EmissionSource::ExternalFile,
            });
        }
    };
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if !seen_header {
            let Some(rest) = line.strip_prefix(EMISSION_HEADER) else {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected `{EMISSION_HEADER}...` header"),
                });
            };
            if rest.trim() != labelset.joined() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "label header does not match the label set order".into(),
                });
            }
            seen_header = true;
            continue;
        }
        if line.trim().is_empty() {
            flush(&mut rows, &mut lattices);
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != width {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {width} columns, found {}", fields.len()),
            });
        }
        for (col, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("column {}: {f:?} is not a number", col + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("column {}: non-finite value", col + 1),
                });
            }
            rows.push(v);
        }
    }
    flush(&mut rows, &mut lattices);
    Ok(lattices)
}

/// Verifies one lattice per sentence with matching token counts.
pub fn check_alignment(lattices: &[EmissionLattice], d: &Dataset) -> Result<()> {
    if lattices.len() != d.len() {
        return Err(Error::InvalidArgument(format!(
            "{} emission lattices for {} sentences in {}",
            lattices.len(),
            d.len(),
            d.name
        )));
    }
    for (i, (lat, s)) in lattices.iter().zip(&d.sentences).enumerate() {
        if lat.len() != s.len() {
            return Err(Error::LengthMismatch {
                sentence: i,
                expected: s.len(),
                found: lat.len(),
            });
        }
    }
    Ok(())
}
