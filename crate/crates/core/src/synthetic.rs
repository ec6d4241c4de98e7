//! Templated clinical-style sentences for end-to-end checks.
//!
//! Every template slot is one entity category; fillers are drawn from small
//! category lexicons so that all nine categories appear with single- and
//! multi-token spans. Some conditions appear both as reasons and as adverse
//! events, and dev/test sentences sometimes name drugs never seen in
//! training, so only context separates them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, Sentence};
use crate::label_scheme::{spans_to_labels, Category, Span};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train: 2000,
            dev: 200,
            test: 200,
            seed: 0,
        }
    }
}

const DRUGS: &[&str] = &[
    "lisinopril", "metformin", "warfarin", "heparin", "furosemide", "amoxicillin", "vancomycin",
    "aspirin", "atorvastatin", "prednisone", "insulin glargine", "metoprolol tartrate", "drugX",
    "oxycodone", "acetaminophen", "levofloxacin", "pantoprazole", "docusate sodium",
];
/// Only drawn for dev and test.
const HELD_OUT_DRUGS: &[&str] = &[
    "apixaban", "gabapentin", "ceftriaxone", "insulin lispro", "tramadol", "sertraline",
    "enoxaparin sodium", "digoxin",
];
const UNITS: &[&str] = &["mg", "mcg", "g", "units", "mg/ml"];
const DOSAGE_UNITS: &[&str] = &["tablet", "tablets", "puffs", "drops", "capsules"];
const FORMS: &[&str] = &["tab", "capsule", "oral solution", "inhaler", "patch", "suspension", "injection"];
const ROUTES: &[&str] = &["po", "by mouth", "iv", "intravenously", "subcutaneously", "sc", "topically", "pr"];
const FREQUENCIES: &[&str] = &[
    "daily", "twice daily", "bid", "tid", "qhs", "every 6 hours", "q8h", "once a day",
    "every morning", "prn",
];
const DURATION_UNITS: &[&str] = &["days", "weeks", "months", "doses"];
const REASONS: &[&str] = &[
    "hypertension", "pain", "atrial fibrillation", "infection", "diabetes", "constipation",
    "pneumonia", "heart failure", "anxiety", "fever", "nausea", "diarrhea",
];
const ADES: &[&str] = &[
    "rash", "nausea", "hypotension", "acute kidney injury", "bleeding", "hyperkalemia",
    "angioedema", "diarrhea", "thrombocytopenia", "constipation", "pain",
];
const NUMBERS: &[&str] = &["1", "2", "5", "10", "20", "25", "40", "50", "100", "250", "500", "0.5", "7", "14"];
const FILLER: &[&str] = &[
    "patient was seen today .",
    "vital signs stable .",
    "no acute distress noted .",
    "follow up with primary care .",
    "labs reviewed and unremarkable .",
    "discussed plan with family .",
];

/// A template is a list of pieces; `{X}` pieces are category slots.
const TEMPLATES: &[&str] = &[
    "take {Strength} of {Drug} {Route} {Frequency} for {Duration} .",
    "start {Drug} {Strength} {Form} {Route} {Frequency} for {Reason} .",
    "{Drug} {Dosage} {Route} {Frequency} .",
    "{Drug} was discontinued due to {ADE} .",
    "patient developed {ADE} after {Drug} .",
    "continue {Drug} {Strength} {Frequency} for {Reason} .",
    "give {Dosage} of {Drug} {Form} {Route} {Frequency} for {Duration} .",
    "{Drug} {Strength} {Route} {Frequency} prn {Reason} .",
    "she was treated with {Drug} for {Duration} for {Reason} .",
    "held {Drug} given {ADE} , switched to {Drug} {Strength} {Frequency} .",
    "{Drug} {Form} {Dosage} {Frequency} .",
    "complained of {ADE} on {Drug} , will monitor .",
];

fn fill(cat: Category, held_out: bool, rng: &mut ChaCha8Rng) -> String {
    let pick = |xs: &[&str], rng: &mut ChaCha8Rng| xs.choose(rng).unwrap().to_string();
    match cat {
        Category::Drug if held_out && rng.gen_bool(0.3) => pick(HELD_OUT_DRUGS, rng),
        Category::Drug => pick(DRUGS, rng),
        Category::Strength => format!("{} {}", pick(NUMBERS, rng), pick(UNITS, rng)),
        Category::Dosage => format!("{} {}", rng.gen_range(1..=3), pick(DOSAGE_UNITS, rng)),
        Category::Form => pick(FORMS, rng),
        Category::Route => pick(ROUTES, rng),
        Category::Frequency => pick(FREQUENCIES, rng),
        Category::Duration => format!("{} {}", pick(NUMBERS, rng), pick(DURATION_UNITS, rng)),
        Category::Reason => pick(REASONS, rng),
        Category::Ade => pick(ADES, rng),
    }
}

/// One sentence from a random template, or an entity-free filler line.
/// `held_out` lets drug slots draw from names absent from training data.
pub fn sentence(rng: &mut ChaCha8Rng, held_out: bool) -> Sentence {
    if rng.gen_bool(0.1) {
        let tokens: Vec<String> = FILLER.choose(rng).unwrap().split(' ').map(str::to_string).collect();
        let n = tokens.len();
        return Sentence::new(tokens, vec![crate::label_scheme::Label::Outside; n]).unwrap();
    }
    let template = TEMPLATES.choose(rng).unwrap();
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    for piece in template.split(' ') {
        match piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            Some(name) => {
                let cat: Category = name.parse().expect("template slots name categories");
                let start = tokens.len();
                tokens.extend(fill(cat, held_out, rng).split(' ').map(str::to_string));
                spans.push(Span::new(cat, start, tokens.len()));
            }
            None => tokens.push(piece.to_string()),
        }
    }
    let labels = spans_to_labels(&spans, tokens.len()).expect("template spans are disjoint");
    Sentence::new(tokens, labels).unwrap()
}

fn dataset(name: &str, n: usize, seed: u64, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, 0));
    let held_out = stream != 1;
    Dataset::new(name, (0..n).map(|_| sentence(&mut rng, held_out)).collect())
}

/// Train, dev and test sets drawn from independent seeded streams.
pub fn generate(cfg: &SyntheticConfig) -> (Dataset, Dataset, Dataset) {
    (
        dataset("train", cfg.train, cfg.seed, 1),
        dataset("dev", cfg.dev, cfg.seed, 2),
        dataset("test", cfg.test, cfg.seed, 3),
    )
}
