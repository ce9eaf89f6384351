//! Annotation record validation, retry budgeting and agreement statistics.
//!
//! A record is one JSON line of the annotation format (see
//! [`AnnotatedPair`]). [`validate`] runs format assertions first; only a
//! well-formed record is checked for consistency against its own query and
//! code. The annotator is abstracted as an [`AttemptSource`].

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{char_slice, line_count, tokenize, AnnotatedPair, PartitionViolation, TextKind, Token};

/// Default number of retries after the first attempt.
pub const DEFAULT_RETRY_BUDGET: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    FormatFail,
    ConsistencyFail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assertion {
    // format
    Parseable,
    RequiredField,
    FieldType,
    // consistency
    SpanVerbatim,
    SpanOffsets,
    TokenRange,
    SpansDisjoint,
    DuplicateConcept,
    UnknownConcept,
    UnitRange,
    UnitTextVerbatim,
}

impl Assertion {
    pub fn is_format(self) -> bool {
        matches!(self, Assertion::Parseable | Assertion::RequiredField | Assertion::FieldType)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub assertion: Assertion,
    pub detail: String,
}

impl Violation {
    fn new(assertion: Assertion, detail: impl Into<String>) -> Self {
        Violation {
            assertion,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    /// The record's `id` field, when it could be read.
    pub record_id: Option<String>,
    pub status: Status,
    pub violations: Vec<Violation>,
    /// 1 for the first try.
    pub attempt: usize,
}

/// Validates a single raw record as a first attempt.
pub fn validate(raw: &str) -> ValidationOutcome {
    validate_attempt(raw, 1)
}

pub fn validate_attempt(raw: &str, attempt: usize) -> ValidationOutcome {
    let (record_id, violations) = match serde_json::from_str::<Value>(raw) {
        Err(e) => (None, vec![Violation::new(Assertion::Parseable, e.to_string())]),
        Ok(value) => {
            let id = value.get("id").and_then(Value::as_str).map(str::to_string);
            let format = check_format(&value);
            if !format.is_empty() {
                (id, format)
            } else {
                match serde_json::from_value::<AnnotatedPair>(value) {
                    Ok(pair) => (id, check_consistency(&pair)),
                    // check_format should have caught this; report it rather than panic
                    Err(e) => (id, vec![Violation::new(Assertion::FieldType, e.to_string())]),
                }
            }
        }
    };
    let status = if violations.is_empty() {
        Status::Pass
    } else if violations.iter().any(|v| v.assertion.is_format()) {
        Status::FormatFail
    } else {
        Status::ConsistencyFail
    };
    ValidationOutcome {
        record_id,
        status,
        violations,
        attempt,
    }
}

/// Validates every record; output order follows input order.
pub fn validate_all(records: &[String]) -> Vec<ValidationOutcome> {
    records.par_iter().map(|r| validate(r)).collect()
}

#[derive(Clone, Copy)]
enum Kind {
    Str,
    Uint,
    Array,
    Object,
}

impl Kind {
    fn matches(self, v: &Value) -> bool {
        match self {
            Kind::Str => v.is_string(),
            Kind::Uint => v.is_u64(),
            Kind::Array => v.is_array(),
            Kind::Object => v.is_object(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Str => "a string",
            Kind::Uint => "a non-negative integer",
            Kind::Array => "an array",
            Kind::Object => "an object",
        }
    }
}

struct FormatChecker {
    violations: Vec<Violation>,
}

impl FormatChecker {
    /// Checks `obj[key]`; returns the value when present and well-typed.
    fn field<'v>(&mut self, obj: &'v Value, path: &str, key: &str, kind: Kind, required: bool) -> Option<&'v Value> {
        let full = if path.is_empty() { key.to_string() } else { format!("{path}.{key}") };
        match obj.get(key) {
            None | Some(Value::Null) if required => {
                self.violations
                    .push(Violation::new(Assertion::RequiredField, format!("missing `{full}`")));
                None
            }
            None | Some(Value::Null) => None,
            Some(v) if kind.matches(v) => Some(v),
            Some(_) => {
                self.violations
                    .push(Violation::new(Assertion::FieldType, format!("`{full}` must be {}", kind.name())));
                None
            }
        }
    }

    fn items<'v>(&mut self, arr: &'v Value, path: &str, kind: Kind) -> Vec<(String, &'v Value)> {
        let mut out = Vec::new();
        for (i, item) in arr.as_array().into_iter().flatten().enumerate() {
            let p = format!("{path}[{i}]");
            if kind.matches(item) {
                out.push((p, item));
            } else {
                self.violations
                    .push(Violation::new(Assertion::FieldType, format!("`{p}` must be {}", kind.name())));
            }
        }
        out
    }
}

fn check_format(value: &Value) -> Vec<Violation> {
    let mut c = FormatChecker { violations: vec![] };
    if !value.is_object() {
        c.violations
            .push(Violation::new(Assertion::FieldType, "record must be a JSON object"));
        return c.violations;
    }
    c.field(value, "", "id", Kind::Str, false);
    c.field(value, "", "query", Kind::Str, true);
    c.field(value, "", "code", Kind::Str, true);
    c.field(value, "", "language", Kind::Str, true);
    if let Some(concepts) = c.field(value, "", "concepts", Kind::Array, true) {
        for (p, concept) in c.items(concepts, "concepts", Kind::Object) {
            c.field(concept, &p, "id", Kind::Str, true);
            if let Some(spans) = c.field(concept, &p, "spans", Kind::Array, true) {
                c.items(spans, &format!("{p}.spans"), Kind::Str);
            }
            if let Some(idx) = c.field(concept, &p, "token_indices", Kind::Array, true) {
                c.items(idx, &format!("{p}.token_indices"), Kind::Uint);
            }
        }
    }
    if let Some(alignments) = c.field(value, "", "alignments", Kind::Array, true) {
        for (p, alignment) in c.items(alignments, "alignments", Kind::Object) {
            c.field(alignment, &p, "concept_id", Kind::Str, true);
            if let Some(units) = c.field(alignment, &p, "units", Kind::Array, true) {
                for (up, unit) in c.items(units, &format!("{p}.units"), Kind::Object) {
                    c.field(unit, &up, "line_start", Kind::Uint, true);
                    c.field(unit, &up, "line_end", Kind::Uint, true);
                    c.field(unit, &up, "description", Kind::Str, false);
                    c.field(unit, &up, "text", Kind::Str, false);
                }
            }
        }
    }
    c.violations
}

/// Consistency assertions over a well-formed record.
pub fn check_consistency(pair: &AnnotatedPair) -> Vec<Violation> {
    let mut out = Vec::new();
    let tokens = tokenize(&pair.query, TextKind::Query);

    let mut seen = BTreeMap::new();
    for c in &pair.concepts {
        if seen.insert(c.id.as_str(), ()).is_some() {
            out.push(Violation::new(
                Assertion::DuplicateConcept,
                format!("concept `{}` declared twice", c.id),
            ));
        }
    }

    for c in &pair.concepts {
        let mut indices_ok = !c.token_indices.is_empty();
        if c.token_indices.is_empty() {
            out.push(Violation::new(
                Assertion::TokenRange,
                format!("concept `{}` has no tokens", c.id),
            ));
        }
        if c.token_indices.windows(2).any(|w| w[0] >= w[1]) {
            indices_ok = false;
            out.push(Violation::new(
                Assertion::TokenRange,
                format!("concept `{}` token indices are not strictly increasing", c.id),
            ));
        }
        if let Some(&bad) = c.token_indices.iter().find(|&&i| i >= tokens.len()) {
            indices_ok = false;
            out.push(Violation::new(
                Assertion::TokenRange,
                format!("concept `{}` token {bad} out of range (query has {} tokens)", c.id, tokens.len()),
            ));
        }
        if c.spans.is_empty() {
            out.push(Violation::new(
                Assertion::SpanVerbatim,
                format!("concept `{}` has no span strings", c.id),
            ));
        }
        for span in &c.spans {
            if span.is_empty() || !pair.query.contains(span.as_str()) {
                out.push(Violation::new(
                    Assertion::SpanVerbatim,
                    format!("concept `{}` span {span:?} does not appear in the query", c.id),
                ));
            } else if indices_ok && !covered_by_tokens(span, &pair.query, &tokens, &c.token_indices) {
                out.push(Violation::new(
                    Assertion::SpanOffsets,
                    format!("concept `{}` span {span:?} is not the text of its tokens", c.id),
                ));
            }
        }
    }

    for v in crate::model::validate_concept_partition(pair).violations {
        if let PartitionViolation::Overlap { token, concepts } = v {
            out.push(Violation::new(
                Assertion::SpansDisjoint,
                format!("query token {token} claimed by concepts {}", concepts.join(", ")),
            ));
        }
    }

    let lines = line_count(&pair.code);
    for a in &pair.alignments {
        if pair.concept(&a.concept_id).is_none() {
            out.push(Violation::new(
                Assertion::UnknownConcept,
                format!("alignment refers to unknown concept `{}`", a.concept_id),
            ));
        }
        for u in &a.units {
            if u.line_start > u.line_end || u.line_end >= lines {
                out.push(Violation::new(
                    Assertion::UnitRange,
                    format!(
                        "concept `{}` unit lines {}..={} outside code of {lines} lines",
                        a.concept_id, u.line_start, u.line_end
                    ),
                ));
            }
            if let Some(text) = &u.text {
                if text.is_empty() || !pair.code.contains(text.as_str()) {
                    out.push(Violation::new(
                        Assertion::UnitTextVerbatim,
                        format!("concept `{}` unit text {text:?} does not appear in the code", a.concept_id),
                    ));
                }
            }
        }
    }
    out
}

/// The span equals the query slice from some token's start to a later
/// token's end, with every token in between belonging to the concept.
fn covered_by_tokens(span: &str, query: &str, tokens: &[Token], indices: &[usize]) -> bool {
    for (i, &first) in indices.iter().enumerate() {
        let mut last = first;
        for (j, &next) in indices.iter().enumerate().skip(i) {
            if j > i && next != last + 1 {
                break;
            }
            last = next;
            if char_slice(query, tokens[first].start, tokens[last].end) == span {
                return true;
            }
        }
    }
    false
}

/// Supplies annotation attempts for a record.
///
/// `attempt` counts from 1; `feedback` holds the previous attempt's
/// violations (empty on the first call). Returning `None` means the source
/// has nothing more for this record.
pub trait AttemptSource {
    fn attempt(&mut self, record: &str, attempt: usize, feedback: &[Violation]) -> Option<String>;
}

/// Replays fixed attempt lists per record key.
#[derive(Debug, Clone, Default)]
pub struct ScriptedSource {
    pub scripts: HashMap<String, Vec<String>>,
}

impl AttemptSource for ScriptedSource {
    fn attempt(&mut self, record: &str, attempt: usize, _feedback: &[Violation]) -> Option<String> {
        self.scripts.get(record)?.get(attempt - 1).cloned()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetryLedger {
    pub budget: usize,
    /// Attempts consumed per record.
    pub attempts: BTreeMap<String, usize>,
    /// Number of accepted records by retries needed (0 = first try).
    pub retry_histogram: BTreeMap<usize, usize>,
    pub accepted: Vec<String>,
    pub discarded: Vec<String>,
    /// Records whose source ran dry before passing or exhausting the budget.
    pub in_flight: Vec<String>,
}

impl RetryLedger {
    pub fn total(&self) -> usize {
        self.attempts.len()
    }

    /// Fraction of all records accepted after exactly `retries` retries.
    pub fn retry_fraction(&self, retries: usize) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        *self.retry_histogram.get(&retries).unwrap_or(&0) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BudgetedRun {
    pub ledger: RetryLedger,
    pub accepted: BTreeMap<String, AnnotatedPair>,
    /// Every attempt's outcome, in processing order.
    pub outcomes: Vec<ValidationOutcome>,
}

/// Requests attempts for every record until one passes or `budget` retries
/// (so `budget + 1` attempts) have failed.
pub fn run_budgeted(records: &[String], source: &mut dyn AttemptSource, budget: usize) -> BudgetedRun {
    let mut run = BudgetedRun {
        ledger: RetryLedger {
            budget,
            ..Default::default()
        },
        ..Default::default()
    };
    for key in records {
        let mut feedback = Vec::new();
        let mut used = 0;
        let mut done = false;
        for attempt in 1..=budget + 1 {
            let Some(raw) = source.attempt(key, attempt, &feedback) else {
                break;
            };
            used = attempt;
            let outcome = validate_attempt(&raw, attempt);
            let passed = outcome.status == Status::Pass;
            feedback = outcome.violations.clone();
            run.outcomes.push(outcome);
            if passed {
                let pair: AnnotatedPair = serde_json::from_str(&raw).expect("validated record deserializes");
                run.accepted.insert(key.clone(), pair);
                run.ledger.accepted.push(key.clone());
                *run.ledger.retry_histogram.entry(attempt - 1).or_default() += 1;
                done = true;
                break;
            }
        }
        run.ledger.attempts.insert(key.clone(), used);
        if !done {
            if used == budget + 1 {
                run.ledger.discarded.push(key.clone());
            } else {
                run.ledger.in_flight.push(key.clone());
            }
        }
    }
    run
}

/// JSON validation report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub total: usize,
    pub counts: BTreeMap<Status, usize>,
    pub retry_histogram: BTreeMap<usize, usize>,
    pub discarded: Vec<String>,
    pub outcomes: Vec<ValidationOutcome>,
}

impl ValidationReport {
    pub fn from_outcomes(outcomes: Vec<ValidationOutcome>) -> Self {
        let mut counts = BTreeMap::from([(Status::Pass, 0), (Status::FormatFail, 0), (Status::ConsistencyFail, 0)]);
        for o in &outcomes {
            *counts.entry(o.status).or_default() += 1;
        }
        ValidationReport {
            total: outcomes.len(),
            counts,
            outcomes,
            ..Default::default()
        }
    }

    pub fn from_run(run: &BudgetedRun) -> Self {
        let mut report = Self::from_outcomes(run.outcomes.clone());
        report.retry_histogram = run.ledger.retry_histogram.clone();
        report.discarded = run.ledger.discarded.clone();
        report
    }

    pub fn count(&self, status: Status) -> usize {
        self.counts.get(&status).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// Chance agreement was 1 (both raters constant and identical); the
    /// value is then defined as 1.
    pub degenerate: bool,
}

/// Cohen's κ for two raters over binary judgments.
pub fn cohen_kappa(a: &[bool], b: &[bool]) -> Result<Kappa> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("{} judgments vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("judgments"));
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let pa = a.iter().filter(|&&x| x).count() as f64 / n;
    let pb = b.iter().filter(|&&x| x).count() as f64 / n;
    let p_o = agree / n;
    let p_e = pa * pb + (1.0 - pa) * (1.0 - pb);
    if p_e == 1.0 {
        return Ok(Kappa {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: (p_o - p_e) / (1.0 - p_e),
        degenerate: false,
    })
}
