//! Observations, datasets and fold partitioning.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Token ids are 1-based: token 1 is padding, token `k` marks end of content.
pub type Token = u32;

/// A single outcome: a real vector or a token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Real(Vec<f64>),
    Tokens(Vec<Token>),
}

impl Outcome {
    pub fn dim(&self) -> usize {
        match self {
            Outcome::Real(v) => v.len(),
            Outcome::Tokens(t) => t.len(),
        }
    }

    pub fn as_real(&self) -> Result<&[f64]> {
        match self {
            Outcome::Real(v) => Ok(v),
            Outcome::Tokens(_) => Err(Error::InvalidOutcome("expected a real vector, found tokens".into())),
        }
    }

    pub fn as_tokens(&self) -> Result<&[Token]> {
        match self {
            Outcome::Tokens(t) => Ok(t),
            Outcome::Real(_) => Err(Error::InvalidOutcome("expected tokens, found a real vector".into())),
        }
    }

    fn kind(&self) -> OutcomeKind {
        match self {
            Outcome::Real(_) => OutcomeKind::Real,
            Outcome::Tokens(_) => OutcomeKind::Tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OutcomeKind {
    Real,
    Tokens,
}

/// One factual record (X, A, Y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub a: u32,
    pub y: Outcome,
}

/// Two disjoint folds of a dataset. Each fold keeps the original dataset
/// indices of its members in ascending order.
#[derive(Debug, Clone)]
pub struct FoldedDataset {
    folds: [Vec<Observation>; 2],
    indices: [Vec<usize>; 2],
}

impl FoldedDataset {
    pub fn fold(&self, j: usize) -> &[Observation] {
        &self.folds[j]
    }

    /// Original dataset indices of fold `j`, aligned with [`FoldedDataset::fold`].
    pub fn indices(&self, j: usize) -> &[usize] {
        &self.indices[j]
    }

    pub fn len(&self) -> usize {
        self.folds[0].len() + self.folds[1].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sizes(&self) -> (usize, usize) {
        (self.folds[0].len(), self.folds[1].len())
    }
}

/// Uniformly random split into folds of sizes ⌊n/2⌋ and ⌈n/2⌉.
pub fn partition_folds(dataset: &[Observation], rng: &RngStream) -> Result<FoldedDataset> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dataset.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng.rng());
    let (first, second) = perm.split_at(n / 2);
    let mut first = first.to_vec();
    let mut second = second.to_vec();
    first.sort_unstable();
    second.sort_unstable();
    let take = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    Ok(FoldedDataset {
        folds: [take(&first), take(&second)],
        indices: [first, second],
    })
}

/// Observations with `a == a_star`, in their original order.
pub fn filter_treated(dataset: &[Observation], a_star: u32) -> Vec<Observation> {
    dataset.iter().filter(|o| o.a == a_star).cloned().collect()
}

fn check_consistent(dataset: &[Observation]) -> Result<(usize, usize, OutcomeKind)> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let (p, d, kind) = (first.x.len(), first.y.dim(), first.y.kind());
    for o in dataset {
        if o.x.len() != p {
            return Err(Error::DimensionMismatch { expected: p, got: o.x.len() });
        }
        if o.y.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: o.y.dim() });
        }
        if o.y.kind() != kind {
            return Err(Error::InvalidOutcome("mixed outcome kinds in one dataset".into()));
        }
    }
    Ok((p, d, kind))
}

fn outcome_header(kind: OutcomeKind, d: usize) -> Vec<String> {
    let prefix = match kind {
        OutcomeKind::Real => "y",
        OutcomeKind::Tokens => "tok",
    };
    (1..=d).map(|j| format!("{prefix}_{j}")).collect()
}

fn push_outcome(record: &mut Vec<String>, y: &Outcome) {
    match y {
        Outcome::Real(v) => record.extend(v.iter().map(|v| v.to_string())),
        Outcome::Tokens(t) => record.extend(t.iter().map(|t| t.to_string())),
    }
}

/// Write observations as CSV: `x_1..x_p, a, y_1..y_d` (or `tok_1..tok_d`).
///
/// An empty dataset writes nothing, since its column layout is unknown.
pub fn write_observations<W: Write>(writer: W, dataset: &[Observation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if dataset.is_empty() {
        w.flush()?;
        return Ok(());
    }
    let (p, d, kind) = check_consistent(dataset)?;
    let mut header: Vec<String> = (1..=p).map(|j| format!("x_{j}")).collect();
    header.push("a".into());
    header.extend(outcome_header(kind, d));
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for o in dataset {
        record.clear();
        record.extend(o.x.iter().map(|v| v.to_string()));
        record.push(o.a.to_string());
        push_outcome(&mut record, &o.y);
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Write bare outcomes (one row each) with a `y_*` or `tok_*` header.
///
/// `template` fixes the header when `outcomes` is empty, so a zero-row file
/// still carries its column layout.
pub fn write_outcomes<W: Write>(writer: W, outcomes: &[Outcome], template: Option<&Outcome>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let Some(head) = outcomes.first().or(template) else {
        w.flush()?;
        return Ok(());
    };
    let (kind, d) = (head.kind(), head.dim());
    w.write_record(outcome_header(kind, d))?;
    let mut record = Vec::with_capacity(d);
    for y in outcomes {
        if y.kind() != kind || y.dim() != d {
            return Err(Error::InvalidOutcome("outcomes differ in kind or dimension".into()));
        }
        record.clear();
        push_outcome(&mut record, y);
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

struct Layout {
    x_cols: Vec<usize>,
    a_col: Option<usize>,
    y_cols: Vec<usize>,
    kind: OutcomeKind,
}

fn parse_layout(header: &csv::StringRecord) -> Result<Layout> {
    let mut x_cols = Vec::new();
    let mut a_col = None;
    let mut y_cols = Vec::new();
    let mut tok_cols = Vec::new();
    for (i, name) in header.iter().enumerate() {
        if name == "a" {
            a_col = Some(i);
        } else if name.starts_with("x_") {
            x_cols.push(i);
        } else if name.starts_with("y_") {
            y_cols.push(i);
        } else if name.starts_with("tok_") {
            tok_cols.push(i);
        } else {
            return Err(Error::Parse(format!("unexpected column {name:?}")));
        }
    }
    let (y_cols, kind) = match (y_cols.is_empty(), tok_cols.is_empty()) {
        (false, true) => (y_cols, OutcomeKind::Real),
        (true, false) => (tok_cols, OutcomeKind::Tokens),
        (true, true) => return Err(Error::Parse("no outcome columns".into())),
        (false, false) => return Err(Error::Parse("both y_* and tok_* columns present".into())),
    };
    Ok(Layout { x_cols, a_col, y_cols, kind })
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")))
}

fn parse_u32(s: &str) -> Result<u32> {
    s.trim().parse::<u32>().map_err(|e| Error::Parse(format!("{s:?}: {e}")))
}

fn parse_outcome(rec: &csv::StringRecord, layout: &Layout) -> Result<Outcome> {
    Ok(match layout.kind {
        OutcomeKind::Real => Outcome::Real(layout.y_cols.iter().map(|&c| parse_f64(&rec[c])).collect::<Result<_>>()?),
        OutcomeKind::Tokens => Outcome::Tokens(layout.y_cols.iter().map(|&c| parse_u32(&rec[c])).collect::<Result<_>>()?),
    })
}

pub fn read_observations<R: Read>(reader: R) -> Result<Vec<Observation>> {
    let mut r = csv::Reader::from_reader(reader);
    let layout = parse_layout(r.headers()?)?;
    let a_col = layout.a_col.ok_or_else(|| Error::Parse("missing column \"a\"".into()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let x = layout.x_cols.iter().map(|&c| parse_f64(&rec[c])).collect::<Result<Vec<_>>>()?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("non-finite feature".into()));
        }
        out.push(Observation {
            x,
            a: parse_u32(&rec[a_col])?,
            y: parse_outcome(&rec, &layout)?,
        });
    }
    Ok(out)
}

pub fn read_outcomes<R: Read>(reader: R) -> Result<Vec<Outcome>> {
    let mut r = csv::Reader::from_reader(reader);
    let layout = parse_layout(r.headers()?)?;
    r.records().map(|rec| parse_outcome(&rec?, &layout)).collect()
}

pub fn save_observations(path: &Path, dataset: &[Observation]) -> Result<()> {
    write_observations(std::fs::File::create(path)?, dataset)
}

pub fn load_observations(path: &Path) -> Result<Vec<Observation>> {
    read_observations(std::fs::File::open(path)?)
}

pub fn save_outcomes(path: &Path, outcomes: &[Outcome], template: Option<&Outcome>) -> Result<()> {
    write_outcomes(std::fs::File::create(path)?, outcomes, template)
}

pub fn load_outcomes(path: &Path) -> Result<Vec<Outcome>> {
    read_outcomes(std::fs::File::open(path)?)
}
