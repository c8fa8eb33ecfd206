//! Raw pitch accuracy, raw chroma accuracy and overall accuracy with the
//! usual melody-evaluation semantics: strict `< tol` cents, unvoiced
//! estimates carry no pitch, chroma folds octave errors.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{class_to_hz, FrameLabels};

pub const DEFAULT_TOLERANCE_CENTS: f64 = 50.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("track lengths differ: estimate {est}, reference {reference}")]
    LengthMismatch { est: usize, reference: usize },
    #[error("cents need positive frequencies, got {0} and {1}")]
    NonPositive(f64, f64),
    #[error("negative or non-finite frequency {0}")]
    InvalidFrequency(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Per-frame f0 in Hz (0 = unvoiced) with a valid-frame mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub f0: Vec<f64>,
    pub mask: Vec<bool>,
}

impl PitchTrack {
    pub fn new(f0: Vec<f64>) -> Result<Self> {
        let mask = vec![true; f0.len()];
        Self::with_mask(f0, mask)
    }

    pub fn with_mask(f0: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if let Some(&bad) = f0.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(MetricsError::InvalidFrequency(bad));
        }
        if mask.len() != f0.len() {
            return Err(MetricsError::LengthMismatch {
                est: f0.len(),
                reference: mask.len(),
            });
        }
        Ok(Self { f0, mask })
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    /// Keep only the listed frames.
    pub fn restrict(&self, frames: &[usize]) -> PitchTrack {
        let mut mask = vec![false; self.len()];
        for &f in frames {
            mask[f] = self.mask[f];
        }
        PitchTrack {
            f0: self.f0.clone(),
            mask,
        }
    }
}

pub fn classes_to_track(labels: &FrameLabels) -> PitchTrack {
    PitchTrack {
        f0: labels
            .classes
            .iter()
            .map(|&c| class_to_hz(c).expect("FrameLabels are validated"))
            .collect(),
        mask: vec![true; labels.len()],
    }
}

pub fn cents_diff(f_est: f64, f_ref: f64) -> Result<f64> {
    if !(f_est > 0.0 && f_ref > 0.0) {
        return Err(MetricsError::NonPositive(f_est, f_ref));
    }
    Ok(1200.0 * (f_est / f_ref).log2())
}

/// A score and whether its reference had nothing to score against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub empty_reference: bool,
}

fn fraction(hits: usize, total: usize) -> Score {
    if total == 0 {
        Score {
            value: 0.0,
            empty_reference: true,
        }
    } else {
        Score {
            value: hits as f64 / total as f64,
            empty_reference: false,
        }
    }
}

fn frames<'a>(est: &'a PitchTrack, reference: &'a PitchTrack) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if est.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            est: est.len(),
            reference: reference.len(),
        });
    }
    Ok(est
        .f0
        .iter()
        .zip(&reference.f0)
        .zip(reference.mask.iter().zip(&est.mask))
        .filter(|(_, (rm, em))| **rm && **em)
        .map(|((&e, &r), _)| (e, r)))
}

fn pitch_hit(e: f64, r: f64, tol: f64, chroma: bool) -> bool {
    if e <= 0.0 || r <= 0.0 {
        return false;
    }
    let mut d = 1200.0 * (e / r).log2();
    if chroma {
        d -= 1200.0 * (d / 1200.0 + 0.5).floor();
    }
    d.abs() < tol
}

fn raw(est: &PitchTrack, reference: &PitchTrack, tol: f64, chroma: bool) -> Result<Score> {
    let (mut hits, mut total) = (0, 0);
    for (e, r) in frames(est, reference)? {
        if r > 0.0 {
            total += 1;
            hits += pitch_hit(e, r, tol, chroma) as usize;
        }
    }
    Ok(fraction(hits, total))
}

pub fn rpa(est: &PitchTrack, reference: &PitchTrack, tol_cents: f64) -> Result<Score> {
    raw(est, reference, tol_cents, false)
}

pub fn rca(est: &PitchTrack, reference: &PitchTrack, tol_cents: f64) -> Result<Score> {
    raw(est, reference, tol_cents, true)
}

pub fn oa(est: &PitchTrack, reference: &PitchTrack, tol_cents: f64) -> Result<Score> {
    let (mut hits, mut total) = (0, 0);
    for (e, r) in frames(est, reference)? {
        total += 1;
        let ok = match (e > 0.0, r > 0.0) {
            (false, false) => true,
            (true, true) => pitch_hit(e, r, tol_cents, false),
            _ => false,
        };
        hits += ok as usize;
    }
    Ok(fraction(hits, total))
}

/// The three melody scores at one tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelodyScores {
    pub rpa: f64,
    pub rca: f64,
    pub oa: f64,
    pub empty_reference: bool,
}

pub fn evaluate(est: &PitchTrack, reference: &PitchTrack, tol_cents: f64) -> Result<MelodyScores> {
    let p = rpa(est, reference, tol_cents)?;
    let c = rca(est, reference, tol_cents)?;
    let o = oa(est, reference, tol_cents)?;
    Ok(MelodyScores {
        rpa: p.value,
        rca: c.value,
        oa: o.value,
        empty_reference: p.empty_reference,
    })
}

/// Scores of predicted classes against reference classes on `frames`.
pub fn evaluate_classes(est: &FrameLabels, reference: &FrameLabels, frames: &[usize]) -> Result<MelodyScores> {
    let e = classes_to_track(est);
    let r = classes_to_track(reference).restrict(frames);
    evaluate(&e, &r, DEFAULT_TOLERANCE_CENTS)
}

/// Unweighted mean over episodes.
pub fn mean_scores(scores: &[MelodyScores]) -> MelodyScores {
    let n = scores.len().max(1) as f64;
    MelodyScores {
        rpa: scores.iter().map(|s| s.rpa).sum::<f64>() / n,
        rca: scores.iter().map(|s| s.rca).sum::<f64>() / n,
        oa: scores.iter().map(|s| s.oa).sum::<f64>() / n,
        empty_reference: scores.iter().all(|s| s.empty_reference),
    }
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    pub k: usize,
    pub s: usize,
    pub scores: MelodyScores,
}

pub const RESULTS_HEADER: &str = "dataset\tmethod\tK\ts\tRPA\tRCA\tOA";

/// Tab-separated table with scores in percent.
pub fn results_table(rows: &[ResultRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}",
            r.dataset,
            r.method,
            r.k,
            r.s,
            100.0 * r.scores.rpa,
            100.0 * r.scores.rca,
            100.0 * r.scores.oa
        );
    }
    out
}
