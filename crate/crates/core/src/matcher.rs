//! Masked fractional Hamming distance with angular shift compensation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gabor::IrisTemplate;

pub const DEFAULT_MAX_SHIFT: usize = 7;
pub const DEFAULT_HD_THRESHOLD: f64 = 0.32;
pub const DEFAULT_MIN_OVERLAP_BITS: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub hd: f64,
    /// Columns the gallery was rotated rightward to best align with the probe.
    pub best_shift: i64,
    pub overlap_bits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionThreshold {
    pub hd_threshold: f64,
    pub min_overlap_bits: u64,
}

impl Default for DecisionThreshold {
    fn default() -> Self {
        Self {
            hd_threshold: DEFAULT_HD_THRESHOLD,
            min_overlap_bits: DEFAULT_MIN_OVERLAP_BITS,
        }
    }
}

impl DecisionThreshold {
    pub fn new(hd_threshold: f64, min_overlap_bits: u64) -> Result<Self> {
        let t = Self {
            hd_threshold,
            min_overlap_bits,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hd_threshold) {
            return Err(Error::Config(format!(
                "hd threshold {} outside [0, 1]",
                self.hd_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Accept => "accept",
            Decision::Reject => "reject",
        })
    }
}

fn check_geometry(a: &IrisTemplate, b: &IrisTemplate) -> Result<()> {
    if a.same_geometry(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "template geometry {}x{}x{} vs {}x{}x{}",
            a.planes(),
            a.height(),
            a.width(),
            b.planes(),
            b.height(),
            b.width()
        )))
    }
}

fn counts(a: &IrisTemplate, b: &IrisTemplate) -> (u64, u64) {
    let mut diff = 0u64;
    let mut overlap = 0u64;
    let words = a.code_words().iter().zip(b.code_words()).zip(a.mask_words().iter().zip(b.mask_words()));
    for ((c1, c2), (m1, m2)) in words {
        let m = m1 & m2;
        overlap += u64::from(m.count_ones());
        diff += u64::from(((c1 ^ c2) & m).count_ones());
    }
    (diff, overlap)
}

/// Fraction of disagreeing bits among those valid in both masks, pooled
/// over every plane. Returns `(hd, overlap_bits)`.
pub fn masked_hd(a: &IrisTemplate, b: &IrisTemplate) -> Result<(f64, u64)> {
    check_geometry(a, b)?;
    match counts(a, b) {
        (_, 0) => Err(Error::NoOverlap),
        (diff, overlap) => Ok((diff as f64 / overlap as f64, overlap)),
    }
}

/// Zeroes code bits where the mask is off; the mask is kept as is.
pub fn apply_masks(t: &IrisTemplate) -> IrisTemplate {
    let code = t.code_words().iter().zip(t.mask_words()).map(|(c, m)| c & m).collect();
    IrisTemplate::from_words(t.planes(), t.width(), t.height(), code, t.mask_words().to_vec())
        .expect("geometry unchanged")
}

/// Same as [`apply_masks`] with the mask supplied separately.
pub fn apply_mask_from(code: &IrisTemplate, mask: &IrisTemplate) -> Result<IrisTemplate> {
    check_geometry(code, mask)?;
    let words = code.code_words().iter().zip(mask.mask_words()).map(|(c, m)| c & m).collect();
    IrisTemplate::from_words(code.planes(), code.width(), code.height(), words, mask.mask_words().to_vec())
}

/// Shift order: 0, -1, +1, -2, +2, ... so the first strict minimum found
/// already satisfies the tie-break.
fn shift_order(max_shift: usize) -> impl Iterator<Item = i64> {
    std::iter::once(0).chain((1..=max_shift as i64).flat_map(|k| [-k, k]))
}

/// Minimum masked distance over gallery rotations in `[-max_shift, max_shift]`.
/// Shifts without any overlap are skipped.
pub fn match_shifted(probe: &IrisTemplate, gallery: &IrisTemplate, max_shift: usize) -> Result<MatchResult> {
    check_geometry(probe, gallery)?;
    if max_shift >= gallery.width() {
        return Err(Error::Config(format!(
            "max shift {max_shift} must be below the template width {}",
            gallery.width()
        )));
    }
    let mut best: Option<(MatchResult, u64)> = None;
    for s in shift_order(max_shift) {
        let shifted = gallery.shift_columns(s);
        let (diff, overlap) = counts(probe, &shifted);
        if overlap == 0 {
            continue;
        }
        let hd = diff as f64 / overlap as f64;
        // compare diff/overlap exactly via cross-multiplication
        let better = match &best {
            None => true,
            Some((b, bdiff)) => u128::from(diff) * u128::from(b.overlap_bits) < u128::from(*bdiff) * u128::from(overlap),
        };
        if better {
            best = Some((
                MatchResult {
                    hd,
                    best_shift: s,
                    overlap_bits: overlap,
                },
                diff,
            ));
        }
    }
    best.map(|(r, _)| r).ok_or(Error::NoOverlap)
}

pub fn decide(r: &MatchResult, thr: &DecisionThreshold) -> Decision {
    if r.hd <= thr.hd_threshold && r.overlap_bits >= thr.min_overlap_bits {
        Decision::Accept
    } else {
        Decision::Reject
    }
}
