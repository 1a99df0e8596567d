//! Circular Hough transform over the edges of a binary iris mask.
//!
//! Each edge pixel votes, for every candidate radius, at the point one radius
//! away along its normal. The limbic boundary has the iris on its inside, so
//! its edges vote toward the on-side; the pupillary boundary has the iris on
//! its outside, so its edges vote toward the off-side. The accumulator is
//! (cx, cy, r) at 1 px resolution, evaluated one radius slice at a time.
//!
//! Normals of a pixelated circle are only accurate to a few hundredths of a
//! radian, so the strongest cells are re-scored by counting edges that lie
//! on the candidate circle, on a half-pixel grid. Scores are that count over
//! the circumference `2 pi r`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Circle, IrisBoundaries};
use crate::error::{Error, Result};
use crate::imaging::filter::gaussian_blur_f64;
use crate::imaging::MaskImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoughConfig {
    pub iris_radius_min: f64,
    pub iris_radius_max: f64,
    pub pupil_radius_min: f64,
    /// Pupil radius upper bound as a fraction of the iris radius.
    pub pupil_radius_max_ratio: f64,
    /// Pupil center search radius as a fraction of the iris radius.
    pub pupil_center_tolerance: f64,
    /// Minimum peak score as a fraction of `2 pi r`.
    pub min_peak_fraction: f64,
    pub min_on_pixels: usize,
}

impl Default for HoughConfig {
    fn default() -> Self {
        Self {
            iris_radius_min: 30.0,
            iris_radius_max: 300.0,
            pupil_radius_min: 8.0,
            pupil_radius_max_ratio: 0.8,
            pupil_center_tolerance: 0.25,
            min_peak_fraction: 0.3,
            min_on_pixels: 200,
        }
    }
}

const MIN_EDGE_PIXELS: usize = 24;

/// An edge sample: sub-pixel boundary location and unit normal toward the on-side.
#[derive(Debug, Clone, Copy)]
struct Edge {
    x: f64,
    y: f64,
    nx: f64,
    ny: f64,
}

fn mask_edges(mask: &MaskImage) -> Vec<Edge> {
    let (w, h) = (mask.width(), mask.height());
    let soft: Vec<f64> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let soft = gaussian_blur_f64(&soft, w, h, 5.0);
    let mut edges = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !mask.get(x, y) {
                continue;
            }
            let boundary =
                !mask.get(x - 1, y) || !mask.get(x + 1, y) || !mask.get(x, y - 1) || !mask.get(x, y + 1);
            if !boundary {
                continue;
            }
            let gx = (soft[y * w + x + 1] - soft[y * w + x - 1]) / 2.0;
            let gy = (soft[(y + 1) * w + x] - soft[(y - 1) * w + x]) / 2.0;
            let norm = gx.hypot(gy);
            if norm < 1e-6 {
                continue;
            }
            let (nx, ny) = (gx / norm, gy / norm);
            // The true boundary sits half a pixel toward the off-side.
            edges.push(Edge {
                x: x as f64 - 0.5 * nx,
                y: y as f64 - 0.5 * ny,
                nx,
                ny,
            });
        }
    }
    edges
}

/// One radius slice of the accumulator with sparse clearing.
struct Slice {
    width: usize,
    height: usize,
    votes: Vec<f32>,
    touched: Vec<usize>,
}

impl Slice {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            votes: vec![0.0; width * height],
            touched: Vec::new(),
        }
    }

    fn clear(&mut self) {
        for &i in &self.touched {
            self.votes[i] = 0.0;
        }
        self.touched.clear();
    }

    /// Bilinear splat of one vote.
    fn vote(&mut self, x: f64, y: f64) {
        if !(x >= 0.0 && y >= 0.0) {
            return;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        if x0 + 1 >= self.width || y0 + 1 >= self.height {
            return;
        }
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let base = y0 * self.width + x0;
        for (i, wgt) in [
            (base, (1.0 - fx) * (1.0 - fy)),
            (base + 1, fx * (1.0 - fy)),
            (base + self.width, (1.0 - fx) * fy),
            (base + self.width + 1, fx * fy),
        ] {
            if self.votes[i] == 0.0 {
                self.touched.push(i);
            }
            self.votes[i] += wgt;
        }
    }

    fn window_sum(&self, cx: usize, cy: usize, half: usize) -> f64 {
        let x0 = cx.saturating_sub(half);
        let y0 = cy.saturating_sub(half);
        let x1 = (cx + half).min(self.width - 1);
        let y1 = (cy + half).min(self.height - 1);
        let mut s = 0.0;
        for y in y0..=y1 {
            for x in x0..=x1 {
                s += f64::from(self.votes[y * self.width + x]);
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
struct Peak {
    cx: f64,
    cy: f64,
    r: f64,
    score: f64,
}

/// Direction of voting relative to the on-side normal.
#[derive(Clone, Copy)]
enum Side {
    On,
    Off,
}

fn cast(slice: &mut Slice, edges: &[Edge], r: f64, side: Side) {
    let s = match side {
        Side::On => r,
        Side::Off => -r,
    };
    for e in edges {
        slice.vote(e.x + s * e.nx, e.y + s * e.ny);
    }
}

/// Coarse stage: per radius slice, the best 5x5 window of normal-directed
/// votes. Returns the strongest few distinct candidates.
fn candidates(
    slice: &mut Slice,
    edges: &[Edge],
    radii: std::ops::RangeInclusive<usize>,
    side: Side,
    allow: impl Fn(usize, usize) -> bool,
) -> Vec<Peak> {
    let mut per_radius = Vec::new();
    let mut touched = Vec::new();
    for r in radii {
        slice.clear();
        cast(slice, edges, r as f64, side);
        touched.clear();
        touched.extend(slice.touched.iter().copied());
        let mut best: Option<Peak> = None;
        for &i in &touched {
            let (cx, cy) = (i % slice.width, i / slice.width);
            if !allow(cx, cy) {
                continue;
            }
            let score = slice.window_sum(cx, cy, 2) / (2.0 * PI * r as f64);
            if best.is_none_or(|b| score > b.score) {
                best = Some(Peak {
                    cx: cx as f64,
                    cy: cy as f64,
                    r: r as f64,
                    score,
                });
            }
        }
        per_radius.extend(best);
    }
    per_radius.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out: Vec<Peak> = Vec::new();
    for p in per_radius {
        let distinct = out
            .iter()
            .all(|q| (p.cx - q.cx).hypot(p.cy - q.cy) > 3.0 || (p.r - q.r).abs() > 3.0);
        if distinct {
            out.push(p);
            if out.len() == CANDIDATES {
                break;
            }
        }
    }
    out
}

const CANDIDATES: usize = 8;
/// Radial tolerance for an edge to support a circle.
const SUPPORT_BAND: f64 = 1.0;
/// Minimum cosine between an edge normal and the radial direction.
const SUPPORT_COS: f64 = 0.866;

/// Fraction of the circumference covered by edges lying on the circle with
/// a consistent normal.
fn support(edges: &[Edge], cx: f64, cy: f64, r: f64, side: Side) -> f64 {
    let mut n = 0usize;
    for e in edges {
        let (dx, dy) = (e.x - cx, e.y - cy);
        let d = dx.hypot(dy);
        if (d - r).abs() > SUPPORT_BAND || d < 1e-9 {
            continue;
        }
        // Unit vector from the center outward.
        let cos = (e.nx * dx + e.ny * dy) / d;
        let ok = match side {
            Side::On => -cos >= SUPPORT_COS,
            Side::Off => cos >= SUPPORT_COS,
        };
        n += usize::from(ok);
    }
    n as f64 / (2.0 * PI * r)
}

/// Fine stage: support on a half-pixel grid around the candidate, then the
/// centroid of the cells within 5% of the local maximum.
fn refine(edges: &[Edge], seed: Peak, side: Side, r_lo: f64, r_hi: f64) -> Peak {
    let mut cells = Vec::new();
    for i in -6..=6 {
        for j in -6..=6 {
            for k in -4..=4 {
                let r = seed.r + 0.5 * f64::from(k);
                if r < r_lo || r > r_hi {
                    continue;
                }
                let (cx, cy) = (seed.cx + 0.5 * f64::from(i), seed.cy + 0.5 * f64::from(j));
                cells.push((cx, cy, r, support(edges, cx, cy, r, side)));
            }
        }
    }
    let best = cells.iter().map(|c| c.3).fold(0.0, f64::max);
    if best <= 0.0 {
        return Peak { score: 0.0, ..seed };
    }
    let (mut sx, mut sy, mut sr, mut n) = (0.0, 0.0, 0.0, 0.0);
    for &(cx, cy, r, s) in &cells {
        if s >= 0.95 * best {
            sx += cx;
            sy += cy;
            sr += r;
            n += 1.0;
        }
    }
    Peak {
        cx: sx / n,
        cy: sy / n,
        r: sr / n,
        score: best,
    }
}

fn best_circle(
    slice: &mut Slice,
    edges: &[Edge],
    radii: std::ops::RangeInclusive<usize>,
    side: Side,
    allow: impl Fn(usize, usize) -> bool,
    min_score: f64,
) -> Result<Circle> {
    let (r_lo, r_hi) = (*radii.start() as f64, *radii.end() as f64);
    let peak = candidates(slice, edges, radii, side, allow)
        .into_iter()
        .map(|c| refine(edges, c, side, r_lo, r_hi))
        .max_by(|a, b| a.score.total_cmp(&b.score));
    match peak {
        Some(p) if p.score >= min_score => Ok(Circle::new(p.cx, p.cy, p.r)),
        p => Err(Error::NoPeak {
            score: p.map_or(0.0, |p| p.score),
            required: min_score,
        }),
    }
}

/// Fits pupillary and limbic circles to a segmentation mask.
pub fn fit_boundaries(mask: &MaskImage) -> Result<IrisBoundaries> {
    fit_boundaries_with(mask, &HoughConfig::default())
}

pub fn fit_boundaries_with(mask: &MaskImage, cfg: &HoughConfig) -> Result<IrisBoundaries> {
    let on = mask.count_on();
    if on < cfg.min_on_pixels {
        return Err(Error::InsufficientEdges {
            found: on,
            required: cfg.min_on_pixels,
        });
    }
    let edges = mask_edges(mask);
    if edges.len() < MIN_EDGE_PIXELS {
        return Err(Error::InsufficientEdges {
            found: edges.len(),
            required: MIN_EDGE_PIXELS,
        });
    }
    let (w, h) = (mask.width(), mask.height());
    let mut slice = Slice::new(w, h);

    let r_lo = cfg.iris_radius_min.ceil() as usize;
    let r_hi = (cfg.iris_radius_max.floor() as usize).max(r_lo);
    let iris = best_circle(&mut slice, &edges, r_lo..=r_hi, Side::On, |_, _| true, cfg.min_peak_fraction)?;

    let p_lo = cfg.pupil_radius_min.ceil() as usize;
    let p_hi = (cfg.pupil_radius_max_ratio * iris.r).floor() as usize;
    if p_hi < p_lo {
        return Err(Error::Geometry(format!("iris radius {:.1} leaves no room for a pupil", iris.r)));
    }
    let tol = cfg.pupil_center_tolerance * iris.r;
    let near_iris = |x: usize, y: usize| (x as f64 - iris.cx).hypot(y as f64 - iris.cy) <= tol;
    let pupil = best_circle(&mut slice, &edges, p_lo..=p_hi, Side::Off, near_iris, cfg.min_peak_fraction)?;
    if pupil.r < 5.0 {
        return Err(Error::Geometry(format!("pupil radius {:.2} below 5 px", pupil.r)));
    }
    IrisBoundaries::new(pupil, iris)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn annulus(w: usize, h: usize, b: &IrisBoundaries) -> MaskImage {
        MaskImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            (x - b.iris.cx).hypot(y - b.iris.cy) <= b.iris.r && (x - b.pupil.cx).hypot(y - b.pupil.cy) >= b.pupil.r
        })
        .unwrap()
    }

    fn assert_close(got: &IrisBoundaries, want: &IrisBoundaries, tol: f64) {
        for (g, w) in [(got.pupil, want.pupil), (got.iris, want.iris)] {
            assert!((g.cx - w.cx).abs() <= tol, "cx {} vs {}", g.cx, w.cx);
            assert!((g.cy - w.cy).abs() <= tol, "cy {} vs {}", g.cy, w.cy);
            assert!((g.r - w.r).abs() <= tol, "r {} vs {}", g.r, w.r);
        }
    }

    #[test]
    fn recovers_centered_annulus() {
        let truth = IrisBoundaries::concentric(320.0, 240.0, 40.0, 110.0).unwrap();
        let got = fit_boundaries(&annulus(640, 480, &truth)).unwrap();
        assert_close(&got, &truth, 2.0);
    }

    #[test]
    fn translation_equivariant() {
        let a = IrisBoundaries::concentric(320.0, 240.0, 40.0, 110.0).unwrap();
        let b = IrisBoundaries::concentric(350.0, 240.0, 40.0, 110.0).unwrap();
        let fa = fit_boundaries(&annulus(640, 480, &a)).unwrap();
        let fb = fit_boundaries(&annulus(640, 480, &b)).unwrap();
        assert!((fb.iris.cx - fa.iris.cx - 30.0).abs() <= 2.0);
        assert!((fb.pupil.cx - fa.pupil.cx - 30.0).abs() <= 2.0);
        assert!((fb.iris.cy - fa.iris.cy).abs() <= 2.0);
    }

    #[test]
    fn non_concentric_pupil() {
        let truth = IrisBoundaries::new(Circle::new(300.0, 250.0, 35.0), Circle::new(310.0, 245.0, 120.0)).unwrap();
        let got = fit_boundaries(&annulus(640, 480, &truth)).unwrap();
        assert_close(&got, &truth, 2.0);
    }

    #[test]
    fn tolerates_eyelid_occlusion() {
        let truth = IrisBoundaries::concentric(320.0, 240.0, 45.0, 120.0).unwrap();
        let mut m = annulus(640, 480, &truth);
        for y in 0..150 {
            for x in 0..640 {
                m.set(x, y, false);
            }
        }
        let got = fit_boundaries(&m).unwrap();
        assert_close(&got, &truth, 2.0);
    }

    #[test]
    fn blank_mask_is_rejected() {
        let m = MaskImage::empty(640, 480).unwrap();
        let err = fit_boundaries(&m).unwrap_err();
        assert!(matches!(err, Error::InsufficientEdges { .. }));
        assert!(err.to_string().contains("insufficient edge support"));
    }

    #[test]
    fn filled_disk_has_no_pupil() {
        let m = MaskImage::from_fn(640, 480, |x, y| (x as f64 - 320.0).hypot(y as f64 - 240.0) <= 100.0).unwrap();
        assert!(fit_boundaries(&m).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn exact_on_noiseless_annuli(
            rp in 20.0f64..60.0,
            ri in 80.0f64..150.0,
            cx in 250.0f64..390.0,
            cy in 200.0f64..280.0,
            shift in -40i32..40,
        ) {
            let a = IrisBoundaries::concentric(cx, cy, rp, ri).unwrap();
            let b = IrisBoundaries::concentric(cx + f64::from(shift), cy, rp, ri).unwrap();
            let fa = fit_boundaries(&annulus(640, 480, &a)).unwrap();
            let fb = fit_boundaries(&annulus(640, 480, &b)).unwrap();
            for (g, w) in [(fa.pupil, a.pupil), (fa.iris, a.iris)] {
                proptest::prop_assert!((g.cx - w.cx).abs() <= 2.0 && (g.cy - w.cy).abs() <= 2.0);
                proptest::prop_assert!((g.r - w.r).abs() <= 2.0);
            }
            proptest::prop_assert!((fb.iris.cx - fa.iris.cx - f64::from(shift)).abs() <= 2.0);
            proptest::prop_assert!((fb.pupil.cx - fa.pupil.cx - f64::from(shift)).abs() <= 2.0);
        }
    }
}
