//! Bounding-box geometry on attention grids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SpecError;

/// Normalized box `[x0, y0, x1, y1]`, `0 ≤ x0 < x1 ≤ 1`, `0 ≤ y0 < y1 ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl NormBox {
    pub const FULL: NormBox = NormBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn new(id: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, SpecError> {
        for v in [x0, y0, x1, y1] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SpecError::BoxOutOfRange { id: id.to_string(), value: v });
            }
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(SpecError::BoxDegenerate { id: id.to_string(), x0, y0, x1, y1 });
        }
        Ok(NormBox { x0, y0, x1, y1 })
    }

    pub fn from_slice(id: &str, c: &[f64]) -> Result<Self, SpecError> {
        match c {
            [x0, y0, x1, y1] => NormBox::new(id, *x0, *y0, *x1, *y1),
            _ => Err(SpecError::BoxArity { id: id.to_string(), len: c.len() }),
        }
    }
}

/// End-exclusive integer rectangle on an `H × W` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridRect {
    pub h_s: usize,
    pub h_e: usize,
    pub w_s: usize,
    pub w_e: usize,
}

impl GridRect {
    pub fn new(h_s: usize, h_e: usize, w_s: usize, w_e: usize) -> Self {
        debug_assert!(h_s < h_e && w_s < w_e, "empty GridRect");
        GridRect { h_s, h_e, w_s, w_e }
    }

    pub fn full(h: usize, w: usize) -> Self {
        GridRect::new(0, h, 0, w)
    }

    pub fn area(&self) -> usize {
        (self.h_e - self.h_s) * (self.w_e - self.w_s)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.h_s..self.h_e).contains(&y) && (self.w_s..self.w_e).contains(&x)
    }

    pub fn intersection_area(&self, other: &GridRect) -> usize {
        let h = self.h_e.min(other.h_e).saturating_sub(self.h_s.max(other.h_s));
        let w = self.w_e.min(other.w_e).saturating_sub(self.w_s.max(other.w_s));
        h * w
    }

    /// Flat pixel indices inside the rect, row-major, for a grid of width `w`.
    pub fn pixel_indices(&self, w: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.area());
        for y in self.h_s..self.h_e {
            out.extend((self.w_s..self.w_e).map(|x| y * w + x));
        }
        out
    }
}

/// A box plus the rank that decides overlaps (higher wins).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectBox {
    pub bbox: NormBox,
    pub priority: i64,
}

// Absorbs representation error such as 0.3 * 10 = 3.0000000000000004.
const SNAP: f64 = 1e-9;

/// Maps a normalized box onto an `h × w` grid with floor/ceil rounding so the
/// rect always covers the requested area.
pub fn box_to_grid(b: &NormBox, h: usize, w: usize) -> GridRect {
    let span = |lo: f64, hi: f64, n: usize| {
        let nf = n as f64;
        let mut s = ((lo * nf + SNAP).floor().max(0.0) as usize).min(n);
        let mut e = ((hi * nf - SNAP).ceil().max(0.0) as usize).min(n);
        if e <= s {
            // Sub-cell boxes still claim the cell they sit in.
            if s == n {
                s = n - 1;
            }
            e = s + 1;
        }
        (s, e)
    };
    let (h_s, h_e) = span(b.y0, b.y1, h);
    let (w_s, w_e) = span(b.x0, b.x1, w);
    GridRect::new(h_s, h_e, w_s, w_e)
}

/// Per-pixel owner after resolving overlaps by priority.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAssignment {
    pub h: usize,
    pub w: usize,
    pub rects: Vec<GridRect>,
    winner: Vec<Option<usize>>,
}

impl RegionAssignment {
    pub fn winner(&self, y: usize, x: usize) -> Option<usize> {
        self.winner[y * self.w + x]
    }

    pub fn winners(&self) -> &[Option<usize>] {
        &self.winner
    }

    /// Flat indices of the pixels subject `j` owns, row-major.
    pub fn owned_pixels(&self, j: usize) -> Vec<usize> {
        self.winner.iter().enumerate().filter(|(_, w)| **w == Some(j)).map(|(i, _)| i).collect()
    }

    pub fn covered_count(&self) -> usize {
        self.winner.iter().filter(|w| w.is_some()).count()
    }
}

/// Winner map for `boxes` on an `h × w` grid: highest priority wins, ties go to
/// the smallest subject index, uncovered pixels have no owner.
pub fn build_region_assignment(boxes: &[SubjectBox], h: usize, w: usize) -> RegionAssignment {
    let rects: Vec<GridRect> = boxes.iter().map(|b| box_to_grid(&b.bbox, h, w)).collect();
    let mut winner: Vec<Option<usize>> = vec![None; h * w];
    for (j, (rect, b)) in rects.iter().zip(boxes).enumerate() {
        for y in rect.h_s..rect.h_e {
            for x in rect.w_s..rect.w_e {
                let slot = &mut winner[y * w + x];
                match *slot {
                    Some(cur) if boxes[cur].priority >= b.priority => {}
                    _ => *slot = Some(j),
                }
            }
        }
    }
    RegionAssignment { h, w, rects, winner }
}

/// Raw binary indicator of one box; overlaps are not resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMask {
    pub h: usize,
    pub w: usize,
    bits: Vec<bool>,
}

impl SubjectMask {
    pub fn from_rect(rect: &GridRect, h: usize, w: usize) -> Self {
        let mut bits = vec![false; h * w];
        for i in rect.pixel_indices(w) {
            bits[i] = true;
        }
        SubjectMask { h, w, bits }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

pub fn masks_from_layout(boxes: &[SubjectBox], h: usize, w: usize) -> Vec<SubjectMask> {
    boxes.iter().map(|b| SubjectMask::from_rect(&box_to_grid(&b.bbox, h, w), h, w)).collect()
}

/// Intersection over union of two rects on the same grid.
pub fn iou(a: &GridRect, b: &GridRect) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Grid-aligned normalized box covering `rect` exactly on an `h × w` grid.
pub fn rect_to_box(rect: &GridRect, h: usize, w: usize) -> NormBox {
    NormBox {
        x0: rect.w_s as f64 / w as f64,
        y0: rect.h_s as f64 / h as f64,
        x1: rect.w_e as f64 / w as f64,
        y1: rect.h_e as f64 / h as f64,
    }
}

/// `n` grid-aligned boxes with sides in `min_side..=max_side` cells at uniform
/// positions (overlaps allowed) and priorities drawn from `0..n`.
pub fn random_layout(rng: &mut impl Rng, n: usize, h: usize, w: usize, min_side: usize, max_side: usize) -> Vec<SubjectBox> {
    assert!(min_side >= 1 && min_side <= max_side && max_side <= h.min(w), "side range must fit the grid");
    (0..n)
        .map(|_| {
            let bh = rng.random_range(min_side..=max_side);
            let bw = rng.random_range(min_side..=max_side);
            let y = rng.random_range(0..=h - bh);
            let x = rng.random_range(0..=w - bw);
            SubjectBox { bbox: rect_to_box(&GridRect::new(y, y + bh, x, x + bw), h, w), priority: rng.random_range(0..n as i64) }
        })
        .collect()
}

/// `n` pairwise-disjoint equal-area boxes whose total area is as close to
/// `coverage · h · w` as integer rects allow without exceeding it. Box `j`
/// lives in the `j`-th vertical strip of width `⌊w/n⌋`.
pub fn coverage_layout(rng: &mut impl Rng, n: usize, h: usize, w: usize, coverage: f64) -> Result<Vec<SubjectBox>, String> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(format!("coverage must be in (0, 1], got {coverage}"));
    }
    if n == 0 || n > w {
        return Err(format!("need 1 <= subjects <= grid width, got {n}"));
    }
    let strip = w / n;
    let target = ((coverage * (h * w) as f64 / n as f64).floor() as usize).max(1);
    let fits = |a: usize| (1..=h).filter(|bh| a.is_multiple_of(*bh) && a / bh <= strip).collect::<Vec<_>>();
    let (area, heights) = (1..=target.min(h * strip))
        .rev()
        .map(|a| (a, fits(a)))
        .find(|(_, f)| !f.is_empty())
        .expect("area 1 always fits");
    Ok((0..n)
        .map(|j| {
            let bh = heights[rng.random_range(0..heights.len())];
            let bw = area / bh;
            let y = rng.random_range(0..=h - bh);
            let x = j * strip + rng.random_range(0..=strip - bw);
            SubjectBox { bbox: rect_to_box(&GridRect::new(y, y + bh, x, x + bw), h, w), priority: 0 }
        })
        .collect())
}
