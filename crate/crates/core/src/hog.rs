//! 31-dimensional HOG over a fixed grid of 32x32 blocks.
//!
//! Each block holds 2x2 cells of 16x16 pixels. A cell contributes an
//! 18-bin contrast-sensitive histogram, a 9-bin contrast-insensitive
//! histogram and 4 texture-energy terms; the block feature is the average
//! of its four cells. Blocks are normalized only by their own cells.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix};
use crate::imgcore::{Plane, RgbImage};

pub const ORIENTATIONS: usize = 9;
pub const SIGNED_BINS: usize = 2 * ORIENTATIONS;
pub const HOG_DIM: usize = 3 * ORIENTATIONS + 4;
pub const BLOCK: usize = 32;
pub const CELL: usize = 16;
/// Per-feature clip applied to each normalized histogram.
pub const CLIP: f64 = 0.2;
/// Gradient energy below which a block channel counts as null.
pub const NULL_ENERGY: f64 = 1e-12;

const NORM_EPS: f64 = 1e-12;
const TEXTURE_WEIGHT: f64 = 0.2357;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub magnitude: Plane,
    /// Radians in `[0, 2pi)`.
    pub orientation: Plane,
}

/// Centered differences in the interior, one-sided at the borders.
pub fn gradient(p: &Plane) -> GradientField {
    let (w, h) = (p.width(), p.height());
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
    let mut mag = Vec::with_capacity(w * h);
    let mut ori = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = diff(p.get(x0, y), p.get(x1, y), x1 - x0);
            let gy = diff(p.get(x, y0), p.get(x, y1), y1 - y0);
            mag.push((gx * gx + gy * gy).sqrt());
            let a = gy.atan2(gx).rem_euclid(2.0 * PI);
            ori.push(if a >= 2.0 * PI { 0.0 } else { a });
        }
    }
    GradientField {
        magnitude: Plane::new(w, h, mag).expect("same shape"),
        orientation: Plane::new(w, h, ori).expect("same shape"),
    }
}

/// Magnitude-weighted signed histogram of one cell; each vote is split
/// linearly between the two nearest of 18 bins centered at multiples of 20
/// degrees.
pub fn cell_histogram(g: &GradientField, x0: usize, y0: usize) -> [f64; SIGNED_BINS] {
    let mut hist = [0.0; SIGNED_BINS];
    let bin_width = 2.0 * PI / SIGNED_BINS as f64;
    for y in y0..y0 + CELL {
        for x in x0..x0 + CELL {
            let m = g.magnitude.get(x, y);
            if m == 0.0 {
                continue;
            }
            let pos = g.orientation.get(x, y) / bin_width;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = (lo as usize) % SIGNED_BINS;
            let b1 = (b0 + 1) % SIGNED_BINS;
            hist[b0] += m * (1.0 - frac);
            hist[b1] += m * frac;
        }
    }
    hist
}

fn unsigned(hist: &[f64; SIGNED_BINS]) -> [f64; ORIENTATIONS] {
    let mut out = [0.0; ORIENTATIONS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = hist[i] + hist[i + ORIENTATIONS];
    }
    out
}

/// 31-dim feature of the block whose top-left corner is `(x0, y0)`.
///
/// Returns `None` when the block's gradient energy is (numerically) zero.
pub fn hog_block(g: &GradientField, x0: usize, y0: usize) -> Option<[f64; HOG_DIM]> {
    let mut energy_total = 0.0;
    for y in y0..y0 + BLOCK {
        for x in x0..x0 + BLOCK {
            let m = g.magnitude.get(x, y);
            energy_total += m * m;
        }
    }
    if energy_total < NULL_ENERGY {
        return None;
    }
    let cells: Vec<[f64; SIGNED_BINS]> = [(0, 0), (CELL, 0), (0, CELL), (CELL, CELL)]
        .iter()
        .map(|&(dx, dy)| cell_histogram(g, x0 + dx, y0 + dy))
        .collect();
    let undirected: Vec<[f64; ORIENTATIONS]> = cells.iter().map(unsigned).collect();
    let norms: Vec<f64> = undirected
        .iter()
        .map(|u| 1.0 / (u.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt())
        .collect();

    let mut block = [0.0; HOG_DIM];
    for (signed, undir) in cells.iter().zip(&undirected) {
        let mut feat = [0.0; HOG_DIM];
        for &n in &norms {
            for (o, &v) in signed.iter().enumerate() {
                feat[o] += 0.5 * (v * n).min(CLIP);
            }
        }
        let mut texture = [0.0; 4];
        for (t, &n) in norms.iter().enumerate() {
            for (o, &v) in undir.iter().enumerate() {
                let clipped = (v * n).min(CLIP);
                feat[SIGNED_BINS + o] += 0.5 * clipped;
                texture[t] += TEXTURE_WEIGHT * clipped;
            }
        }
        feat[SIGNED_BINS + ORIENTATIONS..].copy_from_slice(&texture);
        for (b, f) in block.iter_mut().zip(&feat) {
            *b += f / 4.0;
        }
    }
    Some(block)
}

/// Stacked R, G, B block features (93 rows) over the non-overlapping block
/// grid anchored at the origin, in row-major block order. Blocks null in
/// every channel are dropped; a null channel inside a kept block is zero.
pub fn hog_image(img: &RgbImage) -> Result<FeatureMatrix> {
    let (w, h) = (img.width(), img.height());
    if w < BLOCK || h < BLOCK {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            block: BLOCK,
        });
    }
    let fields: Vec<GradientField> = img.channels().par_iter().map(|p| gradient(p)).collect();
    let origins: Vec<(usize, usize)> = (0..h / BLOCK)
        .flat_map(|by| (0..w / BLOCK).map(move |bx| (bx * BLOCK, by * BLOCK)))
        .collect();
    let columns: Vec<Option<Vec<f64>>> = origins
        .par_iter()
        .map(|&(x0, y0)| {
            let per: Vec<Option<[f64; HOG_DIM]>> = fields.iter().map(|g| hog_block(g, x0, y0)).collect();
            if per.iter().all(Option::is_none) {
                return None;
            }
            let mut col = Vec::with_capacity(3 * HOG_DIM);
            for f in per {
                col.extend_from_slice(&f.unwrap_or([0.0; HOG_DIM]));
            }
            Some(col)
        })
        .collect();
    let mut out = FeatureMatrix::new(DescriptorKind::Hog);
    for col in columns.into_iter().flatten() {
        out.push_column(&col);
    }
    if out.is_empty() {
        return Err(Error::NoDescriptors(DescriptorKind::Hog));
    }
    Ok(out)
}
