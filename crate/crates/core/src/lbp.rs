//! Uniform local binary pattern histograms on a grid of 32x32 patches.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix};
use crate::imgcore::{Plane, RgbImage};

pub const UNIFORM_BINS: usize = 58;
pub const PATCH: usize = 32;
/// Patches whose largest absolute value stays below this are treated as
/// black surround.
pub const NULL_INTENSITY: f64 = 1e-6;

/// Neighbor offsets clockwise from the top-left; neighbor `p` sets bit `p`.
///
/// ```text
/// 0 1 2
/// 7 c 3
/// 6 5 4
/// ```
const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];

/// LBP code of a 3x3 window given row-major. Bit `p` is set when neighbor
/// `p` is at least as bright as the center.
pub fn lbp_code(window: [[f64; 3]; 3]) -> u8 {
    let center = window[1][1];
    NEIGHBORS.iter().enumerate().fold(0u8, |code, (bit, &(dx, dy))| {
        let g = window[(1 + dy) as usize][(1 + dx) as usize];
        if g >= center {
            code | (1 << bit)
        } else {
            code
        }
    })
}

/// Number of 0/1 changes around the circular 8-bit sequence.
pub fn circular_transitions(code: u8) -> u32 {
    (code ^ code.rotate_right(1)).count_ones()
}

/// Maps 8-bit codes to uniform-pattern bins (ascending code order); `None`
/// marks a non-uniform code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UniformTable {
    bins: [Option<u8>; 256],
}

impl UniformTable {
    #[inline]
    pub fn bin(&self, code: u8) -> Option<usize> {
        self.bins[code as usize].map(usize::from)
    }

    pub fn uniform_count(&self) -> usize {
        self.bins.iter().filter(|b| b.is_some()).count()
    }
}

pub fn build_uniform_table() -> UniformTable {
    let mut bins = [None; 256];
    let mut next = 0u8;
    for code in 0..=255u8 {
        if circular_transitions(code) <= 2 {
            bins[code as usize] = Some(next);
            next += 1;
        }
    }
    UniformTable { bins }
}

/// Shared instance of [`build_uniform_table`].
pub fn uniform_table() -> &'static UniformTable {
    static TABLE: OnceLock<UniformTable> = OnceLock::new();
    TABLE.get_or_init(build_uniform_table)
}

fn code_at(plane: &Plane, x: usize, y: usize) -> u8 {
    let mut w = [[0.0; 3]; 3];
    for (dy, row) in w.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            *v = plane.get(x + dx - 1, y + dy - 1);
        }
    }
    lbp_code(w)
}

/// L1-normalized uniform-pattern histogram over the 30x30 interior of the
/// patch at `(x0, y0)`. `None` for a black-surround patch or one without a
/// single uniform code.
pub fn lbp_patch_histogram(
    plane: &Plane,
    x0: usize,
    y0: usize,
    table: &UniformTable,
) -> Option<[f64; UNIFORM_BINS]> {
    let mut peak = 0.0f64;
    for y in y0..y0 + PATCH {
        for x in x0..x0 + PATCH {
            peak = peak.max(plane.get(x, y).abs());
        }
    }
    if peak < NULL_INTENSITY {
        return None;
    }
    let mut counts = [0u32; UNIFORM_BINS];
    let mut total = 0u32;
    for y in y0 + 1..y0 + PATCH - 1 {
        for x in x0 + 1..x0 + PATCH - 1 {
            if let Some(b) = table.bin(code_at(plane, x, y)) {
                counts[b] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return None;
    }
    let mut hist = [0.0; UNIFORM_BINS];
    for (h, &c) in hist.iter_mut().zip(&counts) {
        *h = c as f64 / total as f64;
    }
    Some(hist)
}

/// Stacked R, G, B patch histograms (174 rows) over the non-overlapping
/// patch grid, row-major. Patches null in all three channels are dropped.
pub fn lbp_image(img: &RgbImage) -> Result<FeatureMatrix> {
    let (w, h) = (img.width(), img.height());
    if w < PATCH || h < PATCH {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            block: PATCH,
        });
    }
    let table = uniform_table();
    let origins: Vec<(usize, usize)> = (0..h / PATCH)
        .flat_map(|py| (0..w / PATCH).map(move |px| (px * PATCH, py * PATCH)))
        .collect();
    let columns: Vec<Option<Vec<f64>>> = origins
        .par_iter()
        .map(|&(x0, y0)| {
            let per: Vec<_> = img.channels().iter().map(|p| lbp_patch_histogram(p, x0, y0, table)).collect();
            if per.iter().all(Option::is_none) {
                return None;
            }
            let mut col = Vec::with_capacity(3 * UNIFORM_BINS);
            for hist in per {
                col.extend_from_slice(&hist.unwrap_or([0.0; UNIFORM_BINS]));
            }
            Some(col)
        })
        .collect();
    let mut out = FeatureMatrix::new(DescriptorKind::Lbp);
    for col in columns.into_iter().flatten() {
        out.push_column(&col);
    }
    if out.is_empty() {
        return Err(Error::NoDescriptors(DescriptorKind::Lbp));
    }
    Ok(out)
}
