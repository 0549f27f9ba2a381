//! SURF detection and description on integral images.
//!
//! Sparse mode finds Fast-Hessian blobs across a box-filter scale space,
//! assigns each a dominant orientation and builds a 64-dim rotated
//! descriptor. Dense mode skips detection: upright descriptors are taken at
//! a fixed scale on a regular 16-pixel grid and the three channels are
//! stacked into 192-dim columns.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix};
use crate::imgcore::{integral_image, IntegralImage, Plane, RgbImage};

pub const DESCRIPTOR_LEN: usize = 64;
pub const INITIAL_FILTER: usize = 9;
/// Weight on `Dxy` compensating for the box-filter approximation.
pub const DXY_WEIGHT: f64 = 0.9;
/// Pre-normalization norms below this mark a null descriptor.
pub const NULL_NORM: f64 = 1e-12;

pub const DENSE_CELL: usize = 16;
pub const DENSE_SIGMA: f64 = 1.6;

const ORIENTATION_STEP: f64 = 0.15;
const ORIENTATION_WINDOW: f64 = PI / 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianConfig {
    pub octaves: usize,
    pub intervals: usize,
    /// Minimum area-normalized determinant response.
    pub threshold: f64,
    /// Quadratic sub-pixel / sub-scale refinement of maxima.
    pub refine: bool,
    /// Keep only the strongest responses per channel.
    pub max_keypoints: Option<usize>,
}

impl Default for HessianConfig {
    fn default() -> Self {
        Self {
            octaves: 4,
            intervals: 4,
            threshold: 1e-4,
            refine: true,
            max_keypoints: None,
        }
    }
}

impl HessianConfig {
    pub fn validate(&self) -> Result<()> {
        if self.octaves == 0 || self.intervals < 3 {
            return Err(Error::InvalidParameter(
                "fast-hessian needs >= 1 octave and >= 3 intervals".into(),
            ));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::InvalidParameter("hessian threshold must be >= 0".into()));
        }
        Ok(())
    }

    /// Filter side length for `interval` of `octave` (both zero-based):
    /// 9, 15, 21, 27 in the first octave, with the step doubling per octave.
    pub fn filter_size(octave: usize, interval: usize) -> usize {
        3 * ((2usize << octave) * (interval + 1) + 1)
    }

    fn sample_step(octave: usize) -> usize {
        1 << octave
    }
}

/// Gaussian scale matched by a box filter of side `filter`.
#[inline]
pub fn filter_sigma(filter: f64) -> f64 {
    1.2 * filter / INITIAL_FILTER as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    /// Radians in `[0, 2pi)`.
    pub orientation: f64,
    pub response: f64,
}

/// Second-order box-filter responses at one pixel, each divided by the
/// filter area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HessianTerms {
    pub dxx: f64,
    pub dyy: f64,
    pub dxy: f64,
}

impl HessianTerms {
    #[inline]
    pub fn determinant(&self) -> f64 {
        self.dxx * self.dyy - (DXY_WEIGHT * self.dxy) * (DXY_WEIGHT * self.dxy)
    }
}

/// Whether the whole `filter x filter` support centered on `(x, y)` lies
/// inside the image.
#[inline]
fn filter_fits(ii: &IntegralImage, x: usize, y: usize, filter: usize) -> bool {
    let b = (filter - 1) / 2;
    x >= b && y >= b && x + b < ii.width() && y + b < ii.height()
}

/// Box-filter second derivatives at `(x, y)`.
#[inline]
pub fn hessian_terms(ii: &IntegralImage, x: isize, y: isize, filter: usize) -> HessianTerms {
    let l = (filter / 3) as isize;
    let b = ((filter - 1) / 2) as isize;
    let w = filter as isize;
    let inv_area = 1.0 / (filter * filter) as f64;
    let dxx = ii.box_sum(x - b, y - l + 1, w, 2 * l - 1) - 3.0 * ii.box_sum(x - l / 2, y - l + 1, l, 2 * l - 1);
    let dyy = ii.box_sum(x - l + 1, y - b, 2 * l - 1, w) - 3.0 * ii.box_sum(x - l + 1, y - l / 2, 2 * l - 1, l);
    let dxy = ii.box_sum(x + 1, y - l, l, l) + ii.box_sum(x - l, y + 1, l, l)
        - ii.box_sum(x - l, y - l, l, l)
        - ii.box_sum(x + 1, y + 1, l, l);
    HessianTerms {
        dxx: dxx * inv_area,
        dyy: dyy * inv_area,
        dxy: dxy * inv_area,
    }
}

/// Approximate Hessian determinant at every pixel for one filter size.
///
/// Pixels whose filter support would leave the image get a zero response.
pub fn hessian_response(ii: &IntegralImage, filter: usize) -> Result<Plane> {
    if filter < INITIAL_FILTER || filter % 6 != 3 {
        return Err(Error::InvalidParameter(format!(
            "filter size must be >= 9 and 3 mod 6, got {filter}"
        )));
    }
    Ok(Plane::from_fn(ii.width(), ii.height(), |x, y| {
        if filter_fits(ii, x, y, filter) {
            hessian_terms(ii, x as isize, y as isize, filter).determinant()
        } else {
            0.0
        }
    }))
}

/// Responses of one filter size sampled every `step` pixels.
struct ResponseLayer {
    cols: usize,
    rows: usize,
    filter: usize,
    values: Vec<f64>,
}

impl ResponseLayer {
    fn build(ii: &IntegralImage, filter: usize, step: usize) -> Self {
        let cols = ii.width() / step;
        let rows = ii.height() / step;
        let mut values = vec![0.0; cols * rows];
        for r in 0..rows {
            for c in 0..cols {
                let (x, y) = (c * step, r * step);
                if filter_fits(ii, x, y, filter) {
                    values[r * cols + c] = hessian_terms(ii, x as isize, y as isize, filter).determinant();
                }
            }
        }
        Self {
            cols,
            rows,
            filter,
            values,
        }
    }

    #[inline]
    fn at(&self, c: usize, r: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

fn is_strict_max(layers: [&ResponseLayer; 3], c: usize, r: usize, v: f64) -> bool {
    for (li, layer) in layers.iter().enumerate() {
        for dr in 0..3 {
            for dc in 0..3 {
                if li == 1 && dr == 1 && dc == 1 {
                    continue;
                }
                if layer.at(c + dc - 1, r + dr - 1) >= v {
                    return false;
                }
            }
        }
    }
    true
}

/// Quadratic fit of the response around a discrete maximum; returns the
/// `(x, y, scale)` offset in sample units, or `None` when the fit is
/// singular or leaves the half-sample neighborhood.
fn interpolate_extremum(layers: [&ResponseLayer; 3], c: usize, r: usize) -> Option<[f64; 3]> {
    let [b, m, t] = layers;
    let v = m.at(c, r);
    let dx = (m.at(c + 1, r) - m.at(c - 1, r)) / 2.0;
    let dy = (m.at(c, r + 1) - m.at(c, r - 1)) / 2.0;
    let ds = (t.at(c, r) - b.at(c, r)) / 2.0;
    let dxx = m.at(c + 1, r) + m.at(c - 1, r) - 2.0 * v;
    let dyy = m.at(c, r + 1) + m.at(c, r - 1) - 2.0 * v;
    let dss = t.at(c, r) + b.at(c, r) - 2.0 * v;
    let dxy = (m.at(c + 1, r + 1) - m.at(c - 1, r + 1) - m.at(c + 1, r - 1) + m.at(c - 1, r - 1)) / 4.0;
    let dxs = (t.at(c + 1, r) - t.at(c - 1, r) - b.at(c + 1, r) + b.at(c - 1, r)) / 4.0;
    let dys = (t.at(c, r + 1) - t.at(c, r - 1) - b.at(c, r + 1) + b.at(c, r - 1)) / 4.0;
    let h = [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]];
    let g = [-dx, -dy, -ds];
    let offset = solve3(h, g)?;
    if offset.iter().any(|o| !o.is_finite() || o.abs() > 0.5) {
        return None;
    }
    Some(offset)
}

/// Cramer's rule for a 3x3 system.
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    if d.abs() < 1e-300 {
        return None;
    }
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for row in 0..3 {
            m[row][i] = b[row];
        }
        *o = det(m) / d;
    }
    Some(out)
}

/// Fast-Hessian detector: thresholded strict maxima over 3x3x3
/// scale-space neighborhoods. Orientation is left at zero.
pub fn detect_keypoints(plane: &Plane, cfg: &HessianConfig) -> Result<Vec<Keypoint>> {
    cfg.validate()?;
    let ii = integral_image(plane);
    let min_dim = plane.width().min(plane.height());
    let mut keypoints = Vec::new();
    for octave in 0..cfg.octaves {
        let top_filter = HessianConfig::filter_size(octave, cfg.intervals - 1);
        if 2 * top_filter > min_dim {
            break;
        }
        let step = HessianConfig::sample_step(octave);
        let layers: Vec<ResponseLayer> = (0..cfg.intervals)
            .map(|i| ResponseLayer::build(&ii, HessianConfig::filter_size(octave, i), step))
            .collect();
        // interior samples where the largest filter of the octave fits
        let margin = (top_filter - 1) / 2;
        let first = margin.div_ceil(step).max(1);
        for i in 1..cfg.intervals - 1 {
            let triple = [&layers[i - 1], &layers[i], &layers[i + 1]];
            let mid = triple[1];
            for r in first..mid.rows.saturating_sub(1) {
                if r * step + margin >= plane.height() {
                    break;
                }
                for c in first..mid.cols.saturating_sub(1) {
                    if c * step + margin >= plane.width() {
                        break;
                    }
                    let v = mid.at(c, r);
                    if !(v > cfg.threshold) || !is_strict_max(triple, c, r, v) {
                        continue;
                    }
                    let filter_step = (mid.filter - triple[0].filter) as f64;
                    let (ox, oy, os) = if cfg.refine {
                        match interpolate_extremum(triple, c, r) {
                            Some([ox, oy, os]) => (ox, oy, os),
                            None => continue,
                        }
                    } else {
                        (0.0, 0.0, 0.0)
                    };
                    keypoints.push(Keypoint {
                        x: (c as f64 + ox) * step as f64,
                        y: (r as f64 + oy) * step as f64,
                        scale: filter_sigma(mid.filter as f64 + os * filter_step),
                        orientation: 0.0,
                        response: v,
                    });
                }
            }
        }
    }
    if let Some(max) = cfg.max_keypoints {
        if keypoints.len() > max {
            // stable sort keeps scan order among equal responses
            keypoints.sort_by(|a, b| b.response.total_cmp(&a.response));
            keypoints.truncate(max);
        }
    }
    Ok(keypoints)
}

/// Even Haar wavelet side closest to `size`, at least 2.
#[inline]
fn haar_side(size: f64) -> isize {
    ((size / 2.0).round() as isize).max(1) * 2
}

/// Horizontal Haar response (right half minus left half) centered at `(x, y)`.
#[inline]
pub fn haar_x(ii: &IntegralImage, x: isize, y: isize, side: isize) -> f64 {
    let h = side / 2;
    ii.box_sum(x, y - h, h, side) - ii.box_sum(x - h, y - h, h, side)
}

/// Vertical Haar response (bottom half minus top half) centered at `(x, y)`.
#[inline]
pub fn haar_y(ii: &IntegralImage, x: isize, y: isize, side: isize) -> f64 {
    let h = side / 2;
    ii.box_sum(x - h, y, side, h) - ii.box_sum(x - h, y - h, side, h)
}

fn gaussian(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma)
}

/// Dominant orientation from Gaussian-weighted Haar responses within a
/// radius of six scales, using a sliding sixty-degree window.
///
/// Falls back to 0 when the support leaves the image or every response
/// vanishes.
pub fn assign_orientation(ii: &IntegralImage, kp: &Keypoint) -> f64 {
    let s = kp.scale;
    let side = haar_side(4.0 * s);
    let reach = 6.0 * s + (side / 2) as f64;
    if kp.x - reach < 0.0
        || kp.y - reach < 0.0
        || kp.x + reach > ii.width() as f64
        || kp.y + reach > ii.height() as f64
    {
        return 0.0;
    }
    let mut responses = Vec::with_capacity(113);
    for j in -6i32..=6 {
        for i in -6i32..=6 {
            if i * i + j * j >= 36 {
                continue;
            }
            let px = (kp.x + i as f64 * s).round() as isize;
            let py = (kp.y + j as f64 * s).round() as isize;
            let g = gaussian(i as f64, j as f64, 2.5);
            let rx = g * haar_x(ii, px, py, side);
            let ry = g * haar_y(ii, px, py, side);
            if rx != 0.0 || ry != 0.0 {
                responses.push((rx, ry, normalize_angle(ry.atan2(rx))));
            }
        }
    }
    if responses.is_empty() {
        return 0.0;
    }
    let mut best = (0.0, 0.0, 0.0);
    let mut start = 0.0;
    while start < 2.0 * PI {
        let end = start + ORIENTATION_WINDOW;
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(rx, ry, ang) in &responses {
            let inside = if end < 2.0 * PI {
                ang >= start && ang < end
            } else {
                ang >= start || ang < end - 2.0 * PI
            };
            if inside {
                sx += rx;
                sy += ry;
            }
        }
        let mag = sx * sx + sy * sy;
        if mag > best.0 {
            best = (mag, sx, sy);
        }
        start += ORIENTATION_STEP;
    }
    if best.0 == 0.0 {
        return 0.0;
    }
    normalize_angle(best.2.atan2(best.1))
}

fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r >= 2.0 * PI {
        0.0
    } else {
        r
    }
}

/// Half-width of the pixel support used by a descriptor at `scale`.
pub fn descriptor_reach(scale: f64) -> f64 {
    10.0 * scale + (haar_side(2.0 * scale) / 2) as f64
}

/// 64-dim descriptor over a 20-scale square window split into 4x4
/// subregions, each summarizing 5x5 Haar samples as
/// `(sum dx, sum dy, sum |dx|, sum |dy|)`. Returns `None` for a null
/// (all-zero) descriptor.
pub fn describe(ii: &IntegralImage, kp: &Keypoint, upright: bool) -> Option<[f64; DESCRIPTOR_LEN]> {
    let s = kp.scale;
    if !(s > 0.0) {
        return None;
    }
    let side = haar_side(2.0 * s);
    let (sin, cos) = if upright {
        (0.0, 1.0)
    } else {
        kp.orientation.sin_cos()
    };
    let weight_sigma = 3.3 * s;
    let mut desc = [0.0; DESCRIPTOR_LEN];
    for ky in 0..20 {
        let v = (ky as f64 - 9.5) * s;
        for kx in 0..20 {
            let u = (kx as f64 - 9.5) * s;
            let px = (kp.x + u * cos - v * sin).round() as isize;
            let py = (kp.y + u * sin + v * cos).round() as isize;
            let hx = haar_x(ii, px, py, side);
            let hy = haar_y(ii, px, py, side);
            // rotate into the keypoint frame
            let dx = hx * cos + hy * sin;
            let dy = -hx * sin + hy * cos;
            let g = gaussian(u, v, weight_sigma);
            let (dx, dy) = (g * dx, g * dy);
            let base = ((ky / 5) * 4 + kx / 5) * 4;
            desc[base] += dx;
            desc[base + 1] += dy;
            desc[base + 2] += dx.abs();
            desc[base + 3] += dy.abs();
        }
    }
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= NULL_NORM) {
        return None;
    }
    for v in &mut desc {
        *v /= norm;
    }
    Some(desc)
}

/// Oriented descriptors for every keypoint detected in one plane.
pub fn plane_descriptors(plane: &Plane, cfg: &HessianConfig) -> Result<Vec<[f64; DESCRIPTOR_LEN]>> {
    let ii = integral_image(plane);
    let keypoints = detect_keypoints(plane, cfg)?;
    Ok(keypoints
        .par_iter()
        .map(|kp| {
            let kp = Keypoint {
                orientation: assign_orientation(&ii, kp),
                ..*kp
            };
            describe(&ii, &kp, false)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect())
}

/// Sparse SURF over R, G and B; columns from the three channels are
/// concatenated in channel order.
pub fn sparse_surf(img: &RgbImage, cfg: &HessianConfig) -> Result<FeatureMatrix> {
    let mut out = FeatureMatrix::new(DescriptorKind::Surf);
    for plane in img.channels() {
        for d in plane_descriptors(plane, cfg)? {
            out.push_column(&d);
        }
    }
    if out.is_empty() {
        return Err(Error::NoDescriptors(DescriptorKind::Surf));
    }
    Ok(out)
}

/// Centers of dense grid cells whose descriptor support fits in a
/// `width x height` image, in row-major order.
pub fn dense_grid(width: usize, height: usize) -> Vec<(usize, usize)> {
    let reach = descriptor_reach(DENSE_SIGMA);
    let fits = |c: usize, dim: usize| c as f64 - reach >= 0.0 && c as f64 + reach <= dim as f64;
    let mut out = Vec::new();
    for gy in 0..height / DENSE_CELL {
        let cy = gy * DENSE_CELL + DENSE_CELL / 2;
        if !fits(cy, height) {
            continue;
        }
        for gx in 0..width / DENSE_CELL {
            let cx = gx * DENSE_CELL + DENSE_CELL / 2;
            if fits(cx, width) {
                out.push((cx, cy));
            }
        }
    }
    out
}

/// Upright descriptors on the dense 16-pixel grid; each column stacks the
/// R, G and B descriptors of one cell (192 rows). Cells null in any channel
/// are dropped.
pub fn dense_surf(img: &RgbImage) -> Result<FeatureMatrix> {
    let integrals: Vec<IntegralImage> = img.channels().iter().map(|p| integral_image(p)).collect();
    let columns: Vec<Option<Vec<f64>>> = dense_grid(img.width(), img.height())
        .par_iter()
        .map(|&(cx, cy)| {
            let kp = Keypoint {
                x: cx as f64,
                y: cy as f64,
                scale: DENSE_SIGMA,
                orientation: 0.0,
                response: 0.0,
            };
            let mut col = Vec::with_capacity(3 * DESCRIPTOR_LEN);
            for ii in &integrals {
                col.extend_from_slice(&describe(ii, &kp, true)?);
            }
            Some(col)
        })
        .collect();
    let mut out = FeatureMatrix::new(DescriptorKind::Dsurf);
    for col in columns.into_iter().flatten() {
        out.push_column(&col);
    }
    if out.is_empty() {
        return Err(Error::NoDescriptors(DescriptorKind::Dsurf));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(w: usize, h: usize, centers: &[(f64, f64)], sigma: f64) -> Plane {
        Plane::from_fn(w, h, |x, y| {
            centers
                .iter()
                .map(|&(cx, cy)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum()
        })
    }

    /// Raw (unnormalized) lobe sums straight from the pixel grid.
    fn naive_terms(p: &Plane, x: isize, y: isize, filter: usize) -> HessianTerms {
        let l = (filter / 3) as isize;
        let b = ((filter - 1) / 2) as isize;
        let sum = |x0: isize, y0: isize, w: isize, h: isize| {
            let mut s = 0.0;
            for yy in y0..y0 + h {
                for xx in x0..x0 + w {
                    if xx >= 0 && yy >= 0 && (xx as usize) < p.width() && (yy as usize) < p.height() {
                        s += p.get(xx as usize, yy as usize);
                    }
                }
            }
            s
        };
        let inv = 1.0 / (filter * filter) as f64;
        HessianTerms {
            dxx: (sum(x - b, y - l + 1, 2 * b + 1, 2 * l - 1) - 3.0 * sum(x - l / 2, y - l + 1, l, 2 * l - 1)) * inv,
            dyy: (sum(x - l + 1, y - b, 2 * l - 1, 2 * b + 1) - 3.0 * sum(x - l + 1, y - l / 2, 2 * l - 1, l)) * inv,
            dxy: (sum(x + 1, y - l, l, l) + sum(x - l, y + 1, l, l) - sum(x - l, y - l, l, l) - sum(x + 1, y + 1, l, l)) * inv,
        }
    }

    #[test]
    fn filter_schedule() {
        let sizes: Vec<usize> = (0..4).map(|i| HessianConfig::filter_size(0, i)).collect();
        assert_eq!(sizes, vec![9, 15, 21, 27]);
        let sizes: Vec<usize> = (0..4).map(|i| HessianConfig::filter_size(1, i)).collect();
        assert_eq!(sizes, vec![15, 27, 39, 51]);
        assert_eq!(HessianConfig::filter_size(2, 0), 27);
        assert!((filter_sigma(9.0) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn determinant_weight() {
        let t = HessianTerms {
            dxx: 2.0,
            dyy: 2.0,
            dxy: 1.0,
        };
        assert!((t.determinant() - 3.19).abs() < 1e-12);
    }

    #[test]
    fn constant_image_has_zero_response() {
        // dyadic value: every box sum is exact, so cancellation is exact
        let ii = integral_image(&Plane::filled(40, 40, 0.625));
        for f in [9, 15, 21] {
            let r = hessian_response(&ii, f).unwrap();
            assert!(r.data().iter().all(|&v| v == 0.0));
        }
        let ii = integral_image(&Plane::filled(40, 40, 0.6));
        let r = hessian_response(&ii, 9).unwrap();
        assert!(r.data().iter().all(|&v| v.abs() < 1e-12));
        assert!(hessian_response(&ii, 10).is_err());
    }

    #[test]
    fn response_matches_naive_box_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = Plane::from_fn(64, 64, |_, _| rng.gen_range(0..256) as f64);
        let ii = integral_image(&p);
        for filter in [9, 15, 21] {
            let map = hessian_response(&ii, filter).unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    let fits = filter_fits(&ii, x, y, filter);
                    let expected = if fits {
                        naive_terms(&p, x as isize, y as isize, filter).determinant()
                    } else {
                        0.0
                    };
                    assert_eq!(map.get(x, y), expected, "filter {filter} at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn gaussian_blob_peaks_at_center() {
        let p = blob(41, 41, &[(20.0, 20.0)], 1.2);
        let map = hessian_response(&integral_image(&p), 9).unwrap();
        let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
        for y in 0..41 {
            for x in 0..41 {
                if map.get(x, y) > best {
                    best = map.get(x, y);
                    at = (x, y);
                }
            }
        }
        assert!(best > 0.0);
        assert!((at.0 as i64 - 20).abs() <= 1 && (at.1 as i64 - 20).abs() <= 1, "{at:?}");
    }

    #[test]
    fn constant_and_infinite_threshold_give_no_keypoints() {
        let cfg = HessianConfig::default();
        assert!(detect_keypoints(&Plane::filled(128, 128, 0.3), &cfg).unwrap().is_empty());
        let p = blob(128, 128, &[(64.0, 64.0)], 3.0);
        let strict = HessianConfig {
            threshold: f64::INFINITY,
            ..cfg
        };
        assert!(detect_keypoints(&p, &strict).unwrap().is_empty());
        // too small for any octave
        assert!(detect_keypoints(&blob(40, 40, &[(20.0, 20.0)], 2.0), &cfg).unwrap().is_empty());
    }

    #[test]
    fn two_blobs_two_keypoints() {
        let centers = [(40.0, 50.0), (90.0, 76.0)];
        // amplitude 0.5 keeps the faint ring maxima around each blob below threshold
        let p = blob(128, 128, &centers, 2.5).map(|v| 0.5 * v);
        for refine in [true, false] {
            let cfg = HessianConfig {
                refine,
                ..HessianConfig::default()
            };
            let kps = detect_keypoints(&p, &cfg).unwrap();
            assert_eq!(kps.len(), 2, "refine={refine}: {kps:?}");
            for (cx, cy) in centers {
                assert!(
                    kps.iter().any(|k| (k.x - cx).abs() <= 2.0 && (k.y - cy).abs() <= 2.0),
                    "no keypoint near ({cx},{cy}): {kps:?}"
                );
            }
        }
    }

    #[test]
    fn keypoints_are_strict_scale_space_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centers: Vec<(f64, f64)> = (0..12).map(|_| (rng.gen_range(20.0..108.0), rng.gen_range(20.0..108.0))).collect();
        let p = blob(128, 128, &centers, 2.0);
        let cfg = HessianConfig {
            refine: false,
            octaves: 1,
            ..HessianConfig::default()
        };
        let kps = detect_keypoints(&p, &cfg).unwrap();
        assert!(!kps.is_empty());
        let ii = integral_image(&p);
        for kp in kps {
            // unrefined keypoints sit on octave-0 samples with sigma from one of the middle filters
            let filter = (kp.scale * 9.0 / 1.2).round() as usize;
            let octave_filters = [9, 15, 21, 27];
            let i = octave_filters.iter().position(|&f| f == filter).expect("octave 0 filter");
            let (x, y) = (kp.x as isize, kp.y as isize);
            let v = hessian_terms(&ii, x, y, filter).determinant();
            assert_eq!(v, kp.response);
            for f in &octave_filters[i - 1..=i + 1] {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if *f == filter && dx == 0 && dy == 0 {
                            continue;
                        }
                        assert!(hessian_terms(&ii, x + dx, y + dy, *f).determinant() < v);
                    }
                }
            }
        }
    }

    fn corner_pattern(n: usize) -> Plane {
        // bright wedge with an asymmetric tail so the dominant direction is unique
        Plane::from_fn(n, n, |x, y| {
            let (dx, dy) = (x as f64 - n as f64 / 2.0, y as f64 - n as f64 / 2.0);
            let a = if dx > 0.0 && dy > -dx * 0.3 { 1.0 } else { 0.0 };
            a + 0.5 * (-(dx * dx + dy * dy) / 60.0).exp() * (dx > 0.0) as i32 as f64
        })
    }

    fn rotate_cw(p: &Plane) -> Plane {
        let n = p.width();
        // output (x, y) came from input (y, n - 1 - x)
        Plane::from_fn(n, n, |x, y| p.get(y, n - 1 - x))
    }

    #[test]
    fn orientation_follows_rotation() {
        let n = 64;
        let p = corner_pattern(n);
        let kp = Keypoint {
            x: 32.0,
            y: 32.0,
            scale: 2.0,
            orientation: 0.0,
            response: 0.0,
        };
        let a = assign_orientation(&integral_image(&p), &kp);
        let rotated = rotate_cw(&p);
        // the center pixel (32, 32) maps to (n - 1 - 32, 32)
        let kp_r = Keypoint { x: 31.0, ..kp };
        let b = assign_orientation(&integral_image(&rotated), &kp_r);
        let diff = (b - a - PI / 2.0).rem_euclid(2.0 * PI);
        let diff = diff.min(2.0 * PI - diff);
        assert!(diff < 5f64.to_radians(), "a={a} b={b}");
        assert_eq!(a, assign_orientation(&integral_image(&p), &kp));
    }

    #[test]
    fn orientation_fallbacks() {
        let flat = integral_image(&Plane::filled(64, 64, 0.25));
        let kp = Keypoint {
            x: 32.0,
            y: 32.0,
            scale: 2.0,
            orientation: 0.0,
            response: 0.0,
        };
        assert_eq!(assign_orientation(&flat, &kp), 0.0);
        let edge = integral_image(&corner_pattern(64));
        assert_eq!(assign_orientation(&edge, &Keypoint { x: 3.0, ..kp }), 0.0);
    }

    fn textured(seed: u64, n: usize) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(n, n, |_, _| rng.gen_range(0..64) as f64)
    }

    #[test]
    fn descriptor_unit_norm_and_invariances() {
        let p = textured(8, 80);
        let ii = integral_image(&p);
        for (orientation, upright) in [(0.0, true), (0.7, false), (4.0, false)] {
            let kp = Keypoint {
                x: 40.0,
                y: 40.0,
                scale: 2.0,
                orientation,
                response: 0.0,
            };
            let d = describe(&ii, &kp, upright).unwrap();
            let norm: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            let shifted = describe(&integral_image(&p.map(|v| v + 17.0)), &kp, upright).unwrap();
            assert_eq!(d, shifted);
            let scaled = describe(&integral_image(&p.map(|v| v * 3.0)), &kp, upright).unwrap();
            for (a, b) in d.iter().zip(&scaled) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn flat_patch_is_null() {
        let ii = integral_image(&Plane::filled(64, 64, 0.5));
        let kp = Keypoint {
            x: 32.0,
            y: 32.0,
            scale: 1.6,
            orientation: 0.0,
            response: 0.0,
        };
        assert!(describe(&ii, &kp, true).is_none());
    }

    #[test]
    fn sparse_surf_concatenates_channels() {
        let r = blob(128, 128, &[(40.0, 40.0)], 2.5).map(|v| 0.5 * v);
        let g = blob(128, 128, &[(40.0, 40.0), (90.0, 80.0)], 2.5).map(|v| 0.5 * v);
        let b = Plane::filled(128, 128, 0.0);
        let cfg = HessianConfig::default();
        let per: Vec<usize> = [&r, &g, &b].iter().map(|p| plane_descriptors(p, &cfg).unwrap().len()).collect();
        let img = RgbImage::new(r, g, b).unwrap();
        let m = sparse_surf(&img, &cfg).unwrap();
        assert_eq!(m.dim(), 64);
        assert_eq!(m.count(), per.iter().sum::<usize>());
        assert_eq!(per, vec![1, 2, 0]);
        let flat = RgbImage::from_gray(Plane::filled(128, 128, 0.4));
        assert!(matches!(sparse_surf(&flat, &cfg), Err(Error::NoDescriptors(DescriptorKind::Surf))));
    }

    #[test]
    fn dense_grid_counts() {
        // centers 8 + 16i need 18 px of clearance on both sides
        assert_eq!(dense_grid(512, 512).len(), 30 * 30);
        assert_eq!(dense_grid(592, 512).len(), 35 * 30);
        assert!(dense_grid(32, 32).is_empty());
    }

    #[test]
    fn dense_surf_shape_and_errors() {
        let n = 96;
        let img = RgbImage::new(textured(1, n), textured(2, n), textured(3, n)).unwrap();
        let m = dense_surf(&img).unwrap();
        assert_eq!(m.dim(), 192);
        assert_eq!(m.count(), dense_grid(n, n).len());
        assert_eq!(dense_surf(&img).unwrap(), m);
        let black = RgbImage::from_gray(Plane::filled(n, n, 0.0));
        assert!(matches!(dense_surf(&black), Err(Error::NoDescriptors(DescriptorKind::Dsurf))));
    }
}
