//! Pixel containers and the low-level operators everything else builds on:
//! integral images with clipped box sums, bilinear resizing and an
//! edge-replicating median filter.
//!
//! Pixel values are `f64`. Decoded images are scaled into `[0, 1]`; planes
//! produced by later stages (for example the normalized green channel) are
//! free to leave that range.

use std::path::Path;

use image::DynamicImage;

use crate::error::{Error, Result};

/// Standard working height for every fundus image.
pub const STANDARD_HEIGHT: usize = 512;

/// A single-channel image stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if data.len() != width * height {
            return Err(Error::PlaneShape {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Plane filled with `value`. Panics on a zero dimension.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "plane dimensions must be positive");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Builds a plane by evaluating `f(x, y)` at every pixel. Panics on a zero dimension.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "plane dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Pixel lookup with coordinates clamped to the border (edge replication).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Sample standard deviation (divides by `n - 1`; zero for a single pixel).
    pub fn std_dev(&self) -> f64 {
        let n = self.data.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean();
        let ss: f64 = self.data.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// A three-channel color image with planes of identical size.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub red: Plane,
    pub green: Plane,
    pub blue: Plane,
}

impl RgbImage {
    pub fn new(red: Plane, green: Plane, blue: Plane) -> Result<Self> {
        let dims = (red.width, red.height);
        for p in [&green, &blue] {
            if (p.width, p.height) != dims {
                return Err(Error::PlaneShape {
                    width: dims.0,
                    height: dims.1,
                    len: p.data.len(),
                });
            }
        }
        Ok(Self { red, green, blue })
    }

    /// Gray image replicated into all three channels.
    pub fn from_gray(plane: Plane) -> Self {
        Self {
            red: plane.clone(),
            green: plane.clone(),
            blue: plane,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.red.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.red.height
    }

    /// Channels in the fixed R, G, B order used for descriptor stacking.
    pub fn channels(&self) -> [&Plane; 3] {
        [&self.red, &self.green, &self.blue]
    }

    /// Converts to an 8-bit RGB buffer, clamping to `[0, 1]` first.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (w, h) = (self.width() as u32, self.height() as u32);
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        image::RgbImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([
                q(self.red.get(x, y)),
                q(self.green.get(x, y)),
                q(self.blue.get(x, y)),
            ])
        })
    }
}

fn planes_from_samples<T: Copy>(
    width: usize,
    height: usize,
    samples: &[T],
    scale: impl Fn(T) -> f64,
) -> Result<RgbImage> {
    let n = width * height;
    let mut r = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for px in samples.chunks_exact(3) {
        r.push(scale(px[0]));
        g.push(scale(px[1]));
        b.push(scale(px[2]));
    }
    RgbImage::new(
        Plane::new(width, height, r)?,
        Plane::new(width, height, g)?,
        Plane::new(width, height, b)?,
    )
}

/// Converts a decoded image into `[0, 1]`-scaled planes.
pub fn from_dynamic(img: &DynamicImage) -> Result<RgbImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::EmptyImage);
    }
    match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let buf = img.to_rgb16();
            planes_from_samples(w, h, buf.as_raw(), |v| v as f64 / 65535.0)
        }
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => {
            let buf = img.to_rgb32f();
            planes_from_samples(w, h, buf.as_raw(), |v| (v as f64).clamp(0.0, 1.0))
        }
        _ => {
            let buf = img.to_rgb8();
            planes_from_samples(w, h, buf.as_raw(), |v| v as f64 / 255.0)
        }
    }
}

/// Decodes a PNG/JPEG/PPM/BMP/TIFF file into `[0, 1]`-scaled planes.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(Error::Io)?
        .with_guessed_format()
        .map_err(Error::Io)?
        .decode()
        .map_err(|source| Error::ImageRead {
            path: path.to_path_buf(),
            source,
        })?;
    from_dynamic(&img)
}

/// Output width when scaling `width x height` to `target` rows.
pub fn scaled_width(width: usize, height: usize, target: usize) -> usize {
    ((width as f64 * target as f64 / height as f64).round() as usize).max(1)
}

fn resize_plane(p: &Plane, out_w: usize, out_h: usize) -> Plane {
    let sx = p.width as f64 / out_w as f64;
    let sy = p.height as f64 / out_h as f64;
    let max_x = (p.width - 1) as f64;
    let max_y = (p.height - 1) as f64;
    Plane::from_fn(out_w, out_h, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(p.width - 1);
        let y1 = (y0 + 1).min(p.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let top = p.get(x0, y0) * (1.0 - tx) + p.get(x1, y0) * tx;
        let bottom = p.get(x0, y1) * (1.0 - tx) + p.get(x1, y1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Bilinear resize to `target` rows, preserving aspect ratio.
///
/// Images are always brought to exactly `target` rows, upscaling small
/// inputs too. An image already at the target height is returned unchanged.
pub fn resize_to_height(img: &RgbImage, target: usize) -> Result<RgbImage> {
    if target == 0 {
        return Err(Error::InvalidParameter("target height must be >= 1".into()));
    }
    if img.height() == target {
        return Ok(img.clone());
    }
    let out_w = scaled_width(img.width(), img.height(), target);
    Ok(RgbImage {
        red: resize_plane(&img.red, out_w, target),
        green: resize_plane(&img.green, out_w, target),
        blue: resize_plane(&img.blue, out_w, target),
    })
}

/// Summed-area table with a zero first row and column.
///
/// Entry `(x, y)` holds the sum of all source pixels with column `< x` and
/// row `< y`.
#[derive(Clone, Debug)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    /// Source image width.
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// Source image height.
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Cumulative sum of pixels strictly above and left of `(x, y)`;
    /// `x <= width`, `y <= height`.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.sums[y * (self.width + 1) + x]
    }

    /// Sum over the `w x h` rectangle with top-left corner `(x, y)`.
    ///
    /// The rectangle is intersected with the image first; anything fully
    /// outside sums to zero.
    #[inline]
    pub fn box_sum(&self, x: isize, y: isize, w: isize, h: isize) -> f64 {
        let x0 = x.clamp(0, self.width as isize) as usize;
        let y0 = y.clamp(0, self.height as isize) as usize;
        let x1 = (x.saturating_add(w)).clamp(0, self.width as isize) as usize;
        let y1 = (y.saturating_add(h)).clamp(0, self.height as isize) as usize;
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        // D = S4 + S1 - (S2 + S3)
        self.at(x1, y1) + self.at(x0, y0) - (self.at(x1, y0) + self.at(x0, y1))
    }
}

/// Single-pass integral image.
pub fn integral_image(p: &Plane) -> IntegralImage {
    let (w, h) = (p.width, p.height);
    let stride = w + 1;
    let mut sums = vec![0.0; stride * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += p.get(x, y);
            sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
        }
    }
    IntegralImage {
        width: w,
        height: h,
        sums,
    }
}

/// Convenience wrapper over [`IntegralImage::box_sum`].
pub fn box_sum(ii: &IntegralImage, x: isize, y: isize, w: isize, h: isize) -> f64 {
    ii.box_sum(x, y, w, h)
}

/// Median window for background estimation: about a thirtieth of the image
/// height, rounded and bumped to the next odd number when even.
pub fn median_window_for_height(height: usize) -> usize {
    let k = ((height as f64 / 30.0).round() as usize).max(1);
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

fn sorted_remove(window: &mut Vec<f64>, v: f64) {
    let i = window.partition_point(|x| x.total_cmp(&v).is_lt());
    debug_assert!(i < window.len() && window[i].total_cmp(&v).is_eq());
    window.remove(i);
}

fn sorted_insert(window: &mut Vec<f64>, v: f64) {
    let i = window.partition_point(|x| x.total_cmp(&v).is_lt());
    window.insert(i, v);
}

/// `k x k` median filter with edge replication.
///
/// Each row keeps a sorted window that slides one column at a time, so the
/// cost per pixel is `O(k^2)` moves rather than a full sort.
pub fn median_filter(p: &Plane, k: usize) -> Result<Plane> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::MedianWindow(k));
    }
    let r = (k / 2) as isize;
    let (w, h) = (p.width, p.height);
    let mid = k * k / 2;
    let mut out = vec![0.0; w * h];
    let mut window = Vec::with_capacity(k * k);
    for y in 0..h {
        let yi = y as isize;
        window.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                window.push(p.get_clamped(dx, yi + dy));
            }
        }
        window.sort_by(f64::total_cmp);
        out[y * w] = window[mid];
        for x in 1..w {
            let xi = x as isize;
            for dy in -r..=r {
                sorted_remove(&mut window, p.get_clamped(xi - 1 - r, yi + dy));
                sorted_insert(&mut window, p.get_clamped(xi + r, yi + dy));
            }
            out[y * w + x] = window[mid];
        }
    }
    Plane::new(w, h, out)
}
