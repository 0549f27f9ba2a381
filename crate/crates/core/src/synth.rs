//! Synthetic fundus-like images for desk-scale end-to-end runs.
//!
//! Every image has a circular field of view on black, an illumination
//! falloff, an optic disc, a darker macula and a vessel tree. Drusen images
//! add soft, round, yellowish deposits; exudate images add clusters of
//! small, sharp, bright spots. The two sites differ in image size, color
//! balance, illumination and noise.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{DatasetManifest, Label, ManifestRecord};
use crate::imgcore::{Plane, RgbImage};

/// Acquisition look shared by all images of one site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiteStyle {
    pub width: usize,
    pub height: usize,
    /// Multipliers on the base retina color.
    pub tint: [f64; 3],
    /// Strength of the radial illumination falloff.
    pub vignette: f64,
    /// Per-pixel Gaussian noise.
    pub noise: f64,
}

pub const SITE_A: SiteStyle = SiteStyle {
    width: 512,
    height: 512,
    tint: [1.0, 1.0, 1.0],
    vignette: 0.35,
    noise: 0.010,
};

pub const SITE_B: SiteStyle = SiteStyle {
    width: 576,
    height: 512,
    tint: [0.95, 1.04, 1.08],
    vignette: 0.45,
    noise: 0.011,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    /// Images per class and site.
    pub per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { per_class: 15, seed: 2024 }
    }
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: [Vec<f64>; 3],
}

impl Canvas {
    /// Adds `color * amplitude * profile(d)` around `(cx, cy)` within `reach`.
    fn stamp(&mut self, cx: f64, cy: f64, reach: f64, color: [f64; 3], profile: impl Fn(f64) -> f64) {
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(self.w.saturating_sub(1));
        let y1 = ((cy + reach).ceil() as usize).min(self.h.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d > reach {
                    continue;
                }
                let p = profile(d);
                let i = y * self.w + x;
                for c in 0..3 {
                    self.rgb[c][i] += color[c] * p;
                }
            }
        }
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Box-Muller standard normal.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen::<f64>().max(1e-300);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Renders one image of class `label` in the style of `site`.
pub fn render_fundus(label: Label, site: &SiteStyle, rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (site.width, site.height);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let radius = 0.46 * h as f64;
    let base = [0.72 * site.tint[0], 0.36 * site.tint[1], 0.16 * site.tint[2]];
    let tilt = rng.gen_range(0.0..std::f64::consts::TAU);
    let (tx, ty) = (tilt.cos(), tilt.sin());
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.01..0.04),
                rng.gen_range(0.01..0.04),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.005..0.015),
            )
        })
        .collect();
    let mut canvas = Canvas {
        w,
        h,
        rgb: [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]],
    };
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = ((x as f64 - cx) / radius, (y as f64 - cy) / radius);
            let r2 = dx * dx + dy * dy;
            let light = (1.0 - site.vignette * r2 + 0.08 * (dx * tx + dy * ty)).max(0.0);
            let texture: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            for c in 0..3 {
                canvas.rgb[c][y * w + x] = base[c] * light * (1.0 + texture);
            }
        }
    }

    // optic disc on a random side, macula on the other
    let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let disc = (cx + side * 0.55 * radius, cy + rng.gen_range(-0.08..0.08) * radius);
    let macula = (cx - side * 0.1 * radius, cy + rng.gen_range(-0.05..0.05) * radius);
    let disc_r = 0.16 * radius;
    canvas.stamp(disc.0, disc.1, disc_r * 1.6, [0.22, 0.3, 0.18], |d| 1.0 - smoothstep(0.7 * disc_r, 1.3 * disc_r, d));
    let mac_r = 0.2 * radius;
    canvas.stamp(macula.0, macula.1, mac_r * 2.0, [-0.12, -0.08, -0.03], |d| (-(d * d) / (2.0 * mac_r * mac_r)).exp());

    // vessel tree: random walks out of the disc, thinning as they go
    let vessels = rng.gen_range(6..10);
    for v in 0..vessels {
        let mut angle = v as f64 / vessels as f64 * std::f64::consts::TAU + rng.gen_range(-0.3..0.3);
        let (mut x, mut y) = disc;
        let mut width: f64 = rng.gen_range(2.5..4.0);
        let steps = rng.gen_range(180..320);
        for _ in 0..steps {
            angle += 0.06 * normal(rng);
            x += angle.cos() * 1.5;
            y += angle.sin() * 1.5;
            width = (width * 0.997).max(1.0);
            let wd = width;
            canvas.stamp(x, y, 2.0 * wd, [-0.05, -0.035, -0.015], |d| (-(d * d) / (2.0 * wd * wd * 0.25)).exp() * 0.18);
        }
    }

    match label {
        Label::Normal => {}
        Label::Drusen => {
            let n = rng.gen_range(90..130);
            for _ in 0..n {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = 0.75 * radius * rng.gen::<f64>().sqrt();
                let (x, y) = (macula.0 + r * a.cos(), macula.1 + r * a.sin());
                let s = rng.gen_range(4.0..8.0);
                let amp = rng.gen_range(0.16..0.26);
                canvas.stamp(x, y, 3.0 * s, [amp, 0.9 * amp, 0.25 * amp], |d| (-(d * d) / (2.0 * s * s)).exp());
            }
        }
        Label::Exudate => {
            let clusters = rng.gen_range(14..20);
            for _ in 0..clusters {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = 0.75 * radius * rng.gen::<f64>().sqrt();
                let (ccx, ccy) = (macula.0 + r * a.cos(), macula.1 + r * a.sin());
                let spots = rng.gen_range(12..24);
                for _ in 0..spots {
                    let (x, y) = (ccx + 14.0 * normal(rng), ccy + 14.0 * normal(rng));
                    let s = rng.gen_range(1.5..3.5);
                    let amp = rng.gen_range(0.35..0.5);
                    canvas.stamp(x, y, s + 1.5, [amp, amp, 0.6 * amp], |d| 1.0 - smoothstep(s - 0.5, s + 0.5, d));
                }
            }
        }
    }

    // field-of-view mask, noise, clamp
    let mut planes = [Vec::new(), Vec::new(), Vec::new()];
    for (c, plane) in planes.iter_mut().enumerate() {
        *plane = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let mask = 1.0 - smoothstep(radius - 2.0, radius + 2.0, d);
                let i = y * w + x;
                let v = if mask > 0.0 { (canvas.rgb[c][i] + site.noise * normal(rng)) * mask } else { 0.0 };
                plane[i] = v.clamp(0.0, 1.0);
            }
        }
    }
    let [r, g, b] = planes.map(|p| Plane::new(w, h, p).expect("sized above"));
    RgbImage::new(r, g, b).expect("equal planes")
}

/// Writes `per_class` images per class for sites A and B as PNGs under
/// `dir`, plus `manifest.csv`, and returns the manifest.
pub fn generate_corpus(dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for (split, site) in [("A", SITE_A), ("B", SITE_B)] {
        for label in Label::ALL {
            for i in 0..cfg.per_class {
                let stream = (split.as_bytes()[0] as u64) << 32 | (label.index() as u64) << 16 | i as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let img = render_fundus(label, &site, &mut rng);
                let name = format!("site{split}_{label}_{i:02}.png");
                img.to_rgb8().save(dir.join(&name)).map_err(|source| crate::Error::ImageRead {
                    path: dir.join(&name),
                    source,
                })?;
                records.push(ManifestRecord {
                    path: dir.join(&name),
                    label,
                    dataset: format!("synthetic-{}", split.to_ascii_lowercase()),
                    split: split.to_string(),
                });
            }
        }
    }
    // the file stores names relative to `dir`, which is how manifests resolve
    let relative = records
        .iter()
        .map(|r| ManifestRecord {
            path: r.path.file_name().expect("named above").into(),
            ..r.clone()
        })
        .collect();
    fs::write(dir.join("manifest.csv"), DatasetManifest::new(relative)?.to_csv()?)?;
    DatasetManifest::new(records)
}
