//! Procedural RGB scenes used as a stand-in image corpus.
//!
//! Scenes mix multi-octave value noise with randomly placed hard-edged
//! shapes so that any crop of a few dozen pixels carries asymmetric texture.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{stream_rng, SourceRecord};
use crate::error::{Error, Result};
use crate::geometry::Affine2;
use crate::imaging::{save_image, Image};

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn value_noise(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(w, h, 3);
    let base = random_color(rng);
    for y in 0..h {
        for x in 0..w {
            for (c, &b) in base.iter().enumerate() {
                img.set(x, y, c, 0.5 * b);
            }
        }
    }
    let mut amp = 0.35f32;
    for cell in [64usize, 32, 16, 8] {
        let gw = w / cell + 2;
        let gh = h / cell + 2;
        let grid: Vec<[f32; 3]> = (0..gw * gh)
            .map(|_| {
                let c = random_color(rng);
                [c[0] - 0.5, c[1] - 0.5, c[2] - 0.5]
            })
            .collect();
        for y in 0..h {
            let gy = y as f32 / cell as f32;
            let (y0, fy) = (gy.floor() as usize, gy.fract());
            for x in 0..w {
                let gx = x as f32 / cell as f32;
                let (x0, fx) = (gx.floor() as usize, gx.fract());
                for c in 0..3 {
                    let g = |i: usize, j: usize| grid[j * gw + i][c];
                    let top = g(x0, y0) * (1.0 - fx) + g(x0 + 1, y0) * fx;
                    let bot = g(x0, y0 + 1) * (1.0 - fx) + g(x0 + 1, y0 + 1) * fx;
                    let v = img.get(x, y, c) + amp * (top * (1.0 - fy) + bot * fy);
                    img.set(x, y, c, v);
                }
            }
        }
        amp *= 0.6;
    }
    img
}

enum Shape {
    Rect,
    Ellipse,
    Triangle,
    Stripes,
}

/// Generates one scene; identical `(width, height, seed, index)` give
/// identical pixels.
pub fn generate_scene(width: usize, height: usize, seed: u64, index: u64) -> Image {
    let mut rng = stream_rng(seed ^ 0x5CE7E, index);
    let mut img = value_noise(width, height, &mut rng);
    let n_shapes = rng.gen_range(40..70);
    for _ in 0..n_shapes {
        let shape = match rng.gen_range(0..4) {
            0 => Shape::Rect,
            1 => Shape::Ellipse,
            2 => Shape::Triangle,
            _ => Shape::Stripes,
        };
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let a = rng.gen_range(4.0..32.0f64);
        let b = rng.gen_range(3.0..24.0f64);
        let theta = rng.gen_range(-180.0..180.0f64);
        let color = random_color(&mut rng);
        let color2 = random_color(&mut rng);
        let period = rng.gen_range(3.0..9.0f64);
        let tri: [(f64, f64); 3] = [
            (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..-0.2)),
            (rng.gen_range(0.2..1.0), rng.gen_range(0.0..1.0)),
            (rng.gen_range(-1.0..-0.2), rng.gen_range(0.0..1.0)),
        ];
        let inv = Affine2::from_pose(-theta, 1.0, 1.0);
        let r = a.max(b) * 1.5;
        let (x0, x1) = ((cx - r).max(0.0) as usize, ((cx + r) as usize).min(width - 1));
        let (y0, y1) = ((cy - r).max(0.0) as usize, ((cy + r) as usize).min(height - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (u, v) = inv.apply(x as f64 - cx, y as f64 - cy);
                let (inside, alt) = match shape {
                    Shape::Rect => (u.abs() <= a && v.abs() <= b, false),
                    Shape::Ellipse => ((u / a).powi(2) + (v / b).powi(2) <= 1.0, false),
                    Shape::Triangle => {
                        let p = (u / a, v / b);
                        let s = |p1: (f64, f64), p2: (f64, f64)| {
                            (p2.0 - p1.0) * (p.1 - p1.1) - (p2.1 - p1.1) * (p.0 - p1.0)
                        };
                        let d = [s(tri[0], tri[1]), s(tri[1], tri[2]), s(tri[2], tri[0])];
                        let neg = d.iter().any(|&z| z < 0.0);
                        let pos = d.iter().any(|&z| z > 0.0);
                        (!(neg && pos), false)
                    }
                    Shape::Stripes => (
                        u.abs() <= a && v.abs() <= b,
                        ((u + a) / period).floor() as i64 % 2 == 0,
                    ),
                };
                if inside {
                    let col = if alt { color2 } else { color };
                    for (c, &v) in col.iter().enumerate() {
                        img.set(x, y, c, v);
                    }
                }
            }
        }
    }
    img.clamp01();
    img
}

/// Writes `count` scenes as PNGs plus a `manifest.jsonl`; returns the
/// manifest path.
pub fn write_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images: Vec<(PathBuf, Image)> = crate::par::map_range(count, |i| {
        let name = format!("scene_{i:05}.png");
        (PathBuf::from(name), generate_scene(size, size, seed, i as u64))
    });
    let mut manifest = String::new();
    for (name, img) in &images {
        save_image(img, dir.join(name))?;
        let rec = SourceRecord {
            image: name.clone(),
            bbox: None,
        };
        manifest.push_str(&serde_json::to_string(&rec)?);
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
