//! Benchmark sample generation at the S1..S2.5 transformation levels.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imaging::{crop, load_image, render_footprint, resize_bilinear, Image};
use crate::synth::{is_valid_size, make_pair, stream_rng, PairConfig, PixelBox, SourceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "S1")]
    S1,
    #[serde(rename = "S1.5")]
    S1_5,
    #[serde(rename = "S2")]
    S2,
    #[serde(rename = "S2.5")]
    S2_5,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::S1, Level::S1_5, Level::S2, Level::S2_5];

    pub fn scale_range(self) -> (f64, f64) {
        match self {
            Level::S1 => (1.0, 1.0),
            Level::S1_5 => (0.8, 1.5),
            Level::S2 => (0.5, 2.0),
            Level::S2_5 => (0.4, 2.5),
        }
    }

    /// Whether scale varies at this level.
    pub fn scale_active(self) -> bool {
        let (lo, hi) = self.scale_range();
        hi > lo
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::S1 => "S1",
            Level::S1_5 => "S1.5",
            Level::S2 => "S2",
            Level::S2_5 => "S2.5",
        })
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Level::ALL
            .into_iter()
            .find(|l| l.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown level {s:?}; valid levels: S1, S1.5, S2, S2.5")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// Rotated-crop pairs, as used for training.
    Crop,
    /// Warped templates composited onto a background grid.
    Paste,
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crop" => Ok(BenchMode::Crop),
            "paste" => Ok(BenchMode::Paste),
            _ => Err(Error::invalid(format!("unknown benchmark mode {s:?}; use crop or paste"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub level: Level,
    pub template_size: (usize, usize),
    pub count: usize,
    pub seed: u64,
    pub mode: BenchMode,
    pub search_size: (usize, usize),
    /// Paste mode: instances per image, inclusive range within `1..=16`.
    pub instances: (usize, usize),
    /// Paste mode: restrict rotations to this range (degrees).
    pub angle_range: (f64, f64),
}

impl BenchmarkSpec {
    pub fn new(level: Level, template_size: (usize, usize), count: usize, seed: u64, mode: BenchMode) -> Self {
        BenchmarkSpec {
            level,
            template_size,
            count,
            seed,
            mode,
            search_size: (320, 320),
            instances: (1, 1),
            angle_range: (-180.0, 180.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let (tw, th) = self.template_size;
        if !is_valid_size(tw) || !is_valid_size(th) {
            return Err(Error::invalid(format!("template size {tw}x{th} is not 8n+4")));
        }
        let (lo, hi) = self.instances;
        if lo < 1 || hi < lo || hi > GRID * GRID {
            return Err(Error::invalid("instances must lie within 1..=16"));
        }
        Ok(())
    }
}

/// One benchmark input with exact ground truth for every instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSample {
    pub index: usize,
    pub template: Image,
    pub search: Image,
    pub gts: Vec<Pose>,
    /// Paste mode: grid cell (row-major in the 4x4 grid) each instance was
    /// drawn in.
    pub cells: Vec<usize>,
}

const GRID: usize = 4;
// Template crops flatter than this (luma std) are redrawn.
const MIN_TEMPLATE_STD: f64 = 0.04;
const MAX_DRAWS: usize = 50;

struct Corpus<'a> {
    records: &'a [SourceRecord],
    cache: HashMap<PathBuf, Image>,
}

impl Corpus<'_> {
    fn image(&mut self, i: usize) -> Result<&Image> {
        let path = self.records[i].image.clone();
        if !self.cache.contains_key(&path) {
            let img = load_image(&path)?.to_rgb();
            self.cache.insert(path.clone(), img);
        }
        Ok(&self.cache[&path])
    }
}

/// Generates `spec.count` samples from `corpus`. Sample `i` depends only on
/// `(spec, corpus, i)`.
pub fn make_benchmark(spec: &BenchmarkSpec, corpus: &[SourceRecord]) -> Result<Vec<BenchSample>> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("benchmark corpus is empty"));
    }
    let mut c = Corpus {
        records: corpus,
        cache: HashMap::new(),
    };
    (0..spec.count)
        .map(|i| {
            let mut rng = stream_rng(spec.seed, i as u64);
            match spec.mode {
                BenchMode::Crop => crop_sample(spec, &mut c, i, &mut rng),
                BenchMode::Paste => paste_sample(spec, &mut c, i, &mut rng),
            }
        })
        .collect()
}

fn crop_sample(spec: &BenchmarkSpec, c: &mut Corpus, index: usize, rng: &mut ChaCha8Rng) -> Result<BenchSample> {
    let cfg = PairConfig {
        template_size: Some(spec.template_size),
        search_size: spec.search_size,
        scale_range: Some(spec.level.scale_range()),
        angle_range: spec.angle_range,
        ..Default::default()
    };
    for _ in 0..MAX_DRAWS {
        let k = rng.gen_range(0..c.records.len());
        let src = c.image(k)?;
        match make_pair(src, None, &cfg, rng) {
            Ok(p) => {
                return Ok(BenchSample {
                    index,
                    template: p.template,
                    search: p.search,
                    gts: vec![p.gt],
                    cells: Vec::new(),
                })
            }
            Err(Error::Rejected(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::invalid(format!(
        "corpus exhausted: no valid pair for sample {index} after {MAX_DRAWS} draws"
    )))
}

fn luma_std(img: &Image) -> f64 {
    let g = img.to_gray();
    let n = g.data().len() as f64;
    let m = g.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    (g.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn draw_template(spec: &BenchmarkSpec, src: &Image, rng: &mut ChaCha8Rng) -> Option<Image> {
    let (tw, th) = spec.template_size;
    for _ in 0..MAX_DRAWS {
        // Crop a box of a random size around the template size and resample,
        // so templates are not always pixel-aligned copies of the source.
        let bw = ((tw as f64) * rng.gen_range(1.0..1.6)).round() as usize;
        let bh = ((th as f64) * rng.gen_range(1.0..1.6)).round() as usize;
        if bw > src.width() || bh > src.height() {
            return None;
        }
        let b = PixelBox {
            x: rng.gen_range(0..=src.width() - bw),
            y: rng.gen_range(0..=src.height() - bh),
            w: bw,
            h: bh,
        };
        let raw = crop(src, (b.x as i64, b.y as i64, b.w as i64, b.h as i64)).ok()?;
        let t = resize_bilinear(&raw, tw, th).ok()?;
        if luma_std(&t) >= MIN_TEMPLATE_STD {
            return Some(t);
        }
    }
    None
}

fn background(src: &Image, (w, h): (usize, usize), rng: &mut ChaCha8Rng) -> Result<Image> {
    if src.width() >= w && src.height() >= h {
        let x = rng.gen_range(0..=src.width() - w) as i64;
        let y = rng.gen_range(0..=src.height() - h) as i64;
        crop(src, (x, y, w as i64, h as i64))
    } else {
        resize_bilinear(src, w, h)
    }
}

/// Moves a center onto the template's pixel lattice (half-integers for even
/// sides), so unrotated unit-scale instances are exact pixel copies.
fn snap(c: f64, side: usize) -> f64 {
    let off = ((side as f64 - 1.0) / 2.0).fract();
    (c - off).round() + off
}

fn paste_sample(spec: &BenchmarkSpec, c: &mut Corpus, index: usize, rng: &mut ChaCha8Rng) -> Result<BenchSample> {
    let n = c.records.len();
    let (sw, sh) = spec.search_size;
    let (tw, th) = spec.template_size;
    let mut template = None;
    let mut src_idx = 0;
    for _ in 0..MAX_DRAWS {
        src_idx = rng.gen_range(0..n);
        template = draw_template(spec, c.image(src_idx)?, rng);
        if template.is_some() {
            break;
        }
    }
    let template = template.ok_or_else(|| {
        Error::invalid(format!("corpus exhausted: no textured template for sample {index}"))
    })?;
    let bg_idx = if n > 1 {
        (src_idx + rng.gen_range(1..n)) % n
    } else {
        src_idx
    };
    let mut search = background(c.image(bg_idx)?, (sw, sh), rng)?;

    let (lo, hi) = spec.instances;
    let count = rng.gen_range(lo..=hi);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let (cw, ch) = (sw as f64 / GRID as f64, sh as f64 / GRID as f64);
    let (slo, shi) = spec.level.scale_range();
    let (alo, ahi) = spec.angle_range;
    let mut gts = Vec::with_capacity(count);
    for &cell in &cells[..count] {
        let theta = if ahi > alo { rng.gen_range(alo..ahi) } else { alo };
        let mut scale = || if shi > slo { rng.gen_range(slo..=shi) } else { slo };
        let (sx, sy) = (scale(), scale());
        let (gx, gy) = ((cell % GRID) as f64, (cell / GRID) as f64);
        let mut cx = gx * cw + rng.gen_range(0.0..cw);
        let mut cy = gy * ch + rng.gen_range(0.0..ch);
        // Keep the whole footprint inside the image.
        let probe = Pose::new(0.0, 0.0, theta, sx, sy)?.footprint(tw, th);
        let (x0, y0, x1, y1) = probe.bounds();
        let (ex, ey) = ((x1 - x0) / 2.0 + 0.5, (y1 - y0) / 2.0 + 0.5);
        if 2.0 * ex > sw as f64 || 2.0 * ey > sh as f64 {
            return Err(Error::invalid(format!(
                "template {tw}x{th} at scale ({sx:.2}, {sy:.2}) does not fit a {sw}x{sh} search image"
            )));
        }
        cx = snap(cx.clamp(ex, sw as f64 - 1.0 - ex), tw);
        cy = snap(cy.clamp(ey, sh as f64 - 1.0 - ey), th);
        let gt = Pose::new(cx, cy, theta, sx, sy)?;
        if let Some(fp) = render_footprint(&template, &gt, sw, sh)? {
            fp.composite_onto(&mut search);
        }
        gts.push(gt);
    }
    Ok(BenchSample {
        index,
        template,
        search,
        gts,
        cells: cells[..count].to_vec(),
    })
}
