//! Training-pair construction and pseudo-label generation.
//!
//! A pair is cut from one source image: the template is the (resized)
//! content of a box, the search image is a rotated crop of the same source
//! that fully contains the rotated box. Labels are an elliptical Gaussian
//! deformed by the ground-truth pose matrix plus dense parameter maps on
//! the pixels where that Gaussian is at least 0.5.

pub mod dataset;
pub mod scene;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Affine2, Pose};
use crate::imaging::{crop, resize_bilinear, Image};

/// Heatmap value at or above which a pixel carries parameter supervision.
pub const VALID_THRESHOLD: f32 = 0.5;

/// Default upper bound of the scale range; scale labels are `s / S_MAX`.
pub const DEFAULT_S_MAX: f64 = 2.5;

/// Default ratio of heatmap sigma to the template's shorter side.
pub const DEFAULT_SIGMA_RATIO: f64 = 1.0 / 6.0;

/// Deterministic per-record random stream: the same `(seed, index)` always
/// yields the same sequence, independent of evaluation order.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Nearest side length of the form `8n + 4` (n >= 1); ties go down.
pub fn nearest_valid_size(raw: usize) -> Result<usize> {
    if raw < 8 {
        return Err(Error::invalid(format!("template side {raw} < 8")));
    }
    if raw <= 12 {
        return Ok(12);
    }
    let lo = (raw - 4) / 8 * 8 + 4;
    let hi = lo + 8;
    Ok(if raw - lo <= hi - raw { lo } else { hi })
}

pub fn is_valid_size(side: usize) -> bool {
    side >= 12 && side % 8 == 4
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub image: PathBuf,
    /// `[x, y, w, h]` in pixels.
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

/// Reads a JSON-lines manifest. Relative image paths are resolved against
/// the manifest's directory. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<SourceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: SourceRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(b) = rec.bbox {
            if b.iter().any(|v| !v.is_finite()) || b[2] < 8.0 || b[3] < 8.0 || b[0] < 0.0 || b[1] < 0.0
            {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!("invalid box {b:?} (need x,y >= 0 and w,h >= 8)"),
                });
            }
        }
        if rec.image.is_relative() {
            rec.image = base.join(&rec.image);
        }
        out.push(rec);
    }
    Ok(out)
}

/// Integer box `(x, y, w, h)` inside a source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn from_record(b: [f64; 4]) -> Self {
        PixelBox {
            x: b[0].round() as usize,
            y: b[1].round() as usize,
            w: b[2].round() as usize,
            h: b[3].round() as usize,
        }
    }

    /// Continuous center in pixel-center coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0 - 0.5,
            self.y as f64 + self.h as f64 / 2.0 - 0.5,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    /// Fixed template size; `None` picks the nearest valid size of the box.
    pub template_size: Option<(usize, usize)>,
    pub search_size: (usize, usize),
    /// When sampling a box, its sides are `template side * U(range)` per
    /// axis. Ignored when the box is given.
    pub scale_range: Option<(f64, f64)>,
    /// Side range for boxes sampled without a scale range.
    pub random_box_side: (usize, usize),
    /// Rotation is drawn uniformly from this range (degrees).
    pub angle_range: (f64, f64),
    /// Angle draws before a pair is rejected.
    pub max_attempts: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            template_size: None,
            search_size: (128, 128),
            scale_range: None,
            random_box_side: (24, 128),
            angle_range: (-180.0, 180.0),
            max_attempts: 10,
        }
    }
}

/// Where a pair came from; enough to recompute its geometry independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub bbox: PixelBox,
    pub theta: f64,
    /// Integer top-left of the search crop in the rotated source frame.
    pub origin: (i64, i64),
    pub source_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub template: Image,
    pub search: Image,
    pub gt: Pose,
    pub provenance: Provenance,
}

impl Provenance {
    /// Maps a source-image point into search-image coordinates.
    pub fn source_to_search(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = source_center(self.source_size);
        let r = Affine2::from_pose(self.theta, 1.0, 1.0);
        let (dx, dy) = r.apply(x - cx, y - cy);
        (cx + dx - self.origin.0 as f64, cy + dy - self.origin.1 as f64)
    }
}

fn source_center((w, h): (usize, usize)) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

fn sample_box(src: &Image, tsize: Option<(usize, usize)>, cfg: &PairConfig, rng: &mut ChaCha8Rng) -> Result<PixelBox> {
    let (w, h) = match (tsize, cfg.scale_range) {
        (Some((tw, th)), Some((lo, hi))) => {
            let s = |rng: &mut ChaCha8Rng| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let w = (tw as f64 * s(rng)).round().max(8.0) as usize;
            let h = (th as f64 * s(rng)).round().max(8.0) as usize;
            (w, h)
        }
        _ => {
            let (lo, hi) = cfg.random_box_side;
            (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))
        }
    };
    if w > src.width() || h > src.height() {
        return Err(Error::Rejected(format!(
            "box {w}x{h} does not fit source {}x{}",
            src.width(),
            src.height()
        )));
    }
    Ok(PixelBox {
        x: rng.gen_range(0..=src.width() - w),
        y: rng.gen_range(0..=src.height() - h),
        w,
        h,
    })
}

/// Builds one training pair from `source`.
///
/// Returns [`Error::Rejected`] when no sampled angle admits a search crop
/// that contains the rotated box without leaving the source image; callers
/// are expected to resample.
pub fn make_pair(
    source: &Image,
    bbox: Option<PixelBox>,
    cfg: &PairConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingPair> {
    let bbox = match bbox {
        Some(b) => b,
        None => sample_box(source, cfg.template_size, cfg, rng)?,
    };
    if bbox.w < 8 || bbox.h < 8 {
        return Err(Error::invalid("box sides must be >= 8"));
    }
    let raw = crop(source, (bbox.x as i64, bbox.y as i64, bbox.w as i64, bbox.h as i64))?;
    let (tw, th) = match cfg.template_size {
        Some((w, h)) => {
            if !is_valid_size(w) || !is_valid_size(h) {
                return Err(Error::invalid(format!("template size {w}x{h} is not 8n+4")));
            }
            (w, h)
        }
        None => (nearest_valid_size(bbox.w)?, nearest_valid_size(bbox.h)?),
    };
    let template = resize_bilinear(&raw, tw, th)?;
    let sx = bbox.w as f64 / tw as f64;
    let sy = bbox.h as f64 / th as f64;

    let (sw, sh) = cfg.search_size;
    let src_size = (source.width(), source.height());
    let (scx, scy) = source_center(src_size);
    let (bcx, bcy) = bbox.center();
    for _ in 0..cfg.max_attempts.max(1) {
        let (alo, ahi) = cfg.angle_range;
        let theta = loop {
            let t: f64 = if ahi > alo { rng.gen_range(alo..ahi) } else { alo };
            if t > -180.0 {
                break t;
            }
        };
        let r = Affine2::from_pose(theta, 1.0, 1.0);
        let rinv = r.transpose();
        let (dx, dy) = r.apply(bcx - scx, bcy - scy);
        let (rcx, rcy) = (scx + dx, scy + dy);
        let (c, s) = (theta.to_radians().cos().abs(), theta.to_radians().sin().abs());
        let ex = (c * bbox.w as f64 + s * bbox.h as f64) / 2.0;
        let ey = (s * bbox.w as f64 + c * bbox.h as f64) / 2.0;
        // Crop pixels o..o+W-1 cover [o - 0.5, o + W - 0.5].
        let ox_lo = (rcx + ex - sw as f64 + 0.5).ceil() as i64;
        let ox_hi = (rcx - ex + 0.5).floor() as i64;
        let oy_lo = (rcy + ey - sh as f64 + 0.5).ceil() as i64;
        let oy_hi = (rcy - ey + 0.5).floor() as i64;
        if ox_lo > ox_hi || oy_lo > oy_hi {
            continue;
        }
        let inside = |px: f64, py: f64| {
            let (qx, qy) = rinv.apply(px - scx, py - scy);
            let (qx, qy) = (scx + qx, scy + qy);
            qx >= 0.0 && qy >= 0.0 && qx <= src_size.0 as f64 - 1.0 && qy <= src_size.1 as f64 - 1.0
        };
        let mut feasible = Vec::new();
        for oy in oy_lo..=oy_hi {
            for ox in ox_lo..=ox_hi {
                let (x0, y0) = (ox as f64, oy as f64);
                let (x1, y1) = (x0 + sw as f64 - 1.0, y0 + sh as f64 - 1.0);
                if inside(x0, y0) && inside(x1, y0) && inside(x0, y1) && inside(x1, y1) {
                    feasible.push((ox, oy));
                }
            }
        }
        if feasible.is_empty() {
            continue;
        }
        let origin = feasible[rng.gen_range(0..feasible.len())];
        let ch = source.channels();
        let mut search = Image::new(sw, sh, ch);
        for v in 0..sh {
            for u in 0..sw {
                let (qx, qy) = rinv.apply(
                    (u as i64 + origin.0) as f64 - scx,
                    (v as i64 + origin.1) as f64 - scy,
                );
                for k in 0..ch {
                    let val = source.sample(scx + qx, scy + qy, k).unwrap_or(0.0);
                    search.set(u, v, k, val);
                }
            }
        }
        let gt = Pose::new(rcx - origin.0 as f64, rcy - origin.1 as f64, theta, sx, sy)?;
        return Ok(TrainingPair {
            template,
            search,
            gt,
            provenance: Provenance {
                bbox,
                theta,
                origin,
                source_size: src_size,
            },
        });
    }
    Err(Error::Rejected(format!(
        "box {bbox:?} cannot be contained in a {sw}x{sh} crop after {} angle draws",
        cfg.max_attempts
    )))
}

/// Heatmap sigma for a template: `ratio * min(tw, th)`.
pub fn sigma_for(template_size: (usize, usize), ratio: f64) -> f64 {
    ratio * template_size.0.min(template_size.1) as f64
}

/// Closed-form elliptical Gaussian `exp(-|A^-1 (p - c)|^2 / (2 sigma^2))`.
pub fn heatmap_value(gt: &Pose, sigma0: f64, x: f64, y: f64) -> Result<f64> {
    let inv = gt.affine().invert()?;
    Ok(gaussian(&inv, gt, sigma0, x, y))
}

#[inline]
fn gaussian(inv: &Affine2, gt: &Pose, sigma0: f64, x: f64, y: f64) -> f64 {
    let (u, v) = inv.apply(x - gt.xc, y - gt.yc);
    (-(u * u + v * v) / (2.0 * sigma0 * sigma0)).exp()
}

fn check_heatmap_args(gt: &Pose, out: (usize, usize), sigma0: f64) -> Result<()> {
    if !(sigma0 > 0.0) {
        return Err(Error::invalid("sigma0 must be positive"));
    }
    if !(gt.sx > 0.0 && gt.sy > 0.0) {
        return Err(Error::Singular(gt.sx * gt.sy));
    }
    let (w, h) = out;
    if gt.xc < -0.5 || gt.yc < -0.5 || gt.xc > w as f64 - 0.5 || gt.yc > h as f64 - 0.5 {
        return Err(Error::invalid(format!(
            "center ({}, {}) outside {w}x{h} map",
            gt.xc, gt.yc
        )));
    }
    Ok(())
}

/// Row-major `out.1 x out.0` elliptical heatmap for one instance.
///
/// `template_size` is carried for callers that derive `sigma0` from it; the
/// deformation itself comes from the pose scales.
pub fn elliptical_heatmap(
    gt: &Pose,
    _template_size: (usize, usize),
    out: (usize, usize),
    sigma0: f64,
) -> Result<Vec<f32>> {
    check_heatmap_args(gt, out, sigma0)?;
    let inv = gt.affine().invert()?;
    let (w, h) = out;
    let mut map = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            map[y * w + x] = gaussian(&inv, gt, sigma0, x as f64, y as f64) as f32;
        }
    }
    Ok(map)
}

/// Heatmap plus dense parameter targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMaps {
    pub width: usize,
    pub height: usize,
    pub heatmap: Vec<f32>,
    pub cos: Vec<f32>,
    pub sign: Vec<f32>,
    pub sx: Vec<f32>,
    pub sy: Vec<f32>,
    pub valid: Vec<bool>,
}

impl LabelMaps {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Sign label: 1 for `theta >= 0` after normalization (so -180 counts as
/// +180), else 0.
pub fn sign_label(theta: f64) -> f32 {
    if crate::geometry::normalize_angle(theta) >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Builds label maps for one or more instances. Heatmaps combine by
/// pixelwise max; each valid pixel takes the parameters of the instance
/// with the strongest response there.
pub fn make_labels(
    gts: &[Pose],
    template_size: (usize, usize),
    out: (usize, usize),
    sigma0: f64,
    s_max: f64,
) -> Result<LabelMaps> {
    let (w, h) = out;
    let n = w * h;
    let mut labels = LabelMaps {
        width: w,
        height: h,
        heatmap: vec![0.0; n],
        cos: vec![0.0; n],
        sign: vec![0.0; n],
        sx: vec![0.0; n],
        sy: vec![0.0; n],
        valid: vec![false; n],
    };
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (k, gt) in gts.iter().enumerate() {
        if gt.sx > s_max || gt.sy > s_max {
            return Err(Error::invalid(format!(
                "scale ({}, {}) exceeds s_max {s_max}",
                gt.sx, gt.sy
            )));
        }
        let map = elliptical_heatmap(gt, template_size, out, sigma0)?;
        for (i, &v) in map.iter().enumerate() {
            if v > labels.heatmap[i] {
                labels.heatmap[i] = v;
                owner[i] = Some(k);
            }
        }
    }
    for i in 0..n {
        if labels.heatmap[i] >= VALID_THRESHOLD {
            let gt = &gts[owner[i].expect("positive pixel has an owner")];
            labels.valid[i] = true;
            labels.cos[i] = gt.theta.to_radians().cos() as f32;
            labels.sign[i] = sign_label(gt.theta);
            labels.sx[i] = (gt.sx / s_max) as f32;
            labels.sy[i] = (gt.sy / s_max) as f32;
        }
    }
    Ok(labels)
}
