//! Exhaustive normalized cross-correlation matcher over a rotation/scale
//! grid.

mod kernel;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use kernel::{row_corr, row_corr_f64};

use crate::decode::MatchResult;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imaging::{render_footprint, Image};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NccMode {
    /// Mean-subtracted coefficient form.
    #[default]
    ZeroMean,
    /// `sum(T I) / sqrt(sum(T^2) sum(I^2))`.
    Plain,
}

/// Valid-mode response map, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ResponseMap {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Best response, first in row-major order on ties.
    pub fn argmax(&self) -> Option<(usize, usize, f32)> {
        let i = crate::decode::argmax(&self.data)?;
        Some((i % self.width, i / self.width, self.data[i]))
    }
}

/// A template restricted to a mask, stored as per-row runs of taps.
#[derive(Debug, Clone)]
pub struct MaskedTemplate {
    width: usize,
    height: usize,
    /// `(row, start column, taps)`.
    runs: Vec<(usize, usize, Vec<f32>)>,
    count: usize,
    sum: f64,
    sum_sq: f64,
}

impl MaskedTemplate {
    /// `values` is gray; `mask` row-major over it (`None` = all pixels).
    pub fn new(values: &Image, mask: Option<&[bool]>) -> Result<Self> {
        let g = gray(values);
        let (w, h) = (g.width(), g.height());
        if let Some(m) = mask {
            if m.len() != w * h {
                return Err(Error::Shape("template mask size mismatch".into()));
            }
        }
        let inside = |x: usize, y: usize| mask.map_or(true, |m| m[y * w + x]);
        let mut runs = Vec::new();
        let (mut count, mut sum, mut sum_sq) = (0usize, 0.0f64, 0.0f64);
        for y in 0..h {
            let mut x = 0;
            while x < w {
                if !inside(x, y) {
                    x += 1;
                    continue;
                }
                let start = x;
                let mut taps = Vec::new();
                while x < w && inside(x, y) {
                    let v = g.get(x, y, 0);
                    taps.push(v);
                    sum += v as f64;
                    sum_sq += (v as f64) * (v as f64);
                    count += 1;
                    x += 1;
                }
                runs.push((y, start, taps));
            }
        }
        if count == 0 {
            return Err(Error::invalid("template mask is empty"));
        }
        Ok(MaskedTemplate {
            width: w,
            height: h,
            runs,
            count,
            sum,
            sum_sq,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

fn gray(img: &Image) -> Image {
    if img.channels() == 1 {
        img.clone()
    } else {
        img.to_gray()
    }
}

/// Row-wise prefix sums of `I` and `I^2` for `O(rows)` masked window
/// statistics.
struct Prefix {
    stride: usize,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Prefix {
    fn new(img: &Image) -> Self {
        let (w, h) = (img.width(), img.height());
        let stride = w + 1;
        let mut s1 = vec![0.0; stride * h];
        let mut s2 = vec![0.0; stride * h];
        for y in 0..h {
            for x in 0..w {
                let v = img.get(x, y, 0) as f64;
                s1[y * stride + x + 1] = s1[y * stride + x] + v;
                s2[y * stride + x + 1] = s2[y * stride + x] + v * v;
            }
        }
        Prefix { stride, s1, s2 }
    }
}

/// Accumulation precision of the correlation numerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// f32 accumulation; fastest, used by the grid search.
    Single,
    /// f64 accumulation; accurate on near-flat windows.
    #[default]
    Double,
}

/// Unnormalized correlation `sum (T - shift) * I` over the template's mask,
/// valid mode.
fn correlate(search: &Image, tpl: &MaskedTemplate, shift: f64, precision: Precision) -> (usize, usize, Vec<f64>) {
    let (sw, sh) = (search.width(), search.height());
    let (ow, oh) = (sw - tpl.width + 1, sh - tpl.height + 1);
    match precision {
        Precision::Single => {
            let runs: Vec<(usize, usize, Vec<f32>)> = tpl
                .runs
                .iter()
                .map(|(y, x, t)| (*y, *x, t.iter().map(|&v| (v as f64 - shift) as f32).collect()))
                .collect();
            let src = search.data();
            let mut data = vec![0.0f32; ow * oh];
            par::for_each_chunk_mut(&mut data, ow, |v, out| {
                for (ty, tx, taps) in &runs {
                    let off = (v + ty) * sw + tx;
                    kernel::row_corr(out, &src[off..off + ow + taps.len() - 1], taps);
                }
            });
            (ow, oh, data.into_iter().map(f64::from).collect())
        }
        Precision::Double => {
            let runs: Vec<(usize, usize, Vec<f64>)> = tpl
                .runs
                .iter()
                .map(|(y, x, t)| (*y, *x, t.iter().map(|&v| v as f64 - shift).collect()))
                .collect();
            let src: Vec<f64> = search.data().iter().map(|&v| v as f64).collect();
            let mut data = vec![0.0f64; ow * oh];
            par::for_each_chunk_mut(&mut data, ow, |v, out| {
                for (ty, tx, taps) in &runs {
                    let off = (v + ty) * sw + tx;
                    kernel::row_corr_f64(out, &src[off..off + ow + taps.len() - 1], taps);
                }
            });
            (ow, oh, data)
        }
    }
}

fn check_fit(search: &Image, tw: usize, th: usize) -> Result<()> {
    if tw > search.width() || th > search.height() {
        return Err(Error::Shape(format!(
            "template {tw}x{th} larger than search {}x{}",
            search.width(),
            search.height()
        )));
    }
    Ok(())
}

/// Raw `sum T * I` at every valid offset of an unmasked gray template,
/// accumulated in f64.
pub fn correlation_map(search: &Image, templ: &Image) -> Result<ResponseMap> {
    check_fit(search, templ.width(), templ.height())?;
    let tpl = MaskedTemplate::new(templ, None)?;
    let (width, height, data) = correlate(&gray(search), &tpl, 0.0, Precision::Double);
    Ok(ResponseMap {
        width,
        height,
        data: data.into_iter().map(|v| v as f32).collect(),
    })
}

/// Normalized cross-correlation of a masked template against a gray search
/// image. Windows (or templates) with zero variance score 0.
pub fn masked_ncc_map(
    search: &Image,
    tpl: &MaskedTemplate,
    mode: NccMode,
    precision: Precision,
) -> Result<ResponseMap> {
    check_fit(search, tpl.width, tpl.height)?;
    let search = gray(search);
    let n = tpl.count as f64;
    let (shift, t_energy) = match mode {
        NccMode::ZeroMean => {
            let mean = tpl.sum / n;
            (mean, tpl.sum_sq - tpl.sum * tpl.sum / n)
        }
        NccMode::Plain => (0.0, tpl.sum_sq),
    };
    let (ow, oh, num) = correlate(&search, tpl, shift, precision);
    let mut map = ResponseMap {
        width: ow,
        height: oh,
        data: vec![0.0; ow * oh],
    };
    if t_energy <= 1e-12 * tpl.sum_sq.max(1.0) {
        return Ok(map);
    }
    // With a zero-mean template, sum(T' I) already equals sum(T' (I - mean_I)),
    // up to the rounding residual of sum(T').
    let residual: f64 = match mode {
        NccMode::ZeroMean => tpl
            .runs
            .iter()
            .flat_map(|(_, _, t)| t.iter().map(|&v| v as f64 - shift))
            .sum(),
        NccMode::Plain => 0.0,
    };
    let prefix = Prefix::new(&search);
    let runs: Vec<(usize, usize, usize)> = tpl.runs.iter().map(|(y, x, t)| (*y, *x, t.len())).collect();
    par::for_each_chunk_mut(&mut map.data, ow, |v, row| {
        let num = &num[v * ow..(v + 1) * ow];
        let mut acc1 = vec![0.0f64; ow];
        let mut acc2 = vec![0.0f64; ow];
        for &(ty, tx, len) in &runs {
            let a = (v + ty) * prefix.stride + tx;
            kernel::add_diff(&mut acc1, &prefix.s1[a + len..a + len + ow], &prefix.s1[a..a + ow]);
            kernel::add_diff(&mut acc2, &prefix.s2[a + len..a + len + ow], &prefix.s2[a..a + ow]);
        }
        for (u, r) in row.iter_mut().enumerate() {
            let (s1, s2) = (acc1[u], acc2[u]);
            let (num, i_energy) = match mode {
                NccMode::ZeroMean => (num[u] - residual * s1 / n, s2 - s1 * s1 / n),
                NccMode::Plain => (num[u], s2),
            };
            *r = if i_energy <= 1e-9 * s2.max(1e-3) {
                0.0
            } else {
                (num / (t_energy * i_energy).sqrt()).clamp(-1.0, 1.0) as f32
            };
        }
    });
    Ok(map)
}

/// NCC of an unmasked template, valid mode, f64 accumulation.
pub fn ncc_map(search: &Image, templ: &Image, mode: NccMode) -> Result<ResponseMap> {
    check_fit(search, templ.width(), templ.height())?;
    masked_ncc_map(search, &MaskedTemplate::new(templ, None)?, mode, Precision::Double)
}

/// Values `min, min + step, ...` up to `max` inclusive. A full 360 degree
/// span is treated as half-open so the seam is not visited twice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Axis {
    pub fn fixed(v: f64) -> Self {
        Axis { min: v, max: v, step: 1.0 }
    }

    pub fn values(&self, periodic: bool) -> Vec<f64> {
        let span = self.max - self.min;
        let full = periodic && span >= 360.0 - 1e-9;
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let v = self.min + k as f64 * self.step;
            if (full && v >= self.max - 1e-9) || (!full && v > self.max + 1e-9) {
                break;
            }
            out.push(v);
            k += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub angle: Axis,
    pub sx: Axis,
    pub sy: Axis,
}

impl GridSpec {
    /// Full-circle angles at `angle_step` and both scales over
    /// `scale_range` at `scale_step`.
    pub fn over(angle_step: f64, scale_range: (f64, f64), scale_step: f64) -> Self {
        let s = Axis {
            min: scale_range.0,
            max: scale_range.1,
            step: scale_step,
        };
        GridSpec {
            angle: Axis {
                min: -180.0,
                max: 180.0,
                step: angle_step,
            },
            sx: s,
            sy: s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in [&self.angle, &self.sx, &self.sy] {
            if !(a.step > 0.0) || !(a.max >= a.min) {
                return Err(Error::invalid(format!("bad grid axis {a:?}")));
            }
        }
        if !(self.sx.min > 0.0 && self.sy.min > 0.0) {
            return Err(Error::invalid("grid scales must be positive"));
        }
        Ok(())
    }

    /// `(theta, sx, sy)` in lexicographic order.
    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let (a, x, y) = (self.angle.values(true), self.sx.values(false), self.sy.values(false));
        let mut out = Vec::with_capacity(a.len() * x.len() * y.len());
        for &t in &a {
            for &sx in &x {
                for &sy in &y {
                    out.push((t, sx, sy));
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.angle.values(true).len() * self.sx.values(false).len() * self.sy.values(false).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A template warped by one grid cell, on the smallest canvas (matching
/// the template's parity) that holds its footprint.
pub fn warp_for_cell(templ: &Image, theta: f64, sx: f64, sy: f64) -> Result<(MaskedTemplate, (f64, f64))> {
    let (tw, th) = (templ.width(), templ.height());
    let probe = Pose::new(0.0, 0.0, theta, sx, sy)?;
    let (x0, y0, x1, y1) = probe.footprint(tw, th).bounds();
    let fit = |extent: f64, parity: usize| {
        let mut n = (extent - 1e-6).ceil().max(1.0) as usize;
        if n % 2 != parity % 2 {
            n += 1;
        }
        n
    };
    let (cw, ch) = (fit(x1 - x0, tw), fit(y1 - y0, th));
    let center = ((cw as f64 - 1.0) / 2.0, (ch as f64 - 1.0) / 2.0);
    let pose = probe.with_center(center.0, center.1);
    let fp = render_footprint(&gray(templ), &pose, cw, ch)?
        .ok_or_else(|| Error::invalid("warped template is empty"))?;
    let mut canvas = Image::new(cw, ch, 1);
    let mut mask = vec![false; cw * ch];
    for v in 0..fp.height() {
        for u in 0..fp.width() {
            if fp.mask[v * fp.width() + u] {
                let (x, y) = (fp.x0 + u, fp.y0 + v);
                canvas.set(x, y, 0, fp.values.get(u, v, 0));
                mask[y * cw + x] = true;
            }
        }
    }
    Ok((MaskedTemplate::new(&canvas, Some(&mask))?, center))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub theta: f64,
    pub sx: f64,
    pub sy: f64,
    pub best_score: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NccMatch {
    pub result: MatchResult,
    pub cells: Vec<CellTiming>,
}

struct CellBest {
    score: f32,
    x: usize,
    y: usize,
    center: (f64, f64),
}

/// Exhaustive search: every grid cell warps the template, computes the
/// masked NCC map and keeps its peak. The global best is chosen by score,
/// then lexicographically smallest `(theta, sx, sy, y, x)`.
pub fn ncc_match(
    search: &Image,
    templ: &Image,
    grid: &GridSpec,
    mode: NccMode,
    precision: Precision,
) -> Result<NccMatch> {
    grid.validate()?;
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::invalid("empty NCC grid"));
    }
    let search = gray(search);
    let evals = par::map_slice(&cells, |&(t, sx, sy)| -> Result<(CellBest, f64)> {
        let start = Instant::now();
        let (tpl, center) = warp_for_cell(templ, t, sx, sy)?;
        let map = masked_ncc_map(&search, &tpl, mode, precision)?;
        let (x, y, score) = map.argmax().expect("non-empty map");
        Ok((CellBest { score, x, y, center }, start.elapsed().as_secs_f64() * 1e3))
    });
    let mut best: Option<(usize, CellBest)> = None;
    let mut timings = Vec::with_capacity(cells.len());
    for (i, e) in evals.into_iter().enumerate() {
        let (b, ms) = e?;
        let (t, sx, sy) = cells[i];
        timings.push(CellTiming {
            theta: t,
            sx,
            sy,
            best_score: b.score as f64,
            ms,
        });
        // Cells arrive in lexicographic order and each map's argmax is the
        // first in row-major order, so strict improvement is the tie-break.
        if best.as_ref().map_or(true, |(_, cur)| b.score > cur.score) {
            best = Some((i, b));
        }
    }
    let (i, b) = best.expect("non-empty grid");
    let (t, sx, sy) = cells[i];
    let pose = Pose::new(b.x as f64 + b.center.0, b.y as f64 + b.center.1, t, sx, sy)?;
    Ok(NccMatch {
        result: MatchResult {
            pose,
            score: b.score as f64,
            refined: false,
        },
        cells: timings,
    })
}
