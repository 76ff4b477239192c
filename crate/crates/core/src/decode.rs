//! Turning prediction maps into poses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, rotated_iou, Pose};
use crate::model::OutputMaps;

/// One detection. Serialized flat as
/// `{x, y, theta_deg, sx, sy, score, refined}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "MatchJson", into = "MatchJson")]
pub struct MatchResult {
    pub pose: Pose,
    pub score: f64,
    pub refined: bool,
}

#[derive(Serialize, Deserialize)]
struct MatchJson {
    x: f64,
    y: f64,
    theta_deg: f64,
    sx: f64,
    sy: f64,
    score: f64,
    #[serde(default)]
    refined: bool,
}

impl From<MatchJson> for MatchResult {
    fn from(j: MatchJson) -> Self {
        MatchResult {
            pose: Pose {
                xc: j.x,
                yc: j.y,
                theta: normalize_angle(j.theta_deg),
                sx: j.sx,
                sy: j.sy,
            },
            score: j.score,
            refined: j.refined,
        }
    }
}

impl From<MatchResult> for MatchJson {
    fn from(m: MatchResult) -> Self {
        MatchJson {
            x: m.pose.xc,
            y: m.pose.yc,
            theta_deg: m.pose.theta,
            sx: m.pose.sx,
            sy: m.pose.sy,
            score: m.score,
            refined: m.refined,
        }
    }
}

impl MatchResult {
    pub fn validate(&self) -> Result<()> {
        Pose::new(self.pose.xc, self.pose.yc, self.pose.theta, self.pose.sx, self.pose.sy)?;
        if !self.score.is_finite() {
            return Err(Error::invalid("match score is not finite"));
        }
        Ok(())
    }
}

/// Angle in degrees from a cosine estimate and a sign probability.
pub fn decode_angle(cos_hat: f64, sign_prob: f64) -> f64 {
    let a = cos_hat.clamp(-1.0, 1.0).acos().to_degrees();
    normalize_angle(if sign_prob >= 0.5 { a } else { -a })
}

// Keeps decoded scales strictly positive when a head saturates at 0.
const MIN_SCALE: f64 = 1e-6;

fn read_out(maps: &OutputMaps<f32>, i: usize, s_max: f64) -> MatchResult {
    let x = (i % maps.width) as f64;
    let y = (i / maps.width) as f64;
    MatchResult {
        pose: Pose {
            xc: x,
            yc: y,
            theta: decode_angle(maps.cos[i] as f64, maps.sign[i] as f64),
            sx: (maps.sx[i] as f64 * s_max).max(MIN_SCALE),
            sy: (maps.sy[i] as f64 * s_max).max(MIN_SCALE),
        },
        score: maps.score[i] as f64,
        refined: false,
    }
}

/// Index of the largest score, first occurrence in row-major order.
pub fn argmax(score: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in score.iter().enumerate() {
        match best {
            Some(b) if !(v > score[b]) => {}
            _ if v.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn decode_single(maps: &OutputMaps<f32>, s_max: f64) -> Result<MatchResult> {
    let i = argmax(&maps.score).ok_or_else(|| Error::invalid("empty score map"))?;
    Ok(read_out(maps, i, s_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiConfig {
    pub score_thresh: f64,
    pub iou_thresh: f64,
    pub max_det: usize,
}

impl Default for MultiConfig {
    fn default() -> Self {
        MultiConfig {
            score_thresh: 0.5,
            iou_thresh: 0.3,
            max_det: 32,
        }
    }
}

/// 3x3 local maxima above threshold, then greedy rotated-box NMS in
/// descending score order. `template_size` sets the box of each peak.
pub fn decode_multi(
    maps: &OutputMaps<f32>,
    s_max: f64,
    template_size: (usize, usize),
    cfg: &MultiConfig,
) -> Result<Vec<MatchResult>> {
    let ok = |t: f64| t > 0.0 && t < 1.0;
    if !ok(cfg.score_thresh) || !ok(cfg.iou_thresh) {
        return Err(Error::invalid("decode thresholds must lie in (0, 1)"));
    }
    let (w, h) = (maps.width, maps.height);
    let s = &maps.score;
    let mut peaks: Vec<usize> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = s[y * w + x];
            if !(v as f64 > cfg.score_thresh) {
                continue;
            }
            let mut is_max = true;
            'n: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if s[ny as usize * w + nx as usize] > v {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                peaks.push(y * w + x);
            }
        }
    }
    // Stable: equal scores keep row-major order.
    peaks.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let (tw, th) = template_size;
    let mut kept: Vec<MatchResult> = Vec::new();
    for i in peaks {
        if kept.len() >= cfg.max_det {
            break;
        }
        let cand = read_out(maps, i, s_max);
        let bx = cand.pose.footprint(tw, th);
        if kept
            .iter()
            .all(|k| rotated_iou(&k.pose.footprint(tw, th), &bx) <= cfg.iou_thresh)
        {
            kept.push(cand);
        }
    }
    Ok(kept)
}
