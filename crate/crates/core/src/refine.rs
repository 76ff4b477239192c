//! Local geometric refinement by exhaustive search around an initial pose,
//! scored with masked cosine similarity on luma.

use serde::{Deserialize, Serialize};

use crate::decode::MatchResult;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imaging::{render_footprint, Footprint, Image};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Angle step in degrees.
    pub step: f64,
    /// Search half-range in degrees.
    pub radius: f64,
    /// Minimum similarity for accepting the best candidate.
    pub accept_thresh: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            step: 1.0,
            radius: 20.0,
            accept_thresh: 0.9,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid(format!("refine step must be positive, got {}", self.step)));
        }
        if !(self.radius >= self.step && self.radius.is_finite()) {
            return Err(Error::invalid(format!(
                "refine radius {} smaller than step {}",
                self.radius, self.step
            )));
        }
        if !(self.accept_thresh > 0.0 && self.accept_thresh <= 1.0) {
            return Err(Error::invalid("accept threshold must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Largest `k` with `k * step <= radius`.
    pub fn half_count(&self) -> usize {
        (self.radius / self.step + 1e-9).floor() as usize
    }

    pub fn candidate_count(&self) -> usize {
        2 * self.half_count() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleRefinement {
    pub theta: f64,
    pub similarity: f64,
    /// Best similarity stayed under the threshold; `theta` is the initial
    /// angle.
    pub fallback: bool,
    pub candidates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionRefinement {
    pub pose: Pose,
    pub similarity: f64,
    pub fallback: bool,
}

fn luma(img: &Image) -> Image {
    if img.channels() == 1 {
        img.clone()
    } else {
        img.to_gray()
    }
}

/// Cosine of the pixel vectors of `a` and `b` restricted to `mask`, on
/// luma, without centering. A zero-norm operand gives 0.
pub fn masked_cosine(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) || mask.len() != a.width() * a.height() {
        return Err(Error::Shape("masked cosine operands differ in size".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("masked cosine over an empty mask"));
    }
    let (a, b) = (luma(a), luma(b));
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for ((&x, &y), &m) in a.data().iter().zip(b.data()).zip(mask) {
        if m {
            let (x, y) = (x as f64, y as f64);
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
    }
    Ok(cosine(ab, aa, bb))
}

#[inline]
fn cosine(ab: f64, aa: f64, bb: f64) -> f64 {
    if aa <= 0.0 || bb <= 0.0 {
        0.0
    } else {
        (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Similarity between a gray search image and a rendered gray footprint over
/// `{T > 0}`. `None` if that set is empty.
fn footprint_similarity(search: &Image, fp: &Footprint) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    let mut any = false;
    let w = fp.width();
    for v in 0..fp.height() {
        for u in 0..w {
            let t = fp.values.get(u, v, 0);
            if !fp.mask[v * w + u] || t <= 0.0 {
                continue;
            }
            any = true;
            let s = search.get(fp.x0 + u, fp.y0 + v, 0) as f64;
            let t = t as f64;
            ab += s * t;
            aa += s * s;
            bb += t * t;
        }
    }
    any.then(|| cosine(ab, aa, bb))
}

/// Gray template with exact zeros lifted to `1/255`, so that `{T > 0}` on a
/// rendered canvas is the geometric footprint.
fn lifted_template(template: &Image) -> Image {
    luma(template).map(|v| if v <= 0.0 { 1.0 / 255.0 } else { v })
}

struct Prepared {
    search: Image,
    template: Image,
}

impl Prepared {
    fn new(search: &Image, template: &Image) -> Self {
        Prepared {
            search: luma(search),
            template: lifted_template(template),
        }
    }

    fn score(&self, pose: &Pose) -> Result<f64> {
        let fp = render_footprint(&self.template, pose, self.search.width(), self.search.height())?;
        Ok(fp.and_then(|fp| footprint_similarity(&self.search, &fp)).unwrap_or(0.0))
    }
}

/// Searches `init.theta + k * step` for `|k * step| <= radius` at the
/// initial center and scales. Ties prefer smaller `|k|`, then the smaller
/// angle.
pub fn refine_angle(
    search: &Image,
    template: &Image,
    init: &Pose,
    cfg: &RefineConfig,
) -> Result<AngleRefinement> {
    cfg.validate()?;
    let prep = Prepared::new(search, template);
    let half = cfg.half_count() as i64;
    let ks: Vec<i64> = (-half..=half).collect();
    let sims = par::map_slice(&ks, |&k| prep.score(&init.with_theta(init.theta + k as f64 * cfg.step)));
    let mut best: Option<(i64, f64)> = None;
    for (&k, sim) in ks.iter().zip(sims) {
        let sim = sim?;
        let better = match best {
            None => true,
            Some((bk, bs)) => {
                sim > bs || (sim == bs && (k.abs() < bk.abs() || (k.abs() == bk.abs() && k < bk)))
            }
        };
        if better {
            best = Some((k, sim));
        }
    }
    let (k, sim) = best.expect("at least one candidate");
    let fallback = sim < cfg.accept_thresh;
    let theta = if fallback {
        init.theta
    } else {
        init.with_theta(init.theta + k as f64 * cfg.step).theta
    };
    Ok(AngleRefinement {
        theta,
        similarity: sim,
        fallback,
        candidates: ks.len(),
    })
}

/// Exhaustive integer-offset search over `[-radius, radius]^2` around the
/// initial center with angle and scales fixed. Ties prefer the smaller
/// offset, then row-major order.
pub fn refine_position(
    search: &Image,
    template: &Image,
    init: &Pose,
    radius: usize,
    accept_thresh: f64,
) -> Result<PositionRefinement> {
    if !(accept_thresh > 0.0 && accept_thresh <= 1.0) {
        return Err(Error::invalid("accept threshold must lie in (0, 1]"));
    }
    let prep = Prepared::new(search, template);
    let r = radius as i64;
    let offsets: Vec<(i64, i64)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
    let sims = par::map_slice(&offsets, |&(dx, dy)| {
        prep.score(&init.with_center(init.xc + dx as f64, init.yc + dy as f64))
    });
    let mut best: Option<((i64, i64), f64)> = None;
    for (&o, sim) in offsets.iter().zip(sims) {
        let sim = sim?;
        let d = |(x, y): (i64, i64)| x * x + y * y;
        let better = match best {
            None => true,
            Some((bo, bs)) => sim > bs || (sim == bs && d(o) < d(bo)),
        };
        if better {
            best = Some((o, sim));
        }
    }
    let ((dx, dy), sim) = best.expect("at least one offset");
    let fallback = sim < accept_thresh;
    let pose = if fallback {
        *init
    } else {
        init.with_center(init.xc + dx as f64, init.yc + dy as f64)
    };
    Ok(PositionRefinement {
        pose,
        similarity: sim,
        fallback,
    })
}

/// Angle refinement applied to a detection; marks it refined.
pub fn refine_match(
    search: &Image,
    template: &Image,
    m: &MatchResult,
    cfg: &RefineConfig,
) -> Result<(MatchResult, AngleRefinement)> {
    let r = refine_angle(search, template, &m.pose, cfg)?;
    let out = MatchResult {
        pose: m.pose.with_theta(r.theta),
        score: m.score,
        refined: true,
    };
    Ok((out, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angular_distance;
    use crate::imaging::crop;
    use crate::synth::scene::generate_scene;
    use proptest::prelude::*;

    fn pasted(theta: f64, seed: u64) -> (Image, Image, Pose) {
        let scene = generate_scene(160, 160, seed, 0);
        let template = crop(&scene, (40, 50, 36, 36)).unwrap();
        let mut search = generate_scene(120, 120, seed, 1);
        let gt = Pose::new(60.0, 58.0, theta, 1.0, 1.0).unwrap();
        render_footprint(&template, &gt, 120, 120)
            .unwrap()
            .unwrap()
            .composite_onto(&mut search);
        (search, template, gt)
    }

    #[test]
    fn cosine_examples() {
        let a = generate_scene(8, 8, 1, 0);
        let mask = vec![true; 64];
        assert!((masked_cosine(&a, &a, &mask).unwrap() - 1.0).abs() < 1e-9);
        let z = Image::new(8, 8, 3);
        assert_eq!(masked_cosine(&a, &z, &mask).unwrap(), 0.0);
        assert!(masked_cosine(&a, &a, &[false; 64]).is_err());

        // Literal cosine, no centering: compare against a direct evaluation.
        let b = generate_scene(8, 8, 2, 0);
        let (ga, gb) = (a.to_gray(), b.to_gray());
        let dot: f64 = ga.data().iter().zip(gb.data()).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        let na: f64 = ga.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = gb.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((masked_cosine(&a, &b, &mask).unwrap() - dot / (na * nb)).abs() < 1e-9);
        let ramp = Image::from_fn_gray(8, 8, |x, y| (x + 8 * y) as f32 / 63.0);
        let neg = ramp.map(|v| 1.0 - v);
        let c = masked_cosine(&ramp, &neg, &mask).unwrap();
        assert!(c > 0.0 && c < 1.0);
    }

    #[test]
    fn recovers_angle_from_nearby_init() {
        let (search, template, gt) = pasted(30.0, 3);
        let r = refine_angle(&search, &template, &gt.with_theta(37.0), &RefineConfig::default()).unwrap();
        assert!(!r.fallback);
        assert!(angular_distance(r.theta, 30.0) <= 1.0, "{r:?}");
        assert!(r.similarity > 0.95);
        assert_eq!(r.candidates, 41);
    }

    #[test]
    fn exact_init_is_kept() {
        let (search, template, gt) = pasted(-115.0, 4);
        let r = refine_angle(&search, &template, &gt, &RefineConfig::default()).unwrap();
        assert_eq!(r.theta, gt.theta);
        assert!(r.similarity > 0.999);
    }

    #[test]
    fn uniform_background_falls_back() {
        let template = Image::from_fn_gray(36, 36, |x, y| if (x / 6 + y / 6) % 2 == 0 { 1.0 } else { 0.02 });
        let search = Image::filled(120, 120, 1, 0.5);
        let init = Pose::new(60.0, 60.0, 12.0, 1.0, 1.0).unwrap();
        let r = refine_angle(&search, &template, &init, &RefineConfig::default()).unwrap();
        assert!(r.fallback);
        assert_eq!(r.theta, 12.0);
        let blank = Image::new(120, 120, 3);
        let r = refine_angle(&blank, &template, &init, &RefineConfig::default()).unwrap();
        assert!(r.fallback && r.similarity == 0.0);
    }

    #[test]
    fn config_errors() {
        let (search, template, gt) = pasted(0.0, 5);
        let bad = RefineConfig { step: 2.0, radius: 1.0, ..Default::default() };
        assert!(refine_angle(&search, &template, &gt, &bad).is_err());
        let bad = RefineConfig { step: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!(RefineConfig { step: 0.5, ..Default::default() }.candidate_count(), 81);
    }

    #[test]
    fn position_examples() {
        let (search, template, gt) = pasted(25.0, 6);
        let off = gt.with_center(gt.xc + 2.0, gt.yc - 1.0);
        let r = refine_position(&search, &template, &off, 3, 0.9).unwrap();
        assert!((r.pose.xc - gt.xc).hypot(r.pose.yc - gt.yc) <= 1.0, "{r:?}");
        let r = refine_position(&search, &template, &gt, 3, 0.9).unwrap();
        assert_eq!(r.pose, gt);
        let r = refine_position(&search, &template, &off, 0, 0.9).unwrap();
        assert_eq!(r.pose, off);
    }

    #[test]
    fn refine_match_sets_flag() {
        let (search, template, gt) = pasted(60.0, 7);
        let m = MatchResult { pose: gt.with_theta(55.0), score: 0.8, refined: false };
        let (out, r) = refine_match(&search, &template, &m, &RefineConfig::default()).unwrap();
        assert!(out.refined);
        assert_eq!(out.pose.theta, r.theta);
        assert!(angular_distance(out.pose.theta, 60.0) <= 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn output_stays_within_radius(theta in -180.0f64..180.0, noise in -30.0f64..30.0, radius in 2.0f64..25.0) {
            let (search, template, gt) = pasted(theta, 8);
            let init = gt.with_theta(theta + noise);
            let cfg = RefineConfig { radius, step: 1.0, accept_thresh: 0.5 };
            let r = refine_angle(&search, &template, &init, &cfg).unwrap();
            prop_assert!(angular_distance(r.theta, init.theta) <= radius + 1e-9);
            let again = refine_angle(&search, &template, &init, &cfg).unwrap();
            prop_assert_eq!(r, again);
        }
    }
}
