//! Running matchers over benchmark samples, and the perturbation harness
//! for refinement of external predictions.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BenchSample, Timings};
use crate::baseline::{ncc_match, GridSpec, NccMode, Precision};
use crate::decode::{decode_single, MatchResult};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imaging::Image;
use crate::model::Model;
use crate::refine::{refine_angle, refine_position, RefineConfig};
use crate::synth::stream_rng;

pub enum Method<'a> {
    Ncc {
        grid: GridSpec,
        mode: NccMode,
        precision: Precision,
    },
    Model {
        model: &'a Model<f32>,
        refine: Option<RefineConfig>,
    },
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ncc { .. } => "ncc",
            Method::Model { refine: None, .. } => "model",
            Method::Model { refine: Some(_), .. } => "model+refine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodOutput {
    pub pred: MatchResult,
    pub timings: Timings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn run_once(method: &Method, template: &Image, search: &Image) -> Result<MethodOutput> {
    let start = Instant::now();
    match method {
        Method::Ncc { grid, mode, precision } => {
            let m = ncc_match(search, template, grid, *mode, *precision)?;
            let t = ms(start);
            Ok(MethodOutput {
                pred: m.result,
                timings: Timings {
                    forward_ms: t,
                    refine_ms: 0.0,
                    total_ms: t,
                },
            })
        }
        Method::Model { model, refine } => {
            let maps = model.forward(template, search)?;
            let mut pred = decode_single(&maps, model.config().s_max)?;
            let forward_ms = ms(start);
            let r0 = Instant::now();
            if let Some(cfg) = refine {
                let r = refine_angle(search, template, &pred.pose, cfg)?;
                pred.pose = pred.pose.with_theta(r.theta);
                pred.refined = true;
            }
            let refine_ms = if refine.is_some() { ms(r0) } else { 0.0 };
            Ok(MethodOutput {
                pred,
                timings: Timings {
                    forward_ms,
                    refine_ms,
                    total_ms: ms(start),
                },
            })
        }
    }
}

/// Runs `method` on a sample `repeats` times; the prediction comes from the
/// first run (all runs are identical) and each timing is the median.
pub fn run_method(method: &Method, sample: &BenchSample, repeats: usize) -> Result<MethodOutput> {
    let mut outs = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        outs.push(run_once(method, &sample.template, &sample.search)?);
    }
    let med = |f: fn(&Timings) -> f64| {
        let mut v: Vec<f64> = outs.iter().map(|o| f(&o.timings)).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    Ok(MethodOutput {
        pred: outs[0].pred,
        timings: Timings {
            forward_ms: med(|t| t.forward_ms),
            refine_ms: med(|t| t.refine_ms),
            total_ms: med(|t| t.total_ms),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Angle,
    Position,
}

impl std::str::FromStr for RefineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "angle" => Ok(RefineMode::Angle),
            "position" => Ok(RefineMode::Position),
            _ => Err(Error::invalid(format!("unknown refine mode {s:?}; use angle or position"))),
        }
    }
}

/// A prediction from another matcher: the image it refers to (relative to a
/// search directory), an optional per-line template, and the pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalPrediction {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(flatten)]
    pub result: MatchResult,
}

/// Refines one prediction in angle or position, keeping everything else.
pub fn refine_prediction(
    search: &Image,
    template: &Image,
    pred: &MatchResult,
    mode: RefineMode,
    cfg: &RefineConfig,
    radius_px: usize,
) -> Result<MatchResult> {
    let pose = match mode {
        RefineMode::Angle => pred.pose.with_theta(refine_angle(search, template, &pred.pose, cfg)?.theta),
        RefineMode::Position => refine_position(search, template, &pred.pose, radius_px, cfg.accept_thresh)?.pose,
    };
    Ok(MatchResult {
        pose,
        score: pred.score,
        refined: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PerturbMode {
    /// Rotate by exactly this many degrees, random sign.
    AngleFixed(f64),
    /// Rotate by `U(-d, d)` degrees.
    AngleUniform(f64),
    /// Move the center by this many pixels in a random direction.
    Position(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbTrial {
    pub sample: usize,
    pub gt: Pose,
    pub init: Pose,
}

/// Perturbed copies of each sample's first ground-truth pose.
pub fn perturbation_trials(samples: &[BenchSample], mode: PerturbMode, seed: u64) -> Vec<PerturbTrial> {
    samples
        .iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s.index as u64);
            let gt = s.gts[0];
            let init = match mode {
                PerturbMode::AngleFixed(d) => {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    gt.with_theta(gt.theta + sign * d)
                }
                PerturbMode::AngleUniform(d) => gt.with_theta(gt.theta + rng.gen_range(-d..=d)),
                PerturbMode::Position(px) => {
                    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    gt.with_center(gt.xc + px * a.cos(), gt.yc + px * a.sin())
                }
            };
            PerturbTrial {
                sample: s.index,
                gt,
                init,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{loc_err, make_benchmark, rot_err, BenchMode, BenchmarkSpec, Level};
    use crate::synth::{read_manifest, scene::write_corpus};

    fn samples(n: usize) -> (tempfile::TempDir, Vec<BenchSample>) {
        let dir = tempfile::tempdir().unwrap();
        let m = write_corpus(dir.path(), 3, 320, 5).unwrap();
        let recs = read_manifest(&m).unwrap();
        let mut spec = BenchmarkSpec::new(Level::S1, (36, 36), n, 2, BenchMode::Paste);
        spec.search_size = (160, 160);
        (dir, make_benchmark(&spec, &recs).unwrap())
    }

    #[test]
    fn external_prediction_json() {
        let line = r#"{"image":"a.png","x":1.0,"y":2.0,"theta_deg":10.0,"sx":1.0,"sy":1.0,"score":0.5}"#;
        let p: ExternalPrediction = serde_json::from_str(line).unwrap();
        assert_eq!(p.image, "a.png");
        assert!(!p.result.refined);
        let back = serde_json::to_string(&p).unwrap();
        assert!(back.contains("\"theta_deg\":10.0"));
    }

    #[test]
    fn perturbed_trials_are_refined_back() {
        let (_d, s) = samples(4);
        let cfg = RefineConfig::default();
        for t in perturbation_trials(&s, PerturbMode::AngleFixed(5.0), 1) {
            assert!((rot_err(&t.gt, &t.init) - 5.0).abs() < 1e-9);
            let m = MatchResult { pose: t.init, score: 1.0, refined: false };
            let r = refine_prediction(&s[t.sample].search, &s[t.sample].template, &m, RefineMode::Angle, &cfg, 3).unwrap();
            assert!(rot_err(&t.gt, &r.pose) < 1.0);
        }
        for t in perturbation_trials(&s, PerturbMode::Position(2.0), 1) {
            let m = MatchResult { pose: t.init, score: 1.0, refined: false };
            let r = refine_prediction(&s[t.sample].search, &s[t.sample].template, &m, RefineMode::Position, &cfg, 3).unwrap();
            assert!(loc_err(&t.gt, &r.pose) < loc_err(&t.gt, &t.init));
        }
    }

    #[test]
    fn ncc_method_runs() {
        let (_d, s) = samples(1);
        let method = Method::Ncc {
            grid: GridSpec::over(10.0, (1.0, 1.0), 0.1),
            mode: NccMode::ZeroMean,
            precision: Precision::Single,
        };
        let out = run_method(&method, &s[0], 2).unwrap();
        assert!(out.timings.total_ms > 0.0);
        assert!(loc_err(&s[0].gts[0], &out.pred.pose) < 8.0, "{:?} vs {:?}", out.pred.pose, s[0].gts[0]);
        assert_eq!(method.name(), "ncc");
    }
}
