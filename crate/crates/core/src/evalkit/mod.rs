//! Evaluation: pose error metrics, summaries, benchmark generation and
//! reports.

mod bench;
mod harness;
mod report;

pub use bench::{make_benchmark, BenchMode, BenchSample, BenchmarkSpec, Level};
pub use harness::{
    perturbation_trials, refine_prediction, run_method, ExternalPrediction, Method, MethodOutput,
    PerturbMode, PerturbTrial, RefineMode,
};
pub use report::{
    draw_overlay, markdown_table, read_jsonl, summary_csv, write_jsonl, write_text, SummaryRow,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angular_distance, rotated_iou, Pose};

/// IoU at or above which a prediction counts as a success.
pub const SUCCESS_IOU: f64 = 0.5;

/// Euclidean center distance in pixels.
pub fn loc_err(gt: &Pose, pred: &Pose) -> f64 {
    (gt.xc - pred.xc).hypot(gt.yc - pred.yc)
}

/// Wrapped angle difference in degrees, in `[0, 180]`.
pub fn rot_err(gt: &Pose, pred: &Pose) -> f64 {
    angular_distance(gt.theta, pred.theta)
}

/// Mean absolute per-axis scale error.
pub fn scale_err(gt: &Pose, pred: &Pose) -> f64 {
    ((gt.sx - pred.sx).abs() + (gt.sy - pred.sy).abs()) / 2.0
}

/// IoU of the template footprints placed at both poses.
pub fn pose_iou(gt: &Pose, pred: &Pose, template_size: (usize, usize)) -> f64 {
    let (w, h) = template_size;
    rotated_iou(&gt.footprint(w, h), &pred.footprint(w, h))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub forward_ms: f64,
    pub refine_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub gt: Pose,
    pub pred: Pose,
    pub template_size: (usize, usize),
    pub iou: f64,
    pub matched: bool,
    #[serde(skip)]
    pub timings: Timings,
}

impl EvalRecord {
    pub fn new(gt: Pose, pred: Pose, template_size: (usize, usize), timings: Timings) -> Self {
        let iou = pose_iou(&gt, &pred, template_size);
        EvalRecord {
            gt,
            pred,
            template_size,
            iou,
            matched: iou >= SUCCESS_IOU,
            timings,
        }
    }

    pub fn loc_err(&self) -> f64 {
        loc_err(&self.gt, &self.pred)
    }

    pub fn rot_err(&self) -> f64 {
        rot_err(&self.gt, &self.pred)
    }

    pub fn scale_err(&self) -> f64 {
        scale_err(&self.gt, &self.pred)
    }
}

/// Mean and median of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        // Sum in sorted order so the result does not depend on input order.
        let mean = v.iter().sum::<f64>() / n as f64;
        Some(Stat { mean, median })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub loc_err: Stat,
    pub rot_err: Stat,
    /// `None` when the scale axis is inactive.
    pub scale_err: Option<Stat>,
    pub miou: f64,
    pub success_rate: f64,
    pub n_matched: usize,
    pub matched_loc_err: Option<Stat>,
    pub matched_rot_err: Option<Stat>,
    pub matched_scale_err: Option<Stat>,
    pub time_ms: Stat,
}

/// Aggregates records. Errors are reported over all records and over the
/// matched subset.
pub fn evaluate(records: &[EvalRecord], scale_active: bool) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty record list"));
    }
    let col = |f: &dyn Fn(&EvalRecord) -> f64, only_matched: bool| -> Vec<f64> {
        records
            .iter()
            .filter(|r| !only_matched || r.matched)
            .map(f)
            .collect()
    };
    let all = |f: &dyn Fn(&EvalRecord) -> f64| Stat::of(&col(f, false)).expect("non-empty");
    let n_matched = records.iter().filter(|r| r.matched).count();
    let scale = |m: bool| {
        if scale_active {
            Stat::of(&col(&EvalRecord::scale_err, m))
        } else {
            None
        }
    };
    Ok(Summary {
        count: records.len(),
        loc_err: all(&EvalRecord::loc_err),
        rot_err: all(&EvalRecord::rot_err),
        scale_err: scale(false),
        miou: all(&|r| r.iou).mean,
        success_rate: n_matched as f64 / records.len() as f64,
        n_matched,
        matched_loc_err: Stat::of(&col(&EvalRecord::loc_err, true)),
        matched_rot_err: Stat::of(&col(&EvalRecord::rot_err, true)),
        matched_scale_err: scale(true),
        time_ms: all(&|r| r.timings.total_ms),
    })
}

/// Greedy one-to-one assignment of predictions (in the given order) to
/// ground truths at IoU >= 0.5. Returns `(true positives, precision,
/// recall)`; precision is 1 for an empty prediction set.
pub fn precision_recall(gts: &[Pose], preds: &[Pose], template_size: (usize, usize)) -> (usize, f64, f64) {
    let mut taken = vec![false; gts.len()];
    let mut tp = 0;
    for p in preds {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(i, g)| (i, pose_iou(g, p, template_size)))
            .filter(|&(_, iou)| iou >= SUCCESS_IOU)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, _)) = best {
            taken[i] = true;
            tp += 1;
        }
    }
    let precision = if preds.is_empty() { 1.0 } else { tp as f64 / preds.len() as f64 };
    let recall = if gts.is_empty() { 1.0 } else { tp as f64 / gts.len() as f64 };
    (tp, precision, recall)
}
