//! Training losses: heatmap center loss and masked geometric losses,
//! summed with equal weights.
//!
//! Values are reduced in `f64`; gradients come back in the prediction type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MapGrads, OutputMaps};
use crate::synth::{LabelMaps, VALID_THRESHOLD};
use crate::tensornet::Real;

/// Probability clamp applied before logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub center: f64,
    pub cos_l1: f64,
    pub sign_ce: f64,
    pub sx_l1: f64,
    pub sy_l1: f64,
    pub total: f64,
    pub n_pos: usize,
    /// Set when the label maps had no valid pixels, so the geometric
    /// terms were not supervised.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_mask: bool,
}

impl LossReport {
    pub fn from_terms(center: f64, geom: &GeomTerms, n_pos: usize) -> Self {
        LossReport {
            center,
            cos_l1: geom.cos_l1,
            sign_ce: geom.sign_ce,
            sx_l1: geom.sx_l1,
            sy_l1: geom.sy_l1,
            total: center + geom.cos_l1 + geom.sign_ce + geom.sx_l1 + geom.sy_l1,
            n_pos,
            empty_mask: geom.n_valid == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeomTerms {
    pub cos_l1: f64,
    pub sign_ce: f64,
    pub sx_l1: f64,
    pub sy_l1: f64,
    pub n_valid: usize,
}

#[inline]
fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Soft-label binary cross-entropy `-(y ln p + (1 - y) ln(1 - p))` and its
/// derivative in `p`. The clamp only guards the logarithms; the gradient is
/// evaluated at the clamped point and passed straight through.
#[inline]
fn bce(p: f64, y: f64) -> (f64, f64) {
    let p = clamp_p(p);
    let l = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let g = -(y / p) + (1.0 - y) / (1.0 - p);
    (l, g)
}

/// Center loss over the whole map, normalized by `max(N_pos, 1)` where
/// positives are pixels with `Y >= 0.5`. Returns `(loss, dL/dpred, N_pos)`.
pub fn center_loss<T: Real>(pred: &[T], label: &[f32]) -> Result<(f64, Vec<T>, usize)> {
    if pred.len() != label.len() {
        return Err(Error::Shape(format!(
            "center loss: {} predictions vs {} labels",
            pred.len(),
            label.len()
        )));
    }
    let n_pos = label.iter().filter(|&&y| y >= VALID_THRESHOLD).count();
    let norm = n_pos.max(1) as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(label) {
        let p = p.as_f64();
        let (l, g) = if y >= VALID_THRESHOLD {
            bce(p, y as f64)
        } else {
            let q = clamp_p(p);
            (-(1.0 - q).ln(), 1.0 / (1.0 - q))
        };
        sum += l;
        grad.push(T::of(g / norm));
    }
    Ok((sum / norm, grad, n_pos))
}

/// Masked mean losses on the four geometric maps: l1 on cos, sx, sy and
/// cross-entropy on sign. Pixels outside the valid mask get zero gradient.
pub fn geom_loss<T: Real>(
    preds: &OutputMaps<T>,
    labels: &LabelMaps,
) -> Result<(GeomTerms, MapGrads<T>)> {
    check_shapes(preds, labels)?;
    let n = labels.width * labels.height;
    let mut grads = MapGrads::zeros(n);
    let n_valid = labels.n_valid();
    let mut terms = GeomTerms {
        n_valid,
        ..Default::default()
    };
    if n_valid == 0 {
        return Ok((terms, grads));
    }
    let inv = 1.0 / n_valid as f64;
    let l1 = |p: T, y: f32| {
        let d = p.as_f64() - y as f64;
        (d.abs(), if d > 0.0 { inv } else if d < 0.0 { -inv } else { 0.0 })
    };
    for i in (0..n).filter(|&i| labels.valid[i]) {
        let (l, g) = l1(preds.cos[i], labels.cos[i]);
        terms.cos_l1 += l;
        grads.cos[i] = T::of(g);
        let (l, g) = l1(preds.sx[i], labels.sx[i]);
        terms.sx_l1 += l;
        grads.sx[i] = T::of(g);
        let (l, g) = l1(preds.sy[i], labels.sy[i]);
        terms.sy_l1 += l;
        grads.sy[i] = T::of(g);
        let (l, g) = bce(preds.sign[i].as_f64(), labels.sign[i] as f64);
        terms.sign_ce += l;
        grads.sign[i] = T::of(g * inv);
    }
    terms.cos_l1 *= inv;
    terms.sx_l1 *= inv;
    terms.sy_l1 *= inv;
    terms.sign_ce *= inv;
    Ok((terms, grads))
}

fn check_shapes<T>(preds: &OutputMaps<T>, labels: &LabelMaps) -> Result<()> {
    if preds.width != labels.width || preds.height != labels.height {
        return Err(Error::Shape(format!(
            "predictions {}x{} vs labels {}x{}",
            preds.width, preds.height, labels.width, labels.height
        )));
    }
    Ok(())
}

/// Equal-weight sum of all terms, with the gradient for every output map.
pub fn total_loss<T: Real>(
    preds: &OutputMaps<T>,
    labels: &LabelMaps,
) -> Result<(LossReport, MapGrads<T>)> {
    check_shapes(preds, labels)?;
    let (center, dscore, n_pos) = center_loss(&preds.score, &labels.heatmap)?;
    let (geom, mut grads) = geom_loss(preds, labels)?;
    if geom.n_valid == 0 {
        log::warn!("label maps have no valid pixels; geometric terms unsupervised");
    }
    grads.score = dscore;
    Ok((LossReport::from_terms(center, &geom, n_pos), grads))
}
