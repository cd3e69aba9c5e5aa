//! Training and test-time adaptation losses.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{DarnetError, Result};
use crate::prototype_matching::ConfidenceMap;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub bce: f64,
    pub att: f64,
    /// Attention emphasis inside the weighted BCE.
    pub alpha_att: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 1.0,
            l3: 0.3,
            bce: 0.7,
            att: 0.3,
            alpha_att: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l_train: f64,
    pub l_bce: f64,
    pub l_att: f64,
    pub l_tta: f64,
    pub weights: LossWeights,
}

fn check_dims(pred: &ConfidenceMap, gt: ArrayView2<'_, u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(DarnetError::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Per-pixel binary cross entropy.
pub fn bce_map(pred: &ConfidenceMap, gt: ArrayView2<'_, u8>) -> Result<Array2<f64>> {
    check_dims(pred, gt)?;
    Ok(Zip::from(&pred.fg)
        .and(&pred.bg)
        .and(gt)
        .map_collect(|&f, &b, &m| {
            if m != 0 {
                -clamp_p(f).ln()
            } else {
                -clamp_p(b).ln()
            }
        }))
}

pub fn bce_loss(pred: &ConfidenceMap, gt: ArrayView2<'_, u8>) -> Result<f64> {
    Ok(bce_map(pred, gt)?.mean().unwrap_or(0.0))
}

/// Per-pixel derivative of the BCE with respect to the foreground probability
/// (background = 1 − foreground). Zero where the clamp is active.
fn bce_pixel_grad(f: f64, m: u8) -> f64 {
    let b = 1.0 - f;
    if m != 0 {
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&f) {
            0.0
        } else {
            -1.0 / f
        }
    } else if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&b) {
        0.0
    } else {
        1.0 / b
    }
}

/// d(mean BCE)/d(p_fg) per pixel.
pub fn bce_grad(pred: &ConfidenceMap, gt: ArrayView2<'_, u8>) -> Result<Array2<f64>> {
    check_dims(pred, gt)?;
    let n = pred.fg.len() as f64;
    Ok(Zip::from(&pred.fg)
        .and(gt)
        .map_collect(|&f, &m| bce_pixel_grad(f, m) / n))
}

fn attention_weights(attention: ArrayView2<'_, f64>, alpha: f64) -> Array2<f64> {
    attention.mapv(|a| 1.0 + alpha * a)
}

/// BCE re-weighted by `1 + alpha·A` and normalized by the weight sum.
pub fn attention_loss(
    pred: &ConfidenceMap,
    gt: ArrayView2<'_, u8>,
    attention: ArrayView2<'_, f64>,
    alpha: f64,
) -> Result<f64> {
    if attention.dim() != gt.dim() {
        return Err(DarnetError::ShapeMismatch(format!(
            "attention {:?} vs ground truth {:?}",
            attention.dim(),
            gt.dim()
        )));
    }
    let bce = bce_map(pred, gt)?;
    let w = attention_weights(attention, alpha);
    Ok((&w * &bce).sum() / w.sum())
}

/// Mean of [`attention_loss`] over a batch of samples.
pub fn attention_loss_batch(
    samples: &[(&ConfidenceMap, ArrayView2<'_, u8>, ArrayView2<'_, f64>)],
    alpha: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (pred, gt, a) in samples {
        total += attention_loss(pred, *gt, *a, alpha)?;
    }
    Ok(total / samples.len() as f64)
}

pub fn attention_grad(
    pred: &ConfidenceMap,
    gt: ArrayView2<'_, u8>,
    attention: ArrayView2<'_, f64>,
    alpha: f64,
) -> Result<Array2<f64>> {
    check_dims(pred, gt)?;
    let w = attention_weights(attention, alpha);
    let total = w.sum();
    Ok(Zip::from(&pred.fg)
        .and(gt)
        .and(&w)
        .map_collect(|&f, &m, &wi| wi * bce_pixel_grad(f, m) / total))
}

/// `l1·BCE(M_pre) + l2·BCE(Out1) + l3·BCE(support self-prediction)`.
pub fn train_loss(
    m_pre: &ConfidenceMap,
    out1: &ConfidenceMap,
    support_pred: &ConfidenceMap,
    gt_query: ArrayView2<'_, u8>,
    gt_support: ArrayView2<'_, u8>,
    weights: &LossWeights,
) -> Result<LossReport> {
    let l1 = bce_loss(m_pre, gt_query)?;
    let l2 = bce_loss(out1, gt_query)?;
    let l3 = bce_loss(support_pred, gt_support)?;
    Ok(LossReport {
        l1,
        l2,
        l3,
        l_train: weights.l1 * l1 + weights.l2 * l2 + weights.l3 * l3,
        weights: *weights,
        ..LossReport::default()
    })
}

/// `bce·BCE + att·L_att` against the held-out support mask.
pub fn tta_loss(
    pred: &ConfidenceMap,
    gt_support: ArrayView2<'_, u8>,
    attention: ArrayView2<'_, f64>,
    weights: &LossWeights,
) -> Result<LossReport> {
    let l_bce = bce_loss(pred, gt_support)?;
    let l_att = attention_loss(pred, gt_support, attention, weights.alpha_att)?;
    Ok(LossReport {
        l_bce,
        l_att,
        l_tta: weights.bce * l_bce + weights.att * l_att,
        weights: *weights,
        ..LossReport::default()
    })
}

/// d(L_TTA)/d(p_fg) per pixel.
pub fn tta_loss_grad(
    pred: &ConfidenceMap,
    gt_support: ArrayView2<'_, u8>,
    attention: ArrayView2<'_, f64>,
    weights: &LossWeights,
) -> Result<Array2<f64>> {
    let g_bce = bce_grad(pred, gt_support)?;
    let g_att = attention_grad(pred, gt_support, attention, weights.alpha_att)?;
    Ok(g_bce * weights.bce + g_att * weights.att)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_prediction_is_near_zero() {
        let gt = array![[1u8, 0], [0, 1]];
        let pred = ConfidenceMap::from_fg(gt.mapv(f64::from));
        assert!(bce_loss(&pred, gt.view()).unwrap() <= 1e-6);
    }

    #[test]
    fn uniform_prediction_is_ln2() {
        let pred = ConfidenceMap::uniform(3, 3);
        for gt in [Array2::<u8>::zeros((3, 3)), Array2::ones((3, 3))] {
            assert!((bce_loss(&pred, gt.view()).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_bce() {
        let pred = ConfidenceMap::from_fg(array![[0.8]]);
        let l = bce_loss(&pred, array![[1u8]].view()).unwrap();
        assert!((l - 0.2231435513).abs() < 1e-9);
    }

    #[test]
    fn resolution_mismatch_errors() {
        let pred = ConfidenceMap::uniform(2, 2);
        assert!(bce_loss(&pred, Array2::zeros((3, 2)).view()).is_err());
    }

    #[test]
    fn attention_collapses_to_bce_for_uniform_maps() {
        let pred = ConfidenceMap::from_fg(array![[0.9, 0.2], [0.6, 0.4]]);
        let gt = array![[1u8, 0], [1, 1]];
        let bce = bce_loss(&pred, gt.view()).unwrap();
        let zeros = Array2::zeros((2, 2));
        let ones = Array2::ones((2, 2));
        assert!((attention_loss(&pred, gt.view(), zeros.view(), 1.0).unwrap() - bce).abs() < 1e-12);
        assert!((attention_loss(&pred, gt.view(), ones.view(), 1.0).unwrap() - bce).abs() < 1e-12);
    }

    #[test]
    fn attention_single_highlight_doubles_weight() {
        let pred = ConfidenceMap::from_fg(array![[0.9, 0.2], [0.6, 0.4]]);
        let gt = array![[1u8, 0], [1, 1]];
        let a = array![[0.0, 0.0], [1.0, 0.0]];
        let per = [
            -(0.9f64).ln(),
            -(0.8f64).ln(),
            -(0.6f64).ln(),
            -(0.4f64).ln(),
        ];
        let expected = (per[0] + per[1] + 2.0 * per[2] + per[3]) / 5.0;
        assert!(
            (attention_loss(&pred, gt.view(), a.view(), 1.0).unwrap() - expected).abs() < 1e-12
        );
    }

    #[test]
    fn train_weight_arithmetic() {
        let u = ConfidenceMap::uniform(2, 2);
        let gt = Array2::<u8>::zeros((2, 2));
        let r = train_loss(&u, &u, &u, gt.view(), gt.view(), &LossWeights::default()).unwrap();
        assert!((r.l_train - 2.3 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((r.l_train - 1.594).abs() < 1e-3);
    }

    #[test]
    fn tta_weight_arithmetic() {
        let pred = ConfidenceMap::from_fg(array![[0.7, 0.1]]);
        let gt = array![[1u8, 0]];
        let a = Array2::zeros((1, 2));
        let w = LossWeights::default();
        let r = tta_loss(&pred, gt.view(), a.view(), &w).unwrap();
        assert!((r.l_tta - r.l_bce).abs() < 1e-12);
        assert!((r.l_tta - (0.7 * r.l_bce + 0.3 * r.l_att)).abs() < 1e-12);
        let perfect = ConfidenceMap::from_fg(gt.mapv(f64::from));
        assert!(tta_loss(&perfect, gt.view(), a.view(), &w).unwrap().l_tta < 1e-6);
    }

    #[test]
    fn bce_grad_matches_finite_differences() {
        let gt = array![[1u8, 0, 1], [0, 1, 0]];
        let fg = array![[0.3, 0.6, 0.9], [0.2, 0.55, 0.05]];
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        let w = LossWeights::default();
        let g =
            tta_loss_grad(&ConfidenceMap::from_fg(fg.clone()), gt.view(), a.view(), &w).unwrap();
        let gb = bce_grad(&ConfidenceMap::from_fg(fg.clone()), gt.view()).unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)] {
            let mut p = fg.clone();
            let mut m = fg.clone();
            p[idx] += h;
            m[idx] -= h;
            let (cp, cm) = (ConfidenceMap::from_fg(p), ConfidenceMap::from_fg(m));
            let fd =
                (bce_loss(&cp, gt.view()).unwrap() - bce_loss(&cm, gt.view()).unwrap()) / (2.0 * h);
            assert!((fd - gb[idx]).abs() < 1e-5);
            let fd = (tta_loss(&cp, gt.view(), a.view(), &w).unwrap().l_tta
                - tta_loss(&cm, gt.view(), a.view(), &w).unwrap().l_tta)
                / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-5);
        }
    }
}
