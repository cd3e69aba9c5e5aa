//! Adaptive Refine Self-Matching.
//!
//! The self-matching threshold is shifted per episode by
//! `δ = Δmax·(λ·(FB_q − FB_s)/FB_q + (1 − λ)·Sim/Union)` with `Δmax = 0.2·κ`,
//! then the query prediction is refined by repeated self-matching. Each stage
//! tightens the foreground threshold by 0.05 and loosens the background one by
//! 0.05; refinement stops as soon as the query foreground/background prototype
//! similarity fails to decrease.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{DarnetError, Result};
use crate::feature::FeatureMap;
use crate::prototype_matching::{
    build_query_prototype, cosine_map, fg_bg_similarity, predict_confidence, self_match, sigmoid,
    threshold_filter, ConfidenceMap, Label, Prototype, TernaryMask,
};

pub const TAU_MIN: f64 = 0.05;
pub const TAU_MAX: f64 = 0.99;
/// Δmax per unit of κ.
pub const DELTA_SCALE: f64 = 0.2;
pub const KAPPA_MIN: f64 = 1e-3;

pub fn clamp_tau(t: f64) -> f64 {
    t.clamp(TAU_MIN, TAU_MAX)
}

/// Threshold bases plus the two learnable ARSM scalars.
///
/// `lambda_mix` is stored through a logit so that optimizer steps can never
/// leave (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdState {
    pub tau_fg: f64,
    pub tau_bg: f64,
    pub tau_initial: f64,
    pub kappa: f64,
    pub lambda_logit: f64,
    pub delta: f64,
}

impl Default for ThresholdState {
    fn default() -> Self {
        Self {
            tau_fg: 0.8,
            tau_bg: 0.6,
            tau_initial: 0.7,
            kappa: 1.0,
            lambda_logit: 0.0,
            delta: 0.0,
        }
    }
}

impl ThresholdState {
    pub fn lambda_mix(&self) -> f64 {
        sigmoid(self.lambda_logit)
    }

    pub fn set_lambda_mix(&mut self, lambda: f64) {
        let l = lambda.clamp(1e-9, 1.0 - 1e-9);
        self.lambda_logit = (l / (1.0 - l)).ln();
    }

    pub fn delta_max(&self) -> f64 {
        DELTA_SCALE * self.kappa
    }

    /// Stage-`k` thresholds (1-based) for a given shift.
    pub fn stage_thresholds(&self, delta: f64, stage: usize, step: f64) -> (f64, f64) {
        let offset = step * (stage.saturating_sub(1)) as f64;
        (
            clamp_tau(self.tau_fg + delta + offset),
            clamp_tau(self.tau_bg + delta - offset),
        )
    }
}

/// How refinement ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    FbNotDecreasing,
    MaxStages,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    pub tau_fg: f64,
    pub tau_bg: f64,
    pub fb_q: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    pub stages: Vec<StageTrace>,
    pub stop_reason: StopReason,
    /// Index into `stages` of the prediction returned as M2, if any.
    pub accepted_stage: Option<usize>,
    pub delta: f64,
    pub fb_s: Option<f64>,
    pub fb_q_initial: Option<f64>,
    pub self_match_passes: usize,
    pub warnings: Vec<String>,
}

/// Mean cosine of labeled pixels to their own prototype half.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AverageSimilarity {
    pub fg: Option<f64>,
    pub bg: Option<f64>,
}

pub fn average_similarity(
    p_q: &Prototype,
    f_q: &FeatureMap,
    tm: &TernaryMask,
) -> Result<AverageSimilarity> {
    if !p_q.is_complete() {
        return Err(DarnetError::InvalidPrototype(
            "query prototype half is empty",
        ));
    }
    if tm.dim() != f_q.spatial() {
        return Err(DarnetError::ShapeMismatch(format!(
            "ternary mask {:?} vs features {:?}",
            tm.dim(),
            f_q.spatial()
        )));
    }
    let cf = cosine_map(&p_q.fg, f_q)?;
    let cb = cosine_map(&p_q.bg, f_q)?;
    let mean_over = |cos: &Array2<f64>, label: Label| {
        let (sum, n) = Zip::from(cos)
            .and(&tm.labels)
            .fold((0.0, 0usize), |(s, n), &c, &l| {
                if l == label {
                    (s + c, n + 1)
                } else {
                    (s, n)
                }
            });
        (n > 0).then(|| sum / n as f64)
    };
    Ok(AverageSimilarity {
        fg: mean_over(&cf, Label::Fg),
        bg: mean_over(&cb, Label::Bg),
    })
}

/// Lost pixels that resemble both the foreground and the background
/// prototype more than the respective average labeled pixel does.
pub fn similar_pixel_mask(
    f_q: &FeatureMap,
    p_q: &Prototype,
    tm: &TernaryMask,
    ave_fg: f64,
    ave_bg: f64,
) -> Result<Array2<u8>> {
    if tm.dim() != f_q.spatial() {
        return Err(DarnetError::ShapeMismatch(format!(
            "ternary mask {:?} vs features {:?}",
            tm.dim(),
            f_q.spatial()
        )));
    }
    let cf = cosine_map(&p_q.fg, f_q)?;
    let cb = cosine_map(&p_q.bg, f_q)?;
    Ok(Zip::from(&tm.labels)
        .and(&cf)
        .and(&cb)
        .map_collect(|&l, &f, &b| u8::from(l == Label::Lost && f > ave_fg && b > ave_bg)))
}

/// Intermediate terms of the adaptive shift, kept for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaTerms {
    pub delta: f64,
    /// `(FB_q − FB_s)/FB_q`, clamped to [−1, 1].
    pub fb_term: f64,
    /// `Sim_num / Union_num`.
    pub sim_term: f64,
    /// Unclamped `λ·fb_term + (1−λ)·sim_term`.
    pub mix: f64,
    /// True when the final ±Δmax clamp was active.
    pub clamped: bool,
    /// True when FB_q was zero and the ratio term was dropped.
    pub fb_term_dropped: bool,
}

/// Evaluates the adaptive threshold shift.
pub fn adaptive_delta(
    fb_q: f64,
    fb_s: f64,
    sim_num: usize,
    union_num: usize,
    kappa: f64,
    lambda_mix: f64,
) -> Result<DeltaTerms> {
    if union_num == 0 {
        return Err(DarnetError::DegenerateEpisode(
            "no labeled query pixels for the threshold shift".into(),
        ));
    }
    let fb_term_dropped = fb_q == 0.0;
    let fb_term = if fb_term_dropped {
        0.0
    } else {
        ((fb_q - fb_s) / fb_q).clamp(-1.0, 1.0)
    };
    let sim_term = sim_num as f64 / union_num as f64;
    let mix = lambda_mix * fb_term + (1.0 - lambda_mix) * sim_term;
    let delta_max = DELTA_SCALE * kappa;
    let raw = delta_max * mix;
    let delta = raw.clamp(-delta_max.abs(), delta_max.abs());
    Ok(DeltaTerms {
        delta,
        fb_term,
        sim_term,
        mix,
        clamped: delta != raw,
        fb_term_dropped,
    })
}

/// Knobs of the refinement loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub max_stages: usize,
    pub stage_step: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Replaces the adaptive shift with a fixed one when set.
    pub fixed_delta: Option<f64>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_stages: 4,
            stage_step: 0.05,
            temperature: 10.0,
            alpha: 0.5,
            beta: 0.5,
            fixed_delta: None,
        }
    }
}

/// Everything the accepted stage used, retained for gradient routing.
#[derive(Debug, Clone)]
pub struct AcceptedStage {
    pub stage: usize,
    /// Prediction that was thresholded to build this stage's query prototype.
    pub source: ConfidenceMap,
    pub tau_fg: f64,
    pub tau_bg: f64,
    pub mask: TernaryMask,
    pub query_prototype: Prototype,
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub m2: ConfidenceMap,
    pub m_pre: ConfidenceMap,
    pub trace: RefineTrace,
    /// Indistinguishable pixels found before refinement.
    pub similar: Array2<u8>,
    pub delta: Option<DeltaTerms>,
    pub accepted: Option<AcceptedStage>,
    /// Prediction of every recorded stage, aligned with `trace.stages`.
    pub stage_predictions: Vec<ConfidenceMap>,
}

struct InitialAnalysis {
    similar: Array2<u8>,
    fb_q: Option<f64>,
    delta: Option<DeltaTerms>,
}

fn analyse_initial(
    f_q: &FeatureMap,
    m_pre: &ConfidenceMap,
    state: &ThresholdState,
    fb_s: Option<f64>,
    warnings: &mut Vec<String>,
) -> InitialAnalysis {
    let (h, w) = f_q.spatial();
    let mut out = InitialAnalysis {
        similar: Array2::zeros((h, w)),
        fb_q: None,
        delta: None,
    };
    let tm = threshold_filter(m_pre, state.tau_fg, state.tau_bg);
    let pq = match build_query_prototype(f_q, &tm) {
        Ok(p) if p.is_complete() => p,
        _ => {
            warnings.push("initial query prototype incomplete; shift set to 0".into());
            return out;
        }
    };
    let fb_q = fg_bg_similarity(&pq).ok();
    out.fb_q = fb_q;
    if let Ok(AverageSimilarity {
        fg: Some(af),
        bg: Some(ab),
    }) = average_similarity(&pq, f_q, &tm)
    {
        if let Ok(sim) = similar_pixel_mask(f_q, &pq, &tm, af, ab) {
            out.similar = sim;
        }
    }
    let sim_num = out.similar.iter().filter(|&&v| v != 0).count();
    let union_num = tm.count(Label::Fg) + tm.count(Label::Bg);
    if let (Some(fq), Some(fs)) = (fb_q, fb_s) {
        match adaptive_delta(fq, fs, sim_num, union_num, state.kappa, state.lambda_mix()) {
            Ok(d) => {
                if d.fb_term_dropped {
                    warnings.push("FB_q is zero; similarity ratio term dropped".into());
                }
                out.delta = Some(d);
            }
            Err(e) => warnings.push(format!("shift unavailable: {e}")),
        }
    }
    out
}

/// Runs adaptive refine self-matching on (DAM-processed) query features.
pub fn refine_loop(
    f_q: &FeatureMap,
    p_s: &Prototype,
    state: &ThresholdState,
    cfg: &RefineConfig,
) -> Result<RefineOutput> {
    let m_pre = predict_confidence(p_s, f_q, cfg.temperature)?;
    let fb_s = fg_bg_similarity(p_s).ok();
    let mut warnings = Vec::new();
    let initial = analyse_initial(f_q, &m_pre, state, fb_s, &mut warnings);
    let delta = match cfg.fixed_delta {
        Some(d) => d,
        None => initial.delta.map_or(0.0, |d| d.delta),
    };

    let max_stages = cfg.max_stages.max(1);
    let mut stages: Vec<StageTrace> = Vec::new();
    let mut predictions: Vec<ConfidenceMap> = Vec::new();
    let mut accepted: Option<AcceptedStage> = None;
    let mut accepted_idx: Option<usize> = None;
    let mut passes = 0usize;
    let mut stop = StopReason::MaxStages;
    let mut prev_fb: Option<f64> = None;

    for stage in 1..=max_stages {
        let (tau_fg, tau_bg) = state.stage_thresholds(delta, stage, cfg.stage_step);
        let source = accepted
            .as_ref()
            .map_or(&m_pre, |_| predictions.last().expect("accepted"));
        let tm = threshold_filter(source, tau_fg, tau_bg);
        let pq = match build_query_prototype(f_q, &tm) {
            Ok(p) => p,
            Err(DarnetError::DegenerateEpisode(_)) => {
                stages.push(StageTrace {
                    stage,
                    tau_fg,
                    tau_bg,
                    fb_q: None,
                    iou: None,
                });
                stop = StopReason::Degenerate;
                break;
            }
            Err(e) => return Err(e),
        };
        if stage > 1 && !pq.is_complete() {
            stages.push(StageTrace {
                stage,
                tau_fg,
                tau_bg,
                fb_q: None,
                iou: None,
            });
            stop = StopReason::Degenerate;
            break;
        }
        let pred = self_match(p_s, &pq, f_q, cfg.alpha, cfg.beta, cfg.temperature)?;
        passes += 1;
        let fb = fg_bg_similarity(&pq).ok();
        stages.push(StageTrace {
            stage,
            tau_fg,
            tau_bg,
            fb_q: fb,
            iou: None,
        });
        let decreasing = match (prev_fb, fb) {
            (None, _) => true,
            (Some(p), Some(c)) => c < p,
            (Some(_), None) => false,
        };
        if !decreasing {
            stop = StopReason::FbNotDecreasing;
            predictions.push(pred);
            break;
        }
        let source = source.clone();
        predictions.push(pred);
        accepted_idx = Some(stages.len() - 1);
        accepted = Some(AcceptedStage {
            stage,
            source,
            tau_fg,
            tau_bg,
            mask: tm,
            query_prototype: pq,
        });
        if fb.is_none() {
            stop = StopReason::Degenerate;
            break;
        }
        prev_fb = fb;
    }

    let m2 = match accepted_idx {
        Some(i) => predictions[i].clone(),
        None => m_pre.clone(),
    };
    // Keep predictions aligned with stage records; degenerate stages have none.
    while predictions.len() < stages.len() {
        predictions.push(m2.clone());
    }
    Ok(RefineOutput {
        m2,
        m_pre,
        trace: RefineTrace {
            stages,
            stop_reason: stop,
            accepted_stage: accepted_idx,
            delta,
            fb_s,
            fb_q_initial: initial.fb_q,
            self_match_passes: passes,
            warnings,
        },
        similar: initial.similar,
        delta: if cfg.fixed_delta.is_some() {
            None
        } else {
            initial.delta
        },
        accepted,
        stage_predictions: predictions,
    })
}
