//! Per-episode test-time adaptation of the DAM and the ARSM scalars, the
//! branch fusion, and source-domain training.

mod train;

use ndarray::{Array1, Array2, Array3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use train::{
    run_training, train_epoch, train_loss_and_grad, TrainConfig, TrainEpisode, TrainLogEntry,
};

use crate::arsm::{ThresholdState, DELTA_SCALE, KAPPA_MIN, TAU_MAX, TAU_MIN};
use crate::backbone::Extractor;
use crate::dam::{dam_backward, DamGradients, DamParams};
use crate::episode_store::{augment_support, AugmentConfig, Episode};
use crate::error::{DarnetError, Result};
use crate::feature::FeatureMap;
use crate::losses::{tta_loss, tta_loss_grad, LossReport, LossWeights};
use crate::model::{AblationFlags, CallCounts, DarnetModel, QueryPrediction, SupportFeatures};
use crate::optim::{AdamConfig, Optimizer, OptimizerKind};
use crate::prototype_matching::grad::{
    blend_coefficients, head_backward, pool_backward, support_prototype_backward,
};
use crate::prototype_matching::{blend_prototypes, sigmoid, ConfidenceMap, Label};

/// Slope of the sigmoid standing in for the threshold indicator when
/// differentiating with respect to the thresholds.
pub const SURROGATE_SLOPE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub learning_rate: f64,
    /// Optimizer steps per adaptation round (one round for 1-shot, K for K-shot).
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub fuse_weights_train: (f64, f64),
    pub fuse_weights_test: (f64, f64),
    /// 1-shot: draw a new pseudo support every step instead of once.
    pub fresh_augmentation_per_step: bool,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            iterations: 10,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            fuse_weights_train: (0.7, 0.3),
            fuse_weights_test: (0.3, 0.7),
            fresh_augmentation_per_step: true,
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

fn check_weights(name: &str, (a, b): (f64, f64)) -> Result<()> {
    if !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0 && a + b > 0.0) {
        return Err(DarnetError::InvalidConfig(format!(
            "{name} must be non-negative with a positive sum, got ({a}, {b})"
        )));
    }
    Ok(())
}

impl TtaConfig {
    /// Unlike the documented contract, a zero learning rate is accepted so
    /// that tests can run the loop as a no-op.
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(DarnetError::InvalidConfig(
                "tta iterations must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(DarnetError::InvalidConfig(format!(
                "tta learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        check_weights("fuse_weights_train", self.fuse_weights_train)?;
        check_weights("fuse_weights_test", self.fuse_weights_test)
    }
}

/// Everything TTA may touch, plus the frozen extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub extractor: Extractor,
    pub dam: DamParams,
    pub thresholds: ThresholdState,
}

impl ModelSnapshot {
    pub fn take(model: &DarnetModel) -> Self {
        Self {
            extractor: model.extractor.clone(),
            dam: model.dam.clone(),
            thresholds: model.thresholds,
        }
    }

    pub fn restore(&self, model: &mut DarnetModel) {
        model.extractor = self.extractor.clone();
        model.dam = self.dam.clone();
        model.thresholds = self.thresholds;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaLogEntry {
    pub episode_id: String,
    pub round: usize,
    pub iteration: usize,
    pub l_tta: f64,
    pub kappa: f64,
    pub lambda_mix: f64,
    pub tau_f: f64,
    pub tau_b: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptedParams {
    pub dam: DamParams,
    pub thresholds: ThresholdState,
    pub log: Vec<TtaLogEntry>,
    pub counts: CallCounts,
}

/// One TTA forward/backward evaluation.
#[derive(Debug, Clone)]
pub struct TtaStep {
    pub loss: LossReport,
    /// DAM parameter gradients; `kappa` and `lambda_mix` hold the surrogate
    /// gradients with respect to κ and λ_mix.
    pub grads: DamGradients,
    pub tau_f: f64,
    pub tau_b: f64,
    pub prediction: ConfidenceMap,
}

/// Per-pixel convex combination of two predictions.
pub fn fuse_predictions(
    m1: &ConfidenceMap,
    m2: &ConfidenceMap,
    w1: f64,
    w2: f64,
) -> Result<ConfidenceMap> {
    check_weights("fusion weights", (w1, w2))?;
    if m1.dim() != m2.dim() {
        return Err(DarnetError::ShapeMismatch(format!(
            "fusing {:?} with {:?}",
            m1.dim(),
            m2.dim()
        )));
    }
    let (a, b) = (w1 / (w1 + w2), w2 / (w1 + w2));
    let fg = Zip::from(&m1.fg)
        .and(&m2.fg)
        .map_collect(|&x, &y| (a * x + b * y).clamp(0.0, 1.0));
    Ok(ConfidenceMap::from_fg(fg))
}

/// d(prototype half)/dτ under the sigmoid surrogate, contracted with the
/// upstream prototype gradient.
fn surrogate_tau_grad(
    source: &Array2<f64>,
    tau: f64,
    f: &FeatureMap,
    proto: &Array1<f64>,
    count: usize,
    d_proto: &Array1<f64>,
) -> f64 {
    if count == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for ((y, x), &c) in source.indexed_iter() {
        let s = sigmoid(SURROGATE_SLOPE * (c - tau));
        let ds = -SURROGATE_SLOPE * s * (1.0 - s);
        if ds == 0.0 {
            continue;
        }
        let col = f.column(y, x);
        let proj: f64 = d_proto
            .iter()
            .zip(col.iter())
            .zip(proto)
            .map(|((g, v), p)| g * (v - p))
            .sum();
        acc += ds * proj;
    }
    acc / count as f64
}

/// Branch-2 forward plus the L_TTA gradient on the DAM parameters and the
/// ARSM scalars. `query_mask` is at feature resolution.
#[allow(clippy::too_many_arguments)]
pub fn tta_step_grad(
    model: &DarnetModel,
    dam: &DamParams,
    thresholds: &ThresholdState,
    support: &SupportFeatures,
    query: &FeatureMap,
    query_mask: &Array2<u8>,
    arsm: bool,
    weights: &LossWeights,
    counts: &mut CallCounts,
) -> Result<TtaStep> {
    let b2 = model.branch2_forward(dam, thresholds, support, query, arsm, counts)?;
    let attention = match &b2.refine {
        Some(r) => r.similar.mapv(f64::from),
        None => Array2::zeros(query.spatial()),
    };
    let loss = tta_loss(&b2.m2, query_mask.view(), attention.view(), weights)?;
    if !loss.l_tta.is_finite() {
        return Err(DarnetError::NonFiniteLoss { step: 0, seed: 0 });
    }
    let g = tta_loss_grad(&b2.m2, query_mask.view(), attention.view(), weights)?;

    let c = query.channels();
    let (mut dps_fg, mut dps_bg) = (Array1::zeros(c), Array1::zeros(c));
    let mut dgq = Array3::zeros(query.data().dim());
    let mut grads = dam.zero_grads();
    let (mut tau_f, mut tau_b) = thresholds.stage_thresholds(0.0, 1, model.refine.stage_step);
    let accepted = b2
        .refine
        .as_ref()
        .and_then(|r| r.accepted.as_ref().map(|a| (r, a)));

    match accepted {
        Some((refine, st)) => {
            tau_f = st.tau_fg;
            tau_b = st.tau_bg;
            let (alpha, beta) = (model.refine.alpha, model.refine.beta);
            let pq = &st.query_prototype;
            let blended = blend_prototypes(&b2.prototype, pq, alpha, beta)?;
            let hg = head_backward(
                &blended,
                &b2.query_dam,
                &b2.m2,
                &g,
                model.refine.temperature,
            );
            let (sf, qf) = blend_coefficients(b2.prototype.fg_valid(), pq.fg_valid(), alpha, beta);
            let (sb, qb) = blend_coefficients(b2.prototype.bg_valid(), pq.bg_valid(), alpha, beta);
            dps_fg.scaled_add(sf, &hg.fg);
            dps_bg.scaled_add(sb, &hg.bg);
            let dpq_fg = &hg.fg * qf;
            let dpq_bg = &hg.bg * qb;
            pool_backward(
                &dpq_fg,
                st.mask.indicator(Label::Fg).view(),
                pq.fg_count,
                &mut dgq,
            );
            pool_backward(
                &dpq_bg,
                st.mask.indicator(Label::Bg).view(),
                pq.bg_count,
                &mut dgq,
            );
            dgq += &hg.df;

            if let (Some(terms), None) = (refine.delta, model.refine.fixed_delta) {
                let offset = model.refine.stage_step * (st.stage - 1) as f64;
                let raw_f = thresholds.tau_fg + terms.delta + offset;
                let raw_b = thresholds.tau_bg + terms.delta - offset;
                let inside = |t: f64| (TAU_MIN..=TAU_MAX).contains(&t);
                let mut d_delta = 0.0;
                if inside(raw_f) && qf != 0.0 {
                    d_delta += surrogate_tau_grad(
                        &st.source.fg,
                        st.tau_fg,
                        &b2.query_dam,
                        &pq.fg,
                        pq.fg_count,
                        &dpq_fg,
                    );
                }
                if inside(raw_b) && qb != 0.0 {
                    d_delta += surrogate_tau_grad(
                        &st.source.bg,
                        st.tau_bg,
                        &b2.query_dam,
                        &pq.bg,
                        pq.bg_count,
                        &dpq_bg,
                    );
                }
                if terms.clamped {
                    grads.kappa = d_delta * DELTA_SCALE * terms.mix.signum();
                } else {
                    grads.kappa = d_delta * DELTA_SCALE * terms.mix;
                    grads.lambda_mix =
                        d_delta * DELTA_SCALE * thresholds.kappa * (terms.fb_term - terms.sim_term);
                }
            }
        }
        None => {
            let temperature = if arsm {
                model.refine.temperature
            } else {
                model.matching.temperature
            };
            let hg = head_backward(&b2.prototype, &b2.query_dam, &b2.m2, &g, temperature);
            dps_fg += &hg.fg;
            dps_bg += &hg.bg;
            dgq += &hg.df;
        }
    }

    let shots: Vec<_> = b2
        .support_dam
        .iter()
        .zip(&support.masks)
        .map(|(f, m)| (f, m.view()))
        .collect();
    let dgs = support_prototype_backward(&shots, &dps_fg, &dps_bg);
    for (f, d) in support.features.iter().zip(&dgs) {
        grads.accumulate(&dam_backward(f, dam, d)?);
    }
    grads.accumulate(&dam_backward(query, dam, &dgq)?);
    Ok(TtaStep {
        loss,
        grads,
        tau_f,
        tau_b,
        prediction: b2.m2,
    })
}

fn apply_update(
    opt: &mut Optimizer,
    dam: &mut DamParams,
    th: &mut ThresholdState,
    grads: &DamGradients,
) {
    let lambda = th.lambda_mix();
    let g_logit = [grads.lambda_mix * lambda * (1.0 - lambda)];
    let g_kappa = [grads.kappa];
    let [gk, gw, gb] = grads.flat();
    let mut kappa = [th.kappa];
    let mut logit = [th.lambda_logit];
    {
        let [pk, pw, pb] = dam.params_mut();
        opt.step(
            &mut [pk, pw, pb, &mut kappa, &mut logit],
            &[gk, gw, gb, &g_kappa, &g_logit],
        );
    }
    th.kappa = kappa[0].max(KAPPA_MIN);
    th.lambda_logit = logit[0];
}

/// Algorithm-1 fine-tuning on the support set. Works on private copies;
/// the model is never modified.
pub fn adapt_episode<R: Rng + ?Sized>(
    model: &DarnetModel,
    episode: &Episode,
    flags: AblationFlags,
    cfg: &TtaConfig,
    rng: &mut R,
) -> Result<AdaptedParams> {
    cfg.validate()?;
    let k = episode.support.len();
    if k == 0 {
        return Err(DarnetError::DegenerateEpisode("empty support set".into()));
    }
    let mut counts = CallCounts::default();
    let images: Vec<_> = episode.support.iter().map(|r| &r.image).collect();
    let masks: Vec<_> = episode.support.iter().map(|r| &r.mask).collect();
    let originals = model.support_features(&images, &masks, rng, &mut counts)?;
    for (i, m) in originals.masks.iter().enumerate() {
        let fg = m.iter().filter(|&&v| v != 0).count();
        if fg == 0 || fg == m.len() {
            return Err(DarnetError::DegenerateEpisode(format!(
                "support {i} has no {} pixels at feature resolution",
                if fg == 0 { "foreground" } else { "background" }
            )));
        }
    }

    let mut dam = model.dam.clone();
    let mut th = model.thresholds;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.adam);
    let mut log = Vec::new();

    // 1-shot: the augmented support predicts the original. K-shot: each shot
    // in turn is held out and predicted from the others.
    let rounds: Vec<(Vec<usize>, usize)> = if k == 1 {
        vec![(vec![0], 0)]
    } else {
        (0..k)
            .map(|held| ((0..k).filter(|&i| i != held).collect(), held))
            .collect()
    };

    for (round, (support_idx, held)) in rounds.iter().enumerate() {
        counts.tta_rounds += 1;
        let mut fixed_pseudo: Option<FeatureMap> = None;
        for iteration in 0..cfg.iterations {
            let support = if k == 1 {
                let f = match &fixed_pseudo {
                    Some(f) => f.clone(),
                    None => {
                        let (img, _) =
                            augment_support(&episode.support[0].image, &cfg.augment, rng);
                        let f = model.features(&img, rng)?;
                        counts.extractor_passes += 1;
                        if !cfg.fresh_augmentation_per_step {
                            fixed_pseudo = Some(f.clone());
                        }
                        f
                    }
                };
                SupportFeatures {
                    features: vec![f],
                    masks: vec![originals.masks[0].clone()],
                }
            } else {
                SupportFeatures {
                    features: support_idx
                        .iter()
                        .map(|&i| originals.features[i].clone())
                        .collect(),
                    masks: support_idx
                        .iter()
                        .map(|&i| originals.masks[i].clone())
                        .collect(),
                }
            };
            let step = tta_step_grad(
                model,
                &dam,
                &th,
                &support,
                &originals.features[*held],
                &originals.masks[*held],
                flags.arsm,
                &cfg.loss,
                &mut counts,
            )
            .map_err(|e| match e {
                DarnetError::NonFiniteLoss { seed, .. } => DarnetError::NonFiniteLoss {
                    step: iteration,
                    seed,
                },
                other => other,
            })?;
            log.push(TtaLogEntry {
                episode_id: String::new(),
                round,
                iteration,
                l_tta: step.loss.l_tta,
                kappa: th.kappa,
                lambda_mix: th.lambda_mix(),
                tau_f: step.tau_f,
                tau_b: step.tau_b,
            });
            apply_update(&mut opt, &mut dam, &mut th, &step.grads);
            counts.tta_steps += 1;
        }
    }
    counts.optimizer_steps = opt.steps();
    Ok(AdaptedParams {
        dam,
        thresholds: th,
        log,
        counts,
    })
}

#[derive(Debug, Clone)]
pub struct TtaOutcome {
    pub predictions: Vec<QueryPrediction>,
    pub adapted: AdaptedParams,
}

/// Adapts on the support set, then predicts every query with the adapted
/// parameters and the test-time fusion weights.
pub fn run_tta_episode<R: Rng + ?Sized>(
    model: &DarnetModel,
    episode: &Episode,
    cfg: &TtaConfig,
    rng: &mut R,
) -> Result<TtaOutcome> {
    let flags = AblationFlags {
        sm: true,
        csd: false,
        arsm: true,
        tta: true,
    };
    let mut adapted = adapt_episode(model, episode, flags, cfg, rng)?;
    let (predictions, counts) = model.predict_with_params(
        episode,
        flags,
        &adapted.dam,
        &adapted.thresholds,
        cfg.fuse_weights_test,
        rng,
    )?;
    adapted.counts.add(&counts);
    Ok(TtaOutcome {
        predictions,
        adapted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ExtractorConfig;
    use crate::dam::{init_dam, DamInit};
    use crate::episode_store::{generate_synthetic_episode, SyntheticSpec};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> DarnetModel {
        DarnetModel::new(
            ExtractorConfig {
                widths: vec![8, 8],
                strides: vec![2, 1],
                final_relu: false,
                seed: 5,
            },
            3,
            DamInit::Identity,
        )
        .unwrap()
    }

    fn episode(seed: u64, k: usize) -> Episode {
        let spec = SyntheticSpec {
            seed,
            intra_class_jitter: 0.08,
            ..Default::default()
        };
        generate_synthetic_episode(&spec, k, 1).unwrap()
    }

    #[test]
    fn fusion_identities() {
        let m1 = ConfidenceMap::from_fg(array![[0.9, 0.2], [0.4, 0.6]]);
        let m2 = ConfidenceMap::from_fg(array![[0.1, 0.5], [0.7, 0.3]]);
        assert_eq!(fuse_predictions(&m1, &m2, 1.0, 0.0).unwrap(), m1);
        let same = fuse_predictions(&m1, &m1, 0.3, 0.7).unwrap();
        assert!((&same.fg - &m1.fg).iter().all(|d| d.abs() < 1e-12));
        let mean = fuse_predictions(&m1, &m2, 2.0, 2.0).unwrap();
        for ((a, b), c) in m1.fg.iter().zip(&m2.fg).zip(&mean.fg) {
            assert!(((a + b) / 2.0 - c).abs() < 1e-12);
        }
        assert!(mean.normalization_error() < 1e-12);
        assert!(fuse_predictions(&m1, &ConfidenceMap::uniform(3, 2), 1.0, 1.0).is_err());
        assert!(fuse_predictions(&m1, &m2, 0.0, 0.0).is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = TtaConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn one_shot_runs_ten_steps_and_leaves_model_alone() {
        let m = model();
        let before = m.clone();
        let out = run_tta_episode(
            &m,
            &episode(1, 1),
            &TtaConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(m, before);
        assert_eq!(out.adapted.counts.tta_rounds, 1);
        assert_eq!(out.adapted.counts.tta_steps, 10);
        assert_eq!(out.adapted.counts.optimizer_steps, 10);
        assert_eq!(out.adapted.log.len(), 10);
        assert_ne!(out.adapted.dam, m.dam);
    }

    #[test]
    fn five_shot_runs_leave_one_out_rounds() {
        let m = model();
        let out = run_tta_episode(
            &m,
            &episode(2, 5),
            &TtaConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.adapted.counts.tta_rounds, 5);
        assert_eq!(out.adapted.counts.tta_steps, 50);
        let rounds: Vec<usize> = out.adapted.log.iter().map(|e| e.round).collect();
        assert_eq!(rounds.iter().filter(|&&r| r == 4).count(), 10);
    }

    #[test]
    fn zero_learning_rate_reproduces_unadapted_prediction() {
        let m = model();
        let ep = episode(3, 1);
        let cfg = TtaConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let out = run_tta_episode(&m, &ep, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let flags = AblationFlags {
            sm: true,
            csd: false,
            arsm: true,
            tta: false,
        };
        let (plain, _) = m
            .predict_with_params(
                &ep,
                flags,
                &m.dam,
                &m.thresholds,
                cfg.fuse_weights_test,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        assert_eq!(out.predictions[0].prediction, plain[0].prediction);
        assert_eq!(out.adapted.dam, m.dam);
    }

    #[test]
    fn scalars_move_and_lambda_stays_in_unit_interval() {
        let m = model();
        let mut moved = 0;
        for seed in 0..6 {
            let cfg = TtaConfig {
                learning_rate: 0.05,
                ..Default::default()
            };
            let out = run_tta_episode(
                &m,
                &episode(seed, 1),
                &cfg,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            let th = out.adapted.thresholds;
            assert!((0.0..=1.0).contains(&th.lambda_mix()));
            assert!(th.kappa >= KAPPA_MIN);
            if th.kappa != m.thresholds.kappa || th.lambda_logit != m.thresholds.lambda_logit {
                moved += 1;
            }
        }
        assert!(moved > 0, "surrogate gradients never moved kappa or lambda");
    }

    // Finite differences on the DAM parameters of the full TTA loss; the
    // threshold masks do not move under perturbations this small.
    #[test]
    fn dam_gradient_of_tta_loss_matches_finite_differences() {
        let m = model();
        let ep = episode(7, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = CallCounts::default();
        let support = m
            .support_features(
                &[&ep.support[0].image],
                &[&ep.support[0].mask],
                &mut rng,
                &mut counts,
            )
            .unwrap();
        let fq = m.features(&ep.query[0].image, &mut rng).unwrap();
        let mq = crate::prototype_matching::downsample_mask(
            ep.query[0].mask.view(),
            fq.height(),
            fq.width(),
        );
        let dam = init_dam(fq.channels(), 3, DamInit::Random, 11).unwrap();
        let weights = LossWeights::default();
        for arsm in [false, true] {
            let step = tta_step_grad(
                &m,
                &dam,
                &m.thresholds,
                &support,
                &fq,
                &mq,
                arsm,
                &weights,
                &mut counts,
            )
            .unwrap();
            let loss_at = |d: &DamParams| {
                tta_step_grad(
                    &m,
                    d,
                    &m.thresholds,
                    &support,
                    &fq,
                    &mq,
                    arsm,
                    &weights,
                    &mut CallCounts::default(),
                )
                .unwrap()
                .loss
                .l_tta
            };
            let h = 1e-6;
            let analytic = step.grads.flat();
            for group in 0..3 {
                for idx in [0usize, 4, 9] {
                    if idx >= analytic[group].len() {
                        continue;
                    }
                    let mut plus = dam.clone();
                    plus.params_mut()[group][idx] += h;
                    let mut minus = dam.clone();
                    minus.params_mut()[group][idx] -= h;
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let a = analytic[group][idx];
                    assert!(
                        (fd - a).abs() <= 1e-5 * (1.0 + fd.abs().max(a.abs())),
                        "arsm={arsm} group {group} idx {idx}: fd {fd} vs analytic {a}"
                    );
                }
            }
        }
    }
}
