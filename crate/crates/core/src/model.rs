//! The assembled two-branch model and its inference pipeline.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arsm::{refine_loop, RefineConfig, RefineOutput, RefineTrace, ThresholdState};
use crate::backbone::{Extractor, ExtractorConfig};
use crate::dam::{dam_forward, init_dam, DamInit, DamParams};
use crate::episode_store::Episode;
use crate::error::{DarnetError, Result};
use crate::feature::FeatureMap;
use crate::prototype_matching::{
    branch1_forward, downsample_mask, predict_confidence, support_prototype, ConfidenceMap,
    MatchConfig, Prototype,
};
use crate::tta_driver::{adapt_episode, fuse_predictions, TtaConfig, TtaLogEntry};

/// Which pipeline components are active, one per ablation row.
///
/// `csd` describes how the model was trained and has no effect at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AblationFlags {
    pub sm: bool,
    pub csd: bool,
    pub arsm: bool,
    pub tta: bool,
}

impl AblationFlags {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn full() -> Self {
        Self {
            sm: true,
            csd: true,
            arsm: true,
            tta: true,
        }
    }

    /// Whether the DAM branch runs at all.
    pub fn branch2(&self) -> bool {
        self.arsm || self.tta
    }
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.sm, "sm"),
            (self.csd, "csd"),
            (self.arsm, "arsm"),
            (self.tta, "tta"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            f.write_str("baseline")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for AblationFlags {
    type Err = DarnetError;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = Self::baseline();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "baseline" => {}
                "sm" => flags.sm = true,
                "csd" => flags.csd = true,
                "arsm" => flags.arsm = true,
                "tta" => flags.tta = true,
                other => {
                    return Err(DarnetError::InvalidConfig(format!(
                        "unknown ablation flag `{other}`"
                    )))
                }
            }
        }
        Ok(flags)
    }
}

/// Per-episode operation counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CallCounts {
    pub extractor_passes: usize,
    pub branch1_passes: usize,
    pub dam_forwards: usize,
    pub refine_calls: usize,
    pub self_match_passes: usize,
    pub tta_rounds: usize,
    pub tta_steps: usize,
    pub optimizer_steps: usize,
}

impl CallCounts {
    pub fn add(&mut self, other: &CallCounts) {
        self.extractor_passes += other.extractor_passes;
        self.branch1_passes += other.branch1_passes;
        self.dam_forwards += other.dam_forwards;
        self.refine_calls += other.refine_calls;
        self.self_match_passes += other.self_match_passes;
        self.tta_rounds += other.tta_rounds;
        self.tta_steps += other.tta_steps;
        self.optimizer_steps += other.optimizer_steps;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarnetModel {
    pub extractor: Extractor,
    pub dam: DamParams,
    pub thresholds: ThresholdState,
    pub matching: MatchConfig,
    pub refine: RefineConfig,
}

/// Support features with their masks at feature resolution.
pub struct SupportFeatures {
    pub features: Vec<FeatureMap>,
    pub masks: Vec<Array2<u8>>,
}

impl SupportFeatures {
    pub fn shots(&self) -> Vec<(&FeatureMap, ndarray::ArrayView2<'_, u8>)> {
        self.features
            .iter()
            .zip(&self.masks)
            .map(|(f, m)| (f, m.view()))
            .collect()
    }
}

/// Branch-2 intermediates, kept for the TTA backward pass.
pub struct Branch2 {
    pub support_dam: Vec<FeatureMap>,
    pub query_dam: FeatureMap,
    pub prototype: Prototype,
    pub refine: Option<RefineOutput>,
    pub m2: ConfidenceMap,
}

#[derive(Debug, Clone)]
pub struct QueryPrediction {
    /// Final prediction at feature resolution.
    pub prediction: ConfidenceMap,
    pub m0: ConfidenceMap,
    pub m1: ConfidenceMap,
    pub m2: Option<ConfidenceMap>,
    pub trace: Option<RefineTrace>,
}

#[derive(Debug, Clone)]
pub struct EpisodePrediction {
    pub queries: Vec<QueryPrediction>,
    pub counts: CallCounts,
    pub tta_log: Vec<TtaLogEntry>,
    /// Set when TTA was requested but skipped.
    pub tta_skipped: Option<String>,
}

impl DarnetModel {
    pub fn new(extractor: ExtractorConfig, dam_kernel: usize, dam_init: DamInit) -> Result<Self> {
        let seed = extractor.seed;
        let extractor = Extractor::new(extractor)?;
        let dam = init_dam(extractor.out_channels(), dam_kernel, dam_init, seed)?;
        Ok(Self {
            extractor,
            dam,
            thresholds: ThresholdState::default(),
            matching: MatchConfig::default(),
            refine: RefineConfig::default(),
        })
    }

    pub fn features<R: Rng + ?Sized>(
        &self,
        image: &Array3<f64>,
        rng: &mut R,
    ) -> Result<FeatureMap> {
        self.extractor.extract(image, None, rng)
    }

    pub fn support_features<R: Rng + ?Sized>(
        &self,
        images: &[&Array3<f64>],
        masks: &[&Array2<u8>],
        rng: &mut R,
        counts: &mut CallCounts,
    ) -> Result<SupportFeatures> {
        let mut features = Vec::with_capacity(images.len());
        let mut small = Vec::with_capacity(images.len());
        for (img, m) in images.iter().zip(masks) {
            let f = self.features(img, rng)?;
            counts.extractor_passes += 1;
            small.push(downsample_mask(m.view(), f.height(), f.width()));
            features.push(f);
        }
        Ok(SupportFeatures {
            features,
            masks: small,
        })
    }

    /// DAM on both sides, support matching, then refinement when `arsm` is on.
    pub fn branch2_forward(
        &self,
        dam: &DamParams,
        thresholds: &ThresholdState,
        support: &SupportFeatures,
        query: &FeatureMap,
        arsm: bool,
        counts: &mut CallCounts,
    ) -> Result<Branch2> {
        let support_dam = support
            .features
            .iter()
            .map(|f| dam_forward(f, dam))
            .collect::<Result<Vec<_>>>()?;
        let query_dam = dam_forward(query, dam)?;
        counts.dam_forwards += support_dam.len() + 1;
        let shots: Vec<_> = support_dam
            .iter()
            .zip(&support.masks)
            .map(|(f, m)| (f, m.view()))
            .collect();
        let prototype = support_prototype(&shots)?;
        if !prototype.is_complete() {
            return Err(DarnetError::DegenerateEpisode(
                "support lacks foreground or background".into(),
            ));
        }
        if arsm {
            let out = refine_loop(&query_dam, &prototype, thresholds, &self.refine)?;
            counts.refine_calls += 1;
            counts.self_match_passes += out.trace.self_match_passes;
            Ok(Branch2 {
                m2: out.m2.clone(),
                support_dam,
                query_dam,
                prototype,
                refine: Some(out),
            })
        } else {
            let m2 = predict_confidence(&prototype, &query_dam, self.matching.temperature)?;
            Ok(Branch2 {
                support_dam,
                query_dam,
                prototype,
                refine: None,
                m2,
            })
        }
    }

    /// Runs the flag-selected pipeline on every query of the episode.
    ///
    /// The model itself is never mutated: TTA adapts private copies.
    pub fn predict_episode<R: Rng + ?Sized>(
        &self,
        episode: &Episode,
        flags: AblationFlags,
        tta: &TtaConfig,
        rng: &mut R,
    ) -> Result<EpisodePrediction> {
        let mut counts = CallCounts::default();
        let mut dam = self.dam.clone();
        let mut thresholds = self.thresholds;
        let mut tta_log = Vec::new();
        let mut tta_skipped = None;
        if flags.tta {
            match adapt_episode(self, episode, flags, tta, rng) {
                Ok(adapted) => {
                    dam = adapted.dam;
                    thresholds = adapted.thresholds;
                    tta_log = adapted.log;
                    counts.add(&adapted.counts);
                }
                Err(DarnetError::DegenerateEpisode(msg)) => tta_skipped = Some(msg),
                Err(e) => return Err(e),
            }
        }
        let (queries, c) = self.predict_with_params(
            episode,
            flags,
            &dam,
            &thresholds,
            tta.fuse_weights_test,
            rng,
        )?;
        counts.add(&c);
        Ok(EpisodePrediction {
            queries,
            counts,
            tta_log,
            tta_skipped,
        })
    }

    /// Inference with explicit DAM/threshold parameters (no adaptation).
    pub fn predict_with_params<R: Rng + ?Sized>(
        &self,
        episode: &Episode,
        flags: AblationFlags,
        dam: &DamParams,
        thresholds: &ThresholdState,
        fuse_weights: (f64, f64),
        rng: &mut R,
    ) -> Result<(Vec<QueryPrediction>, CallCounts)> {
        let mut counts = CallCounts::default();
        let images: Vec<_> = episode.support.iter().map(|r| &r.image).collect();
        let masks: Vec<_> = episode.support.iter().map(|r| &r.mask).collect();
        let support = self.support_features(&images, &masks, rng, &mut counts)?;
        let mut queries = Vec::with_capacity(episode.query.len());
        for q in &episode.query {
            let fq = self.features(&q.image, rng)?;
            counts.extractor_passes += 1;
            let b1 = branch1_forward(&support.features, &support.masks, &fq, &self.matching)?;
            counts.branch1_passes += 1;
            let first = if flags.sm {
                b1.m1.clone()
            } else {
                b1.m0.clone()
            };
            let (prediction, m2, trace) = if flags.branch2() {
                let b2 =
                    self.branch2_forward(dam, thresholds, &support, &fq, flags.arsm, &mut counts)?;
                let fused = fuse_predictions(&first, &b2.m2, fuse_weights.0, fuse_weights.1)?;
                (fused, Some(b2.m2), b2.refine.map(|r| r.trace))
            } else {
                (first, None, None)
            };
            queries.push(QueryPrediction {
                prediction,
                m0: b1.m0,
                m1: b1.m1,
                m2,
                trace,
            });
        }
        Ok((queries, counts))
    }
}
