use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fuse_predictions;
use crate::arsm::refine_loop;
use crate::backbone::{CsdConfig, ExtractorGrads, Mode};
use crate::episode_store::Episode;
use crate::error::{DarnetError, Result};
use crate::eval_harness::{episode_seed, EpisodeSource};
use crate::feature::FeatureMap;
use crate::losses::{bce_grad, bce_loss, LossReport, LossWeights};
use crate::model::DarnetModel;
use crate::optim::{AdamConfig, Optimizer, OptimizerKind};
use crate::prototype_matching::grad::{
    blend_coefficients, head_backward, pool_backward, support_prototype_backward,
};
use crate::prototype_matching::{
    blend_prototypes, build_query_prototype, downsample_mask, predict_confidence,
    support_prototype, threshold_filter, Label,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Episodes whose gradients are summed per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub use_csd: bool,
    pub csd: CsdConfig,
    pub loss: LossWeights,
    pub fuse_weights_train: (f64, f64),
    pub k_shot: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            use_csd: true,
            csd: CsdConfig::default(),
            loss: LossWeights::default(),
            fuse_weights_train: (0.7, 0.3),
            k_shot: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.k_shot == 0 {
            return Err(DarnetError::InvalidConfig(
                "batch_size and k_shot must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DarnetError::InvalidConfig(
                "training learning_rate must be positive".into(),
            ));
        }
        self.csd.validate()
    }
}

/// A training episode with the seed that drives its CSD draws.
#[derive(Debug, Clone)]
pub struct TrainEpisode {
    pub seed: u64,
    pub episode: Episode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub seeds: Vec<u64>,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l_train: f64,
    /// BCE of the train-weighted fusion of both branches; logged, not optimized.
    pub l_fused: f64,
    pub skipped: usize,
}

/// L_train for one episode and its gradient on the extractor parameters.
///
/// The report's terms are averages over queries; `l_fused` is stored in
/// `l_bce`. The CSD gate and coefficients are drawn from `rng` when
/// `cfg.use_csd` is set and the extractor is in train mode.
pub fn train_loss_and_grad<R: rand::Rng + ?Sized>(
    model: &DarnetModel,
    episode: &Episode,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossReport, ExtractorGrads)> {
    let csd = cfg.use_csd.then_some(&cfg.csd);
    let ex = &model.extractor;
    let w = &cfg.loss;
    let t = model.matching.temperature;

    let mut fs = Vec::new();
    let mut caches = Vec::new();
    let mut ms = Vec::new();
    for s in &episode.support {
        let (f, c) = ex.forward_train(&s.image, csd, rng)?;
        ms.push(downsample_mask(s.mask.view(), f.height(), f.width()));
        fs.push(f);
        caches.push(c);
    }
    let shots: Vec<(&FeatureMap, _)> = fs.iter().zip(&ms).map(|(f, m)| (f, m.view())).collect();
    let ps = support_prototype(&shots)?;
    if !ps.is_complete() {
        return Err(DarnetError::DegenerateEpisode(
            "support lacks foreground or background".into(),
        ));
    }
    let c = ps.channels();
    let (mut dps_fg, mut dps_bg) = (Array1::zeros(c), Array1::zeros(c));
    let mut dfs: Vec<Array3<f64>> = fs.iter().map(|f| Array3::zeros(f.data().dim())).collect();
    let mut grads = ex.zero_grads();
    let mut report = LossReport {
        weights: *w,
        ..LossReport::default()
    };

    let k = fs.len() as f64;
    for (i, f) in fs.iter().enumerate() {
        let pred = predict_confidence(&ps, f, t)?;
        report.l3 += bce_loss(&pred, ms[i].view())? / k;
        let g = bce_grad(&pred, ms[i].view())? * (w.l3 / k);
        let hg = head_backward(&ps, f, &pred, &g, t);
        dps_fg += &hg.fg;
        dps_bg += &hg.bg;
        dfs[i] += &hg.df;
    }

    let nq = episode.query.len().max(1) as f64;
    for q in &episode.query {
        let (fq, cq) = ex.forward_train(&q.image, csd, rng)?;
        let mq = downsample_mask(q.mask.view(), fq.height(), fq.width());
        let mut dfq = Array3::zeros(fq.data().dim());

        let m0 = predict_confidence(&ps, &fq, t)?;
        report.l1 += bce_loss(&m0, mq.view())? / nq;
        let g0 = bce_grad(&m0, mq.view())? * (w.l1 / nq);
        let hg = head_backward(&ps, &fq, &m0, &g0, t);
        dps_fg += &hg.fg;
        dps_bg += &hg.bg;
        dfq += &hg.df;

        let tm = threshold_filter(&m0, model.matching.tau_fg, model.matching.tau_bg);
        let m1 = match build_query_prototype(&fq, &tm) {
            Ok(pq) => {
                let (alpha, beta) = (model.matching.alpha, model.matching.beta);
                let blended = blend_prototypes(&ps, &pq, alpha, beta)?;
                let m1 = predict_confidence(&blended, &fq, t)?;
                let g1 = bce_grad(&m1, mq.view())? * (w.l2 / nq);
                let hg = head_backward(&blended, &fq, &m1, &g1, t);
                let (sf, qf) = blend_coefficients(ps.fg_valid(), pq.fg_valid(), alpha, beta);
                let (sb, qb) = blend_coefficients(ps.bg_valid(), pq.bg_valid(), alpha, beta);
                dps_fg.scaled_add(sf, &hg.fg);
                dps_bg.scaled_add(sb, &hg.bg);
                pool_backward(
                    &(&hg.fg * qf),
                    tm.indicator(Label::Fg).view(),
                    pq.fg_count,
                    &mut dfq,
                );
                pool_backward(
                    &(&hg.bg * qb),
                    tm.indicator(Label::Bg).view(),
                    pq.bg_count,
                    &mut dfq,
                );
                dfq += &hg.df;
                m1
            }
            Err(DarnetError::DegenerateEpisode(_)) => {
                let g1 = bce_grad(&m0, mq.view())? * (w.l2 / nq);
                let hg = head_backward(&ps, &fq, &m0, &g1, t);
                dps_fg += &hg.fg;
                dps_bg += &hg.bg;
                dfq += &hg.df;
                m0.clone()
            }
            Err(e) => return Err(e),
        };
        report.l2 += bce_loss(&m1, mq.view())? / nq;

        // The DAM is not trained on the source domain; the fused output is
        // only monitored.
        let refined = refine_loop(&fq, &ps, &model.thresholds, &model.refine)?;
        let (a, b) = cfg.fuse_weights_train;
        let fused = fuse_predictions(&m1, &refined.m2, a, b)?;
        report.l_bce += bce_loss(&fused, mq.view())? / nq;

        grads.accumulate(&ex.backward(&cq, &dfq));
    }

    for (i, d) in support_prototype_backward(&shots, &dps_fg, &dps_bg)
        .into_iter()
        .enumerate()
    {
        dfs[i] += &d;
    }
    for (cache, d) in caches.iter().zip(&dfs) {
        grads.accumulate(&ex.backward(cache, d));
    }
    report.l_train = w.l1 * report.l1 + w.l2 * report.l2 + w.l3 * report.l3;
    Ok((report, grads))
}

/// Trains the extractor on a stream of episodes, `cfg.batch_size` per step.
///
/// Gradients within a batch are computed in parallel and summed in episode
/// order, so results do not depend on the thread count. Degenerate episodes
/// are skipped; a non-finite loss aborts with the offending seed.
pub fn train_epoch<I>(
    model: &mut DarnetModel,
    episodes: I,
    cfg: &TrainConfig,
    optimizer: &mut Optimizer,
) -> Result<Vec<TrainLogEntry>>
where
    I: IntoIterator<Item = TrainEpisode>,
{
    cfg.validate()?;
    model.extractor.set_mode(Mode::Train);
    let result = train_inner(model, episodes, cfg, optimizer);
    model.extractor.set_mode(Mode::Eval);
    result
}

fn train_inner<I>(
    model: &mut DarnetModel,
    episodes: I,
    cfg: &TrainConfig,
    optimizer: &mut Optimizer,
) -> Result<Vec<TrainLogEntry>>
where
    I: IntoIterator<Item = TrainEpisode>,
{
    let mut log = Vec::new();
    let mut iter = episodes.into_iter().peekable();
    let mut step = optimizer.steps();
    while iter.peek().is_some() {
        let batch: Vec<TrainEpisode> = iter.by_ref().take(cfg.batch_size).collect();
        let frozen: &DarnetModel = model;
        let results: Vec<Result<(LossReport, ExtractorGrads)>> = batch
            .par_iter()
            .map(|te| {
                let mut rng = ChaCha8Rng::seed_from_u64(te.seed);
                train_loss_and_grad(frozen, &te.episode, cfg, &mut rng)
            })
            .collect();

        let mut total = model.extractor.zero_grads();
        let mut entry = TrainLogEntry {
            step,
            seeds: batch.iter().map(|e| e.seed).collect(),
            l1: 0.0,
            l2: 0.0,
            l3: 0.0,
            l_train: 0.0,
            l_fused: 0.0,
            skipped: 0,
        };
        let mut used = 0usize;
        for (te, r) in batch.iter().zip(results) {
            match r {
                Ok((rep, g)) => {
                    if !rep.l_train.is_finite() {
                        return Err(DarnetError::NonFiniteLoss {
                            step,
                            seed: te.seed,
                        });
                    }
                    total.accumulate(&g);
                    entry.l1 += rep.l1;
                    entry.l2 += rep.l2;
                    entry.l3 += rep.l3;
                    entry.l_train += rep.l_train;
                    entry.l_fused += rep.l_bce;
                    used += 1;
                }
                Err(DarnetError::DegenerateEpisode(_)) | Err(DarnetError::InvalidPrototype(_)) => {
                    entry.skipped += 1
                }
                Err(e) => return Err(e),
            }
        }
        if used > 0 {
            let n = used as f64;
            for v in [
                &mut entry.l1,
                &mut entry.l2,
                &mut entry.l3,
                &mut entry.l_train,
                &mut entry.l_fused,
            ] {
                *v /= n;
            }
            let scale = 1.0 / n;
            for g in &mut total.blocks {
                g.weight *= scale;
                g.bias *= scale;
            }
            let grads = total.flat();
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(DarnetError::NonFiniteLoss {
                    step,
                    seed: batch[0].seed,
                });
            }
            let mut params = model.extractor.params_mut();
            optimizer.step(&mut params, &grads);
        }
        log.push(entry);
        step += 1;
    }
    Ok(log)
}

/// Trains for `cfg.steps` optimizer steps on episodes drawn from `source`.
///
/// Episode `i` of the run is `source.episode(cfg.seed, i, ..)`, so a run is a
/// pure function of the configuration. `on_step` sees each log entry as soon
/// as its step finishes.
pub fn run_training<F>(
    model: &mut DarnetModel,
    source: EpisodeSource<'_>,
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<TrainLogEntry>>
where
    F: FnMut(&TrainLogEntry) -> Result<()>,
{
    cfg.validate()?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (step * cfg.batch_size..(step + 1) * cfg.batch_size)
            .map(|i| {
                Ok(TrainEpisode {
                    seed: episode_seed(cfg.seed ^ CSD_SEED_SALT, i),
                    episode: source.episode(cfg.seed, i, cfg.k_shot, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for entry in train_epoch(model, batch, cfg, &mut optimizer)? {
            on_step(&entry)?;
            log.push(entry);
        }
    }
    Ok(log)
}

const CSD_SEED_SALT: u64 = 0x00c5_d5ee_d000_0001;
