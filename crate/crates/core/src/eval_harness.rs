//! mIoU benchmarking over seeded runs, per-episode records and overlays.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arsm::RefineTrace;
use crate::episode_store::{
    generate_synthetic_episode, sample_episode, Dataset, Episode, LabeledImage, SyntheticSpec,
};
use crate::error::{DarnetError, Result};
use crate::model::{AblationFlags, CallCounts, DarnetModel};
use crate::prototype_matching::ConfidenceMap;
use crate::tta_driver::{TtaConfig, TtaLogEntry};

/// Episodes evaluated in parallel before results are handed out in order.
const CHUNK: usize = 32;

pub fn iou(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(DarnetError::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    });
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Foreground wherever it beats background; ties go to background.
pub fn binarize(cm: &ConfidenceMap) -> Array2<u8> {
    Zip::from(&cm.fg)
        .and(&cm.bg)
        .map_collect(|&f, &b| u8::from(f > b))
}

/// Bilinear upsampling of a feature-resolution prediction.
pub fn upsample_prediction(cm: &ConfidenceMap, h: usize, w: usize) -> ConfidenceMap {
    if cm.dim() == (h, w) {
        return cm.clone();
    }
    let fg = crate::episode_store::bilinear2(&cm.fg, h, w).mapv(|v| v.clamp(0.0, 1.0));
    ConfidenceMap::from_fg(fg)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Stable 64-bit FNV-1a digest, hex encoded.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Per-episode seed derived from the run seed and the episode index.
pub fn episode_seed(run_seed: u64, index: usize) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(run_seed ^ splitmix(index as u64))
}

/// Run-length encoding of a binary mask in row-major order, starting with
/// a (possibly empty) run of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<usize>,
}

impl MaskRle {
    pub fn encode(mask: &Array2<u8>) -> Self {
        let (height, width) = mask.dim();
        let mut runs = Vec::new();
        let mut current = 0u8;
        let mut len = 0usize;
        for &v in mask.iter() {
            let v = u8::from(v != 0);
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        Self {
            height,
            width,
            runs,
        }
    }

    pub fn decode(&self) -> Array2<u8> {
        let mut flat = Vec::with_capacity(self.height * self.width);
        for (i, &r) in self.runs.iter().enumerate() {
            flat.extend(std::iter::repeat_n((i % 2) as u8, r));
        }
        flat.resize(self.height * self.width, 0);
        Array2::from_shape_vec((self.height, self.width), flat).expect("rle size")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: String,
    pub run: usize,
    pub index: usize,
    pub seed: u64,
    /// One IoU per query, at image resolution.
    pub ious: Vec<f64>,
    pub mean_iou: Option<f64>,
    pub predictions: Vec<MaskRle>,
    pub traces: Vec<Option<RefineTrace>>,
    pub counts: CallCounts,
    pub tta_skipped: Option<String>,
    pub error: Option<String>,
    pub elapsed_ms: f64,
    /// Adaptation trace; written to its own stream rather than with the record.
    #[serde(skip)]
    pub tta_log: Vec<TtaLogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub flags: String,
    pub config_fingerprint: String,
    pub tasks: usize,
    pub k_shot: usize,
    pub seeds: Vec<u64>,
    pub per_run_miou: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Episodes that failed and are excluded from the mean, per run.
    pub failed_episodes: Vec<usize>,
    /// Episodes where TTA was requested but skipped, per run.
    pub tta_skipped: Vec<usize>,
}

/// Where benchmark episodes come from.
#[derive(Debug, Clone, Copy)]
pub enum EpisodeSource<'a> {
    Synthetic(&'a SyntheticSpec),
    Dataset(&'a Dataset),
}

impl EpisodeSource<'_> {
    /// Deterministic episode for `(seed, index)`.
    pub fn episode(
        &self,
        seed: u64,
        index: usize,
        k_shot: usize,
        queries: usize,
    ) -> Result<Episode> {
        let s = episode_seed(seed, index);
        match self {
            EpisodeSource::Synthetic(spec) => {
                let spec = SyntheticSpec {
                    seed: s,
                    ..(*spec).clone()
                };
                generate_synthetic_episode(&spec, k_shot, queries)
            }
            EpisodeSource::Dataset(ds) => {
                sample_episode(ds, k_shot, queries, &mut ChaCha8Rng::seed_from_u64(s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub tasks: usize,
    pub seeds: Vec<u64>,
    pub flags: AblationFlags,
    pub k_shot: usize,
    pub queries: usize,
    /// Recorded in the report; callers hash their full configuration.
    pub fingerprint: String,
}

/// Evaluates one episode end to end. Errors are captured in the record.
pub fn evaluate_episode(
    model: &DarnetModel,
    episode: &Episode,
    flags: AblationFlags,
    tta: &TtaConfig,
    seed: u64,
) -> EpisodeResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut result = EpisodeResult {
        episode_id: String::new(),
        run: 0,
        index: 0,
        seed,
        ious: Vec::new(),
        mean_iou: None,
        predictions: Vec::new(),
        traces: Vec::new(),
        counts: CallCounts::default(),
        tta_skipped: None,
        error: None,
        elapsed_ms: 0.0,
        tta_log: Vec::new(),
    };
    match model.predict_episode(episode, flags, tta, &mut rng) {
        Ok(pred) => {
            for (q, qp) in episode.query.iter().zip(&pred.queries) {
                let up = upsample_prediction(&qp.prediction, q.height(), q.width());
                let mask = binarize(&up);
                result
                    .ious
                    .push(iou(mask.view(), q.mask.view()).expect("same size"));
                result.predictions.push(MaskRle::encode(&mask));
                result.traces.push(qp.trace.clone());
            }
            let (m, _) = mean_std(&result.ious);
            result.mean_iou = Some(m);
            result.counts = pred.counts;
            result.tta_skipped = pred.tta_skipped;
            result.tta_log = pred.tta_log;
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    result
}

/// Runs `seeds.len()` runs of `tasks` episodes each. `on_episode` receives
/// every record in (run, index) order as soon as its chunk completes.
pub fn run_benchmark<F>(
    model: &DarnetModel,
    source: EpisodeSource<'_>,
    cfg: &BenchmarkConfig,
    tta: &TtaConfig,
    mut on_episode: F,
) -> Result<RunReport>
where
    F: FnMut(&EpisodeResult) -> Result<()>,
{
    if cfg.seeds.is_empty() {
        return Err(DarnetError::InvalidConfig(
            "benchmark needs at least one seed".into(),
        ));
    }
    tta.validate()?;
    let mut per_run = Vec::with_capacity(cfg.seeds.len());
    let mut failed = Vec::with_capacity(cfg.seeds.len());
    let mut skipped = Vec::with_capacity(cfg.seeds.len());
    for (run, &seed) in cfg.seeds.iter().enumerate() {
        let (mut sum, mut n, mut fails, mut skips) = (0.0, 0usize, 0usize, 0usize);
        for chunk_start in (0..cfg.tasks).step_by(CHUNK) {
            let indices: Vec<usize> = (chunk_start..(chunk_start + CHUNK).min(cfg.tasks)).collect();
            let results: Vec<EpisodeResult> = indices
                .par_iter()
                .map(|&index| {
                    let ep_seed = episode_seed(seed, index);
                    let mut r = match source.episode(seed, index, cfg.k_shot, cfg.queries) {
                        Ok(ep) => evaluate_episode(model, &ep, cfg.flags, tta, ep_seed),
                        Err(e) => EpisodeResult {
                            episode_id: String::new(),
                            run,
                            index,
                            seed: ep_seed,
                            ious: Vec::new(),
                            mean_iou: None,
                            predictions: Vec::new(),
                            traces: Vec::new(),
                            counts: CallCounts::default(),
                            tta_skipped: None,
                            error: Some(e.to_string()),
                            elapsed_ms: 0.0,
                            tta_log: Vec::new(),
                        },
                    };
                    r.episode_id = format!("{seed}:{index}");
                    for entry in &mut r.tta_log {
                        entry.episode_id = r.episode_id.clone();
                    }
                    r.run = run;
                    r.index = index;
                    r
                })
                .collect();
            for r in &results {
                match r.mean_iou {
                    Some(m) => {
                        sum += m;
                        n += 1;
                    }
                    None => fails += 1,
                }
                skips += usize::from(r.tta_skipped.is_some());
                on_episode(r)?;
            }
        }
        per_run.push(if n > 0 { sum / n as f64 } else { 0.0 });
        failed.push(fails);
        skipped.push(skips);
    }
    let (mean, std) = mean_std(&per_run);
    Ok(RunReport {
        flags: cfg.flags.to_string(),
        config_fingerprint: cfg.fingerprint.clone(),
        tasks: cfg.tasks,
        k_shot: cfg.k_shot,
        seeds: cfg.seeds.clone(),
        per_run_miou: per_run,
        mean,
        std,
        failed_episodes: failed,
        tta_skipped: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlayColor {
    /// Support labels.
    Blue,
    /// Predictions and query labels.
    Red,
}

impl OverlayColor {
    fn rgb(self) -> [f64; 3] {
        match self {
            OverlayColor::Blue => [0.0, 0.0, 1.0],
            OverlayColor::Red => [1.0, 0.0, 0.0],
        }
    }
}

/// Blended overlay pixels (0.5·image + 0.5·colour on the mask), as 8-bit RGB.
pub fn overlay_pixels(
    img: &LabeledImage,
    mask: &Array2<u8>,
    color: OverlayColor,
) -> Result<image::RgbImage> {
    if mask.dim() != (img.height(), img.width()) {
        return Err(DarnetError::ShapeMismatch(format!(
            "overlay mask {:?} vs image {}x{}",
            mask.dim(),
            img.height(),
            img.width()
        )));
    }
    let c = color.rgb();
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(image::RgbImage::from_fn(
        img.width() as u32,
        img.height() as u32,
        |x, y| {
            let (y, x) = (y as usize, x as usize);
            let on = mask[[y, x]] != 0;
            image::Rgb(std::array::from_fn(|ch| {
                let v = img.image[[y, x, ch]];
                to_u8(if on { 0.5 * v + 0.5 * c[ch] } else { v })
            }))
        },
    ))
}

pub fn render_overlay(
    img: &LabeledImage,
    mask: &Array2<u8>,
    color: OverlayColor,
    out_path: &Path,
) -> Result<()> {
    overlay_pixels(img, mask, color)?
        .save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| DarnetError::Image {
            path: out_path.to_path_buf(),
            message: e.to_string(),
        })
}
