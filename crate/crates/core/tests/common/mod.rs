#![allow(dead_code)]

use darnet_core::arsm::{refine_loop, RefineConfig, StopReason, ThresholdState};
use darnet_core::dam::{dam_backward, dam_forward, init_dam, DamInit, DamParams};
use darnet_core::prototype_matching::{
    build_query_prototype, fg_bg_similarity, predict_confidence, self_match, threshold_filter,
    ConfidenceMap, Prototype,
};
use darnet_core::FeatureMap;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("data")
        .join(name)
}

pub fn normal_map<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> FeatureMap {
    let data = Array3::from_shape_fn((c, h, w), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    FeatureMap::new(data, 1).unwrap()
}

pub fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize, p: f64) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |_| u8::from(rng.random::<f64>() < p))
}

// ---- brute-force oracles ------------------------------------------------

pub fn pool_oracle(f: &FeatureMap, mask: &Array2<u8>) -> (Vec<f64>, usize) {
    let (c, h, w) = f.data().dim();
    let mut sum = vec![0.0; c];
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 0 {
                n += 1;
                for (k, s) in sum.iter_mut().enumerate() {
                    *s += f.data()[[k, y, x]];
                }
            }
        }
    }
    if n > 0 {
        for s in &mut sum {
            *s /= n as f64;
        }
    }
    (sum, n)
}

pub fn cosine_oracle(p: &Array1<f64>, f: &FeatureMap) -> Array2<f64> {
    let (c, h, w) = f.data().dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (mut dot, mut pp, mut ff) = (0.0, 0.0, 0.0);
        for k in 0..c {
            let v = f.data()[[k, y, x]];
            dot += p[k] * v;
            pp += p[k] * p[k];
            ff += v * v;
        }
        dot / (pp.sqrt() * ff.sqrt() + 1e-8)
    })
}

pub fn iou_oracle(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b.iter()) {
        let (x, y) = (*x != 0, *y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Weighted BCE with weights `1 + alpha·A`, for predictions away from 0 and 1.
pub fn attention_loss_oracle(
    fg: &Array2<f64>,
    gt: &Array2<u8>,
    att: &Array2<f64>,
    alpha: f64,
) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for ((&p, &m), &a) in fg.iter().zip(gt.iter()).zip(att.iter()) {
        let bce = if m != 0 { -p.ln() } else { -(1.0 - p).ln() };
        let w = 1.0 + alpha * a;
        num += w * bce;
        den += w;
    }
    num / den
}

// ---- DAM gradient check -------------------------------------------------

/// Largest relative error between `dam_backward` and central differences of
/// `Σ upstream ⊙ dam_forward` over every DAM parameter.
pub fn dam_gradcheck(seed: u64, channels: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal_map(&mut rng, channels, 5, 6);
    let dam = init_dam(channels, 3, DamInit::Random, seed).unwrap();
    let upstream = Array3::from_shape_fn((channels, 5, 6), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let objective = |p: &DamParams| (dam_forward(&x, p).unwrap().data() * &upstream).sum();
    let grads = dam_backward(&x, &dam, &upstream).unwrap();
    let analytic = grads.flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (group, values) in analytic.iter().enumerate() {
        for (i, &a) in values.iter().enumerate() {
            let mut plus = dam.clone();
            plus.params_mut()[group][i] += h;
            let mut minus = dam.clone();
            minus.params_mut()[group][i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let scale = a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max((a - fd).abs() / scale);
        }
    }
    worst
}

// ---- constructed refinement cases --------------------------------------

pub struct RefineCase {
    pub seed: u64,
    pub features: FeatureMap,
    pub support: Prototype,
    pub cfg: RefineConfig,
    pub state: ThresholdState,
    /// Stage-1 prediction recomputed independently of the refine loop.
    pub stage1: ConfidenceMap,
    pub fb: (f64, f64),
}

/// Query features with a compact foreground, a background, and a band of
/// ambiguous pixels that the looser stage-2 background threshold admits,
/// which drags the background prototype towards the foreground.
fn ambiguous_scene(seed: u64) -> (FeatureMap, Prototype) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 6;
    let fg: Array1<f64> = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
    let bg: Array1<f64> = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
    let mix = rng.random_range(0.3..0.5);
    let noise = rng.random_range(0.05..0.25);
    let data = Array3::from_shape_fn((c, 8, 8), |(k, y, x)| {
        let r2 = (x as i32 - 3).pow(2) + (y as i32 - 3).pow(2);
        let base = if r2 <= 4 {
            fg[k]
        } else if r2 <= 9 {
            mix * fg[k] + (1.0 - mix) * bg[k]
        } else {
            bg[k]
        };
        base + noise * rng.random_range(-1.0..1.0)
    });
    (FeatureMap::new(data, 1).unwrap(), Prototype::new(fg, bg))
}

/// First `n` scenes whose independently recomputed FB_q does not decrease
/// from stage 1 to stage 2.
pub fn non_monotone_cases(n: usize) -> Vec<RefineCase> {
    let cfg = RefineConfig {
        fixed_delta: Some(0.0),
        ..RefineConfig::default()
    };
    let state = ThresholdState::default();
    let mut out = Vec::new();
    for seed in 0.. {
        if out.len() == n {
            break;
        }
        assert!(seed < 100_000, "could not construct enough cases");
        let (f, ps) = ambiguous_scene(seed);
        let t = cfg.temperature;
        let m_pre = predict_confidence(&ps, &f, t).unwrap();
        let stage = |src: &ConfidenceMap, tf: f64, tb: f64| {
            let pq = build_query_prototype(&f, &threshold_filter(src, tf, tb)).ok()?;
            if !pq.is_complete() {
                return None;
            }
            let pred = self_match(&ps, &pq, &f, cfg.alpha, cfg.beta, t).unwrap();
            Some((pred, fg_bg_similarity(&pq).unwrap()))
        };
        let Some((m1, fb1)) = stage(&m_pre, 0.8, 0.6) else {
            continue;
        };
        let Some((_, fb2)) = stage(&m1, 0.85, 0.55) else {
            continue;
        };
        if fb2 >= fb1 {
            out.push(RefineCase {
                seed,
                features: f,
                support: ps,
                cfg,
                state,
                stage1: m1,
                fb: (fb1, fb2),
            });
        }
    }
    out
}

/// Whether the refine loop returned the stage-1 prediction for a case.
pub fn refine_case_holds(case: &RefineCase) -> Result<(), String> {
    let out = refine_loop(&case.features, &case.support, &case.state, &case.cfg)
        .map_err(|e| e.to_string())?;
    if out.trace.stop_reason != StopReason::FbNotDecreasing {
        return Err(format!(
            "seed {}: stop reason {:?}",
            case.seed, out.trace.stop_reason
        ));
    }
    if out.trace.accepted_stage != Some(0) {
        return Err(format!(
            "seed {}: accepted stage {:?}",
            case.seed, out.trace.accepted_stage
        ));
    }
    if out.m2 != case.stage1 {
        return Err(format!("seed {}: output differs from stage 1", case.seed));
    }
    Ok(())
}
