//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

mod common;

use common::*;
use darnet_core::arsm::{adaptive_delta, DELTA_SCALE};
use darnet_core::backbone::{
    channel_stats, csd_apply, csd_perturb, CsdCoefficients, CsdConfig, ExtractorConfig, Mode,
};
use darnet_core::config::Config;
use darnet_core::dam::DamInit;
use darnet_core::episode_store::{generate_synthetic_episode, SyntheticSpec};
use darnet_core::eval_harness::{
    binarize, episode_seed, iou, mean_std, run_benchmark, upsample_prediction, EpisodeSource,
};
use darnet_core::losses::attention_loss;
use darnet_core::model::{AblationFlags, DarnetModel};
use darnet_core::prototype_matching::{
    cosine_map, masked_average_pool, predict_confidence, self_match, threshold_filter,
    ConfidenceMap, Label, Prototype,
};
use darnet_core::tta_driver::{fuse_predictions, run_tta_episode, run_training, ModelSnapshot, TtaConfig};
use darnet_core::FeatureMap;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::process::Command;
use std::time::{Duration, Instant};

const ORACLE_TOL: f64 = 1e-6;
const NORM_TOL: f64 = 1e-6;
const CSD_IDENTITY_TOL: f64 = 1e-5;
const CSD_STATS_REL_TOL: f64 = 1e-3;
const DELTA_EXAMPLE_TOL: f64 = 1e-12;
const GRADCHECK_TOL: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(limit_s: u64, elapsed: Duration) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

#[derive(Default)]
struct Shared {
    csd_model: Option<DarnetModel>,
}

// 1 -------------------------------------------------------------------------
fn oracle_equivalence(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let c = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let f = normal_map(&mut rng, c, h, w);
        let mask = random_mask(&mut rng, h, w, 0.5);

        let (pool, n) = masked_average_pool(&f, mask.view()).unwrap();
        let (want, wn) = pool_oracle(&f, &mask);
        if n != wn {
            return outcome(false, format!("pool count {n} vs {wn}"));
        }
        for (a, b) in pool.iter().zip(&want) {
            worst[0] = worst[0].max((a - b).abs());
        }

        let p = Array1::from_shape_fn(c, |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let cos = cosine_map(&p, &f).unwrap();
        for (a, b) in cos.iter().zip(cosine_oracle(&p, &f).iter()) {
            worst[1] = worst[1].max((a - b).abs());
        }

        let other = random_mask(&mut rng, h, w, 0.5);
        worst[2] = worst[2].max((iou(mask.view(), other.view()).unwrap() - iou_oracle(&mask, &other)).abs());

        let fg = Array2::from_shape_fn((h, w), |_| rng.random_range(0.01..0.99));
        let att = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0));
        let alpha = rng.random_range(0.0..3.0);
        let cm = ConfidenceMap::from_fg(fg.clone());
        let got = attention_loss(&cm, mask.view(), att.view(), alpha).unwrap();
        worst[3] = worst[3].max((got - attention_loss_oracle(&fg, &mask, &att, alpha)).abs());
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        max <= ORACLE_TOL && within(10, t.elapsed()),
        format!(
            "max |err| pool {:.1e} cosine {:.1e} iou {:.1e} attention {:.1e} (tol {ORACLE_TOL:.0e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// 2 -------------------------------------------------------------------------
fn small_model(seed: u64) -> DarnetModel {
    DarnetModel::new(
        ExtractorConfig {
            widths: vec![8, 8],
            strides: vec![2, 1],
            final_relu: false,
            seed,
        },
        3,
        DamInit::Random,
    )
    .unwrap()
}

fn partition_ok(cm: &ConfidenceMap, tf: f64, tb: f64) -> bool {
    let tm = threshold_filter(cm, tf, tb);
    let total = tm.count(Label::Fg) + tm.count(Label::Bg) + tm.count(Label::Lost);
    total == cm.fg.len()
        && tm.labels.indexed_iter().all(|(ix, l)| {
            let (f, b) = (cm.fg[ix], cm.bg[ix]);
            match l {
                Label::Fg => f > tf && (b <= tb || f > b),
                Label::Bg => b > tb && (f <= tf || b >= f),
                Label::Lost => f <= tf && b <= tb,
            }
        })
}

fn normalization_suite(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut maps = 0usize;
    let mut partitions = 0usize;
    let mut check = |cm: &ConfidenceMap, rng: &mut ChaCha8Rng, worst: &mut f64| -> bool {
        maps += 1;
        *worst = worst.max(cm.normalization_error());
        let tf = rng.random_range(0.0..1.0);
        let tb = rng.random_range(0.0..1.0);
        partitions += 1;
        partition_ok(cm, tf, tb)
    };
    let tta = TtaConfig {
        iterations: 2,
        ..TtaConfig::default()
    };
    for trial in 0..1000u64 {
        let c = rng.random_range(2..=8);
        let f = normal_map(&mut rng, c, 6, 7);
        let ps = Prototype::new(
            Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0)),
            Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0)),
        );
        let temp = rng.random_range(1.0..40.0);
        let m0 = predict_confidence(&ps, &f, temp).unwrap();
        let pq = Prototype::new(
            Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0)),
            Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0)),
        );
        let m1 = self_match(&ps, &pq, &f, rng.random(), rng.random::<f64>() + 0.01, temp).unwrap();
        let fused = fuse_predictions(&m0, &m1, rng.random(), rng.random::<f64>() + 0.01).unwrap();
        let up = upsample_prediction(&fused, 13, 11);
        let mut ok = true;
        for cm in [&m0, &m1, &fused, &up] {
            ok &= check(cm, &mut rng, &mut worst);
        }
        let refined = darnet_core::arsm::refine_loop(
            &f,
            &ps,
            &Default::default(),
            &Default::default(),
        )
        .unwrap();
        ok &= check(&refined.m2, &mut rng, &mut worst);
        for cm in &refined.stage_predictions {
            ok &= check(cm, &mut rng, &mut worst);
        }
        if trial % 10 == 0 {
            let model = small_model(trial);
            let spec = SyntheticSpec {
                canvas_size: 16,
                seed: trial,
                intra_class_jitter: 0.1,
                ..Default::default()
            };
            let ep = generate_synthetic_episode(&spec, 1 + (trial as usize / 10) % 2, 1).unwrap();
            let flags: AblationFlags = if trial % 50 == 0 { "sm,arsm,tta" } else { "sm,arsm" }
                .parse()
                .unwrap();
            let pred = model
                .predict_episode(&ep, flags, &tta, &mut ChaCha8Rng::seed_from_u64(trial))
                .unwrap();
            for q in &pred.queries {
                for cm in [Some(&q.m0), Some(&q.m1), q.m2.as_ref(), Some(&q.prediction)]
                    .into_iter()
                    .flatten()
                {
                    ok &= check(cm, &mut rng, &mut worst);
                }
            }
        }
        if !ok {
            return outcome(false, format!("threshold_filter partition broken in trial {trial}"));
        }
    }
    outcome(
        worst <= NORM_TOL && within(30, t.elapsed()),
        format!(
            "{maps} maps, max |fg+bg-1| {worst:.1e} (tol {NORM_TOL:.0e}); {partitions} partitions exact; {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

// 3 -------------------------------------------------------------------------
fn offset_map<R: Rng>(rng: &mut R, c: usize) -> FeatureMap {
    let mut f = normal_map(rng, c, 7, 9);
    for k in 0..c {
        let mu = rng.random_range(1.0..5.0) * if rng.random() { 1.0 } else { -1.0 };
        let s = rng.random_range(0.5..2.0);
        let mut d = f.data().clone();
        d.index_axis_mut(ndarray::Axis(0), k).mapv_inplace(|v| mu + s * v);
        f = FeatureMap::new(d, 1).unwrap();
    }
    f
}

fn population_stats(f: &FeatureMap, k: usize) -> (f64, f64) {
    let ch = f.data().index_axis(ndarray::Axis(0), k);
    let n = ch.len() as f64;
    let mu = ch.sum() / n;
    let var = ch.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    (mu, var.sqrt())
}

fn csd_laws(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut id_err, mut stat_err) = (0.0f64, 0.0f64);
    let mut bitwise = true;
    for _ in 0..100 {
        let c = rng.random_range(1..=8);
        let x = offset_map(&mut rng, c);
        let same = csd_apply(&x, &CsdCoefficients::uniform(c, 1.0, 1.0)).unwrap();
        for (a, b) in same.data().iter().zip(x.data().iter()) {
            id_err = id_err.max((a - b).abs());
        }
        let coeffs = CsdCoefficients {
            scale: Array1::from_shape_fn(c, |_| rng.random_range(-3.0..3.0)),
            shift: Array1::from_shape_fn(c, |_| rng.random_range(-3.0..3.0)),
        };
        let y = csd_apply(&x, &coeffs).unwrap();
        for k in 0..c {
            let (mu, sd) = population_stats(&x, k);
            let (ymu, ysd) = population_stats(&y, k);
            let want_sd = coeffs.scale[k].abs() * sd;
            let want_mu = coeffs.shift[k] * mu;
            stat_err = stat_err
                .max((ysd - want_sd).abs() / want_sd.abs().max(1e-12))
                .max((ymu - want_mu).abs() / want_mu.abs().max(1e-12));
        }
        let cfg = CsdConfig {
            apply_probability: 0.0,
            ..CsdConfig::default()
        };
        let z = csd_perturb(&x, &cfg, Mode::Train, &mut rng).unwrap();
        bitwise &= z
            .data()
            .iter()
            .zip(x.data().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    // Cross-check the library's own channel statistics against the oracle.
    let x = offset_map(&mut rng, 4);
    let st = channel_stats(&x);
    let mu_ok = (0..4).all(|k| (st.mu[k] - population_stats(&x, k).0).abs() < 1e-9);
    outcome(
        id_err <= CSD_IDENTITY_TOL
            && stat_err <= CSD_STATS_REL_TOL
            && bitwise
            && mu_ok
            && within(10, t.elapsed()),
        format!(
            "identity {id_err:.1e} (tol {CSD_IDENTITY_TOL:.0e}), forced stats rel {stat_err:.1e} (tol {CSD_STATS_REL_TOL:.0e}), p=0 bitwise {bitwise}"
        ),
    )
}

// 4 -------------------------------------------------------------------------
fn delta_evaluation(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let d = adaptive_delta(0.8, 0.6, 10, 100, 1.0, 0.5).unwrap().delta;
    let oracle = |fq: f64, fs: f64, s: usize, u: usize, k: f64, l: f64| {
        let ratio = ((fq - fs) / fq).clamp(-1.0, 1.0);
        let raw = 0.2 * k * (l * ratio + (1.0 - l) * s as f64 / u as f64);
        raw.clamp(-0.2 * k, 0.2 * k)
    };
    let example = oracle(0.8, 0.6, 10, 100, 1.0, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut bound_ok, mut worst) = (true, 0.0f64);
    for _ in 0..10_000 {
        let fq = rng.random_range(-1.0..1.0);
        let fs = rng.random_range(-1.0..1.0);
        let u = rng.random_range(1..500);
        let s = rng.random_range(0..=u);
        let k = rng.random_range(1e-3..5.0);
        let l = rng.random_range(0.0..=1.0);
        let got = adaptive_delta(fq, fs, s, u, k, l).unwrap().delta;
        bound_ok &= got.abs() <= DELTA_SCALE * k + 1e-15;
        worst = worst.max((got - oracle(fq, fs, s, u, k, l)).abs());
    }
    outcome(
        (d - 0.035).abs() <= DELTA_EXAMPLE_TOL
            && (example - 0.035).abs() <= DELTA_EXAMPLE_TOL
            && bound_ok
            && worst <= 1e-12
            && within(5, t.elapsed()),
        format!("worked case δ = {d:.6} (want 0.035); |δ| ≤ 0.2κ on 10000 draws: {bound_ok}; max dev from oracle {worst:.1e}"),
    )
}

// 5 -------------------------------------------------------------------------
fn gradient_check(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let worst = (0..20).map(|s| dam_gradcheck(s, 8)).fold(0.0, f64::max);
    outcome(
        worst <= GRADCHECK_TOL && within(30, t.elapsed()),
        format!("20 seeds, C=8: max relative error {worst:.1e} (tol {GRADCHECK_TOL:.0e})"),
    )
}

// 6 -------------------------------------------------------------------------
fn param_bits(m: &DarnetModel) -> Vec<u64> {
    m.extractor
        .params()
        .iter()
        .flat_map(|p| p.iter().map(|v| v.to_bits()))
        .collect()
}

fn same_bits(a: &[darnet_core::model::QueryPrediction], b: &[darnet_core::model::QueryPrediction]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.prediction.fg.iter().zip(y.prediction.fg.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn algorithm_contracts(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let cfg = TtaConfig::default();
    let flags = AblationFlags::full();
    let mut failures = Vec::new();
    for i in 0..10u64 {
        let k = if i % 2 == 0 { 1 } else { 5 };
        let mut model = small_model(100 + i);
        let spec = SyntheticSpec {
            seed: 200 + i,
            intra_class_jitter: 0.08,
            ..Default::default()
        };
        let ep = generate_synthetic_episode(&spec, k, 1).unwrap();
        let before = param_bits(&model);
        let (pre, _) = model
            .predict_with_params(&ep, flags, &model.dam, &model.thresholds, cfg.fuse_weights_test, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let out = run_tta_episode(&model, &ep, &cfg, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
        if param_bits(&model) != before {
            failures.push(format!("episode {i}: extractor changed"));
        }
        let snap = ModelSnapshot::take(&model);
        model.dam = out.adapted.dam.clone();
        model.thresholds = out.adapted.thresholds;
        snap.restore(&mut model);
        let (post, _) = model
            .predict_with_params(&ep, flags, &model.dam, &model.thresholds, cfg.fuse_weights_test, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        if !same_bits(&pre, &post) {
            failures.push(format!("episode {i}: restore not bitwise"));
        }
        let c = &out.adapted.counts;
        let want_rounds = if k == 1 { 1 } else { 5 };
        if c.tta_rounds != want_rounds || c.optimizer_steps != want_rounds * cfg.iterations {
            failures.push(format!(
                "episode {i}: {} rounds / {} steps",
                c.tta_rounds, c.optimizer_steps
            ));
        }
        for r in 0..want_rounds {
            let n = out.adapted.log.iter().filter(|e| e.round == r).count();
            if n != cfg.iterations {
                failures.push(format!("episode {i}: round {r} ran {n} iterations"));
            }
        }
        if out.adapted.dam == snap.dam {
            failures.push(format!("episode {i}: adaptation did not move the DAM"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "10 episodes (5 one-shot, 5 five-shot): extractor frozen, restore bitwise, 10 steps per round, 5 leave-one-out rounds; {:.1}s",
                t.elapsed().as_secs_f64()
            )
        } else {
            failures.join("; ")
        },
    )
}

// 7 -------------------------------------------------------------------------
fn ablation_ladder(shared: &mut Shared) -> Outcome {
    let cfg = Config::load(fixture("ladder.toml")).unwrap();
    let train_t = Instant::now();
    let mut models = Vec::new();
    for csd in [false, true] {
        let mut m = cfg.build_model().unwrap();
        let mut tc = cfg.train_config();
        tc.use_csd = csd;
        run_training(&mut m, cfg.train_source(), &tc, |_| Ok(())).unwrap();
        models.push(m);
    }
    let train_s = train_t.elapsed();
    let eval_t = Instant::now();
    let rungs = [
        ("baseline", 0, "baseline"),
        ("+SM", 0, "sm"),
        ("+CSD", 1, "sm,csd"),
        ("+ARSM", 1, "sm,csd,arsm"),
        ("+TTA", 1, "sm,csd,arsm,tta"),
    ];
    let mut stats = Vec::new();
    for (_, mi, flags) in rungs {
        let b = cfg.benchmark(flags.parse().unwrap()).unwrap();
        let r = run_benchmark(
            &models[mi],
            EpisodeSource::Synthetic(&cfg.data.synthetic),
            &b,
            &cfg.tta,
            |_| Ok(()),
        )
        .unwrap();
        stats.push((r.mean, r.std));
    }
    let eval_s = eval_t.elapsed();
    let mut pass = within(600, train_s) && within(600, eval_s);
    let mut parts = vec![format!("{} {:.4}±{:.4}", rungs[0].0, stats[0].0, stats[0].1)];
    for i in 1..rungs.len() {
        let margin = stats[i].0 - stats[i - 1].0;
        let noise = stats[i].1.max(stats[i - 1].1);
        let ok = margin > noise;
        pass &= ok;
        parts.push(format!(
            "{} {:.4}±{:.4} ({:+.4}{})",
            rungs[i].0,
            stats[i].0,
            stats[i].1,
            margin,
            if ok { "" } else { " ✗" }
        ));
    }
    shared.csd_model = models.pop();
    outcome(
        pass,
        format!(
            "{}; train {:.0}s, eval {:.0}s",
            parts.join(" < "),
            train_s.as_secs_f64(),
            eval_s.as_secs_f64()
        ),
    )
}

// 8 -------------------------------------------------------------------------
fn adaptive_vs_fixed(shared: &mut Shared) -> Outcome {
    let cfg = Config::load(fixture("ladder.toml")).unwrap();
    let model = shared.csd_model.take().unwrap_or_else(|| {
        let mut m = cfg.build_model().unwrap();
        run_training(&mut m, cfg.train_source(), &cfg.train_config(), |_| Ok(())).unwrap();
        m
    });
    let flags: AblationFlags = "sm,csd,arsm".parse().unwrap();
    let variants: [(&str, Option<f64>); 6] = [
        ("adaptive", None),
        ("τ=0.8", Some(0.0)),
        ("+0.05", Some(0.05)),
        ("-0.05", Some(-0.05)),
        ("+0.10", Some(0.10)),
        ("-0.10", Some(-0.10)),
    ];
    let mut stats = Vec::new();
    for (_, fixed) in variants {
        let mut m = model.clone();
        m.refine.fixed_delta = fixed;
        let mut runs = Vec::new();
        for seed in 0..3u64 {
            let mut total = 0.0;
            for i in 0..200 {
                // Foreground/background similarity cycles so FB_q varies across the suite.
                let spec = SyntheticSpec {
                    seed: episode_seed(seed, i),
                    fg_bg_similarity: (i % 5) as f64 * 0.15,
                    ..cfg.data.synthetic.clone()
                };
                let ep = generate_synthetic_episode(&spec, 1, 1).unwrap();
                let p = m
                    .predict_episode(&ep, flags, &cfg.tta, &mut ChaCha8Rng::seed_from_u64(spec.seed))
                    .unwrap();
                let q = &ep.query[0];
                let b = binarize(&upsample_prediction(&p.queries[0].prediction, q.height(), q.width()));
                total += iou(b.view(), q.mask.view()).unwrap();
            }
            runs.push(total / 200.0);
        }
        stats.push(mean_std(&runs));
    }
    let (am, asd) = stats[0];
    let mut pass = true;
    let mut parts = vec![format!("adaptive {am:.4}±{asd:.4}")];
    for (i, (name, _)) in variants.iter().enumerate().skip(1) {
        let (m, s) = stats[i];
        let ok = am - m > asd.max(s);
        pass &= ok;
        parts.push(format!("{name} {m:.4}±{s:.4}{}", if ok { "" } else { " ✗" }));
    }
    outcome(pass, parts.join(", "))
}

// 9 -------------------------------------------------------------------------
fn refinement_stopping(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let cases = non_monotone_cases(50);
    let failures: Vec<String> = cases.iter().filter_map(|c| refine_case_holds(c).err()).collect();
    outcome(
        failures.is_empty() && within(60, t.elapsed()),
        if failures.is_empty() {
            format!("{}/50 constructed non-monotone cases return stage 1 with fb_not_decreasing", cases.len())
        } else {
            failures.join("; ")
        },
    )
}

// 10 ------------------------------------------------------------------------
fn cli_determinism(_: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let status = Command::new(env!("CARGO_BIN_EXE_darnet"))
            .arg("eval")
            .arg("--config")
            .arg(fixture("small.toml"))
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, String::from_utf8_lossy(&status.stderr).to_string());
        }
        reports.push(std::fs::read(out.join("report.json")).unwrap());
    }
    outcome(
        reports[0] == reports[1],
        format!("two `darnet eval` runs: report.json {} bytes, identical: {}", reports[0].len(), reports[0] == reports[1]),
    )
}

type Criterion = fn(&mut Shared) -> Outcome;

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("normalization suite", normalization_suite),
        ("CSD laws", csd_laws),
        ("threshold shift evaluation", delta_evaluation),
        ("DAM gradient check", gradient_check),
        ("adaptation loop contracts", algorithm_contracts),
        ("ablation ladder", ablation_ladder),
        ("adaptive vs fixed thresholds", adaptive_vs_fixed),
        ("refinement stopping", refinement_stopping),
        ("CLI determinism", cli_determinism),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut shared = Shared::default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = f(&mut shared);
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {n:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
