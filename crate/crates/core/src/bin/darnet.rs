use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use darnet_core::checkpoint::{load_checkpoint, save_checkpoint};
use darnet_core::config::Config;
use darnet_core::episode_store::{synthetic_dataset, SyntheticSpec};
use darnet_core::eval_harness::{
    binarize, episode_seed, render_overlay, run_benchmark, upsample_prediction, OverlayColor,
};
use darnet_core::model::{AblationFlags, DarnetModel};
use darnet_core::tta_driver::run_training;
use darnet_core::{DarnetError, Result};

#[derive(Parser)]
#[command(name = "darnet", version, about = "Cross-domain few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the extractor on source episodes and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; defaults to `<eval.output_dir>/model.ckpt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark a model and write report.json and episodes.jsonl.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Comma list of sm, csd, arsm, tta (or `baseline`).
        #[arg(long)]
        flags: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the on-disk dataset layout.
    Synth {
        /// TOML file holding a synthetic spec; defaults apply to missing keys.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
    },
    /// Render support (blue) and prediction (red) overlays for one episode.
    Overlay {
        /// Episode id as written to episodes.jsonl: `<seed>:<index>`.
        #[arg(long)]
        episode: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        flags: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "overlays")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => train(&config, out),
        Command::Eval {
            config,
            flags,
            runs,
            tasks,
            seeds,
            checkpoint,
            out,
        } => {
            let mut cfg = Config::load(&config)?;
            if let Some(f) = flags {
                cfg.eval.flags = f;
            }
            if let Some(t) = tasks {
                cfg.eval.tasks = t;
            }
            match (runs, seeds) {
                (Some(r), None) => {
                    cfg.eval.runs = r;
                    cfg.eval.seeds = (0..r as u64).collect();
                }
                (r, Some(s)) => {
                    cfg.eval.runs = r.unwrap_or(s.len());
                    cfg.eval.seeds = s;
                }
                (None, None) => {}
            }
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint;
            }
            if let Some(o) = out {
                cfg.eval.output_dir = o;
            }
            eval(&cfg)
        }
        Command::Synth {
            spec,
            out,
            classes,
            per_class,
        } => synth(&spec, &out, classes, per_class),
        Command::Overlay {
            episode,
            config,
            flags,
            checkpoint,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => Config::load(p)?,
                None => Config::default(),
            };
            if let Some(f) = flags {
                cfg.eval.flags = f;
            }
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint;
            }
            overlay(&cfg, &episode, &out)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> DarnetError {
    DarnetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_line<W: Write, T: serde::Serialize>(w: &mut W, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).expect("record serializes");
    writeln!(w, "{line}").map_err(|e| io_err(path, e))
}

fn model_for(cfg: &Config) -> Result<DarnetModel> {
    let mut model = cfg.build_model()?;
    if let Some(ck) = &cfg.eval.checkpoint {
        load_checkpoint(ck, &mut model)?;
    }
    Ok(model)
}

fn train(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = Config::load(config)?;
    let out = out.unwrap_or_else(|| cfg.eval.output_dir.join("model.ckpt"));
    let train_cfg = cfg.train_config();
    let mut model = cfg.build_model()?;
    let log_path = out.with_extension("train.jsonl");
    let mut log = create(&log_path)?;
    let steps = train_cfg.steps;
    run_training(&mut model, cfg.train_source(), &train_cfg, |entry| {
        if entry.step % 25 == 0 || entry.step + 1 == steps {
            eprintln!(
                "step {:>5}/{steps}  l_train {:.4}  (l1 {:.4} l2 {:.4} l3 {:.4})",
                entry.step, entry.l_train, entry.l1, entry.l2, entry.l3
            );
        }
        write_line(&mut log, &log_path, entry)
    })?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    save_checkpoint(&out, &model)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn eval(cfg: &Config) -> Result<()> {
    cfg.validate()?;
    let flags = cfg.flags()?;
    let bench = cfg.benchmark(flags)?;
    let model = model_for(cfg)?;
    let dataset = cfg.load_dataset()?;
    let dir = &cfg.eval.output_dir;
    let episodes_path = dir.join("episodes.jsonl");
    let tta_path = dir.join("tta_log.jsonl");
    let mut episodes = create(&episodes_path)?;
    let mut tta_log = flags.tta.then(|| create(&tta_path)).transpose()?;
    let report = run_benchmark(
        &model,
        cfg.eval_source(dataset.as_ref()),
        &bench,
        &cfg.tta,
        |r| {
            write_line(&mut episodes, &episodes_path, r)?;
            if let Some(w) = tta_log.as_mut() {
                for entry in &r.tta_log {
                    write_line(w, &tta_path, entry)?;
                }
            }
            if let Some(e) = &r.error {
                eprintln!("episode {} failed: {e}", r.episode_id);
            }
            Ok(())
        },
    )?;
    episodes.flush().map_err(|e| io_err(&episodes_path, e))?;
    if let Some(w) = tta_log.as_mut() {
        w.flush().map_err(|e| io_err(&tta_path, e))?;
    }
    let report_path = dir.join("report.json");
    let mut w = create(&report_path)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    writeln!(w, "{text}")
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&report_path, e))?;
    for (seed, m) in report.seeds.iter().zip(&report.per_run_miou) {
        eprintln!("seed {seed}: mIoU {:.2}", 100.0 * m);
    }
    println!(
        "{}: mIoU {:.2} ± {:.2} over {} runs",
        report.flags,
        100.0 * report.mean,
        100.0 * report.std,
        report.per_run_miou.len()
    );
    Ok(())
}

fn synth(spec_path: &Path, out: &Path, classes: usize, per_class: usize) -> Result<()> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| io_err(spec_path, e))?;
    let spec: SyntheticSpec =
        toml::from_str(&text).map_err(|e| DarnetError::InvalidConfig(e.to_string()))?;
    let ds = synthetic_dataset(&spec, classes, per_class)?;
    for class in ds.classes() {
        let images = out.join(&class.name).join("images");
        let masks = out.join(&class.name).join("masks");
        for d in [&images, &masks] {
            std::fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
        }
        for (i, r) in class.records.iter().enumerate() {
            let (h, w) = (r.height() as u32, r.width() as u32);
            let img = image::RgbImage::from_fn(w, h, |x, y| {
                image::Rgb(std::array::from_fn(|c| {
                    (r.image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8
                }))
            });
            let mask = image::GrayImage::from_fn(w, h, |x, y| {
                image::Luma([255 * r.mask[[y as usize, x as usize]]])
            });
            let name = format!("{i:04}.png");
            save_png(&img, &images.join(&name))?;
            save_png(&mask, &masks.join(&name))?;
        }
    }
    eprintln!(
        "wrote {} records in {} classes to {}",
        ds.num_records(),
        ds.num_classes(),
        out.display()
    );
    Ok(())
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DarnetError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn parse_episode_id(id: &str) -> Result<(u64, usize)> {
    let bad = || DarnetError::InvalidConfig(format!("episode id `{id}` is not `<seed>:<index>`"));
    let (seed, index) = id.split_once(':').ok_or_else(bad)?;
    Ok((
        seed.trim().parse().map_err(|_| bad())?,
        index.trim().parse().map_err(|_| bad())?,
    ))
}

fn overlay(cfg: &Config, id: &str, out: &Path) -> Result<()> {
    let (seed, index) = parse_episode_id(id)?;
    let flags: AblationFlags = cfg.flags()?;
    let model = model_for(cfg)?;
    let dataset = cfg.load_dataset()?;
    let source = cfg.eval_source(dataset.as_ref());
    let episode = source.episode(seed, index, cfg.data.k_shot, cfg.data.queries)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, index));
    let pred = model.predict_episode(&episode, flags, &cfg.tta, &mut rng)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let stem = format!("{seed}_{index}");
    for (i, s) in episode.support.iter().enumerate() {
        render_overlay(
            s,
            &s.mask,
            OverlayColor::Blue,
            &out.join(format!("{stem}_support{i}.png")),
        )?;
    }
    for (i, (q, qp)) in episode.query.iter().zip(&pred.queries).enumerate() {
        let mask = binarize(&upsample_prediction(&qp.prediction, q.height(), q.width()));
        render_overlay(
            q,
            &mask,
            OverlayColor::Red,
            &out.join(format!("{stem}_query{i}_pred.png")),
        )?;
        render_overlay(
            q,
            &q.mask,
            OverlayColor::Red,
            &out.join(format!("{stem}_query{i}_gt.png")),
        )?;
    }
    eprintln!("wrote overlays for episode {id} to {}", out.display());
    Ok(())
}
