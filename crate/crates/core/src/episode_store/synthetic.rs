use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassRecords, Dataset, Episode, LabeledImage};
use crate::error::{DarnetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    #[default]
    Blob,
    Rectangle,
    Ring,
}

/// Parameters of the procedural foreground/background generator.
///
/// Each image is a shape painted with a striped texture over a striped
/// background. `fg_bg_similarity` moves the background colour and stripe
/// period onto the foreground's; at 1 both are drawn from one distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub canvas_size: usize,
    pub fg_shape_family: ShapeFamily,
    pub fg_texture_mean: [f64; 3],
    pub bg_texture_mean: [f64; 3],
    pub fg_bg_similarity: f64,
    /// Std of the per-image colour offset (support/query appearance gap).
    pub intra_class_jitter: f64,
    pub seed: u64,
    /// Half-width of a per-episode uniform offset on both colour means.
    pub palette_jitter: f64,
    pub texture_amplitude: f64,
    pub fg_stripe_period: f64,
    pub bg_stripe_period: f64,
    /// Half-width of i.i.d. uniform pixel noise.
    pub noise_level: f64,
    /// Domain style: every pixel becomes `gain * v + bias` per channel.
    pub channel_gain: [f64; 3],
    pub channel_bias: [f64; 3],
    /// Per-image random style: gain in `1 ± style_jitter`, bias in `± style_jitter / 2`.
    pub style_jitter: f64,
    /// Amplitude of a per-image linear brightness ramp in a random direction,
    /// added to every channel. Gives objects uneven appearance within an image.
    pub illumination_gradient: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            canvas_size: 32,
            fg_shape_family: ShapeFamily::Blob,
            fg_texture_mean: [0.85, 0.25, 0.25],
            bg_texture_mean: [0.2, 0.45, 0.8],
            fg_bg_similarity: 0.0,
            intra_class_jitter: 0.0,
            seed: 0,
            palette_jitter: 0.0,
            texture_amplitude: 0.08,
            fg_stripe_period: 3.0,
            bg_stripe_period: 7.0,
            noise_level: 0.04,
            channel_gain: [1.0; 3],
            channel_bias: [0.0; 3],
            style_jitter: 0.0,
            illumination_gradient: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DarnetError::InvalidConfig(format!("synthetic spec: {m}")));
        if self.canvas_size < 16 {
            return bad("canvas_size must be at least 16");
        }
        if !(0.0..=1.0).contains(&self.fg_bg_similarity) {
            return bad("fg_bg_similarity must lie in [0, 1]");
        }
        let non_negative = [
            self.intra_class_jitter,
            self.palette_jitter,
            self.texture_amplitude,
            self.noise_level,
            self.style_jitter,
            self.illumination_gradient,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("jitter, amplitude and noise terms must be finite and non-negative");
        }
        if !(self.fg_stripe_period > 0.0 && self.bg_stripe_period > 0.0) {
            return bad("stripe periods must be positive");
        }
        Ok(())
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

fn shape_mask<R: Rng + ?Sized>(family: ShapeFamily, size: usize, rng: &mut R) -> Array2<u8> {
    let s = size as f64;
    let inside: Box<dyn Fn(f64, f64) -> bool> = match family {
        ShapeFamily::Rectangle => {
            let h = rng.random_range(0.3..0.6) * s;
            let w = rng.random_range(0.3..0.6) * s;
            let y0 = rng.random_range(0.0..s - h);
            let x0 = rng.random_range(0.0..s - w);
            Box::new(move |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w)
        }
        ShapeFamily::Ring => {
            let outer = rng.random_range(0.22..0.32) * s;
            let inner = outer * rng.random_range(0.4..0.6);
            let cy = rng.random_range(outer..s - outer);
            let cx = rng.random_range(outer..s - outer);
            Box::new(move |y, x| {
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                d <= outer && d >= inner
            })
        }
        ShapeFamily::Blob => {
            let cy = rng.random_range(0.35..0.65) * s;
            let cx = rng.random_range(0.35..0.65) * s;
            let n = rng.random_range(2..=4);
            let discs: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        cy + rng.random_range(-0.15..0.15) * s,
                        cx + rng.random_range(-0.15..0.15) * s,
                        rng.random_range(0.12..0.22) * s,
                    )
                })
                .collect();
            Box::new(move |y, x| {
                discs
                    .iter()
                    .any(|&(dy, dx, r)| (y - dy).powi(2) + (x - dx).powi(2) <= r * r)
            })
        }
    };
    Array2::from_shape_fn((size, size), |(y, x)| {
        u8::from(inside(y as f64 + 0.5, x as f64 + 0.5))
    })
}

struct Palette {
    fg: [f64; 3],
    bg: [f64; 3],
    bg_period: f64,
}

fn normal3<R: Rng + ?Sized>(std: f64, rng: &mut R) -> [f64; 3] {
    std::array::from_fn(|_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

fn render<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    palette: &Palette,
    rng: &mut R,
) -> (Array3<f64>, Array2<u8>) {
    let size = spec.canvas_size;
    let mask = shape_mask(spec.fg_shape_family, size, rng);
    let fg_off = normal3(spec.intra_class_jitter, rng);
    let bg_off = normal3(spec.intra_class_jitter, rng);
    let fg: [f64; 3] = std::array::from_fn(|c| palette.fg[c] + fg_off[c]);
    let bg: [f64; 3] = std::array::from_fn(|c| palette.bg[c] + bg_off[c]);
    let (fg_theta, fg_phase) = (rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI));
    let (bg_theta, bg_phase) = (rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI));
    let sj = spec.style_jitter;
    let gain: [f64; 3] = std::array::from_fn(|c| {
        spec.channel_gain[c]
            * if sj > 0.0 {
                rng.random_range(1.0 - sj..=1.0 + sj)
            } else {
                1.0
            }
    });
    let bias: [f64; 3] = std::array::from_fn(|c| {
        spec.channel_bias[c]
            + if sj > 0.0 {
                rng.random_range(-sj / 2.0..=sj / 2.0)
            } else {
                0.0
            }
    });
    let ig = spec.illumination_gradient;
    let ramp_dir = if ig > 0.0 {
        rng.random_range(0.0..2.0 * PI)
    } else {
        0.0
    };
    let half = size as f64 / 2.0;

    let mut image = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let ramp = if ig > 0.0 {
                ig * ((x as f64 - half) * ramp_dir.cos() + (y as f64 - half) * ramp_dir.sin()) / half
            } else {
                0.0
            };
            let is_fg = mask[[y, x]] == 1;
            let (base, theta, phase, period) = if is_fg {
                (&fg, fg_theta, fg_phase, spec.fg_stripe_period)
            } else {
                (&bg, bg_theta, bg_phase, palette.bg_period)
            };
            let t = (x as f64 * theta.cos() + y as f64 * theta.sin()) / period;
            let stripe = spec.texture_amplitude * (2.0 * PI * t + phase).sin();
            for c in 0..3 {
                let noise = if spec.noise_level > 0.0 {
                    rng.random_range(-spec.noise_level..=spec.noise_level)
                } else {
                    0.0
                };
                let v = base[c] + stripe + noise + ramp;
                image[[y, x, c]] = (gain[c] * v + bias[c]).clamp(0.0, 1.0);
            }
        }
    }
    (image, mask)
}

fn palette<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Palette {
    let pj = spec.palette_jitter;
    let mut shift = || {
        if pj > 0.0 {
            rng.random_range(-pj..=pj)
        } else {
            0.0
        }
    };
    let fg: [f64; 3] = std::array::from_fn(|c| spec.fg_texture_mean[c] + shift());
    let bg_own: [f64; 3] = std::array::from_fn(|c| spec.bg_texture_mean[c] + shift());
    let s = spec.fg_bg_similarity;
    Palette {
        fg,
        bg: std::array::from_fn(|c| lerp(bg_own[c], fg[c], s)),
        bg_period: lerp(spec.bg_stripe_period, spec.fg_stripe_period, s),
    }
}

/// Renders `k_shot` support and `q_size` query images of one synthetic class.
/// Fully determined by `spec` (including its seed).
pub fn generate_synthetic_episode(
    spec: &SyntheticSpec,
    k_shot: usize,
    q_size: usize,
) -> Result<Episode> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pal = palette(spec, &mut rng);
    let mut make = |prefix: &str, i: usize| {
        let (image, mask) = render(spec, &pal, &mut rng);
        LabeledImage::new(image, mask, 0, format!("synth-{}/{prefix}{i}", spec.seed))
    };
    let support = (0..k_shot)
        .map(|i| make("s", i))
        .collect::<Result<Vec<_>>>()?;
    let query = (0..q_size)
        .map(|i| make("q", i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        support,
        query,
        n_way: 1,
        k_shot,
    })
}

/// An in-memory dataset of `classes` synthetic classes, each with its own
/// palette draw, holding `per_class` records.
pub fn synthetic_dataset(
    spec: &SyntheticSpec,
    classes: usize,
    per_class: usize,
) -> Result<Dataset> {
    let classes = (0..classes)
        .map(|c| {
            let class_spec = SyntheticSpec {
                seed: spec.seed.wrapping_mul(1_000_003).wrapping_add(c as u64),
                ..spec.clone()
            };
            let ep = generate_synthetic_episode(&class_spec, per_class, 0)?;
            let records = ep
                .support
                .into_iter()
                .enumerate()
                .map(|(i, mut r)| {
                    r.class_id = c;
                    r.source_id = format!("class{c}/{i}");
                    r
                })
                .collect();
            Ok(ClassRecords {
                name: format!("class{c}"),
                records,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(classes))
}
