use ndarray::{s, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Support-image augmentation. Jitter strengths `s` draw factors from
/// `[1 - s, 1 + s]`; a zero strength disables that jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Gaussian blur sigma range; `None` disables blur.
    pub blur_sigma: Option<(f64, f64)>,
    pub grayscale_probability: f64,
    /// Cutout area as a fraction of the image; `None` disables cutout.
    pub cutout_area: Option<(f64, f64)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            blur_sigma: Some((0.1, 2.0)),
            grayscale_probability: 0.2,
            cutout_area: Some((0.05, 0.2)),
        }
    }
}

impl AugmentConfig {
    /// All transforms disabled.
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            blur_sigma: None,
            grayscale_probability: 0.0,
            cutout_area: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CutoutRect {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

/// What was applied, for logging and tests.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AugmentRecord {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_sigma: Option<f64>,
    pub grayscale: bool,
    pub cutout: Option<CutoutRect>,
}

fn factor<R: Rng + ?Sized>(strength: f64, rng: &mut R) -> f64 {
    if strength <= 0.0 {
        1.0
    } else {
        rng.random_range(1.0 - strength..=1.0 + strength).max(0.0)
    }
}

fn gray(image: &Array3<f64>, y: usize, x: usize) -> f64 {
    0.299 * image[[y, x, 0]] + 0.587 * image[[y, x, 1]] + 0.114 * image[[y, x, 2]]
}

fn gaussian_blur(image: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w, c) = image.dim();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[[y, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * image[[y, clampi(x as isize + i as isize - radius, w), ch]])
                    .sum::<f64>();
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp[[clampi(y as isize + i as isize - radius, h), x, ch]])
                    .sum::<f64>();
            }
        }
    }
    out
}

/// Zeroes the given rectangle (clipped to the image).
pub fn apply_cutout(image: &mut Array3<f64>, rect: CutoutRect) {
    let (h, w, _) = image.dim();
    let y1 = (rect.y0 + rect.height).min(h);
    let x1 = (rect.x0 + rect.width).min(w);
    if rect.y0 < y1 && rect.x0 < x1 {
        image.slice_mut(s![rect.y0..y1, rect.x0..x1, ..]).fill(0.0);
    }
}

/// Photometric augmentation plus cutout. The mask is never touched, so it is
/// not an argument.
pub fn augment_support<R: Rng + ?Sized>(
    image: &Array3<f64>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Array3<f64>, AugmentRecord) {
    let (h, w, _) = image.dim();
    let mut out = image.clone();
    let mut record = AugmentRecord {
        brightness: factor(cfg.brightness, rng),
        contrast: factor(cfg.contrast, rng),
        saturation: factor(cfg.saturation, rng),
        ..Default::default()
    };

    if record.brightness != 1.0 {
        out.mapv_inplace(|v| v * record.brightness);
    }
    if record.contrast != 1.0 {
        let mean = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| gray(&out, y, x))
            .sum::<f64>()
            / (h * w) as f64;
        out.mapv_inplace(|v| (v - mean) * record.contrast + mean);
    }
    if record.saturation != 1.0 {
        for y in 0..h {
            for x in 0..w {
                let g = gray(&out, y, x);
                for c in 0..3 {
                    out[[y, x, c]] = (out[[y, x, c]] - g) * record.saturation + g;
                }
            }
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));

    if let Some((lo, hi)) = cfg.blur_sigma {
        let sigma = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        if sigma > 0.0 {
            out = gaussian_blur(&out, sigma);
            record.blur_sigma = Some(sigma);
        }
    }

    if cfg.grayscale_probability > 0.0 && rng.random_bool(cfg.grayscale_probability.min(1.0)) {
        record.grayscale = true;
        for y in 0..h {
            for x in 0..w {
                let g = gray(&out, y, x);
                out.slice_mut(s![y, x, ..]).fill(g);
            }
        }
    }

    if let Some((lo, hi)) = cfg.cutout_area {
        let frac = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let side = ((frac * (h * w) as f64).sqrt().round() as usize).max(1);
        let height = side.min(h);
        let width = side.min(w);
        let rect = CutoutRect {
            y0: rng.random_range(0..=h - height),
            x0: rng.random_range(0..=w - width),
            height,
            width,
        };
        apply_cutout(&mut out, rect);
        record.cutout = Some(rect);
    }
    (out, record)
}
