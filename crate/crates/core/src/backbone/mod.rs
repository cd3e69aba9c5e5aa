//! Feature extraction and channel-statistics manipulation.
//!
//! The extractor is a small stack of 3×3 convolution blocks. Channel
//! Statistics Disruption (CSD) perturbs the per-channel mean and standard
//! deviation of shallow-block activations during training, which widens the
//! range of feature "styles" the matching head sees.

mod conv;
mod extractor;
mod feature_file;

use ndarray::{Array1, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use conv::{Conv2d, Conv2dGrads};
pub use extractor::{Extractor, ExtractorCache, ExtractorConfig, ExtractorGrads};
pub use feature_file::{load_feature_file, read_feature_map, save_feature_file, write_feature_map};

use crate::error::{DarnetError, Result};
use crate::feature::FeatureMap;

/// Stabilizer added to the variance before the square root.
pub const STATS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

/// Per-channel spatial mean and ε-stabilized standard deviation.
pub fn channel_stats(x: &FeatureMap) -> ChannelStats {
    let data = x.data();
    let (c, h, w) = data.dim();
    let n = (h * w) as f64;
    let mut mu = Array1::zeros(c);
    let mut sigma = Array1::zeros(c);
    for (ch, plane) in data.axis_iter(Axis(0)).enumerate() {
        let mean = plane.sum() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        mu[ch] = mean;
        sigma[ch] = (var + STATS_EPS).sqrt();
    }
    ChannelStats { mu, sigma }
}

/// Re-styles `x` with the channel statistics of `y`.
pub fn adain(x: &FeatureMap, y: &FeatureMap) -> Result<FeatureMap> {
    if x.channels() != y.channels() {
        return Err(DarnetError::ChannelMismatch {
            expected: x.channels(),
            got: y.channels(),
        });
    }
    let sx = channel_stats(x);
    let sy = channel_stats(y);
    let mut out = x.data().clone();
    for (ch, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (mx, dx, my, dy) = (sx.mu[ch], sx.sigma[ch], sy.mu[ch], sy.sigma[ch]);
        plane.mapv_inplace(|v| dy * ((v - mx) / dx) + my);
    }
    Ok(FeatureMap::from_raw(out, x.stride()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientSampling {
    /// Independent scale and shift per channel.
    #[default]
    PerChannel,
    /// One scale and one shift shared by every channel of the map.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsdConfig {
    pub apply_probability: f64,
    pub noise_std: f64,
    pub target_blocks: Vec<usize>,
    pub sampling: CoefficientSampling,
    pub seed: u64,
}

impl Default for CsdConfig {
    fn default() -> Self {
        Self {
            apply_probability: 0.5,
            noise_std: 0.75,
            target_blocks: vec![0, 1],
            sampling: CoefficientSampling::PerChannel,
            seed: 0,
        }
    }
}

impl CsdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(DarnetError::InvalidConfig(format!(
                "csd apply_probability {} outside [0,1]",
                self.apply_probability
            )));
        }
        // Written this way so NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.noise_std > 0.0) {
            return Err(DarnetError::InvalidConfig(format!(
                "csd noise_std must be positive, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Sampled scale (`scale`) and shift (`shift`) coefficients, one per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CsdCoefficients {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl CsdCoefficients {
    pub fn uniform(channels: usize, scale: f64, shift: f64) -> Self {
        Self {
            scale: Array1::from_elem(channels, scale),
            shift: Array1::from_elem(channels, shift),
        }
    }
}

/// Draws CSD coefficients, or `None` when the Bernoulli gate skips this pass.
pub fn sample_csd<R: Rng + ?Sized>(
    cfg: &CsdConfig,
    channels: usize,
    rng: &mut R,
) -> Option<CsdCoefficients> {
    if cfg.apply_probability <= 0.0 || rng.random::<f64>() >= cfg.apply_probability {
        return None;
    }
    let normal = Normal::new(1.0, cfg.noise_std).expect("validated noise_std");
    let coeffs = match cfg.sampling {
        CoefficientSampling::PerChannel => {
            let scale = Array1::from_shape_fn(channels, |_| normal.sample(rng));
            let shift = Array1::from_shape_fn(channels, |_| normal.sample(rng));
            CsdCoefficients { scale, shift }
        }
        CoefficientSampling::Scalar => {
            let scale = normal.sample(rng);
            let shift = normal.sample(rng);
            CsdCoefficients::uniform(channels, scale, shift)
        }
    };
    Some(coeffs)
}

/// Applies `scale·σ(x)·(x−μ(x))/σ(x) + shift·μ(x)` channel-wise.
pub fn csd_apply(x: &FeatureMap, coeffs: &CsdCoefficients) -> Result<FeatureMap> {
    if coeffs.scale.len() != x.channels() || coeffs.shift.len() != x.channels() {
        return Err(DarnetError::ChannelMismatch {
            expected: x.channels(),
            got: coeffs.scale.len(),
        });
    }
    let stats = channel_stats(x);
    let mut out = x.data().clone();
    for (ch, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (mu, sigma) = (stats.mu[ch], stats.sigma[ch]);
        let (a, b) = (coeffs.scale[ch], coeffs.shift[ch]);
        plane.mapv_inplace(|v| a * sigma * ((v - mu) / sigma) + b * mu);
    }
    Ok(FeatureMap::from_raw(out, x.stride()))
}

/// Backward of [`csd_apply`] with respect to its input.
///
/// Uses the expanded form `scale·(x−μ) + shift·μ`, in which σ cancels.
pub fn csd_backward(grad_out: &Array3<f64>, coeffs: &CsdCoefficients) -> Array3<f64> {
    let (_, h, w) = grad_out.dim();
    let n = (h * w) as f64;
    let mut grad_in = grad_out.clone();
    for (ch, mut plane) in grad_in.axis_iter_mut(Axis(0)).enumerate() {
        let (a, b) = (coeffs.scale[ch], coeffs.shift[ch]);
        let total = plane.sum();
        let offset = (b - a) * total / n;
        plane.mapv_inplace(|g| a * g + offset);
    }
    grad_in
}

/// Randomly perturbs the channel statistics of `x` (train mode only).
pub fn csd_perturb<R: Rng + ?Sized>(
    x: &FeatureMap,
    cfg: &CsdConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<FeatureMap> {
    if mode != Mode::Train {
        return Err(DarnetError::CsdInEvalMode);
    }
    match sample_csd(cfg, x.channels(), rng) {
        Some(coeffs) => csd_apply(x, &coeffs),
        None => Ok(x.clone()),
    }
}
