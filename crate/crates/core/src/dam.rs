//! Distribution Alignment Module: an efficient-channel-attention gate
//! followed by a square 1×1 convolution, with analytic gradients.
//!
//! Forward, per channel `c`:
//!
//! ```text
//! s_c = mean_{h,w} x_c
//! u_c = Σ_j kernel_j · s_{c+j−r}        (zero padded, r = (k−1)/2)
//! g_c = sigmoid(u_c)
//! y_c = g_c · x_c
//! out = W·y + b                         (per pixel)
//! ```

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DarnetError, Result};
use crate::feature::FeatureMap;
use crate::prototype_matching::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct DamParams {
    pub eca_kernel: Array1<f64>,
    pub conv1x1_weight: Array2<f64>,
    pub conv1x1_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DamGradients {
    pub eca_kernel: Array1<f64>,
    pub conv1x1_weight: Array2<f64>,
    pub conv1x1_bias: Array1<f64>,
    pub kappa: f64,
    pub lambda_mix: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DamInit {
    /// Zero kernel (gate 0.5 everywhere) and a doubled identity 1×1 conv:
    /// the module starts as an exact pass-through.
    #[default]
    Identity,
    Random,
}

impl DamParams {
    pub fn channels(&self) -> usize {
        self.conv1x1_bias.len()
    }

    pub fn kernel_size(&self) -> usize {
        self.eca_kernel.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernel_size();
        if k == 0 || k.is_multiple_of(2) {
            return Err(DarnetError::InvalidConfig(format!(
                "ECA kernel size must be odd, got {k}"
            )));
        }
        let c = self.channels();
        if self.conv1x1_weight.dim() != (c, c) {
            return Err(DarnetError::ShapeMismatch(format!(
                "1x1 weight {:?} vs bias {c}",
                self.conv1x1_weight.dim()
            )));
        }
        let finite = self
            .eca_kernel
            .iter()
            .chain(self.conv1x1_weight.iter())
            .chain(self.conv1x1_bias.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(DarnetError::InvalidConfig(
                "DAM parameters must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> DamGradients {
        DamGradients {
            eca_kernel: Array1::zeros(self.eca_kernel.len()),
            conv1x1_weight: Array2::zeros(self.conv1x1_weight.dim()),
            conv1x1_bias: Array1::zeros(self.conv1x1_bias.len()),
            kappa: 0.0,
            lambda_mix: 0.0,
        }
    }

    /// Parameter slices in the order `[kernel, weight, bias]`.
    pub fn params_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.eca_kernel.as_slice_mut().expect("contiguous"),
            self.conv1x1_weight.as_slice_mut().expect("contiguous"),
            self.conv1x1_bias.as_slice_mut().expect("contiguous"),
        ]
    }
}

impl DamGradients {
    pub fn accumulate(&mut self, other: &DamGradients) {
        self.eca_kernel += &other.eca_kernel;
        self.conv1x1_weight += &other.conv1x1_weight;
        self.conv1x1_bias += &other.conv1x1_bias;
        self.kappa += other.kappa;
        self.lambda_mix += other.lambda_mix;
    }

    pub fn flat(&self) -> [&[f64]; 3] {
        [
            self.eca_kernel.as_slice().expect("contiguous"),
            self.conv1x1_weight.as_slice().expect("contiguous"),
            self.conv1x1_bias.as_slice().expect("contiguous"),
        ]
    }
}

pub fn init_dam(
    channels: usize,
    kernel_size: usize,
    mode: DamInit,
    seed: u64,
) -> Result<DamParams> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(DarnetError::InvalidConfig(format!(
            "ECA kernel size must be odd, got {kernel_size}"
        )));
    }
    if channels == 0 {
        return Err(DarnetError::InvalidConfig(
            "DAM needs at least one channel".into(),
        ));
    }
    Ok(match mode {
        DamInit::Identity => DamParams {
            eca_kernel: Array1::zeros(kernel_size),
            conv1x1_weight: Array2::eye(channels) * 2.0,
            conv1x1_bias: Array1::zeros(channels),
        },
        DamInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = Normal::new(0.0, 0.1).expect("std");
            let w = Normal::new(0.0, (1.0 / channels as f64).sqrt()).expect("std");
            DamParams {
                eca_kernel: Array1::from_shape_fn(kernel_size, |_| k.sample(&mut rng)),
                conv1x1_weight: Array2::from_shape_fn((channels, channels), |_| w.sample(&mut rng)),
                conv1x1_bias: Array1::zeros(channels),
            }
        }
    })
}

fn check_channels(x: &FeatureMap, p: &DamParams) -> Result<()> {
    if x.channels() != p.channels() {
        return Err(DarnetError::ChannelMismatch {
            expected: p.channels(),
            got: x.channels(),
        });
    }
    Ok(())
}

fn squeeze(x: &FeatureMap) -> Array1<f64> {
    x.channel_mean()
}

fn channel_conv(s: &Array1<f64>, kernel: &Array1<f64>) -> Array1<f64> {
    let c = s.len() as isize;
    let r = (kernel.len() / 2) as isize;
    Array1::from_shape_fn(s.len(), |ch| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, &kj)| {
                let src = ch as isize + j as isize - r;
                if (0..c).contains(&src) {
                    kj * s[src as usize]
                } else {
                    0.0
                }
            })
            .sum()
    })
}

/// Channel gate values in (0, 1).
pub fn dam_gate(x: &FeatureMap, p: &DamParams) -> Result<Array1<f64>> {
    check_channels(x, p)?;
    Ok(channel_conv(&squeeze(x), &p.eca_kernel).mapv(sigmoid))
}

fn project(
    y: Array2<f64>,
    p: &DamParams,
    (c, h, w): (usize, usize, usize),
    stride: usize,
) -> FeatureMap {
    let mut out = p.conv1x1_weight.dot(&y);
    out += &p.conv1x1_bias.view().insert_axis(Axis(1));
    FeatureMap::from_raw(out.into_shape_with_order((c, h, w)).expect("shape"), stride)
}

pub fn dam_forward(x: &FeatureMap, p: &DamParams) -> Result<FeatureMap> {
    let gate = dam_gate(x, p)?;
    let mut y = x.as_matrix();
    y *= &gate.view().insert_axis(Axis(1));
    Ok(project(y, p, x.data().dim(), x.stride()))
}

/// Forward pass with the attention gate replaced by 1.
pub fn dam_forward_ungated(x: &FeatureMap, p: &DamParams) -> Result<FeatureMap> {
    check_channels(x, p)?;
    Ok(project(x.as_matrix(), p, x.data().dim(), x.stride()))
}

/// Exact gradients of `Σ upstream ⊙ dam_forward(x, p)` with respect to `p`.
pub fn dam_backward(x: &FeatureMap, p: &DamParams, upstream: &Array3<f64>) -> Result<DamGradients> {
    check_channels(x, p)?;
    if upstream.dim() != x.data().dim() {
        return Err(DarnetError::ShapeMismatch(format!(
            "upstream {:?} vs input {:?}",
            upstream.dim(),
            x.data().dim()
        )));
    }
    let (c, h, w) = upstream.dim();
    let s = squeeze(x);
    let gate = channel_conv(&s, &p.eca_kernel).mapv(sigmoid);
    let xm = x.as_matrix();
    let mut y = xm.clone();
    y *= &gate.view().insert_axis(Axis(1));
    let g = upstream
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("shape");

    let conv1x1_bias = g.sum_axis(Axis(1));
    let conv1x1_weight = g.dot(&y.t());
    let dy = p.conv1x1_weight.t().dot(&g);
    let d_gate = (&dy * &xm).sum_axis(Axis(1));
    let d_pre = &d_gate * &gate.mapv(|v| v * (1.0 - v));

    let r = (p.kernel_size() / 2) as isize;
    let eca_kernel = Array1::from_shape_fn(p.kernel_size(), |j| {
        (0..c)
            .map(|ch| {
                let src = ch as isize + j as isize - r;
                if (0..c as isize).contains(&src) {
                    d_pre[ch] * s[src as usize]
                } else {
                    0.0
                }
            })
            .sum()
    });

    Ok(DamGradients {
        eca_kernel,
        conv1x1_weight,
        conv1x1_bias,
        kappa: 0.0,
        lambda_mix: 0.0,
    })
}
