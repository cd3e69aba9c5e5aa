use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, Conv2dGrads};
use super::{csd_apply, csd_backward, sample_csd, CsdCoefficients, CsdConfig, Mode};
use crate::error::{DarnetError, Result};
use crate::feature::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Apply ReLU after the last block. Off by default so features are signed.
    pub final_relu: bool,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128, 256],
            strides: vec![2, 2, 2, 1],
            final_relu: false,
            seed: 0,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(DarnetError::InvalidConfig(format!(
                "backbone widths ({}) and strides ({}) must be equal-length and non-empty",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(DarnetError::InvalidConfig(
                "backbone widths and strides must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Convolutional feature extractor with CSD hooks after selected blocks.
///
/// `Extractor::default()` has no parameters and refuses to run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Extractor {
    config: ExtractorConfig,
    blocks: Vec<Conv2d>,
    mode: Mode,
}

struct BlockCache {
    input_dim: (usize, usize, usize),
    cols: Array2<f64>,
    pre_activation: Array3<f64>,
    csd: Option<CsdCoefficients>,
}

/// Activations retained by [`Extractor::forward_train`].
pub struct ExtractorCache {
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorGrads {
    pub blocks: Vec<Conv2dGrads>,
}

impl ExtractorGrads {
    pub fn accumulate(&mut self, other: &ExtractorGrads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn flat(&self) -> Vec<&[f64]> {
        self.blocks
            .iter()
            .flat_map(|g| {
                [
                    g.weight.as_slice().expect("contiguous"),
                    g.bias.as_slice().expect("contiguous"),
                ]
            })
            .collect()
    }
}

impl Extractor {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut in_ch = 3;
        let blocks = config
            .widths
            .iter()
            .zip(&config.strides)
            .map(|(&out, &stride)| {
                let conv = Conv2d::init(in_ch, out, stride, &mut rng);
                in_ch = out;
                conv
            })
            .collect();
        Ok(Self {
            config,
            blocks,
            mode: Mode::Eval,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Conv2d] {
        &self.blocks
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, Conv2d::out_channels)
    }

    pub fn is_initialized(&self) -> bool {
        !self.blocks.is_empty()
    }

    fn relu_after(&self, block: usize) -> bool {
        block + 1 < self.blocks.len() || self.config.final_relu
    }

    /// Maps an H×W×3 image to its feature map.
    ///
    /// CSD runs only when `csd` is given and the extractor is in train mode.
    pub fn extract<R: Rng + ?Sized>(
        &self,
        img: &Array3<f64>,
        csd: Option<&CsdConfig>,
        rng: &mut R,
    ) -> Result<FeatureMap> {
        self.forward_train(img, csd, rng).map(|(f, _)| f)
    }

    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        img: &Array3<f64>,
        csd: Option<&CsdConfig>,
        rng: &mut R,
    ) -> Result<(FeatureMap, ExtractorCache)> {
        if !self.is_initialized() {
            return Err(DarnetError::Uninitialized);
        }
        if img.dim().2 != 3 {
            return Err(DarnetError::ShapeMismatch(format!(
                "expected H×W×3 image, got {:?}",
                img.dim()
            )));
        }
        let csd = csd.filter(|_| self.mode == Mode::Train);
        let mut x = img
            .view()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, conv) in self.blocks.iter().enumerate() {
            let input_dim = x.dim();
            let (pre, cols) = conv.forward(&x);
            let mut out = if self.relu_after(i) {
                pre.mapv(|v| v.max(0.0))
            } else {
                pre.clone()
            };
            let mut coeffs = None;
            if let Some(cfg) = csd.filter(|c| c.target_blocks.contains(&i)) {
                if let Some(c) = sample_csd(cfg, out.dim().0, rng) {
                    out = csd_apply(&FeatureMap::from_raw(out, 1), &c)?.into_data();
                    coeffs = Some(c);
                }
            }
            caches.push(BlockCache {
                input_dim,
                cols,
                pre_activation: pre,
                csd: coeffs,
            });
            x = out;
        }
        let stride = self.config.total_stride();
        Ok((
            FeatureMap::from_raw(x, stride),
            ExtractorCache { blocks: caches },
        ))
    }

    pub fn backward(&self, cache: &ExtractorCache, grad_out: &Array3<f64>) -> ExtractorGrads {
        let mut grad = grad_out.clone();
        let mut grads = Vec::with_capacity(self.blocks.len());
        for (i, (conv, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            if let Some(c) = &bc.csd {
                grad = csd_backward(&grad, c);
            }
            if self.relu_after(i) {
                ndarray::Zip::from(&mut grad)
                    .and(&bc.pre_activation)
                    .for_each(|g, &p| {
                        if p <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            let (g, gin) = conv.backward(&bc.cols, &grad, bc.input_dim, i > 0);
            grads.push(g);
            if let Some(gin) = gin {
                grad = gin;
            }
        }
        grads.reverse();
        ExtractorGrads { blocks: grads }
    }

    pub fn zero_grads(&self) -> ExtractorGrads {
        ExtractorGrads {
            blocks: self
                .blocks
                .iter()
                .map(|c| Conv2dGrads {
                    weight: Array2::zeros(c.weight.dim()),
                    bias: ndarray::Array1::zeros(c.bias.len()),
                })
                .collect(),
        }
    }

    /// Parameter slices in the same order as [`ExtractorGrads::flat`].
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks
            .iter_mut()
            .flat_map(|c| {
                [
                    c.weight.as_slice_mut().expect("contiguous"),
                    c.bias.as_slice_mut().expect("contiguous"),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.blocks
            .iter()
            .flat_map(|c| {
                [
                    c.weight.as_slice().expect("contiguous"),
                    c.bias.as_slice().expect("contiguous"),
                ]
            })
            .collect()
    }
}
