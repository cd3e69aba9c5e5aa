use ndarray::{Array2, Array3, ArrayView1, Axis};

use crate::error::{DarnetError, Result};

/// A C×H×W feature tensor together with its downsampling factor relative to
/// the input image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
    stride: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: usize) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(DarnetError::ShapeMismatch(format!(
                "feature map must be non-empty, got {c}x{h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DarnetError::ShapeMismatch(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(Self { data, stride })
    }

    /// Skips the finiteness scan. Callers guarantee the invariants.
    pub(crate) fn from_raw(data: Array3<f64>, stride: usize) -> Self {
        Self { data, stride }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Feature column at pixel (y, x).
    pub fn column(&self, y: usize, x: usize) -> ArrayView1<'_, f64> {
        self.data.slice(ndarray::s![.., y, x])
    }

    /// C × (H·W) view with pixels in row-major order.
    pub fn as_matrix(&self) -> Array2<f64> {
        let (c, h, w) = self.data.dim();
        self.data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous")
    }

    pub fn channel_mean(&self) -> ndarray::Array1<f64> {
        let (_, h, w) = self.data.dim();
        self.data.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
    }
}
