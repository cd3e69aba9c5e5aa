use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const KERNEL: usize = 3;
const PAD: usize = 1;

/// 3×3 convolution with padding 1, lowered to a matrix product via im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// out × (in·9), rows ordered (in_channel, ky, kx).
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    /// He-normal initialization.
    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * KERNEL * KERNEL) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        Self {
            weight: Array2::from_shape_fn((out_ch, in_ch * KERNEL * KERNEL), |_| {
                normal.sample(rng)
            }),
            bias: Array1::zeros(out_ch),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / (KERNEL * KERNEL)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * PAD - KERNEL) / self.stride + 1,
            (w + 2 * PAD - KERNEL) / self.stride + 1,
        )
    }

    /// Returns the output and the im2col matrix needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let cols = im2col(x, self.stride, ho, wo);
        let mut out = self.weight.dot(&cols);
        out += &self.bias.view().insert_axis(Axis(1));
        let out = out
            .into_shape_with_order((self.out_channels(), ho, wo))
            .expect("conv output shape");
        (out, cols)
    }

    pub fn backward(
        &self,
        cols: &Array2<f64>,
        grad_out: &Array3<f64>,
        input_dim: (usize, usize, usize),
        need_input_grad: bool,
    ) -> (Conv2dGrads, Option<Array3<f64>>) {
        let (oc, ho, wo) = grad_out.dim();
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((oc, ho * wo))
            .expect("grad shape");
        let weight = g.dot(&cols.t());
        let bias = g.sum_axis(Axis(1));
        let grad_in = need_input_grad.then(|| {
            let dcols = self.weight.t().dot(&g);
            col2im(&dcols, input_dim, self.stride, ho, wo)
        });
        (Conv2dGrads { weight, bias }, grad_in)
    }
}

fn im2col(x: &Array3<f64>, stride: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * KERNEL * KERNEL, ho * wo));
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ch * KERNEL + ky) * KERNEL + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - PAD as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    (c, h, w): (usize, usize, usize),
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut x = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ch * KERNEL + ky) * KERNEL + kx;
                let src = cols.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - PAD as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ch, iy as usize, ix as usize]] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (ho, wo) = conv.output_size(h, w);
        let mut out = Array3::zeros((conv.out_channels(), ho, wo));
        for o in 0..conv.out_channels() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.bias[o];
                    for ch in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * conv.stride + ky) as isize - 1;
                                let ix = (ox * conv.stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += conv.weight[[o, (ch * 3 + ky) * 3 + kx]]
                                        * x[[ch, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    out[[o, oy, ox]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let mut conv = Conv2d::init(3, 4, stride, &mut rng);
            conv.bias = Array1::from_shape_fn(4, |i| i as f64 * 0.1);
            let x = Array3::from_shape_fn((3, 7, 6), |(c, y, x)| {
                ((c * 31 + y * 7 + x) % 11) as f64 - 5.0
            });
            let (fast, _) = conv.forward(&x);
            let slow = naive(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stride_two_halves_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::init(1, 1, 2, &mut rng);
        assert_eq!(conv.output_size(400, 400), (200, 200));
        assert_eq!(conv.output_size(7, 7), (4, 4));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::init(2, 3, 2, &mut rng);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Array3::from_shape_fn((2, 5, 5), |_| normal.sample(&mut rng));
        let (out, cols) = conv.forward(&x);
        let up = Array3::from_shape_fn(out.dim(), |_| normal.sample(&mut rng));
        let (grads, gin) = conv.backward(&cols, &up, x.dim(), true);
        let gin = gin.unwrap();
        let loss = |c: &Conv2d, x: &Array3<f64>| (c.forward(x).0 * &up).sum();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[i] += h;
            m.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * h);
            assert!((fd - gin.as_slice().unwrap()[i]).abs() < 1e-6);
        }
        for i in 0..conv.weight.len() {
            let mut p = conv.clone();
            let mut m = conv.clone();
            p.weight.as_slice_mut().unwrap()[i] += h;
            m.weight.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grads.weight.as_slice().unwrap()[i]).abs() < 1e-6);
        }
        for i in 0..3 {
            let mut p = conv.clone();
            let mut m = conv.clone();
            p.bias[i] += h;
            m.bias[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grads.bias[i]).abs() < 1e-6);
        }
    }
}
