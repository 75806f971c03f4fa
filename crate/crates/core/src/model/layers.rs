//! Frame-wise 2-D convolution and dense layers with explicit backward passes.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `[frames × in × H × W] → [frames × out × H' × W']`, zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        Self {
            weight: Array4::from_shape_simple_fn((out_ch, in_ch, kernel, kernel), || normal.sample(rng)),
            bias: Array1::zeros(out_ch),
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            stride: self.stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, size: usize) -> usize {
        let k = self.kernel();
        (size + 2 * (k / 2) - k) / self.stride + 1
    }

    /// Unfolds `x` into `[cin·k·k × frames·H'·W']` patch columns.
    fn im2col(&self, x: ArrayView4<f64>) -> Array2<f64> {
        let (n, cin, h, w) = x.dim();
        let k = self.kernel();
        let pad = k / 2;
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let cols_per_frame = ho * wo;
        let mut cols = Array2::zeros((cin * k * k, n * cols_per_frame));
        let width = n * cols_per_frame;
        let cs = cols.as_slice_mut().expect("fresh array");
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let dst = &mut cs[r * width..(r + 1) * width];
                    let (lo, hi) = valid_range(kx, pad, self.stride, w, wo);
                    for f in 0..n {
                        let xin = &xs[(f * cin + ci) * h * w..(f * cin + ci + 1) * h * w];
                        for oy in 0..ho {
                            let Some(iy) = (oy * self.stride + ky).checked_sub(pad).filter(|&v| v < h) else {
                                continue;
                            };
                            let base = f * cols_per_frame + oy * wo;
                            for ox in lo..hi {
                                dst[base + ox] = xin[iy * w + ox * self.stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Conv2d::im2col`].
    fn col2im(&self, cols: &Array2<f64>, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let (n, cin, h, w) = shape;
        let k = self.kernel();
        let pad = k / 2;
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let cols_per_frame = ho * wo;
        let width = n * cols_per_frame;
        let cols = cols.as_standard_layout();
        let cs = cols.as_slice().expect("standard layout");
        let mut x = Array4::zeros(shape);
        let xs = x.as_slice_mut().expect("fresh array");
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let src = &cs[r * width..(r + 1) * width];
                    let (lo, hi) = valid_range(kx, pad, self.stride, w, wo);
                    for f in 0..n {
                        let xin = &mut xs[(f * cin + ci) * h * w..(f * cin + ci + 1) * h * w];
                        for oy in 0..ho {
                            let Some(iy) = (oy * self.stride + ky).checked_sub(pad).filter(|&v| v < h) else {
                                continue;
                            };
                            let base = f * cols_per_frame + oy * wo;
                            for ox in lo..hi {
                                xin[iy * w + ox * self.stride + kx - pad] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (cout, cin, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("standard layout")
    }

    pub fn forward(&self, x: ArrayView4<f64>) -> Array4<f64> {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.in_channels(), "conv input channels");
        let cout = self.out_channels();
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let prod = self.weight_matrix().dot(&self.im2col(x));
        let mut out = Array4::zeros((n, cout, ho, wo));
        let plane = ho * wo;
        let ps = prod.as_slice().expect("fresh product");
        let os = out.as_slice_mut().expect("fresh array");
        for f in 0..n {
            for co in 0..cout {
                let b = self.bias[co];
                let src = &ps[co * n * plane + f * plane..co * n * plane + (f + 1) * plane];
                for (o, &v) in os[(f * cout + co) * plane..(f * cout + co + 1) * plane].iter_mut().zip(src) {
                    *o = v + b;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient.
    pub fn backward(&self, x: ArrayView4<f64>, grad_out: ArrayView4<f64>, grads: &mut Conv2d) -> Array4<f64> {
        let (n, cout, ho, wo) = grad_out.dim();
        let plane = ho * wo;
        let g = grad_out.as_standard_layout();
        let gs = g.as_slice().expect("standard layout");
        let mut gmat = Array2::zeros((cout, n * plane));
        {
            let gm = gmat.as_slice_mut().expect("fresh array");
            for f in 0..n {
                for co in 0..cout {
                    let src = &gs[(f * cout + co) * plane..(f * cout + co + 1) * plane];
                    gm[co * n * plane + f * plane..co * n * plane + (f + 1) * plane].copy_from_slice(src);
                    grads.bias[co] += src.iter().sum::<f64>();
                }
            }
        }
        let cols = self.im2col(x);
        let gw = gmat.dot(&cols.t());
        let (_, cin, k, _) = self.weight.dim();
        let mut gw_view = grads
            .weight
            .view_mut()
            .into_shape_with_order((cout, cin * k * k))
            .expect("standard layout");
        gw_view += &gw;
        let gcols = self.weight_matrix().t().dot(&gmat);
        self.col2im(&gcols, x.dim())
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − pad` lies
/// inside `0..w`.
fn valid_range(kx: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
    let hi = if w + pad > kx { (w + pad - kx).div_ceil(stride).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out × in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / input as f64).sqrt()).expect("finite std");
        Self {
            weight: Array2::from_shape_simple_fn((output, input), || normal.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    pub fn backward(&self, x: ArrayView1<f64>, grad_out: ArrayView1<f64>, grads: &mut Linear) -> Array1<f64> {
        for (o, &g) in grad_out.iter().enumerate() {
            grads.bias[o] += g;
            grads.weight.row_mut(o).scaled_add(g, &x);
        }
        self.weight.t().dot(&grad_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-definition convolution.
    fn naive(conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (n, cin, h, w) = x.dim();
        let k = conv.weight.dim().2 as isize;
        let pad = k / 2;
        let (ho, wo) = (conv.out_size(h), conv.out_size(w));
        Array4::from_shape_fn((n, conv.out_channels(), ho, wo), |(f, co, oy, ox)| {
            let mut acc = conv.bias[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride) as isize + ky - pad;
                        let ix = (ox * conv.stride) as isize + kx - pad;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight[[co, ci, ky as usize, kx as usize]] * x[[f, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, h) in &[(3, 1, 5), (3, 2, 6), (1, 2, 5), (1, 1, 4), (3, 2, 5)] {
            let mut conv = Conv2d::new(2, 3, k, stride, &mut rng);
            conv.bias = Array1::from(vec![0.1, -0.2, 0.3]);
            let x = Array4::from_shape_fn((2, 2, h, h), |(a, b, c, d)| ((a * 7 + b * 5 + c * 3 + d) as f64).sin());
            let got = conv.forward(x.view());
            let want = naive(&conv, &x);
            assert_eq!(got.dim(), want.dim());
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = Conv2d::new(2, 2, 3, 2, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 5, 5), |(_, b, c, d)| ((b * 5 + c * 3 + d) as f64 * 0.7).cos());
        let probe = Array4::from_shape_fn(conv.forward(x.view()).raw_dim(), |(a, b, c, d)| ((a + b * 3 + c * 2 + d) as f64).sin());
        let loss = |c: &Conv2d, x: &Array4<f64>| (&c.forward(x.view()) * &probe).sum();
        let mut grads = conv.zeros_like();
        let gx = conv.backward(x.view(), probe.view(), &mut grads);
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 1], [0, 1, 1, 2]] {
            let mut p = conv.clone();
            p.weight[idx] += eps;
            let mut m = conv.clone();
            m.weight[idx] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - grads.weight[idx]).abs() < 1e-7, "weight {idx:?}");
        }
        for idx in [[0, 0, 0, 0], [0, 1, 4, 4], [0, 0, 2, 3]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((fd - gx[idx]).abs() < 1e-7, "input {idx:?}");
        }
        let fd_bias = probe.slice(ndarray::s![.., 1, .., ..]).sum();
        assert!((grads.bias[1] - fd_bias).abs() < 1e-12);
    }

    #[test]
    fn linear_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = Linear::new(3, 2, &mut rng);
        let x = Array1::from(vec![0.5, -1.0, 2.0]);
        let g = Array1::from(vec![1.0, -3.0]);
        let mut grads = lin.zeros_like();
        let gx = lin.backward(x.view(), g.view(), &mut grads);
        assert_eq!(grads.weight[[1, 2]], -6.0);
        assert_eq!(grads.bias[0], 1.0);
        let want = lin.weight[[0, 1]] * 1.0 + lin.weight[[1, 1]] * -3.0;
        assert!((gx[1] - want).abs() < 1e-12);
    }
}
