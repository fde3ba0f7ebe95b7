//! Strided convolutions over 2D or 3D grids via im2col.
//!
//! Feature maps are `Mat`s with one row per channel and the flattened grid
//! (x slowest) along the columns. A 2D grid is a 3D grid of depth one with a
//! kernel of depth one, so both share the same code.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, Mat, Param, Parameterized};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Shape bookkeeping for a kernel-3, stride-2, padding-1 convolution that
/// maps an `image` grid to an `out` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub image: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out: [usize; 3],
}

impl Geometry {
    /// Convolution over a cubic (or square, for `dim == 2`) grid of side `size`.
    pub fn new(dim: usize, channels: usize, size: usize) -> Self {
        assert!(dim == 2 || dim == 3, "grid dimension must be 2 or 3");
        let lead = if dim == 3 { size } else { 1 };
        let image = [lead, size, size];
        let kernel = [if dim == 3 { KERNEL } else { 1 }, KERNEL, KERNEL];
        let stride = [if dim == 3 { STRIDE } else { 1 }, STRIDE, STRIDE];
        let pad = [if dim == 3 { PAD } else { 0 }, PAD, PAD];
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (image[a] + 2 * pad[a] - kernel[a]) / stride[a] + 1;
        }
        Geometry { channels, image, kernel, stride, pad, out }
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn image_len(&self) -> usize {
        self.image.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out.iter().product()
    }

    /// Input coordinate along `axis` for output `o` and kernel tap `k`.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        (i >= 0 && (i as usize) < self.image[axis]).then_some(i as usize)
    }

    /// Gathers patches: rows are `(channel, tap)`, columns output positions.
    pub fn im2col(&self, x: &Mat) -> Mat {
        assert_eq!((x.rows, x.cols), (self.channels, self.image_len()), "im2col input shape");
        let klen = self.kernel_len();
        let olen = self.out_len();
        let mut cols = Mat::zeros(self.channels * klen, olen);
        self.for_each_tap(|c, tap, o, i| {
            cols.data[(c * klen + tap) * olen + o] = x.data[c * self.image_len() + i];
        });
        cols
    }

    /// Adjoint of `im2col`: scatters patch values back, summing overlaps.
    pub fn col2im(&self, cols: &Mat) -> Mat {
        let klen = self.kernel_len();
        let olen = self.out_len();
        assert_eq!((cols.rows, cols.cols), (self.channels * klen, olen), "col2im input shape");
        let ilen = self.image_len();
        let mut x = Mat::zeros(self.channels, ilen);
        self.for_each_tap(|c, tap, o, i| {
            x.data[c * ilen + i] += cols.data[(c * klen + tap) * olen + o];
        });
        x
    }

    /// Calls `f(channel, tap, out_index, in_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [k0, k1, k2] = self.kernel;
        let [o0, o1, o2] = self.out;
        let [_, n1, n2] = self.image;
        for c in 0..self.channels {
            for a in 0..k0 {
                for b in 0..k1 {
                    for d in 0..k2 {
                        let tap = (a * k1 + b) * k2 + d;
                        for p in 0..o0 {
                            let Some(i0) = self.source(0, p, a) else { continue };
                            for q in 0..o1 {
                                let Some(i1) = self.source(1, q, b) else { continue };
                                for r in 0..o2 {
                                    let Some(i2) = self.source(2, r, d) else { continue };
                                    f(c, tap, (p * o1 + q) * o2 + r, (i0 * n1 + i1) * n2 + i2);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias(y: &mut Mat, bias: &[f64]) {
    for (c, b) in bias.iter().enumerate() {
        for v in y.row_mut(c) {
            *v += b;
        }
    }
}

fn accumulate_row_sums(grad: &mut [f64], dy: &Mat) {
    for (c, g) in grad.iter_mut().enumerate() {
        *g += dy.row(c).iter().sum::<f64>();
    }
}

/// Downsampling convolution, halves every spatial side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub geometry: Geometry,
    pub out_channels: usize,
    /// `out_channels x (in_channels * taps)`.
    pub weight: Param,
    pub bias: Param,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(dim: usize, in_channels: usize, out_channels: usize, size: usize, rng: &mut R) -> Self {
        let geometry = Geometry::new(dim, in_channels, size);
        let fan_in = in_channels * geometry.kernel_len();
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv {
            geometry,
            out_channels,
            weight: Param::uniform(out_channels * fan_in, bound, rng),
            bias: Param::uniform(out_channels, bound, rng),
        }
    }

    fn weight_mat(&self) -> Mat {
        let fan_in = self.geometry.channels * self.geometry.kernel_len();
        Mat::from_vec(self.out_channels, fan_in, self.weight.value.clone())
    }

    /// Returns the output and the patch matrix needed by `backward`.
    pub fn forward(&self, x: &Mat) -> (Mat, Mat) {
        let cols = self.geometry.im2col(x);
        let mut y = Mat::zeros(self.out_channels, self.geometry.out_len());
        gemm(1.0, &self.weight_mat(), false, &cols, false, 0.0, &mut y);
        add_channel_bias(&mut y, &self.bias.value);
        (y, cols)
    }

    pub fn backward(&mut self, cols: &Mat, dy: &Mat) -> Mat {
        self.weight.ensure_grad();
        self.bias.ensure_grad();
        let fan_in = self.geometry.channels * self.geometry.kernel_len();
        let mut dw = Mat::from_vec(self.out_channels, fan_in, std::mem::take(&mut self.weight.grad));
        gemm(1.0, dy, false, cols, true, 1.0, &mut dw);
        self.weight.grad = dw.data;
        accumulate_row_sums(&mut self.bias.grad, dy);
        let mut dcols = Mat::zeros(fan_in, self.geometry.out_len());
        gemm(1.0, &self.weight_mat(), true, dy, false, 0.0, &mut dcols);
        self.geometry.col2im(&dcols)
    }
}

impl Parameterized for Conv {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Upsampling (transposed) convolution, doubles every spatial side. It is
/// the adjoint of a `Conv` from the doubled grid, so output padding of one
/// is implied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose {
    /// Geometry of the adjoint convolution: its image is our output.
    pub geometry: Geometry,
    pub in_channels: usize,
    /// `in_channels x (out_channels * taps)`.
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose {
    pub fn new<R: Rng + ?Sized>(dim: usize, in_channels: usize, out_channels: usize, size: usize, rng: &mut R) -> Self {
        let geometry = Geometry::new(dim, out_channels, 2 * size);
        let fan = out_channels * geometry.kernel_len();
        let bound = 1.0 / ((in_channels * geometry.kernel_len()) as f64).sqrt();
        ConvTranspose {
            geometry,
            in_channels,
            weight: Param::uniform(in_channels * fan, bound, rng),
            bias: Param::uniform(out_channels, bound, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.geometry.channels
    }

    fn weight_mat(&self) -> Mat {
        let fan = self.geometry.channels * self.geometry.kernel_len();
        Mat::from_vec(self.in_channels, fan, self.weight.value.clone())
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        assert_eq!((x.rows, x.cols), (self.in_channels, self.geometry.out_len()), "transposed conv input shape");
        let fan = self.geometry.channels * self.geometry.kernel_len();
        let mut cols = Mat::zeros(fan, x.cols);
        gemm(1.0, &self.weight_mat(), true, x, false, 0.0, &mut cols);
        let mut y = self.geometry.col2im(&cols);
        add_channel_bias(&mut y, &self.bias.value);
        y
    }

    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        self.weight.ensure_grad();
        self.bias.ensure_grad();
        let dcols = self.geometry.im2col(dy);
        let fan = dcols.rows;
        let mut dw = Mat::from_vec(self.in_channels, fan, std::mem::take(&mut self.weight.grad));
        gemm(1.0, x, false, &dcols, true, 1.0, &mut dw);
        self.weight.grad = dw.data;
        accumulate_row_sums(&mut self.bias.grad, dy);
        let mut dx = Mat::zeros(self.in_channels, x.cols);
        gemm(1.0, &self.weight_mat(), false, &dcols, false, 0.0, &mut dx);
        dx
    }
}

impl Parameterized for ConvTranspose {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::numeric_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn output_sizes() {
        let g = Geometry::new(2, 1, 64);
        assert_eq!(g.out, [1, 32, 32]);
        let g = Geometry::new(3, 1, 8);
        assert_eq!(g.out, [4, 4, 4]);
        assert_eq!(g.kernel_len(), 27);
    }

    // direct definition of the convolution, used as the oracle
    fn naive_conv(conv: &Conv, x: &Mat) -> Mat {
        let g = conv.geometry;
        let mut y = Mat::zeros(conv.out_channels, g.out_len());
        for oc in 0..conv.out_channels {
            for p in 0..g.out[0] {
                for q in 0..g.out[1] {
                    for r in 0..g.out[2] {
                        let mut acc = conv.bias.value[oc];
                        for c in 0..g.channels {
                            for a in 0..g.kernel[0] {
                                for b in 0..g.kernel[1] {
                                    for d in 0..g.kernel[2] {
                                        let i0 = (p * g.stride[0] + a) as isize - g.pad[0] as isize;
                                        let i1 = (q * g.stride[1] + b) as isize - g.pad[1] as isize;
                                        let i2 = (r * g.stride[2] + d) as isize - g.pad[2] as isize;
                                        if i0 < 0 || i1 < 0 || i2 < 0 {
                                            continue;
                                        }
                                        let (i0, i1, i2) = (i0 as usize, i1 as usize, i2 as usize);
                                        if i0 >= g.image[0] || i1 >= g.image[1] || i2 >= g.image[2] {
                                            continue;
                                        }
                                        let tap = (a * g.kernel[1] + b) * g.kernel[2] + d;
                                        let w = conv.weight.value[oc * g.channels * g.kernel_len() + c * g.kernel_len() + tap];
                                        let xi = (i0 * g.image[1] + i1) * g.image[2] + i2;
                                        acc += w * x.data[c * g.image_len() + xi];
                                    }
                                }
                            }
                        }
                        y.data[oc * g.out_len() + (p * g.out[1] + q) * g.out[2] + r] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dim in [2, 3] {
            let conv = Conv::new(dim, 2, 3, 6, &mut rng);
            let x = random_mat(2, conv.geometry.image_len(), &mut rng);
            let (y, _) = conv.forward(&x);
            let oracle = naive_conv(&conv, &x);
            for (a, b) in y.data.iter().zip(&oracle.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dim in [2, 3] {
            let g = Geometry::new(dim, 2, 5);
            let x = random_mat(2, g.image_len(), &mut rng);
            let c = random_mat(2 * g.kernel_len(), g.out_len(), &mut rng);
            let lhs: f64 = g.im2col(&x).data.iter().zip(&c.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&g.col2im(&c).data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for dim in [2, 3] {
            let mut conv = Conv::new(dim, 2, 2, 4, &mut rng);
            let x = random_mat(2, conv.geometry.image_len(), &mut rng);
            let probe = random_mat(2, conv.geometry.out_len(), &mut rng);
            conv.zero_grad();
            let (_, cols) = conv.forward(&x);
            let dx = conv.backward(&cols, &probe);
            let dot = |y: &Mat| -> f64 { y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum() };

            let mut scratch = conv.clone();
            let numeric = numeric_gradient(&conv.flat_values(), 1e-6, |t| {
                scratch.load_flat(t).unwrap();
                dot(&scratch.forward(&x).0)
            });
            for (a, n) in conv.flat_grads().iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-6, "{a} vs {n}");
            }
            let numeric_x = numeric_gradient(&x.data, 1e-6, |xs| dot(&conv.forward(&Mat::from_vec(2, x.cols, xs.to_vec())).0));
            for (a, n) in dx.data.iter().zip(&numeric_x) {
                assert!((a - n).abs() < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in [2, 3] {
            let mut up = ConvTranspose::new(dim, 2, 3, 2, &mut rng);
            assert_eq!(up.geometry.image[1], 4);
            let x = random_mat(2, up.geometry.out_len(), &mut rng);
            let probe = random_mat(3, up.geometry.image_len(), &mut rng);
            up.zero_grad();
            let dx = up.backward(&x, &probe);
            let dot = |y: &Mat| -> f64 { y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum() };

            let mut scratch = up.clone();
            let numeric = numeric_gradient(&up.flat_values(), 1e-6, |t| {
                scratch.load_flat(t).unwrap();
                dot(&scratch.forward(&x))
            });
            for (a, n) in up.flat_grads().iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-6, "{a} vs {n}");
            }
            let numeric_x = numeric_gradient(&x.data, 1e-6, |xs| dot(&up.forward(&Mat::from_vec(2, x.cols, xs.to_vec()))));
            for (a, n) in dx.data.iter().zip(&numeric_x) {
                assert!((a - n).abs() < 1e-6, "{a} vs {n}");
            }
        }
    }
}
