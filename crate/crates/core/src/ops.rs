//! Forward and backward kernels for the primitives the layers need.
//!
//! These are plain functions over [`Tensor`]s; [`crate::autograd`] wires them
//! into a tape.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

fn dims2<T: Element>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::dim(format!("{what}: expected rank 2, got {s:?}"))),
    }
}

fn dims4<T: Element>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(Error::dim(format!("{what}: expected rank 4, got {s:?}"))),
    }
}

/// `a[m×p] · b[p×n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, p) = dims2(a, "matmul lhs")?;
    let (p2, n) = dims2(b, "matmul rhs")?;
    if p != p2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, p, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// Gradients of `matmul` w.r.t. both operands.
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, p) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut ga = vec![T::zero(); m * p];
    gemm(m, n, p, grad.data(), false, b.data(), true, &mut ga, false);
    let mut gb = vec![T::zero(); p * n];
    gemm(p, m, n, a.data(), true, grad.data(), false, &mut gb, false);
    (
        Tensor::new(vec![m, p], ga).expect("shape"),
        Tensor::new(vec![p, n], gb).expect("shape"),
    )
}

/// Fully connected layer without bias: `x[N×in] · w[out×in]ᵀ`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin) = dims2(x, "linear input")?;
    let (fout, fin2) = dims2(w, "linear weight")?;
    if fin != fin2 {
        return Err(Error::dim(format!(
            "linear: input width {fin} but weight {:?}",
            w.shape()
        )));
    }
    let mut out = vec![T::zero(); n * fout];
    gemm(n, fin, fout, x.data(), false, w.data(), true, &mut out, false);
    Tensor::new(vec![n, fout], out)
}

pub fn linear_backward_input<T: Element>(w: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let (fout, fin) = (w.shape()[0], w.shape()[1]);
    let n = grad.shape()[0];
    let mut gx = vec![T::zero(); n * fin];
    gemm(n, fout, fin, grad.data(), false, w.data(), false, &mut gx, false);
    Tensor::new(vec![n, fin], gx).expect("shape")
}

pub fn linear_backward_weight<T: Element>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = grad.shape()[1];
    let mut gw = vec![T::zero(); fout * fin];
    gemm(fout, n, fin, grad.data(), true, x.data(), false, &mut gw, false);
    Tensor::new(vec![fout, fin], gw).expect("shape")
}

/// Static description of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = match input {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => return Err(Error::dim(format!("conv2d input must be rank 4, got {s:?}"))),
        };
        let [o, c2, k1, k2] = match weight {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => return Err(Error::dim(format!("conv2d weight must be rank 4, got {s:?}"))),
        };
        if c != c2 {
            return Err(Error::dim(format!(
                "conv2d: input has {c} channels, weight expects {c2}"
            )));
        }
        if k1 != k2 || k1 % 2 == 0 {
            return Err(Error::dim(format!(
                "conv2d: kernel must be square and odd, got {k1}x{k2}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be positive"));
        }
        let extent = |len: usize| -> Result<usize> {
            let padded = len + 2 * padding;
            if padded < k1 || !(padded - k1).is_multiple_of(stride) {
                return Err(Error::dim(format!(
                    "conv2d: extent {len} with padding {padding}, kernel {k1}, stride {stride} \
                     is not integral"
                )));
            }
            Ok((padded - k1) / stride + 1)
        };
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: k1,
            stride,
            padding,
            out_height: extent(h)?,
            out_width: extent(w)?,
        })
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Input coordinate read by output `(oy, ox)` at kernel offset `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    /// Unfolds one sample into a `[C·κ², H'·W']` column matrix.
    fn im2col<T: Element>(&self, sample: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let pos = self.positions();
        for c in 0..self.in_channels {
            let plane = &sample[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * pos..(row + 1) * pos];
                    for oy in 0..self.out_height {
                        for ox in 0..self.out_width {
                            dst[oy * self.out_width + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => plane[y * self.width + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], sample: &mut [T]) {
        let k = self.kernel;
        let pos = self.positions();
        for c in 0..self.in_channels {
            let plane =
                &mut sample[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * pos..(row + 1) * pos];
                    for oy in 0..self.out_height {
                        for ox in 0..self.out_width {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                plane[y * self.width + x] += src[oy * self.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with implicit zero padding, weight `[O, C, κ, κ]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let (patch, pos) = (g.patch(), g.positions());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * pos;
    let mut out = vec![T::zero(); g.batch * out_size];
    let mut cols = vec![T::zero(); patch * pos];
    for n in 0..g.batch {
        g.im2col(&input.data()[n * in_size..(n + 1) * in_size], &mut cols);
        gemm(
            g.out_channels,
            patch,
            pos,
            weight.data(),
            false,
            &cols,
            false,
            &mut out[n * out_size..(n + 1) * out_size],
            false,
        );
    }
    Tensor::new(vec![g.batch, g.out_channels, g.out_height, g.out_width], out)
}

/// Gradient of `conv2d` w.r.t. its weight.
pub fn conv2d_backward_weight<T: Element>(
    input: &Tensor<T>,
    weight_shape: &[usize],
    grad: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight_shape, stride, padding)?;
    let (patch, pos) = (g.patch(), g.positions());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * pos;
    let mut gw = vec![T::zero(); g.out_channels * patch];
    let mut cols = vec![T::zero(); patch * pos];
    for n in 0..g.batch {
        g.im2col(&input.data()[n * in_size..(n + 1) * in_size], &mut cols);
        gemm(
            g.out_channels,
            pos,
            patch,
            &grad.data()[n * out_size..(n + 1) * out_size],
            false,
            &cols,
            true,
            &mut gw,
            true,
        );
    }
    Tensor::new(weight_shape.to_vec(), gw)
}

/// Gradient of `conv2d` w.r.t. its input.
pub fn conv2d_backward_input<T: Element>(
    input_shape: &[usize],
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input_shape, weight.shape(), stride, padding)?;
    let (patch, pos) = (g.patch(), g.positions());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * pos;
    let mut gx = vec![T::zero(); g.batch * in_size];
    let mut cols = vec![T::zero(); patch * pos];
    for n in 0..g.batch {
        gemm(
            patch,
            g.out_channels,
            pos,
            weight.data(),
            true,
            &grad.data()[n * out_size..(n + 1) * out_size],
            false,
            &mut cols,
            false,
        );
        g.col2im(&cols, &mut gx[n * in_size..(n + 1) * in_size]);
    }
    Tensor::new(input_shape.to_vec(), gx)
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Element>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    x.zip_map(grad, |v, g| if v > T::zero() { g } else { T::zero() })
        .expect("relu grad shape")
}

/// 2×2 stride-2 max pooling; returns the output and the flat argmax of each window.
pub fn maxpool2<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = dims4(x, "maxpool2")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::dim(format!("maxpool2: spatial extent {h}x{w} too small")));
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    grad: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        d[i] += g;
    }
    gx
}

/// Row-wise softmax of `[N×classes]` logits, max-shifted.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = dims2(logits, "softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k.max(1)).take(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Mean negative log-likelihood of the softmax; also returns the probabilities.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = dims2(logits, "cross_entropy")?;
    if labels.len() != n {
        return Err(Error::dim(format!(
            "cross_entropy: {n} rows but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::dim("cross_entropy: empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside [0, {k})")));
    }
    let probs = softmax(logits)?;
    let mut total = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        // log p computed from logits to avoid log(0) on saturated rows
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total += lse - row[l];
    }
    Ok((total / T::cast(n as f64), probs))
}

pub fn cross_entropy_backward<T: Element>(probs: &Tensor<T>, labels: &[usize], grad: T) -> Tensor<T> {
    let k = probs.shape()[1];
    let scale = grad / T::cast(labels.len() as f64);
    let mut g = probs.data().to_vec();
    for (i, &l) in labels.iter().enumerate() {
        g[i * k + l] -= T::one();
    }
    for v in g.iter_mut() {
        *v *= scale;
    }
    Tensor::new(probs.shape().to_vec(), g).expect("shape")
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Index of the largest entry in each row.
pub fn argmax_rows<T: Element>(x: &Tensor<T>) -> Vec<usize> {
    let k = x.shape()[1];
    x.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let e = matmul(&t(&[2, 3], &[0.0; 6]), &t(&[2, 3], &[0.0; 6]));
        assert!(matches!(e, Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_scalar_and_overlap() {
        let r = conv2d(&t(&[1, 1, 1, 1], &[3.0]), &t(&[1, 1, 1, 1], &[0.5]), 1, 0).unwrap();
        assert_eq!(r.data(), &[1.5]);
        let ones = t(&[1, 1, 3, 3], &[1.0; 9]);
        let r = conv2d(&ones, &ones, 1, 1).unwrap();
        assert_eq!(r.shape(), &[1, 1, 3, 3]);
        assert_eq!(r.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_rejects_non_integral_extent_and_even_kernel() {
        let x = t(&[1, 1, 4, 4], &[0.0; 16]);
        let w3 = t(&[1, 1, 3, 3], &[0.0; 9]);
        assert!(conv2d(&x, &w3, 2, 0).is_err());
        assert!(conv2d(&x, &w3, 1, 1).is_ok());
        let w2 = t(&[1, 1, 2, 2], &[0.0; 4]);
        assert!(conv2d(&x, &w2, 1, 0).is_err());
    }

    #[test]
    fn conv_stride_two() {
        let x = t(&[1, 1, 5, 5], &(0..25).map(f64::from).collect::<Vec<_>>());
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let r = conv2d(&x, &w, 2, 0).unwrap();
        assert_eq!(r.data(), &[0.0, 2.0, 4.0, 10.0, 12.0, 14.0, 20.0, 22.0, 24.0]);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn relu_pool_ce() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let (p, arg) = maxpool2(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let (loss, _) = cross_entropy(&t(&[1, 10], &[0.3; 10]), &[7]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let e = cross_entropy(&t(&[1, 3], &[0.0; 3]), &[3]);
        assert!(matches!(e, Err(Error::Data(_))));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!((sigmoid(800.0f64) - 1.0).abs() < 1e-15);
    }
}
