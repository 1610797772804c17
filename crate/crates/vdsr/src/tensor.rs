//! Dense 4D tensors and the three differentiable primitives the network
//! needs: zero-padded 3x3 convolution, ReLU, and elementwise add.
//!
//! Everything here is a pure function of its inputs. Convolution parallelizes
//! over (batch, output-channel) planes; each output element is accumulated in
//! a fixed sequential order, so results are bit-stable regardless of thread
//! count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Element type for tensors: `f32` for training/inference, `f64` for
/// gradient-check instantiations of the same code paths.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense 4D array in (batch, channel, height, width) row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: (usize, usize, usize, usize),
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1, "all dims must be >= 1");
        Tensor {
            shape: (n, c, h, w),
            data: vec![T::ZERO; n * c * h * w],
        }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: T) -> Self {
        let mut t = Self::zeros(n, c, h, w);
        t.data.fill(v);
        t
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "buffer length {} does not match shape {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            )));
        }
        Ok(Tensor {
            shape: (n, c, h, w),
            data,
        })
    }

    /// (batch, channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape.0
    }

    pub fn channels(&self) -> usize {
        self.shape.1
    }

    pub fn height(&self) -> usize {
        self.shape.2
    }

    pub fn width(&self) -> usize {
        self.shape.3
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let (_, ch, h, w) = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let (_, ch, h, w) = self.shape;
        &mut self.data[((n * ch + c) * h + y) * w + x]
    }

    /// One (batch, channel) plane as a flat h*w slice.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let (_, ch, h, w) = self.shape;
        let start = (n * ch + c) * h * w;
        &self.data[start..start + h * w]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Weights and biases of one 3x3 convolution layer. The kernel spatial size
/// is fixed at 3x3; zero padding of 1 keeps spatial dims unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// (out_ch, in_ch, 3, 3)
    pub weights: Tensor<T>,
    /// one bias per output channel
    pub bias: Vec<T>,
}

pub const KERNEL: usize = 3;
const PAD: isize = 1;

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(out_ch: usize, in_ch: usize) -> Self {
        ConvParams {
            weights: Tensor::zeros(out_ch, in_ch, KERNEL, KERNEL),
            bias: vec![T::ZERO; out_ch],
        }
    }

    pub fn new(weights: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let (o, _i, kh, kw) = weights.shape();
        if kh != KERNEL || kw != KERNEL {
            return Err(Error::Shape(format!(
                "kernel spatial size must be {KERNEL}x{KERNEL}, got {kh}x{kw}"
            )));
        }
        if bias.len() != o {
            return Err(Error::Shape(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                o
            )));
        }
        Ok(ConvParams { weights, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().0
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().1
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weights.at(o, i, ky, kx)
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.all_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

/// 3x3 convolution, stride 1, one pixel of zero padding on every side, so the
/// output spatial size equals the input's.
///
/// `out[n,o,y,x] = bias[o] + sum_{i,ky,kx} w[o,i,ky,kx] * in[n,i,y+ky-1,x+kx-1]`
/// with out-of-bounds input treated as zero.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let (n, ci, h, w) = input.shape();
    if params.in_channels() != ci {
        return Err(Error::Shape(format!(
            "input has {} channels but kernel expects {}",
            ci,
            params.in_channels()
        )));
    }
    let co = params.out_channels();
    let mut out = Tensor::zeros(n, co, h, w);

    out.data
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(p, plane)| {
            let (ni, o) = (p / co, p % co);
            plane.fill(params.bias[o]);
            for i in 0..ci {
                let in_plane = input.plane(ni, i);
                accumulate_correlation(plane, in_plane, h, w, |ky, kx| params.w(o, i, ky, kx));
            }
        });
    Ok(out)
}

/// Adds the 3x3 cross-correlation of `src` (weights given per tap) into `dst`.
/// Row-slice inner loops so the compiler can vectorize; per-element
/// accumulation order is fixed at (tap ky, kx) regardless of parallelism.
#[inline]
fn accumulate_correlation<T: Scalar, F: Fn(usize, usize) -> T>(
    dst: &mut [T],
    src: &[T],
    h: usize,
    w: usize,
    weight: F,
) {
    for ky in 0..KERNEL {
        let dy = ky as isize - PAD;
        for kx in 0..KERNEL {
            let dx = kx as isize - PAD;
            let wgt = weight(ky, kx);
            let y0 = (-dy).max(0) as usize;
            let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
            let x0 = (-dx).max(0) as usize;
            let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
            if x0 >= x1 {
                continue;
            }
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let drow = &mut dst[y * w + x0..y * w + x1];
                let srow = &src[(sy * w as usize) + ((x0 as isize + dx) as usize)..];
                for (d, s) in drow.iter_mut().zip(srow) {
                    *d += wgt * *s;
                }
            }
        }
    }
}

/// Exact analytic gradients of [`conv2d_forward`] with respect to its input,
/// weights, and bias, given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &ConvParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (n, ci, h, w) = input.shape();
    let co = params.out_channels();
    if params.in_channels() != ci {
        return Err(Error::Shape(format!(
            "input has {} channels but kernel expects {}",
            ci,
            params.in_channels()
        )));
    }
    if grad_out.shape() != (n, co, h, w) {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} does not match forward output ({n},{co},{h},{w})",
            grad_out.shape()
        )));
    }

    // d/d_input: correlate grad_out with the kernel flipped in both spatial
    // axes and transposed in channels, which is again a padded correlation.
    let mut flipped = Tensor::zeros(ci, co, KERNEL, KERNEL);
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    *flipped.at_mut(i, o, KERNEL - 1 - ky, KERNEL - 1 - kx) =
                        params.w(o, i, ky, kx);
                }
            }
        }
    }
    let grad_input = conv2d_forward(
        grad_out,
        &ConvParams {
            weights: flipped,
            bias: vec![T::ZERO; ci],
        },
    )?;

    // d/d_weights[o,i,ky,kx] = sum over batch and valid positions of
    // grad_out[n,o,y,x] * input[n,i,y+ky-1,x+kx-1].
    let mut grad_weights = Tensor::zeros(co, ci, KERNEL, KERNEL);
    grad_weights
        .data
        .par_chunks_mut(KERNEL * KERNEL)
        .enumerate()
        .for_each(|(p, taps)| {
            let (o, i) = (p / ci, p % ci);
            for ky in 0..KERNEL {
                let dy = ky as isize - PAD;
                for kx in 0..KERNEL {
                    let dx = kx as isize - PAD;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    let mut acc = T::ZERO;
                    if x0 < x1 {
                        for ni in 0..n {
                            let go = grad_out.plane(ni, o);
                            let ip = input.plane(ni, i);
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &go[y * w + x0..y * w + x1];
                                let irow = &ip[sy * w + (x0 as isize + dx) as usize..];
                                for (g, v) in grow.iter().zip(irow) {
                                    acc += *g * *v;
                                }
                            }
                        }
                    }
                    taps[ky * KERNEL + kx] = acc;
                }
            }
        });

    // d/d_bias[o] = sum of grad_out over batch and space.
    let grad_bias: Vec<T> = (0..co)
        .into_par_iter()
        .map(|o| {
            let mut acc = T::ZERO;
            for ni in 0..n {
                for g in grad_out.plane(ni, o) {
                    acc += *g;
                }
            }
            acc
        })
        .collect();

    Ok((grad_input, grad_weights, grad_bias))
}

/// Elementwise `max(0, x)`.
pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Passes `grad_out` where the forward input was strictly positive; the
/// subgradient at exactly zero is taken as zero.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    if !grad_out.same_shape(input) {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} != input shape {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = grad_out
        .data
        .iter()
        .zip(&input.data)
        .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Ok(Tensor {
        shape: grad_out.shape,
        data,
    })
}

/// Elementwise sum of two tensors of identical shape.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "cannot add {:?} to {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape,
        data,
    })
}
