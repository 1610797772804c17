//! The depth-d residual prediction network: d 3x3 convolution layers with
//! ReLUs between them (none after the last), operating on a single luminance
//! channel. The network output is a residual image; adding it back to the
//! interpolated low-resolution input gives the super-resolved result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    add, conv2d_backward, conv2d_forward, relu_backward, relu_forward, ConvParams, Scalar, Tensor,
};

pub const DEFAULT_DEPTH: usize = 20;
pub const DEFAULT_WIDTH: usize = 64;

/// Ordered layer parameters plus depth/width config. Layer 1 consumes one
/// luminance channel, layers 2..d-1 are width-to-width, layer d emits one
/// channel.
#[derive(Clone, Debug, PartialEq)]
pub struct VdsrModel<T> {
    depth: usize,
    width: usize,
    layers: Vec<ConvParams<T>>,
}

/// Per-layer inputs retained by [`VdsrModel::forward`] for backprop.
/// `conv_inputs[k]` is the tensor fed to layer `k`; for `k > 0` it is the
/// post-ReLU activation of layer `k-1`, whose sign doubles as the ReLU mask.
pub struct ForwardTrace<T> {
    conv_inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn len(&self) -> usize {
        self.conv_inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conv_inputs.is_empty()
    }
}

impl<T: Scalar> VdsrModel<T> {
    /// All-zero weights and biases. A zero model predicts a zero residual,
    /// so reconstruction reduces to the bicubic input.
    pub fn zeros(depth: usize, width: usize) -> Result<Self> {
        if depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {depth}")));
        }
        if width < 1 {
            return Err(Error::Config("width must be >= 1".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        layers.push(ConvParams::zeros(width, 1));
        for _ in 1..depth - 1 {
            layers.push(ConvParams::zeros(width, width));
        }
        layers.push(ConvParams::zeros(1, width));
        Ok(VdsrModel {
            depth,
            width,
            layers,
        })
    }

    /// He initialization: per layer, zero-mean Gaussian weights with
    /// std = sqrt(2 / (3*3*in_ch)); biases zero. Deterministic for a fixed
    /// seed (single ChaCha stream, layers sampled in order).
    pub fn init_he(depth: usize, width: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(depth, width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let std = (2.0 / (9.0 * layer.in_channels() as f64)).sqrt();
            let normal = Normal::new(0.0, std).expect("std is positive");
            for w in layer.weights.data_mut() {
                *w = T::from_f64(normal.sample(&mut rng));
            }
        }
        Ok(model)
    }

    pub fn from_layers(layers: Vec<ConvParams<T>>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::Config("need at least 2 layers".into()));
        }
        let width = layers[0].out_channels();
        if layers[0].in_channels() != 1 {
            return Err(Error::Shape("first layer must consume 1 channel".into()));
        }
        if layers.last().unwrap().out_channels() != 1 {
            return Err(Error::Shape("last layer must emit 1 channel".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[1].in_channels() != pair[0].out_channels() {
                return Err(Error::Shape(format!(
                    "layer {} emits {} channels but layer {} expects {}",
                    k,
                    pair[0].out_channels(),
                    k + 1,
                    pair[1].in_channels()
                )));
            }
        }
        Ok(VdsrModel {
            depth: layers.len(),
            width,
            layers,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> &[ConvParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvParams<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Each layer grows the receptive field by 2: (2d+1) x (2d+1) for depth d.
    pub fn receptive_field(depth: usize) -> usize {
        2 * depth + 1
    }

    pub fn cast<U: Scalar>(&self) -> VdsrModel<U> {
        VdsrModel {
            depth: self.depth,
            width: self.width,
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    /// Residual prediction with the per-layer trace needed for backprop.
    pub fn forward(&self, ilr: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let mut conv_inputs = Vec::with_capacity(self.depth);
        let mut x = ilr.clone();
        let mut residual = None;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = conv2d_forward(&x, layer)?;
            let consumed = std::mem::replace(&mut x, Tensor::zeros(1, 1, 1, 1));
            conv_inputs.push(consumed);
            if k + 1 < self.depth {
                x = relu_forward(&z);
            } else {
                residual = Some(z);
            }
        }
        Ok((residual.unwrap(), ForwardTrace { conv_inputs }))
    }

    /// Residual prediction without retaining activations (inference path).
    pub fn predict(&self, ilr: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = ilr.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = conv2d_forward(&x, layer)?;
            x = if k + 1 < self.depth { relu_forward(&z) } else { z };
        }
        Ok(x)
    }

    /// Gradient of a scalar loss with respect to every layer's parameters,
    /// given dLoss/dResidual. Consumes the trace.
    fn backward(
        &self,
        trace: ForwardTrace<T>,
        grad_residual: Tensor<T>,
    ) -> Result<Vec<ConvParams<T>>> {
        let mut grads: Vec<ConvParams<T>> = Vec::with_capacity(self.depth);
        let mut g = grad_residual;
        for k in (0..self.depth).rev() {
            let (gi, gw, gb) = conv2d_backward(&g, &trace.conv_inputs[k], &self.layers[k])?;
            grads.push(ConvParams {
                weights: gw,
                bias: gb,
            });
            if k > 0 {
                // conv_inputs[k] is post-ReLU; positive entries mark where the
                // pre-activation was positive.
                g = relu_backward(&gi, &trace.conv_inputs[k])?;
            }
        }
        grads.reverse();
        Ok(grads)
    }

    /// Mean-squared-error loss (halved, averaged over batch and pixels) and
    /// its exact analytic gradients.
    ///
    /// In residual mode the regression target is `hr - ilr`; otherwise the
    /// network is asked to model `hr` directly.
    pub fn loss_and_grad(
        &self,
        ilr: &Tensor<T>,
        hr: &Tensor<T>,
        residual_mode: bool,
    ) -> Result<(f64, Vec<ConvParams<T>>)> {
        if !ilr.same_shape(hr) {
            return Err(Error::Shape(format!(
                "ilr shape {:?} != hr shape {:?}",
                ilr.shape(),
                hr.shape()
            )));
        }
        let (pred, trace) = self.forward(ilr)?;
        let count = pred.len();
        let inv_n = T::from_f64(1.0 / count as f64);

        let mut loss = 0.0f64;
        let (n, c, h, w) = pred.shape();
        let mut grad = Tensor::zeros(n, c, h, w);
        {
            let g = grad.data_mut();
            for (idx, ((&p, &y), &x)) in pred
                .data()
                .iter()
                .zip(hr.data())
                .zip(ilr.data())
                .enumerate()
            {
                let target = if residual_mode { y - x } else { y };
                let diff = p - target;
                loss += diff.to_f64() * diff.to_f64();
                g[idx] = diff * inv_n;
            }
        }
        loss /= 2.0 * count as f64;

        let grads = self.backward(trace, grad)?;
        Ok((loss, grads))
    }
}

/// HR = ILR + predicted residual. Not clamped; clamping happens only at
/// image export.
pub fn reconstruct<T: Scalar>(ilr: &Tensor<T>, residual: &Tensor<T>) -> Result<Tensor<T>> {
    add(ilr, residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn depth_below_two_is_rejected() {
        assert!(VdsrModel::<f32>::zeros(1, 8).is_err());
        assert!(VdsrModel::<f32>::zeros(2, 8).is_ok());
    }

    #[test]
    fn layer_channel_layout() {
        let m = VdsrModel::<f32>::zeros(5, 16).unwrap();
        assert_eq!(m.layers().len(), 5);
        assert_eq!(m.layers()[0].in_channels(), 1);
        assert_eq!(m.layers()[0].out_channels(), 16);
        assert_eq!(m.layers()[2].in_channels(), 16);
        assert_eq!(m.layers()[4].out_channels(), 1);
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(VdsrModel::<f32>::receptive_field(10), 21);
        assert_eq!(VdsrModel::<f32>::receptive_field(20), 41);
    }

    #[test]
    fn he_init_is_deterministic_and_biases_zero() {
        let a = VdsrModel::<f32>::init_he(4, 8, 99).unwrap();
        let b = VdsrModel::<f32>::init_he(4, 8, 99).unwrap();
        assert_eq!(a, b);
        let c = VdsrModel::<f32>::init_he(4, 8, 100).unwrap();
        assert_ne!(a, c);
        for layer in a.layers() {
            assert!(layer.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn he_init_std_matches_target_within_one_percent() {
        // 200 x 64 x 3 x 3 = 115200 samples in one layer
        let layers = vec![
            ConvParams::<f64>::zeros(64, 1),
            ConvParams::zeros(200, 64),
            ConvParams::zeros(1, 200),
        ];
        let mut model = VdsrModel::from_layers(layers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for layer in &mut model.layers {
            let std = (2.0 / (9.0 * layer.in_channels() as f64)).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            for w in layer.weights.data_mut() {
                *w = normal.sample(&mut rng);
            }
        }
        let wide = &model.layers()[1];
        let target = (2.0 / (9.0 * 64.0f64)).sqrt(); // ~0.0589
        assert!((target - 0.0589).abs() < 1e-4);
        let n = wide.weights.len() as f64;
        let mean: f64 = wide.weights.data().iter().sum::<f64>() / n;
        let var: f64 = wide
            .weights
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let emp = var.sqrt();
        assert!(
            (emp / target - 1.0).abs() < 0.01,
            "empirical std {emp} vs target {target}"
        );
    }

    #[test]
    fn zero_model_predicts_zero_residual() {
        let m = VdsrModel::<f64>::zeros(3, 4).unwrap();
        let ilr = Tensor::filled(1, 1, 5, 5, 0.7);
        let (res, trace) = m.forward(&ilr).unwrap();
        assert_eq!(trace.len(), 3);
        assert!(res.data().iter().all(|&v| v == 0.0));
        let hr = reconstruct(&ilr, &res).unwrap();
        assert_eq!(hr.data(), ilr.data());
    }

    #[test]
    fn forward_preserves_shape_across_sizes() {
        let m = VdsrModel::<f32>::init_he(3, 6, 5).unwrap();
        for (h, w) in [(1, 1), (7, 7), (41, 13), (1, 9)] {
            let ilr = Tensor::filled(2, 1, h, w, 0.4f32);
            let out = m.predict(&ilr).unwrap();
            assert_eq!(out.shape(), (2, 1, h, w));
        }
    }

    #[test]
    fn depth_two_delta_kernels_give_affine_map() {
        // layer 0: single width channel, center weight 2, bias 0.1
        // layer 1: center weight -0.5, bias 0.3
        // For x >= 0: residual = -0.5 * relu(2x + 0.1) + 0.3 = -x + 0.25
        let mut l0 = ConvParams::<f64>::zeros(1, 1);
        *l0.weights.at_mut(0, 0, 1, 1) = 2.0;
        l0.bias[0] = 0.1;
        let mut l1 = ConvParams::<f64>::zeros(1, 1);
        *l1.weights.at_mut(0, 0, 1, 1) = -0.5;
        l1.bias[0] = 0.3;
        let m = VdsrModel::from_layers(vec![l0, l1]).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ilr = Tensor::from_vec(1, 1, 5, 5, data.clone()).unwrap();
        let (res, _) = m.forward(&ilr).unwrap();
        for (r, x) in res.data().iter().zip(&data) {
            assert!((r - (-x + 0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_gives_zero_loss_and_grads() {
        // zero model, residual mode, hr == ilr => target residual is zero
        let m = VdsrModel::<f64>::zeros(3, 4).unwrap();
        let ilr = Tensor::filled(1, 1, 6, 6, 0.25);
        let (loss, grads) = m.loss_and_grad(&ilr, &ilr, true).unwrap();
        assert_eq!(loss, 0.0);
        for g in &grads {
            assert!(g.weights.data().iter().all(|&v| v == 0.0));
            assert!(g.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_model_loss_is_half_mean_squared_residual() {
        let m = VdsrModel::<f64>::zeros(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ilr_data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let hr_data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ilr = Tensor::from_vec(1, 1, 4, 4, ilr_data.clone()).unwrap();
        let hr = Tensor::from_vec(1, 1, 4, 4, hr_data.clone()).unwrap();
        let (loss, _) = m.loss_and_grad(&ilr, &hr, true).unwrap();
        let expect: f64 = ilr_data
            .iter()
            .zip(&hr_data)
            .map(|(x, y)| (y - x) * (y - x))
            .sum::<f64>()
            / (2.0 * 16.0);
        assert!((loss - expect).abs() < 1e-15);
    }

    #[test]
    fn loss_modes_coincide_on_zero_input() {
        let m = VdsrModel::<f64>::init_he(3, 4, 8).unwrap();
        let ilr = Tensor::zeros(1, 1, 5, 5);
        let hr = Tensor::filled(1, 1, 5, 5, 0.6);
        let (l1, _) = m.loss_and_grad(&ilr, &hr, true).unwrap();
        let (l2, _) = m.loss_and_grad(&ilr, &hr, false).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = VdsrModel::<f32>::zeros(2, 2).unwrap();
        let a = Tensor::zeros(1, 1, 4, 4);
        let b = Tensor::zeros(1, 1, 5, 4);
        assert!(m.loss_and_grad(&a, &b, true).is_err());
        let two_ch = Tensor::<f32>::zeros(1, 2, 4, 4);
        assert!(m.predict(&two_ch).is_err());
    }

    #[test]
    fn receptive_field_locality() {
        // Perturbing a pixel outside the (2d+1)-window centered on an output
        // pixel must leave that output unchanged.
        let depth = 3; // rf = 7
        let m = VdsrModel::<f64>::init_he(depth, 4, 42).unwrap();
        let side = 15;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect();
        let base = Tensor::from_vec(1, 1, side, side, data.clone()).unwrap();
        let out_base = m.predict(&base).unwrap();

        // center pixel (7,7); rf half-width = depth = 3; perturb at (7, 12)
        let mut bumped = data;
        bumped[7 * side + 12] += 0.5;
        let out_bumped = m
            .predict(&Tensor::from_vec(1, 1, side, side, bumped).unwrap())
            .unwrap();
        assert_eq!(out_base.at(0, 0, 7, 7), out_bumped.at(0, 0, 7, 7));
        // sanity: a pixel inside the window does change
        assert_ne!(out_base.at(0, 0, 7, 10), out_bumped.at(0, 0, 7, 10));
    }
}
