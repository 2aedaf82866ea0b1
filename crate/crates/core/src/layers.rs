//! Small learned-layer wrappers over the tape: convolution, linear, layer
//! norm. Each layer owns its parameter tensors and can report them under a
//! name prefix for the optimizer and checkpoints.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::Tensor;

/// Named parameter handle list used by optimizers and checkpoint IO.
pub type ParamList = Vec<(String, Tensor)>;

fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

#[derive(Clone)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2dLayer {
            weight: Tensor::leaf(he_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in), true),
            bias: Tensor::leaf(ArrayD::zeros(IxDyn(&[out_ch])), true),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, &self.bias, self.stride, self.pad)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[derive(Clone)]
pub struct LinearLayer {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

impl LinearLayer {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            weight: Tensor::leaf(he_normal(rng, &[in_dim, out_dim], in_dim), true),
            bias: Tensor::leaf(ArrayD::zeros(IxDyn(&[out_dim])), true),
        }
    }

    /// `[N, in] -> [N, out]`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight).add_bias_rows(&self.bias)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[derive(Clone)]
pub struct LayerNormLayer {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormLayer {
    pub fn new(dim: usize) -> Self {
        LayerNormLayer {
            gain: Tensor::leaf(Array1::ones(dim).into_dyn(), true),
            bias: Tensor::leaf(ArrayD::zeros(IxDyn(&[dim])), true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gain, &self.bias, 1e-6)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}
