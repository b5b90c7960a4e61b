use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Part-detector architecture.
///
/// Each resolution bank runs `stage_kernels.len()` valid convolutions with
/// ReLU; the first `pools` stages are followed by 2x2 max pooling. The trunk
/// is a `trunk_kernel` convolution over the concatenated bank features
/// followed by two 1x1 convolutions (the fully-connected stages realized
/// convolutionally). The final activation is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub conv_features: usize,
    pub banks: usize,
    pub joints: usize,
    pub fc_widths: [usize; 2],
    pub input_channels: usize,
    pub stage_kernels: Vec<usize>,
    pub pools: usize,
    pub trunk_kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            conv_features: 16,
            banks: 3,
            joints: 6,
            fc_widths: [512, 256],
            input_channels: 4,
            stage_kernels: vec![5, 5, 5],
            pools: 2,
            trunk_kernel: 9,
        }
    }
}

impl NetworkConfig {
    /// The 16-feature model used for feature comparisons.
    pub fn small(input_channels: usize, joints: usize) -> Self {
        Self {
            input_channels,
            joints,
            ..Self::default()
        }
    }

    /// The 128-feature model.
    pub fn big(input_channels: usize, joints: usize) -> Self {
        Self {
            conv_features: 128,
            input_channels,
            joints,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("network config: {m}")));
        if self.conv_features == 0 || self.joints == 0 || self.input_channels == 0 {
            return bad("features, joints and input channels must be positive".into());
        }
        if self.fc_widths.contains(&0) {
            return bad("fc widths must be positive".into());
        }
        if self.stage_kernels.is_empty() || self.stage_kernels.contains(&0) {
            return bad("need at least one stage with a positive kernel".into());
        }
        if self.pools > self.stage_kernels.len() {
            return bad(format!(
                "{} pools for {} stages",
                self.pools,
                self.stage_kernels.len()
            ));
        }
        if self.trunk_kernel == 0 {
            return bad("trunk kernel must be positive".into());
        }
        if self.banks == 0 {
            return bad("banks must be at least 1".into());
        }
        // Lower banks are evaluated on the output grid through phase
        // splitting, which needs every bank decimation to divide the stride.
        if self.stride_out() % (1 << (self.banks - 1)) != 0 {
            return bad(format!(
                "{} banks need 2^{} to divide the output stride {}",
                self.banks,
                self.banks - 1,
                self.stride_out()
            ));
        }
        if self.stage_receptive_field() % 2 != 0 {
            return bad("stage receptive field must be even".into());
        }
        // Every pooled stage must see an even extent for every window.
        let mut extent = self.window();
        for (s, &k) in self.stage_kernels.iter().enumerate() {
            if extent < k {
                return bad("window smaller than the kernels".into());
            }
            extent = extent + 1 - k;
            if s < self.pools {
                if extent % 2 != 0 {
                    return bad(format!("stage {s} output is odd before pooling"));
                }
                extent /= 2;
            }
        }
        if extent != self.trunk_kernel {
            return bad(format!(
                "stage output {extent} does not match trunk kernel {}",
                self.trunk_kernel
            ));
        }
        Ok(())
    }

    /// Output grid step in input pixels.
    pub fn stride_out(&self) -> usize {
        1 << self.pools
    }

    /// Receptive field of one bank-stack unit, in that bank's pixels.
    pub fn stage_receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for (s, &k) in self.stage_kernels.iter().enumerate() {
            rf += (k - 1) * jump;
            if s < self.pools {
                rf += jump;
                jump *= 2;
            }
        }
        rf
    }

    /// Finest-bank input window that produces one output cell.
    pub fn window(&self) -> usize {
        self.stage_receptive_field() + self.stride_out() * (self.trunk_kernel - 1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Convolution weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Layer<T> {
    fn init(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Self {
            kernel: Tensor::from_fn(&[c_out, c_in, k, k], |_| {
                T::of(rng.gen_range(-bound..bound))
            }),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            kernel: Tensor::zeros(self.kernel.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// All network parameters. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: NetworkConfig,
    /// `banks[k][s]` is stage `s` of resolution bank `k`.
    pub banks: Vec<Vec<Layer<T>>>,
    /// Trunk: feature-concat convolution, then the two 1x1 stages.
    pub trunk: Vec<Layer<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases.
    pub fn build(config: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let f = config.conv_features;
        let banks = (0..config.banks)
            .map(|_| {
                config
                    .stage_kernels
                    .iter()
                    .enumerate()
                    .map(|(s, &k)| {
                        let c_in = if s == 0 { config.input_channels } else { f };
                        Layer::init(f, c_in, k, rng)
                    })
                    .collect()
            })
            .collect();
        let [fc1, fc2] = config.fc_widths;
        let trunk = vec![
            Layer::init(fc1, config.banks * f, config.trunk_kernel, rng),
            Layer::init(fc2, fc1, 1, rng),
            Layer::init(config.joints, fc2, 1, rng),
        ];
        Ok(Self {
            config: config.clone(),
            banks,
            trunk,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            banks: self
                .banks
                .iter()
                .map(|b| b.iter().map(Layer::zeros_like).collect())
                .collect(),
            trunk: self.trunk.iter().map(Layer::zeros_like).collect(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.banks.iter().flatten().chain(self.trunk.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.banks.iter_mut().flatten().chain(self.trunk.iter_mut())
    }

    /// Every kernel and bias in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers().flat_map(|l| [&l.kernel, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }

    /// Names matching [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (k, bank) in self.banks.iter().enumerate() {
            for s in 0..bank.len() {
                names.push(format!("bank{k}.conv{s}.kernel"));
                names.push(format!("bank{k}.conv{s}.bias"));
            }
        }
        for s in 0..self.trunk.len() {
            names.push(format!("trunk{s}.kernel"));
            names.push(format!("trunk{s}.bias"));
        }
        names
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds parameters from tensors in [`Self::tensors`] order.
    pub fn from_tensors(config: &NetworkConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let template = Self::build(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let expected: Vec<Vec<usize>> = template
            .tensors()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::invalid(format!(
                "{} tensors for a model with {}",
                tensors.len(),
                expected.len()
            )));
        }
        for (i, (t, shape)) in tensors.iter().zip(&expected).enumerate() {
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "tensor {i} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut params = template;
        for (dst, src) in params.tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        Ok(params)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for t in self.tensors_mut() {
            t.scale(k);
        }
    }

    pub fn max_abs(&self) -> T {
        self.tensors()
            .iter()
            .map(|t| t.max_abs())
            .fold(T::zero(), |a, b| a.max(b))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        let mut m = T::zero();
        for (a, b) in self.tensors().into_iter().zip(other.tensors()) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast_layer = |l: &Layer<T>| Layer {
            kernel: l.kernel.cast(),
            bias: l.bias.cast(),
        };
        ModelParams {
            config: self.config.clone(),
            banks: self
                .banks
                .iter()
                .map(|b| b.iter().map(cast_layer).collect())
                .collect(),
            trunk: self.trunk.iter().map(cast_layer).collect(),
        }
    }
}
