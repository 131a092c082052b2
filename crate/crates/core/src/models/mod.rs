//! The two network architectures: a U-Net with a fully connected bottleneck
//! for segmentation and a narrowed AlexNet for classification.

mod alexnet;
mod unet;

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{self, Tensor};

pub use alexnet::{build_alexnet_variant, AlexConfig};
pub use unet::{build_unet, UNetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Unet(UNetConfig),
    Alexnet(AlexConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Unet(c) => c.validate(),
            ModelConfig::Alexnet(c) => c.validate().map(|_| ()),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            ModelConfig::Unet(c) => c.input_size,
            ModelConfig::Alexnet(c) => c.input_size,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ModelConfig::Unet(c) => c.in_channels,
            ModelConfig::Alexnet(c) => c.in_channels,
        }
    }

    /// Builds the architecture with freshly initialized parameters.
    pub fn build(&self, rng: &mut SeededRng) -> Result<Model> {
        match self {
            ModelConfig::Unet(c) => build_unet(c, rng),
            ModelConfig::Alexnet(c) => build_alexnet_variant(c, rng),
        }
    }
}

/// Training runs dropout with a seeded stream; evaluation is deterministic.
pub enum Phase<'a> {
    Train(&'a mut SeededRng),
    Eval,
}

impl Phase<'_> {
    fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        match self {
            Phase::Train(rng) => tensor::dropout(x, rate, *rng, true),
            Phase::Eval => Ok(x.clone()),
        }
    }
}

pub struct Model {
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

/// Parameter declaration used while assembling an architecture.
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Model {
    pub(crate) fn from_specs(config: ModelConfig, specs: Vec<ParamSpec>) -> Result<Self> {
        let mut params = Vec::with_capacity(specs.len());
        let mut index = HashMap::with_capacity(specs.len());
        for spec in specs {
            let n = spec.shape.iter().product();
            if index.insert(spec.name.clone(), params.len()).is_some() {
                return Err(Error::invalid(format!("duplicate parameter name `{}`", spec.name)));
            }
            params.push((spec.name, Tensor::parameter(&spec.shape, vec![0.0; n])?));
        }
        Ok(Model { config, params, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters in their stable declaration order.
    pub fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    fn p(&self, name: &str) -> &Tensor {
        self.param(name)
            .unwrap_or_else(|| panic!("architecture references undeclared parameter `{name}`"))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|(_, t)| t.zero_grad());
    }

    pub fn forward(&self, input: &Tensor, mut phase: Phase<'_>) -> Result<Tensor> {
        let s = input.shape();
        let size = self.config.input_size();
        if s.len() != 4 || s[1] != self.config.in_channels() || s[2] != size || s[3] != size {
            return Err(Error::shape(format!(
                "model expects [N,{},{size},{size}] input, got {s:?}",
                self.config.in_channels()
            )));
        }
        match &self.config {
            ModelConfig::Unet(c) => unet::forward(self, c, input, &mut phase),
            ModelConfig::Alexnet(c) => alexnet::forward(self, c, input, &mut phase),
        }
    }

    /// Copies of all parameter values, in declaration order.
    pub fn snapshot(&self) -> Vec<NamedArray> {
        self.params
            .iter()
            .map(|(name, t)| NamedArray {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect()
    }

    /// Overwrites parameter values; names, order and shapes must match.
    pub fn load_snapshot(&self, arrays: &[NamedArray]) -> Result<()> {
        if arrays.len() != self.params.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                arrays.len()
            )));
        }
        for ((name, t), a) in self.params.iter().zip(arrays) {
            if *name != a.name || t.shape() != a.shape.as_slice() {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter `{name}` {:?} vs stored `{}` {:?}",
                    t.shape(),
                    a.name,
                    a.shape
                )));
            }
        }
        for ((_, t), a) in self.params.iter().zip(arrays) {
            t.data_mut().copy_from_slice(&a.data);
        }
        Ok(())
    }

    // shared layer helpers

    fn conv(&self, x: &Tensor, layer: &str, stride: usize, padding: usize) -> Result<Tensor> {
        tensor::conv2d(
            x,
            self.p(&format!("{layer}.weight")),
            self.p(&format!("{layer}.bias")),
            stride,
            padding,
        )
    }

    fn conv_relu(&self, x: &Tensor, layer: &str, stride: usize, padding: usize) -> Result<Tensor> {
        Ok(tensor::relu(&self.conv(x, layer, stride, padding)?))
    }

    fn dense(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        tensor::dense(x, self.p(&format!("{layer}.weight")), self.p(&format!("{layer}.bias")))
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("tensors", &self.params.len())
            .field("scalars", &self.num_parameters())
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub(crate) fn conv_specs(specs: &mut Vec<ParamSpec>, layer: &str, out_c: usize, in_c: usize, k: usize) {
    specs.push(ParamSpec {
        name: format!("{layer}.weight"),
        shape: vec![out_c, in_c, k, k],
    });
    specs.push(ParamSpec {
        name: format!("{layer}.bias"),
        shape: vec![out_c],
    });
}

pub(crate) fn dense_specs(specs: &mut Vec<ParamSpec>, layer: &str, inputs: usize, outputs: usize) {
    specs.push(ParamSpec {
        name: format!("{layer}.weight"),
        shape: vec![inputs, outputs],
    });
    specs.push(ParamSpec {
        name: format!("{layer}.bias"),
        shape: vec![outputs],
    });
}

/// He initialization: weights ~ N(0, 2/fan_in), biases zero.
///
/// Rank-4 weights are convolution kernels `[K,C,kh,kw]` with fan-in
/// `C·kh·kw`; rank-2 weights are dense `[D,M]` with fan-in `D`.
pub fn init_parameters(model: &Model, rng: &mut SeededRng) {
    for (name, t) in model.parameters() {
        let mut data = t.data_mut();
        if name.ends_with(".bias") {
            data.fill(0.0);
            continue;
        }
        let s = t.shape();
        let fan_in: usize = match s.len() {
            4 => s[1] * s[2] * s[3],
            2 => s[0],
            _ => s[1..].iter().product(),
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        data.iter_mut().for_each(|v| *v = normal.sample(rng));
    }
}
