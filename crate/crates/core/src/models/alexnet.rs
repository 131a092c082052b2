use serde::{Deserialize, Serialize};

use super::{conv_specs, dense_specs, init_parameters, Model, ModelConfig, ParamSpec, Phase};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{self, Tensor};

/// Reference AlexNet convolution widths, scaled by `width_mult`.
const BASE_WIDTHS: [usize; 5] = [96, 256, 384, 384, 256];
/// (kernel, padding) per conv stage; stage 1 uses `stem_stride`.
const KERNELS: [(usize, usize); 5] = [(11, 5), (5, 2), (3, 1), (3, 1), (3, 1)];
/// Stages followed by a 2x2 max pool (zero-based).
const POOL_AFTER: [usize; 3] = [0, 1, 4];

fn default_fc_width() -> usize {
    1024
}
fn default_width_mult() -> f64 {
    1.0
}
fn default_stem_stride() -> usize {
    4
}
fn default_in_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlexConfig {
    pub input_size: usize,
    #[serde(default = "default_fc_width")]
    pub fc_width: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    #[serde(default = "default_width_mult")]
    pub width_mult: f64,
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

impl Default for AlexConfig {
    fn default() -> Self {
        AlexConfig {
            input_size: 224,
            fc_width: default_fc_width(),
            num_classes: 3,
            dropout_rate: 0.5,
            width_mult: 1.0,
            stem_stride: 4,
            in_channels: 3,
        }
    }
}

impl AlexConfig {
    pub fn conv_widths(&self) -> [usize; 5] {
        BASE_WIDTHS.map(|w| ((w as f64 * self.width_mult).round() as usize).max(1))
    }

    /// Validates the config and returns the spatial side after the last pool.
    pub fn validate(&self) -> Result<usize> {
        if self.fc_width == 0 {
            return Err(Error::invalid("fc_width must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.width_mult > 0.0) || self.stem_stride == 0 || self.in_channels == 0 {
            return Err(Error::invalid("width_mult, stem_stride and in_channels must be positive"));
        }
        let mut side = self.input_size;
        for (stage, &(k, pad)) in KERNELS.iter().enumerate() {
            let stride = if stage == 0 { self.stem_stride } else { 1 };
            if side + 2 * pad < k {
                return Err(Error::invalid(format!(
                    "input size {} too small: conv{} sees {side}x{side}, kernel {k}",
                    self.input_size,
                    stage + 1
                )));
            }
            side = (side + 2 * pad - k) / stride + 1;
            if POOL_AFTER.contains(&stage) {
                if side < 2 || side % 2 != 0 {
                    return Err(Error::invalid(format!(
                        "input size {} too small for the pooling stack: pool after conv{} receives {side}x{side}",
                        self.input_size,
                        stage + 1
                    )));
                }
                side /= 2;
            }
        }
        Ok(side)
    }
}

/// Five conv+relu stages with three interleaved max pools, then
/// dense(fc) → relu → dropout → dense(fc) → relu → dropout → dense(classes) → softmax.
pub fn build_alexnet_variant(cfg: &AlexConfig, rng: &mut SeededRng) -> Result<Model> {
    let side = cfg.validate()?;
    let widths = cfg.conv_widths();
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut prev = cfg.in_channels;
    for (stage, (&w, &(k, _))) in widths.iter().zip(&KERNELS).enumerate() {
        conv_specs(&mut specs, &format!("conv{}", stage + 1), w, prev, k);
        prev = w;
    }
    let flat = prev * side * side;
    dense_specs(&mut specs, "fc1", flat, cfg.fc_width);
    dense_specs(&mut specs, "fc2", cfg.fc_width, cfg.fc_width);
    dense_specs(&mut specs, "fc3", cfg.fc_width, cfg.num_classes);

    let model = Model::from_specs(ModelConfig::Alexnet(cfg.clone()), specs)?;
    init_parameters(&model, rng);
    Ok(model)
}

pub(super) fn forward(model: &Model, cfg: &AlexConfig, x: &Tensor, phase: &mut Phase<'_>) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut h = x.clone();
    for (stage, &(_, pad)) in KERNELS.iter().enumerate() {
        let stride = if stage == 0 { cfg.stem_stride } else { 1 };
        h = model.conv_relu(&h, &format!("conv{}", stage + 1), stride, pad)?;
        if POOL_AFTER.contains(&stage) {
            h = tensor::maxpool2d(&h, 2)?;
        }
    }
    let flat = h.numel() / n;
    h = tensor::reshape(&h, &[n, flat])?;
    h = tensor::relu(&model.dense(&h, "fc1")?);
    h = phase.dropout(&h, cfg.dropout_rate)?;
    h = tensor::relu(&model.dense(&h, "fc2")?);
    h = phase.dropout(&h, cfg.dropout_rate)?;
    tensor::softmax(&model.dense(&h, "fc3")?)
}
