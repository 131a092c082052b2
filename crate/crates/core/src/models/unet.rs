use serde::{Deserialize, Serialize};

use super::{conv_specs, dense_specs, init_parameters, Model, ModelConfig, ParamSpec, Phase};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{self, Tensor};

const DEPTH: usize = 3;

fn default_in_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Square input side in pixels; must be divisible by 8.
    pub input_size: usize,
    pub base_channels: usize,
    /// Number of down-sampling levels. Only 3 is supported.
    pub depth: usize,
    pub bottleneck_width: usize,
    pub dropout_rate: f64,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_size: 64,
            base_channels: 8,
            depth: DEPTH,
            bottleneck_width: 128,
            dropout_rate: 0.5,
            in_channels: 3,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth != DEPTH {
            return Err(Error::invalid(format!("unet depth must be {DEPTH}, got {}", self.depth)));
        }
        if self.input_size == 0 || self.input_size % (1 << DEPTH) != 0 {
            return Err(Error::invalid(format!(
                "unet input size {} is not a positive multiple of {}",
                self.input_size,
                1 << DEPTH
            )));
        }
        if self.base_channels == 0 || self.bottleneck_width == 0 || self.in_channels == 0 {
            return Err(Error::invalid("unet widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    fn level_channels(&self) -> [usize; DEPTH] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b]
    }

    fn bottom_side(&self) -> usize {
        self.input_size >> DEPTH
    }

    fn bottom_len(&self) -> usize {
        self.level_channels()[DEPTH - 1] * self.bottom_side() * self.bottom_side()
    }
}

/// Encoder of three (conv3x3, conv3x3, maxpool) blocks, a dense bottleneck
/// with dropout, a decoder of three (upsample, concat skip, conv3x3,
/// conv3x3) blocks and a 1x1 sigmoid head. All 3x3 convs preserve size.
pub fn build_unet(cfg: &UNetConfig, rng: &mut SeededRng) -> Result<Model> {
    cfg.validate()?;
    let ch = cfg.level_channels();
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut prev = cfg.in_channels;
    for (level, &c) in ch.iter().enumerate() {
        let name = format!("enc{}", level + 1);
        conv_specs(&mut specs, &format!("{name}.conv1"), c, prev, 3);
        conv_specs(&mut specs, &format!("{name}.conv2"), c, c, 3);
        prev = c;
    }
    dense_specs(&mut specs, "bottleneck.fc1", cfg.bottom_len(), cfg.bottleneck_width);
    dense_specs(&mut specs, "bottleneck.fc2", cfg.bottleneck_width, cfg.bottom_len());
    for level in (0..DEPTH).rev() {
        let name = format!("dec{}", level + 1);
        let c = ch[level];
        conv_specs(&mut specs, &format!("{name}.conv1"), c, prev + c, 3);
        conv_specs(&mut specs, &format!("{name}.conv2"), c, c, 3);
        prev = c;
    }
    conv_specs(&mut specs, "head", 1, prev, 1);

    let model = Model::from_specs(ModelConfig::Unet(cfg.clone()), specs)?;
    init_parameters(&model, rng);
    Ok(model)
}

pub(super) fn forward(model: &Model, cfg: &UNetConfig, x: &Tensor, phase: &mut Phase<'_>) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut skips = Vec::with_capacity(DEPTH);
    let mut h = x.clone();
    for level in 1..=DEPTH {
        h = model.conv_relu(&h, &format!("enc{level}.conv1"), 1, 1)?;
        h = model.conv_relu(&h, &format!("enc{level}.conv2"), 1, 1)?;
        skips.push(h.clone());
        h = tensor::maxpool2d(&h, 2)?;
    }

    let bottom_shape = h.shape().to_vec();
    h = tensor::reshape(&h, &[n, cfg.bottom_len()])?;
    h = tensor::relu(&model.dense(&h, "bottleneck.fc1")?);
    h = phase.dropout(&h, cfg.dropout_rate)?;
    h = model.dense(&h, "bottleneck.fc2")?;
    h = tensor::reshape(&h, &bottom_shape)?;

    for level in (1..=DEPTH).rev() {
        let skip = skips.pop().expect("one skip per level");
        h = tensor::concat_channels(&tensor::upsample_nn(&h, 2)?, &skip)?;
        h = model.conv_relu(&h, &format!("dec{level}.conv1"), 1, 1)?;
        h = model.conv_relu(&h, &format!("dec{level}.conv2"), 1, 1)?;
    }
    Ok(tensor::sigmoid(&model.conv(&h, "head", 1, 0)?))
}
