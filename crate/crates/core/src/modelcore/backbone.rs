use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu_backward, leaky_relu_inplace, Conv2d, ConvCache};
use super::params::{DetectorParams, Grads, Partition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_size: usize,
    /// Output channels of the three stride-2 convolutions.
    pub channels: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 96,
            channels: [16, 32, 32],
        }
    }
}

impl BackboneConfig {
    pub fn feature_size(&self) -> usize {
        let mut s = self.input_size;
        for _ in 0..3 {
            s = (s + 2 - 3) / 2 + 1;
        }
        s
    }

    pub fn feature_channels(&self) -> usize {
        self.channels[2]
    }

    /// Total downsampling factor between image and feature grid.
    pub fn stride(&self) -> f64 {
        self.input_size as f64 / self.feature_size() as f64
    }
}

/// `C x h x w` backbone output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    convs: Vec<ConvCache>,
    acts: Vec<Vec<f64>>,
}

/// Three 3x3 stride-2 convolutions, each followed by leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    convs: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Self {
        let [c1, c2, c3] = config.channels;
        let convs = vec![
            Conv2d::new("backbone.conv1", 3, c1, 3, 2, Partition::Backbone),
            Conv2d::new("backbone.conv2", c1, c2, 3, 2, Partition::Backbone),
            Conv2d::new("backbone.conv3", c2, c3, 3, 2, Partition::Backbone),
        ];
        Self { config, convs }
    }

    pub fn init(&self, params: &mut DetectorParams, rng: &mut impl Rng) {
        for conv in &self.convs {
            conv.init(params, 1.0, rng);
        }
    }

    pub fn forward(
        &self,
        params: &DetectorParams,
        image: &[f64],
    ) -> Result<(FeatureMap, BackboneCache)> {
        let s = self.config.input_size;
        if image.len() != 3 * s * s {
            return Err(Error::Config(format!(
                "backbone expects a 3x{s}x{s} input, got {} values",
                image.len()
            )));
        }
        let mut caches = Vec::with_capacity(3);
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(3);
        let (mut h, mut w) = (s, s);
        for (i, conv) in self.convs.iter().enumerate() {
            let input = if i == 0 { image } else { &acts[i - 1][..] };
            let (mut out, cache) = conv.forward(params, input, h, w);
            leaky_relu_inplace(&mut out);
            let (oh, ow) = conv.out_size(h, w);
            h = oh;
            w = ow;
            caches.push(cache);
            acts.push(out);
        }
        let feature = FeatureMap {
            channels: self.config.feature_channels(),
            height: h,
            width: w,
            data: acts[2].clone(),
        };
        Ok((feature, BackboneCache { convs: caches, acts }))
    }

    /// Accumulates backbone parameter gradients; returns the image gradient
    /// when `need_input` is set.
    pub fn backward(
        &self,
        params: &DetectorParams,
        cache: &BackboneCache,
        dfeature: &[f64],
        grads: &mut Grads,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let mut grad = dfeature.to_vec();
        for i in (0..3).rev() {
            leaky_relu_backward(&cache.acts[i], &mut grad);
            let need = i > 0 || need_input;
            match self.convs[i].backward(params, &cache.convs[i], &grad, grads, false, need) {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }
}

/// Backbone features of one planar image.
pub fn backbone_forward(
    backbone: &Backbone,
    image: &[f64],
    params: &DetectorParams,
) -> Result<FeatureMap> {
    backbone.forward(params, image).map(|(f, _)| f)
}
