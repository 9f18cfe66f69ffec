//! Segmentation network, projection heads and predictor.

mod checkpoint;
mod heads;
mod unet;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    export_params, import_params, read_checkpoint, write_checkpoint, CheckpointFile, TensorBlob, CHECKPOINT_MAGIC,
};
pub use heads::{ChannelHead, Head, HeadCache, Mlp, MlpCache, PoolHead, Predictor, PredictorCache, PREDICTOR_HIDDEN};
pub use unet::{ConvUnit, DecoderCache, DoubleConv, Encoded, EncoderCache, FeatureMap, Network, UNet, UpStage};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Global average pooling over space, then the MLP.
    Pool,
    /// Learned 1x1 channel aggregation keeping the spatial layout, then the MLP.
    Ch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of resolution levels including the bottleneck.
    pub levels: usize,
    pub base_filters: usize,
    pub norm_groups: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
    pub projection_dim: usize,
    pub head_kind: HeadKind,
    /// `[height, width]` of the slices fed to the network.
    pub input_size: [usize; 2],
}

impl ModelConfig {
    /// Defaults used for the CPU-sized phantom experiments.
    pub fn desk() -> Self {
        Self {
            levels: 4,
            base_filters: 16,
            norm_groups: 4,
            dropout_p: 0.5,
            num_classes: 4,
            projection_dim: 128,
            head_kind: HeadKind::Ch,
            input_size: [64, 64],
        }
    }

    /// The classic 5-level, 64-filter UNet on 512x512 slices.
    pub fn full_scale() -> Self {
        Self {
            levels: 5,
            base_filters: 64,
            input_size: [512, 512],
            ..Self::desk()
        }
    }

    /// Smallest valid topology; used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            levels: 3,
            base_filters: 4,
            input_size: [16, 16],
            ..Self::desk()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels - 1)
    }

    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn bottleneck_size(&self) -> [usize; 2] {
        let d = self.divisor();
        [self.input_size[0] / d, self.input_size[1] / d]
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 3 {
            return Err(Error::Config(format!("levels must be >= 3, got {}", self.levels)));
        }
        if self.base_filters < 4 {
            return Err(Error::Config(format!(
                "base_filters must be >= 4, got {}",
                self.base_filters
            )));
        }
        if self.norm_groups == 0 {
            return Err(Error::Config("norm_groups must be positive".into()));
        }
        for level in 0..self.levels {
            let ch = self.channels(level);
            if !ch.is_multiple_of(self.norm_groups) {
                return Err(Error::Config(format!(
                    "norm_groups {} does not divide {} channels at level {level}",
                    self.norm_groups, ch
                )));
            }
        }
        if self.projection_dim < 2 {
            return Err(Error::Config("projection_dim must be >= 2".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0,1)", self.dropout_p)));
        }
        self.check_input(self.input_size[0], self.input_size[1])
    }

    /// Spatial sizes must survive `levels - 1` halvings exactly.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be a positive multiple of {d} in both dimensions"
            )));
        }
        Ok(())
    }

    /// Parameter counts derived from the topology without allocating it.
    pub fn param_counts(&self) -> ParamCounts {
        let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
        let unit = |cin: usize, cout: usize| conv(cin, cout, 3) + 2 * cout;
        let mut unet = 0;
        let mut cin = 1;
        for level in 0..self.levels {
            let ch = self.channels(level);
            unet += unit(cin, ch) + unit(ch, ch);
            cin = ch;
        }
        for level in (0..self.levels - 1).rev() {
            let ch = self.channels(level);
            unet += unit(self.channels(level + 1), ch) + unit(2 * ch, ch) + unit(ch, ch);
        }
        unet += conv(self.base_filters, self.num_classes, 1);

        let dense = |i: usize, o: usize| i * o + o;
        let mlp = |i: usize| dense(i, 128) + dense(128, self.projection_dim);
        let c = self.bottleneck_channels();
        let [bh, bw] = self.bottleneck_size();
        ParamCounts {
            unet,
            pool_head: mlp(c),
            ch_head: conv(c, 1, 1) + mlp(bh * bw),
            predictor: dense(self.projection_dim, PREDICTOR_HIDDEN) + dense(PREDICTOR_HIDDEN, self.projection_dim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub unet: usize,
    pub pool_head: usize,
    pub ch_head: usize,
    pub predictor: usize,
}

impl ParamCounts {
    pub fn head(&self, kind: HeadKind) -> usize {
        match kind {
            HeadKind::Pool => self.pool_head,
            HeadKind::Ch => self.ch_head,
        }
    }
}
