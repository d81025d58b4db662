//! Darknet-19 feature extractor with the last max-pool removed, exposing the
//! four pre-pool stage outputs as taps.

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::layers::ConvBlock;
use crate::params::{ParamStore, Session};
use crate::rng::SplitMix64;
use crate::tensor::{ConvSpec, Real, Var};

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<ConvBlock>,
    pool_after: bool,
    tap: bool,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<Stage>,
    input_resolution: usize,
    input_channels: usize,
}

/// Tapped maps at strides 1, 2, 4, 8 (finest first) and the final map.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub taps: Vec<Var>,
    pub last: Var,
}

impl Backbone {
    pub fn build<T: Real>(
        config: &NetworkConfig,
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        config.validate()?;
        let mut in_c = config.input_channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut layer = 0;
        for stage in &config.stages {
            let mut blocks = Vec::with_capacity(stage.convs.len());
            for conv in &stage.convs {
                let spec = ConvSpec::new(in_c, conv.out_channels, conv.kernel).same();
                blocks.push(ConvBlock::build(
                    store,
                    &format!("backbone.conv{layer}"),
                    spec,
                    config.leaky_slope,
                    config.bn_eps,
                    config.bn_momentum,
                    rng,
                )?);
                in_c = conv.out_channels;
                layer += 1;
            }
            stages.push(Stage {
                blocks,
                pool_after: stage.pool_after,
                tap: stage.tap,
            });
        }
        Ok(Self {
            stages,
            input_resolution: config.input_resolution,
            input_channels: config.input_channels,
        })
    }

    pub fn forward<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        image: Var,
    ) -> Result<BackboneOutput> {
        let s = sess.tape.shape(image);
        if s.h != self.input_resolution
            || s.w != self.input_resolution
            || s.c != self.input_channels
        {
            return Err(Error::Shape(format!(
                "backbone expects {}x{}x{} input, got {}x{}x{}",
                self.input_channels, self.input_resolution, self.input_resolution, s.c, s.h, s.w
            )));
        }
        let mut x = image;
        let mut taps = Vec::new();
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(sess, x)?;
            }
            if stage.tap {
                taps.push(x);
            }
            if stage.pool_after {
                x = sess.tape.maxpool2(x)?;
            }
        }
        Ok(BackboneOutput { taps, last: x })
    }
}
