//! Architecture description and the two built-in presets.

use crate::error::{Error, Result};
use crate::head::AnchorSet;

/// One convolution of a backbone stage: output channels and square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
}

const fn conv(out_channels: usize, kernel: usize) -> ConvLayerSpec {
    ConvLayerSpec {
        out_channels,
        kernel,
    }
}

/// Convolutions sharing one resolution, optionally followed by a 2x2 max-pool.
/// A tapped stage exports its last convolution output, taken before the pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub convs: Vec<ConvLayerSpec>,
    pub pool_after: bool,
    pub tap: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub name: String,
    pub input_resolution: usize,
    pub input_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Per tap, whether a switchable atrous block processes it.
    pub sac_taps: Vec<bool>,
    pub fpn_width: usize,
    pub head_channels: usize,
    pub anchors: AnchorSet,
    pub num_classes: usize,
    pub grid: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

pub const TAP_COUNT: usize = 4;

/// Darknet-19 with the fifth max-pool removed; `div` scales every width.
fn darknet19_stages(div: usize) -> Vec<StageSpec> {
    let w = |c: usize| c / div;
    let stage = |convs: Vec<ConvLayerSpec>, pool_after, tap| StageSpec {
        convs,
        pool_after,
        tap,
    };
    vec![
        stage(vec![conv(w(32), 3)], true, true),
        stage(vec![conv(w(64), 3)], true, true),
        stage(
            vec![conv(w(128), 3), conv(w(64), 1), conv(w(128), 3)],
            true,
            true,
        ),
        stage(
            vec![conv(w(256), 3), conv(w(128), 1), conv(w(256), 3)],
            true,
            true,
        ),
        // the pool that used to close this stage is gone
        stage(
            vec![
                conv(w(512), 3),
                conv(w(256), 1),
                conv(w(512), 3),
                conv(w(256), 1),
                conv(w(512), 3),
            ],
            false,
            false,
        ),
        stage(
            vec![
                conv(w(1024), 3),
                conv(w(512), 1),
                conv(w(1024), 3),
                conv(w(512), 1),
                conv(w(1024), 3),
                conv(w(1024), 1),
            ],
            false,
            false,
        ),
    ]
}

impl NetworkConfig {
    /// Full-size network: 512x512 input, 32x32 grid.
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            input_resolution: 512,
            input_channels: 1,
            stages: darknet19_stages(1),
            sac_taps: vec![true; TAP_COUNT],
            fpn_width: 128,
            head_channels: 256,
            anchors: AnchorSet::default_priors(),
            num_classes: 1,
            grid: 32,
            leaky_slope: 0.1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Same topology at 64x64 input with widths divided by 8; trains on one
    /// CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            input_resolution: 64,
            stages: darknet19_stages(8),
            fpn_width: 16,
            head_channels: 32,
            anchors: AnchorSet::desk_priors(),
            grid: 4,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown network preset {other:?}"))),
        }
    }

    pub fn pool_count(&self) -> usize {
        self.stages.iter().filter(|s| s.pool_after).count()
    }

    pub fn conv_count(&self) -> usize {
        self.stages.iter().map(|s| s.convs.len()).sum()
    }

    /// Spatial extents of the tapped maps, finest first.
    pub fn tap_resolutions(&self) -> Vec<usize> {
        let mut res = self.input_resolution;
        let mut taps = Vec::new();
        for stage in &self.stages {
            if stage.tap {
                taps.push(res);
            }
            if stage.pool_after {
                res /= 2;
            }
        }
        taps
    }

    /// Channel widths of the tapped maps, finest first.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.stages
            .iter()
            .filter(|s| s.tap)
            .map(|s| s.convs.last().map_or(0, |c| c.out_channels))
            .collect()
    }

    pub fn final_resolution(&self) -> usize {
        self.input_resolution >> self.pool_count()
    }

    pub fn final_channels(&self) -> usize {
        self.stages
            .iter()
            .rev()
            .find_map(|s| s.convs.last())
            .map_or(self.input_channels, |c| c.out_channels)
    }

    pub fn head_output_channels(&self) -> usize {
        self.anchors.len() * (5 + self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("network {:?}: {msg}", self.name)));
        if self.input_resolution == 0 || self.input_channels == 0 {
            return bad("input resolution and channels must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("class count must be at least 1".into());
        }
        if self.fpn_width == 0 || self.head_channels == 0 {
            return bad("pyramid and head widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        if self.bn_eps <= 0.0 {
            return bad("batch-norm eps must be positive".into());
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.convs.is_empty() {
                return bad(format!("stage {i} has no convolutions"));
            }
            if stage
                .convs
                .iter()
                .any(|c| c.out_channels == 0 || c.kernel == 0 || c.kernel % 2 == 0)
            {
                return bad(format!("stage {i} needs positive widths and odd kernels"));
            }
        }
        let pools = self.pool_count();
        if !self.input_resolution.is_multiple_of(1 << pools) {
            return bad(format!(
                "input {} is not divisible by 2^{pools}",
                self.input_resolution
            ));
        }
        if self.final_resolution() != self.grid {
            return bad(format!(
                "input {} / 2^{pools} = {} does not equal grid {}",
                self.input_resolution,
                self.final_resolution(),
                self.grid
            ));
        }
        let taps = self.tap_resolutions();
        if taps.len() != TAP_COUNT {
            return bad(format!("expected {TAP_COUNT} taps, found {}", taps.len()));
        }
        for (i, &res) in taps.iter().enumerate() {
            if res != self.input_resolution >> i {
                return bad(format!(
                    "tap {i} at {res} breaks the stride pattern 1, 2, 4, 8"
                ));
            }
            if res % self.grid != 0 {
                return bad(format!(
                    "grid {} does not divide tap resolution {res}",
                    self.grid
                ));
            }
        }
        if self.sac_taps.len() != TAP_COUNT {
            return bad(format!("SAC placement lists {} taps", self.sac_taps.len()));
        }
        self.anchors.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_counts() {
        let cfg = NetworkConfig::paper();
        cfg.validate().unwrap();
        assert_eq!(cfg.conv_count(), 19);
        assert_eq!(cfg.pool_count(), 4);
        assert_eq!(cfg.tap_resolutions(), vec![512, 256, 128, 64]);
        assert_eq!(cfg.final_resolution(), 32);
        assert_eq!(cfg.tap_channels(), vec![32, 64, 128, 256]);
    }

    #[test]
    fn desk_preset_counts() {
        let cfg = NetworkConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.tap_resolutions(), vec![64, 32, 16, 8]);
        assert_eq!(cfg.final_resolution(), 4);
        assert_eq!(cfg.tap_channels(), vec![4, 8, 16, 32]);
        assert_eq!(cfg.conv_count(), 19);
    }

    #[test]
    fn grid_arithmetic_enforced() {
        let mut cfg = NetworkConfig::desk();
        cfg.grid = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.input_resolution = 72;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.stages[1].tap = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_preset() {
        assert!(NetworkConfig::preset("huge").is_err());
    }
}
