//! Feature pyramid over the SAC-processed taps, and its fusion onto the
//! detection grid.
//!
//! ```text
//! P5 = smooth5(lateral5(C5))
//! Pi = smooth_i(lateral_i(Ci) + upsample2(P(i+1)))    i = 4, 3, 2
//! fused = fusion1x1(concat(avgpool_to_grid(P2..P5)))
//! ```

use crate::error::{Error, Result};
use crate::layers::{Conv, Init};
use crate::params::{ParamStore, Session};
use crate::rng::SplitMix64;
use crate::tensor::{ConvSpec, Real, Var};

pub const LEVELS: usize = 4;

#[derive(Clone, Debug)]
pub struct Fpn {
    pub laterals: Vec<Conv>,
    pub smooths: Vec<Conv>,
    pub fusion: Conv,
    pub width: usize,
}

impl Fpn {
    /// `tap_channels` lists the fine-to-coarse tap widths.
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        tap_channels: &[usize],
        width: usize,
        head_channels: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if tap_channels.len() != LEVELS {
            return Err(Error::Config(format!(
                "pyramid needs {LEVELS} taps, got {}",
                tap_channels.len()
            )));
        }
        let mut laterals = Vec::with_capacity(LEVELS);
        let mut smooths = Vec::with_capacity(LEVELS);
        for (i, &c) in tap_channels.iter().enumerate() {
            let level = i + 2;
            laterals.push(Conv::build_with(
                store,
                &format!("fpn.lateral{level}"),
                ConvSpec::new(c, width, 1),
                true,
                Init::FanIn,
                rng,
            )?);
            smooths.push(Conv::build_with(
                store,
                &format!("fpn.smooth{level}"),
                ConvSpec::new(width, width, 3).same(),
                true,
                Init::FanIn,
                rng,
            )?);
        }
        let fusion = Conv::build_with(
            store,
            "fpn.fusion",
            ConvSpec::new(LEVELS * width, head_channels, 1),
            true,
            Init::FanIn,
            rng,
        )?;
        Ok(Self {
            laterals,
            smooths,
            fusion,
            width,
        })
    }

    /// Builds P2..P5 (returned finest first) from taps ordered finest first.
    pub fn build_pyramid<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        taps: &[Var],
    ) -> Result<Vec<Var>> {
        if taps.len() != LEVELS {
            return Err(Error::Shape(format!(
                "pyramid needs {LEVELS} taps, got {}",
                taps.len()
            )));
        }
        for pair in taps.windows(2) {
            let (fine, coarse) = (sess.tape.shape(pair[0]), sess.tape.shape(pair[1]));
            if fine.h != 2 * coarse.h || fine.w != 2 * coarse.w {
                return Err(Error::Shape(format!(
                    "taps must halve in extent, got {}x{} then {}x{}",
                    fine.h, fine.w, coarse.h, coarse.w
                )));
            }
        }
        let mut levels = vec![None; LEVELS];
        let mut above: Option<Var> = None;
        for i in (0..LEVELS).rev() {
            let lateral = self.laterals[i].forward(sess, taps[i])?;
            let merged = match above {
                Some(p) => {
                    let up = sess.tape.upsample_nearest2(p);
                    sess.tape.add(lateral, up)?
                }
                None => lateral,
            };
            let p = self.smooths[i].forward(sess, merged)?;
            levels[i] = Some(p);
            above = Some(p);
        }
        Ok(levels
            .into_iter()
            .map(|p| p.expect("every level built"))
            .collect())
    }

    /// Average-pools every level to `grid x grid`, concatenates P2..P5 and
    /// projects to the head width.
    pub fn fuse_pyramid<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        levels: &[Var],
        grid: usize,
    ) -> Result<Var> {
        let pooled = self.pool_and_concat(sess, levels, grid)?;
        self.fusion.forward(sess, pooled)
    }

    /// The `4F`-channel concatenation that feeds the fusion projection.
    pub fn pool_and_concat<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        levels: &[Var],
        grid: usize,
    ) -> Result<Var> {
        let mut pooled = Vec::with_capacity(levels.len());
        for &p in levels {
            let s = sess.tape.shape(p);
            if grid == 0 || !s.h.is_multiple_of(grid) || !s.w.is_multiple_of(grid) {
                return Err(Error::Shape(format!(
                    "grid {grid} does not divide pyramid level {}x{}",
                    s.h, s.w
                )));
            }
            pooled.push(sess.tape.avgpool_to(p, grid, grid)?);
        }
        sess.tape.concat_channels(&pooled)
    }
}
