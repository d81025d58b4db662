//! Switchable atrous convolution.
//!
//! Two parallel branches see the same input with different receptive
//! fields: a 3x3 convolution at dilation 1 (field 3) and a 5x5 convolution at
//! dilation 2 (field 9). A single-channel switch `S = sigmoid(conv1x1(x))`
//! mixes them per pixel:
//!
//! ```text
//! y = S * branch_a(x) + (1 - S) * branch_b(x)
//! ```
//!
//! `S` broadcasts over channels, so every output element is a convex
//! combination of the two branch responses at that position.

use crate::error::Result;
use crate::layers::{Conv, Init};
use crate::params::{ParamStore, Session};
use crate::rng::SplitMix64;
use crate::tensor::{ConvSpec, Real, Var};

pub const BRANCH_A_KERNEL: usize = 3;
pub const BRANCH_A_DILATION: usize = 1;
pub const BRANCH_B_KERNEL: usize = 5;
pub const BRANCH_B_DILATION: usize = 2;

/// Input extent seen by one output element of `spec`.
pub fn receptive_field(spec: &ConvSpec) -> usize {
    spec.receptive_field()
}

#[derive(Clone, Debug)]
pub struct Sac {
    pub branch_a: Conv,
    pub branch_b: Conv,
    pub switch: Conv,
}

/// Output together with the intermediate maps it was blended from.
pub struct SacParts {
    pub output: Var,
    pub branch_a: Var,
    pub branch_b: Var,
    pub switch: Var,
}

impl Sac {
    /// Output width equals input width.
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let a = ConvSpec::new(channels, channels, BRANCH_A_KERNEL)
            .dilation(BRANCH_A_DILATION)
            .same();
        let b = ConvSpec::new(channels, channels, BRANCH_B_KERNEL)
            .dilation(BRANCH_B_DILATION)
            .same();
        let s = ConvSpec::new(channels, 1, 1);
        Ok(Self {
            branch_a: Conv::build_with(
                store,
                &format!("{name}.branch_a"),
                a,
                true,
                Init::FanIn,
                rng,
            )?,
            branch_b: Conv::build_with(
                store,
                &format!("{name}.branch_b"),
                b,
                true,
                Init::FanIn,
                rng,
            )?,
            switch: Conv::build_with(store, &format!("{name}.switch"), s, true, Init::FanIn, rng)?,
        })
    }

    pub fn forward_parts<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<SacParts> {
        let branch_a = self.branch_a.forward(sess, x)?;
        let branch_b = self.branch_b.forward(sess, x)?;
        let logits = self.switch.forward(sess, x)?;
        let switch = sess.tape.sigmoid(logits);
        let output = sess.tape.blend(switch, branch_a, branch_b)?;
        Ok(SacParts {
            output,
            branch_a,
            branch_b,
            switch,
        })
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(sess, x)?.output)
    }
}
