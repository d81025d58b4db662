//! Parameterised building blocks shared by the backbone, SAC, pyramid and head.

use crate::error::Result;
use crate::params::{normal, Mode, ParamId, ParamKind, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::tensor::{kernels, ConvSpec, Real, Shape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weights: ParamId,
    pub bias: Option<ParamId>,
}

/// Weight initialisation scheme; biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`, for convolutions feeding a rectifier.
    He,
    /// Normal with std `sqrt(1 / fan_in)`, for convolutions with a linear output.
    FanIn,
    /// Normal with a fixed std.
    Normal(f64),
}

impl Conv {
    /// He-initialised weights, zero bias.
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        with_bias: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Self::build_with(store, name, spec, with_bias, Init::He, rng)
    }

    pub fn build_with<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        with_bias: bool,
        init: Init,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        spec.validate()?;
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let std = match init {
            Init::He => (2.0 / fan_in).sqrt(),
            Init::FanIn => (1.0 / fan_in).sqrt(),
            Init::Normal(std) => std,
        };
        let weights = store.add(
            format!("{name}.weight"),
            normal(spec.weight_shape(), std, rng),
            ParamKind::Trainable,
        );
        let bias = with_bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(Shape::new(spec.out_channels, 1, 1, 1)),
                ParamKind::Trainable,
            )
        });
        Ok(Self {
            spec,
            weights,
            bias,
        })
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = sess.param(self.weights);
        let b = self.bias.map(|b| sess.param(b));
        sess.tape.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        eps: f64,
        momentum: f64,
    ) -> Self {
        let vec_shape = Shape::new(channels, 1, 1, 1);
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(vec_shape, T::one()),
                ParamKind::Trainable,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros(vec_shape),
                ParamKind::Trainable,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(vec_shape),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(vec_shape, T::one()),
                ParamKind::Buffer,
            ),
            eps,
            momentum,
        }
    }

    /// Batch statistics (and a running-statistics update) in training mode,
    /// running statistics otherwise.
    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        let eps = T::lit(self.eps);
        match sess.mode() {
            Mode::Train => {
                let (y, mean, var) = sess.tape.batchnorm_train(x, gamma, beta, eps)?;
                let s = sess.tape.shape(x);
                let (rm, rv) = (self.running_mean, self.running_var);
                let store = sess.store_mut();
                let mut mean_buf = store.value(rm).data().to_vec();
                let mut var_buf = store.value(rv).data().to_vec();
                kernels::batchnorm_update_running(
                    &mut mean_buf,
                    &mut var_buf,
                    &mean,
                    &var,
                    s.n * s.plane(),
                    T::lit(self.momentum),
                );
                store.value_mut(rm).data_mut().copy_from_slice(&mean_buf);
                store.value_mut(rv).data_mut().copy_from_slice(&var_buf);
                Ok(y)
            }
            Mode::Eval => {
                let store = sess.store();
                let mean = store.value(self.running_mean).data().to_vec();
                let var = store.value(self.running_var).data().to_vec();
                sess.tape.batchnorm_eval(x, gamma, beta, &mean, &var, eps)
            }
        }
    }
}

/// Darknet convolution unit: bias-free conv, batch norm, leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub slope: f64,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        slope: f64,
        eps: f64,
        momentum: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let conv = Conv::build(store, &format!("{name}.conv"), spec, false, rng)?;
        let bn = BatchNorm::build(
            store,
            &format!("{name}.bn"),
            spec.out_channels,
            eps,
            momentum,
        );
        Ok(Self { conv, bn, slope })
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(sess, x)?;
        let y = self.bn.forward(sess, y)?;
        Ok(sess.tape.leaky_relu(y, T::lit(self.slope)))
    }
}
