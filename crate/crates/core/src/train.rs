//! Adam and the mini-batch training loop.

use crate::error::{Error, Result};
use crate::head::{LossBreakdown, LossWeights};
use crate::io::weights::{Named, WeightFile};
use crate::io::Dataset;
use crate::model::Detector;
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// Salt separating the shuffle streams from other uses of the training seed.
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub loss: LossWeights,
}

impl TrainConfig {
    /// Learning rate 1e-5, batch 8, 100 epochs.
    pub fn paper() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 8,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            checkpoint_every: 0,
            loss: LossWeights::default(),
        }
    }

    /// Budget for the 64-pixel preset on one core.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 40,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("training: {msg}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} = {b} outside (0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        Ok(())
    }
}

/// First and second moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub id: ParamId,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments for every trainable parameter of `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        let moments = store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let shape = store.value(id).shape();
                Moments {
                    id,
                    m: Tensor::zeros(shape),
                    v: Tensor::zeros(shape),
                }
            })
            .collect();
        Self { step: 0, moments }
    }
}

/// One bias-corrected Adam update. `grads` must list exactly the parameters
/// tracked by `state`, in the same order.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != state.moments.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} optimised parameters",
            grads.len(),
            state.moments.len()
        )));
    }
    for ((id, g), mo) in grads.iter().zip(&state.moments) {
        if *id != mo.id || g.shape() != mo.m.shape() {
            return Err(Error::Shape(format!(
                "gradient for {} has shape {}, expected {}",
                store.get(*id).name,
                g.shape(),
                mo.m.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((id, g), mo) in grads.iter().zip(state.moments.iter_mut()) {
        let theta = store.value_mut(*id).data_mut();
        let m = mo.m.data_mut();
        let v = mo.v.data_mut();
        for i in 0..theta.len() {
            let gi = g.data()[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::lit(mi);
            v[i] = T::lit(vi);
            let m_hat = m[i].as_f64() / c1;
            let v_hat = v[i].as_f64() / c2;
            theta[i] = T::lit(
                theta[i].as_f64() - config.learning_rate * m_hat / (v_hat.sqrt() + config.eps),
            );
        }
    }
    Ok(())
}

/// Optimizer state plus progress, enough to resume a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean loss of each completed epoch.
    pub history: Vec<f64>,
}

impl TrainState {
    pub fn new(detector: &Detector<f32>) -> Self {
        Self {
            adam: AdamState::new(&detector.store),
            epoch: 0,
            history: Vec::new(),
        }
    }
}

/// Batch order of `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    SplitMix64::derive(seed ^ SHUFFLE_SALT, epoch as u64).shuffle(&mut order);
    order
}

/// Reported after each epoch.
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Per-term means over the epoch.
    pub terms: LossBreakdown,
    pub detector: &'a Detector<f32>,
    pub state: &'a TrainState,
}

/// Trains from `state.epoch` up to `config.epochs`, calling `on_epoch` after
/// every epoch.
pub fn train_loop(
    detector: &mut Detector<f32>,
    data: &Dataset,
    config: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(EpochEnd<'_>) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let order = epoch_order(config.seed, epoch, data.len());
        let mut total = 0.0;
        let mut terms = LossBreakdown::default();
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let images = data.batch::<f32>(idx)?;
            let gts: Vec<_> = idx.iter().map(|&i| data.ground_truth[i].clone()).collect();
            let out = detector.train_step(&images, &gts, config.loss)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            adam_step(&mut detector.store, &out.grads, &mut state.adam, config)?;
            let w = idx.len() as f64;
            total += out.loss * w;
            terms.coord += out.terms.coord * w;
            terms.object += out.terms.object * w;
            terms.no_object += out.terms.no_object * w;
            terms.class += out.terms.class * w;
        }
        let n = data.len() as f64;
        let mean_loss = total / n;
        let terms = LossBreakdown {
            coord: terms.coord / n,
            object: terms.object / n,
            no_object: terms.no_object / n,
            class: terms.class / n,
        };
        state.history.push(mean_loss);
        state.epoch += 1;
        on_epoch(EpochEnd {
            epoch,
            mean_loss,
            terms,
            detector,
            state,
        })?;
    }
    Ok(())
}

const STEP_KEY: &str = "adam.step";
const EPOCH_KEY: &str = "train.epoch";

/// Weight file carrying the optimizer state under the `OPTS` section.
pub fn checkpoint(detector: &Detector<f32>, state: &TrainState) -> WeightFile {
    let mut opts: Vec<Named> = vec![
        (STEP_KEY.into(), Tensor::scalar(state.adam.step as f32)),
        (EPOCH_KEY.into(), Tensor::scalar(state.epoch as f32)),
    ];
    for mo in &state.adam.moments {
        let name = &detector.store.get(mo.id).name;
        opts.push((format!("adam.m.{name}"), mo.m.clone()));
        opts.push((format!("adam.v.{name}"), mo.v.clone()));
    }
    WeightFile {
        optimizer: Some(opts),
        ..WeightFile::from_store(&detector.store)
    }
}

/// Loads weights and optimizer state from a checkpoint. The loss history of
/// the completed epochs is not stored and comes back empty.
pub fn restore(detector: &mut Detector<f32>, file: WeightFile) -> Result<TrainState> {
    let opts = file
        .optimizer
        .ok_or_else(|| Error::WeightFormat("file has no optimizer section".into()))?;
    detector.store.load_values(file.params)?;
    let mut entries = opts.into_iter();
    let mut scalar = |key: &str| -> Result<f32> {
        match entries.next() {
            Some((name, t)) if name == key && t.numel() == 1 => Ok(t.item()),
            _ => Err(Error::WeightFormat(format!(
                "optimizer section lacks {key}"
            ))),
        }
    };
    let step = scalar(STEP_KEY)? as u64;
    let epoch = scalar(EPOCH_KEY)? as usize;
    let mut adam = AdamState::new(&detector.store);
    adam.step = step;
    for mo in &mut adam.moments {
        let name = detector.store.get(mo.id).name.clone();
        for (slot, key) in [
            (&mut mo.m, format!("adam.m.{name}")),
            (&mut mo.v, format!("adam.v.{name}")),
        ] {
            match entries.next() {
                Some((n, t)) if n == key && t.shape() == slot.shape() => *slot = t,
                _ => {
                    return Err(Error::WeightFormat(format!(
                        "optimizer section lacks {key}"
                    )))
                }
            }
        }
    }
    if entries.next().is_some() {
        return Err(Error::WeightFormat("unexpected optimizer entries".into()));
    }
    Ok(TrainState {
        adam,
        epoch,
        history: Vec::new(),
    })
}

/// `(epoch, mean loss)` lines, numbered from `first_epoch`.
pub fn render_history(first_epoch: usize, history: &[f64]) -> String {
    history
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{} {l:.9e}\n", first_epoch + e))
        .collect()
}
