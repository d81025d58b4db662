//! The assembled detector: backbone, SAC on each tap, pyramid, fusion, head.

use crate::backbone::Backbone;
use crate::boxes::{reindex_by_score, Detection, GroundTruth};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::eval::nms;
use crate::fpn::Fpn;
use crate::head::{assign_targets, decode, yolo_loss, Head, LossBreakdown, LossWeights};
use crate::params::{Mode, ParamId, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::sac::Sac;
use crate::tensor::{Real, Tensor, Var};

/// RNG stream used for weight initialisation.
pub const INIT_STREAM: u64 = 0x1417;

/// Layer structure without parameter values.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub backbone: Backbone,
    /// One entry per tap; `None` where the tap bypasses SAC.
    pub sacs: Vec<Option<Sac>>,
    pub fpn: Fpn,
    pub head: Head,
    pub grid: usize,
}

impl Architecture {
    pub fn build<T: Real>(
        config: &NetworkConfig,
        store: &mut ParamStore<T>,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::build(config, store, rng)?;
        let tap_channels = config.tap_channels();
        let sacs = tap_channels
            .iter()
            .zip(&config.sac_taps)
            .enumerate()
            .map(|(i, (&c, &on))| {
                on.then(|| Sac::build(store, &format!("sac{}", i + 2), c, rng))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let fpn = Fpn::build(
            store,
            &tap_channels,
            config.fpn_width,
            config.head_channels,
            rng,
        )?;
        let head = Head::build(
            store,
            config.head_channels,
            config.anchors.clone(),
            config.num_classes,
            rng,
        )?;
        Ok(Self {
            backbone,
            sacs,
            fpn,
            head,
            grid: config.grid,
        })
    }

    /// Raw head output for a batch of images.
    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let out = self.backbone.forward(sess, image)?;
        let mut taps = Vec::with_capacity(out.taps.len());
        for (&tap, sac) in out.taps.iter().zip(&self.sacs) {
            taps.push(match sac {
                Some(sac) => sac.forward(sess, tap)?,
                None => tap,
            });
        }
        let levels = self.fpn.build_pyramid(sess, &taps)?;
        let fused = self.fpn.fuse_pyramid(sess, &levels, self.grid)?;
        self.head.forward(sess, fused)
    }
}

/// Result of one training forward/backward pass.
pub struct StepOutput<T> {
    pub loss: f64,
    pub terms: LossBreakdown,
    /// Gradient for every trainable parameter, in store order.
    pub grads: Vec<(ParamId, Tensor<T>)>,
}

#[derive(Clone, Debug)]
pub struct Detector<T: Real = f32> {
    pub config: NetworkConfig,
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Real> Detector<T> {
    /// Deterministic initialisation from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::derive(seed, INIT_STREAM);
        let arch = Architecture::build(&config, &mut store, &mut rng)?;
        Ok(Self {
            config,
            arch,
            store,
        })
    }

    /// Same architecture and values in another element type.
    pub fn cast<U: Real>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Raw predictions in inference mode (running batch-norm statistics).
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut sess = Session::new(&mut self.store, Mode::Eval);
        let x = sess.tape.constant(images.clone());
        let raw = self.arch.forward(&mut sess, x)?;
        Ok(sess.tape.value(raw).clone())
    }

    /// Decoded detections after per-class NMS, indexed by descending score.
    pub fn detect(
        &mut self,
        images: &Tensor<T>,
        conf_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<Vec<Detection>>> {
        let raw = self.predict(images)?;
        let decoded = decode(
            &raw,
            &self.config.anchors,
            self.config.num_classes,
            conf_threshold,
        )?;
        Ok(decoded
            .into_iter()
            .map(|d| {
                let mut kept = nms(&d, nms_iou);
                reindex_by_score(&mut kept);
                kept
            })
            .collect())
    }

    /// Training-mode forward pass, loss and gradients. Updates batch-norm
    /// running statistics as a side effect.
    pub fn train_step(
        &mut self,
        images: &Tensor<T>,
        gts: &[Vec<GroundTruth>],
        weights: LossWeights,
    ) -> Result<StepOutput<T>> {
        if gts.len() != images.shape().n {
            return Err(Error::Shape(format!(
                "{} annotation lists for a batch of {} images",
                gts.len(),
                images.shape().n
            )));
        }
        let assignments = assign_targets(gts, &self.config.anchors, self.config.grid);
        let mut sess = Session::new(&mut self.store, Mode::Train);
        let x = sess.tape.constant(images.clone());
        let raw = self.arch.forward(&mut sess, x)?;
        let (loss, terms) = yolo_loss(
            &mut sess,
            raw,
            &assignments,
            &self.config.anchors,
            self.config.num_classes,
            weights,
        )?;
        let mut all = sess.tape.backward(loss)?;
        let mut grads = Vec::new();
        for (id, var) in sess.bindings() {
            if sess.tape.requires_grad(var) {
                let g = all.take(var).ok_or_else(|| {
                    Error::Tape(format!("no gradient for {}", sess.store().get(id).name))
                })?;
                grads.push((id, g));
            }
        }
        Ok(StepOutput {
            loss: terms.total(),
            terms,
            grads,
        })
    }
}
