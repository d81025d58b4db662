//! Anchor-based prediction head, box decoding, target assignment and loss.
//!
//! Raw predictions carry, per grid cell and anchor, `5 + C` channels laid out
//! anchor-major: `t_x, t_y, t_w, t_h, t_o`, then `C` class logits. Decoding
//! for cell `(cx, cy)` and prior `(pw, ph)` on a `G x G` grid:
//!
//! ```text
//! b_x = (sigmoid(t_x) + cx) / G        b_w = pw * exp(t_w) / G
//! b_y = (sigmoid(t_y) + cy) / G        b_h = ph * exp(t_h) / G
//! confidence = sigmoid(t_o) * max softmax(class logits)
//! ```

use std::collections::BTreeMap;

use crate::boxes::{reindex_by_score, BBox, Detection, GroundTruth};
use crate::error::{Error, Result};
use crate::layers::{Conv, Init};
use crate::params::{ParamStore, Session};
use crate::rng::SplitMix64;
use crate::tensor::kernels::sigmoid_scalar;
use crate::tensor::{ConvSpec, Real, Shape, Tensor, Var};

pub const BOX_FIELDS: usize = 5;
/// Weight std of the prediction convolution; small so that training starts
/// with unsaturated sigmoids.
pub const HEAD_INIT_STD: f64 = 0.01;
/// Initial objectness bias, `sigmoid(-4) ~ 0.018`.
pub const OBJECTNESS_PRIOR_LOGIT: f64 = -4.0;

/// Prior box shapes `(width, height)` in grid-cell units.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    priors: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn new(priors: Vec<(f64, f64)>) -> Result<Self> {
        let set = Self { priors };
        set.validate()?;
        Ok(set)
    }

    pub fn default_priors() -> Self {
        Self {
            priors: vec![(1.0, 1.0), (2.0, 2.0), (4.0, 4.0), (2.0, 4.0), (4.0, 2.0)],
        }
    }

    /// Priors for the 64-pixel, 4x4-grid synthetic setting, where foci span
    /// roughly a third to a whole cell.
    pub fn desk_priors() -> Self {
        Self {
            priors: vec![
                (0.4, 0.4),
                (0.55, 0.55),
                (0.7, 0.7),
                (0.85, 0.85),
                (1.0, 1.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.priors.is_empty() {
            return Err(Error::Config("anchor set is empty".into()));
        }
        if self
            .priors
            .iter()
            .any(|&(w, h)| !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0))
        {
            return Err(Error::Config(format!(
                "anchor priors must be positive: {:?}",
                self.priors
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    pub fn priors(&self) -> &[(f64, f64)] {
        &self.priors
    }

    /// Anchor with the highest co-centred IoU against a `w x h` box (grid
    /// units); the lowest index wins ties.
    pub fn best_match(&self, w: f64, h: f64) -> usize {
        let mut best = 0;
        let mut best_iou = f64::NEG_INFINITY;
        for (i, &(pw, ph)) in self.priors.iter().enumerate() {
            let iou = shape_iou((w, h), (pw, ph));
            if iou > best_iou {
                best = i;
                best_iou = iou;
            }
        }
        best
    }

    /// K-means over box shapes with `1 - shape_iou` as the distance. Starts
    /// from `k` seeded distinct samples, stops when assignments settle, and
    /// returns the centroids sorted by area.
    pub fn kmeans(shapes: &[(f64, f64)], k: usize, seed: u64) -> Result<Self> {
        const MAX_ITERATIONS: usize = 100;
        if k == 0 || shapes.len() < k {
            return Err(Error::Config(format!(
                "k-means needs 1 <= k <= {} shapes, got k = {k}",
                shapes.len()
            )));
        }
        Self::new(shapes.to_vec())?;
        let mut order: Vec<usize> = (0..shapes.len()).collect();
        SplitMix64::new(seed).shuffle(&mut order);
        let mut centroids: Vec<(f64, f64)> = order[..k].iter().map(|&i| shapes[i]).collect();
        let mut assignment = vec![usize::MAX; shapes.len()];
        for _ in 0..MAX_ITERATIONS {
            let current = Self {
                priors: centroids.clone(),
            };
            let next: Vec<usize> = shapes
                .iter()
                .map(|&(w, h)| current.best_match(w, h))
                .collect();
            if next == assignment {
                break;
            }
            assignment = next;
            for (c, centroid) in centroids.iter_mut().enumerate() {
                let members: Vec<(f64, f64)> = shapes
                    .iter()
                    .zip(&assignment)
                    .filter(|(_, &a)| a == c)
                    .map(|(&s, _)| s)
                    .collect();
                if !members.is_empty() {
                    let n = members.len() as f64;
                    *centroid = (
                        members.iter().map(|s| s.0).sum::<f64>() / n,
                        members.iter().map(|s| s.1).sum::<f64>() / n,
                    );
                }
            }
        }
        centroids.sort_by(|a, b| {
            (a.0 * a.1)
                .total_cmp(&(b.0 * b.1))
                .then(a.0.total_cmp(&b.0))
        });
        Self::new(centroids)
    }

    /// K-means priors from every ground-truth box of a dataset, in cells of a
    /// `grid x grid` head.
    pub fn from_ground_truth(
        gts: &[Vec<GroundTruth>],
        grid: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        let g = grid as f64;
        let shapes: Vec<(f64, f64)> = gts
            .iter()
            .flatten()
            .map(|gt| (gt.bbox.w * g, gt.bbox.h * g))
            .collect();
        Self::kmeans(&shapes, k, seed)
    }
}

/// IoU of two boxes sharing a centre.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

#[derive(Clone, Debug)]
pub struct Head {
    pub conv: Conv,
    pub anchors: AnchorSet,
    pub num_classes: usize,
}

impl Head {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        anchors: AnchorSet,
        num_classes: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let stride = BOX_FIELDS + num_classes;
        let spec = ConvSpec::new(in_channels, anchors.len() * stride, 1);
        let conv = Conv::build_with(
            store,
            "head.conv",
            spec,
            true,
            Init::Normal(HEAD_INIT_STD),
            rng,
        )?;
        if let Some(bias) = conv.bias {
            let b = store.value_mut(bias).data_mut();
            for a in 0..anchors.len() {
                b[a * stride + 4] = T::lit(OBJECTNESS_PRIOR_LOGIT);
            }
        }
        Ok(Self {
            conv,
            anchors,
            num_classes,
        })
    }

    /// Single 1x1 convolution, no activation.
    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, fused: Var) -> Result<Var> {
        let s = sess.tape.shape(fused);
        if s.c != self.conv.spec.in_channels {
            return Err(Error::Shape(format!(
                "head expects {} input channels, got {}",
                self.conv.spec.in_channels, s.c
            )));
        }
        self.conv.forward(sess, fused)
    }
}

fn check_raw(shape: Shape, anchors: &AnchorSet, num_classes: usize) -> Result<usize> {
    let want = anchors.len() * (BOX_FIELDS + num_classes);
    if shape.c != want {
        return Err(Error::Shape(format!(
            "raw prediction has {} channels, expected {} anchors x (5 + {num_classes}) = {want}",
            shape.c,
            anchors.len()
        )));
    }
    if shape.h != shape.w {
        return Err(Error::Shape(format!(
            "raw prediction grid {}x{} is not square",
            shape.h, shape.w
        )));
    }
    Ok(shape.h)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Turns raw head output into per-image detections above `conf_threshold`,
/// indexed 1..n by descending confidence.
pub fn decode<T: Real>(
    raw: &Tensor<T>,
    anchors: &AnchorSet,
    num_classes: usize,
    conf_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    let s = raw.shape();
    let grid = check_raw(s, anchors, num_classes)?;
    let g = grid as f64;
    let stride = BOX_FIELDS + num_classes;
    let mut out = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let mut dets = Vec::new();
        let mut scan = 0;
        for cy in 0..grid {
            for cx in 0..grid {
                for (a, &(pw, ph)) in anchors.priors().iter().enumerate() {
                    scan += 1;
                    let field = |f: usize| raw.at(n, a * stride + f, cy, cx).as_f64();
                    let objectness = sigmoid_scalar(field(4));
                    let (class_id, class_prob) = if num_classes == 1 {
                        (0, 1.0)
                    } else {
                        let logits: Vec<f64> =
                            (0..num_classes).map(|k| field(BOX_FIELDS + k)).collect();
                        softmax(&logits).into_iter().enumerate().fold(
                            (0, f64::NEG_INFINITY),
                            |best, (k, p)| if p > best.1 { (k, p) } else { best },
                        )
                    };
                    let score = objectness * class_prob;
                    if score < conf_threshold {
                        continue;
                    }
                    let bbox = BBox::new(
                        (sigmoid_scalar(field(0)) + cx as f64) / g,
                        (sigmoid_scalar(field(1)) + cy as f64) / g,
                        pw * field(2).exp() / g,
                        ph * field(3).exp() / g,
                    );
                    dets.push(Detection {
                        bbox,
                        class_id,
                        score,
                        index: scan,
                    });
                }
            }
        }
        reindex_by_score(&mut dets);
        out.push(dets);
    }
    Ok(out)
}

/// Ground truth bound to one `(cell, anchor)` slot of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub image: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub anchor: usize,
    pub gt: GroundTruth,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignments {
    /// Sorted by image, cell row, cell column, anchor.
    pub assigned: Vec<Assignment>,
    /// `(image, ground-truth index)` of boxes that lost a slot collision
    /// and are ignored by the loss.
    pub displaced: Vec<(usize, usize)>,
}

/// Cell containing `coord` on a `grid`-cell axis; the far edge maps into the last cell.
fn cell_of(coord: f64, grid: usize) -> usize {
    ((coord * grid as f64).floor().max(0.0) as usize).min(grid - 1)
}

/// Each box goes to the cell holding its centre and the anchor of best
/// shape IoU. On a slot collision the larger box wins (earlier box on equal
/// area).
pub fn assign_targets(gts: &[Vec<GroundTruth>], anchors: &AnchorSet, grid: usize) -> Assignments {
    let g = grid as f64;
    let mut result = Assignments::default();
    for (image, boxes) in gts.iter().enumerate() {
        let mut slots: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
        for (i, gt) in boxes.iter().enumerate() {
            let key = (
                cell_of(gt.bbox.cy, grid),
                cell_of(gt.bbox.cx, grid),
                anchors.best_match(gt.bbox.w * g, gt.bbox.h * g),
            );
            match slots.get(&key) {
                Some(&holder) if boxes[holder].bbox.area() >= gt.bbox.area() => {
                    result.displaced.push((image, i));
                }
                Some(&holder) => {
                    result.displaced.push((image, holder));
                    slots.insert(key, i);
                }
                None => {
                    slots.insert(key, i);
                }
            }
        }
        for ((cell_y, cell_x, anchor), i) in slots {
            result.assigned.push(Assignment {
                image,
                cell_x,
                cell_y,
                anchor,
                gt: boxes[i],
            });
        }
    }
    result.displaced.sort_unstable();
    result
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub coord: f64,
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            coord: 5.0,
            no_object: 0.5,
        }
    }
}

/// Loss terms, each already divided by the batch size.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub coord: f64,
    pub object: f64,
    pub no_object: f64,
    pub class: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.coord + self.object + self.no_object + self.class
    }
}

/// IoU of `pred` against a fixed `gt` and its gradient with respect to
/// `(cx, cy, w, h)` of `pred`.
fn iou_and_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    // Per axis: overlap length and its derivatives w.r.t. centre and size.
    fn overlap(c: f64, size: f64, gc: f64, gsize: f64) -> (f64, f64, f64) {
        let (lo, hi) = (c - size / 2.0, c + size / 2.0);
        let (glo, ghi) = (gc - gsize / 2.0, gc + gsize / 2.0);
        let (right, dr_dc, dr_ds) = if hi <= ghi {
            (hi, 1.0, 0.5)
        } else {
            (ghi, 0.0, 0.0)
        };
        let (left, dl_dc, dl_ds) = if lo >= glo {
            (lo, 1.0, -0.5)
        } else {
            (glo, 0.0, 0.0)
        };
        (right - left, dr_dc - dl_dc, dr_ds - dl_ds)
    }
    let (iw, diw_dcx, diw_dw) = overlap(pred.cx, pred.w, gt.cx, gt.w);
    let (ih, dih_dcy, dih_dh) = overlap(pred.cy, pred.h, gt.cy, gt.h);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = pred.area() + gt.area() - inter;
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    (
        iou,
        [
            d_inter * ih * diw_dcx,
            d_inter * iw * dih_dcy,
            d_inter * ih * diw_dw + d_area * pred.h,
            d_inter * iw * dih_dh + d_area * pred.w,
        ],
    )
}

/// Loss value, its gradient with respect to every raw prediction, and the
/// per-term breakdown.
///
/// Terms: `coord * sq(sigmoid(t_xy) - offset) + coord * sq(t_wh - log(gt / prior))`
/// and `sq(sigmoid(t_o) - IoU(decoded, gt))` for assigned slots,
/// `no_object * sq(sigmoid(t_o))` for the rest, softmax cross-entropy on the
/// class logits of assigned slots. The IoU target is differentiated
/// through. Everything is divided by the batch size.
pub fn yolo_loss_terms<T: Real>(
    raw: &Tensor<T>,
    assignments: &Assignments,
    anchors: &AnchorSet,
    num_classes: usize,
    weights: LossWeights,
) -> Result<(LossBreakdown, Tensor<T>)> {
    let s = raw.shape();
    let grid = check_raw(s, anchors, num_classes)?;
    let g = grid as f64;
    let stride = BOX_FIELDS + num_classes;
    let norm = 1.0 / s.n as f64;
    let mut grad = vec![0.0f64; s.numel()];
    let mut terms = LossBreakdown::default();

    let mut assigned = vec![false; s.n * grid * grid * anchors.len()];
    let slot = |n: usize, cy: usize, cx: usize, a: usize| {
        ((n * grid + cy) * grid + cx) * anchors.len() + a
    };
    for asg in &assignments.assigned {
        if asg.image >= s.n {
            return Err(Error::Shape(format!(
                "assignment for image {} in a batch of {}",
                asg.image, s.n
            )));
        }
        assigned[slot(asg.image, asg.cell_y, asg.cell_x, asg.anchor)] = true;
    }

    // no-object term
    for n in 0..s.n {
        for a in 0..anchors.len() {
            for cy in 0..grid {
                for cx in 0..grid {
                    if assigned[slot(n, cy, cx, a)] {
                        continue;
                    }
                    let i = raw.offset(n, a * stride + 4, cy, cx);
                    let so = sigmoid_scalar(raw.data()[i].as_f64());
                    terms.no_object += weights.no_object * so * so * norm;
                    grad[i] += weights.no_object * 2.0 * so * so * (1.0 - so) * norm;
                }
            }
        }
    }

    for asg in &assignments.assigned {
        let (n, cx, cy, a) = (asg.image, asg.cell_x, asg.cell_y, asg.anchor);
        let (pw, ph) = anchors.priors()[a];
        let idx = |f: usize| raw.offset(n, a * stride + f, cy, cx);
        let t: Vec<f64> = (0..stride).map(|f| raw.data()[idx(f)].as_f64()).collect();
        let gt = asg.gt.bbox;

        let target_x = gt.cx * g - cx as f64;
        let target_y = gt.cy * g - cy as f64;
        let target_w = (gt.w * g / pw).ln();
        let target_h = (gt.h * g / ph).ln();
        let (sx, sy) = (sigmoid_scalar(t[0]), sigmoid_scalar(t[1]));
        let (dsx, dsy) = (sx * (1.0 - sx), sy * (1.0 - sy));

        let lc = weights.coord;
        terms.coord += lc
            * ((sx - target_x).powi(2)
                + (sy - target_y).powi(2)
                + (t[2] - target_w).powi(2)
                + (t[3] - target_h).powi(2))
            * norm;
        grad[idx(0)] += lc * 2.0 * (sx - target_x) * dsx * norm;
        grad[idx(1)] += lc * 2.0 * (sy - target_y) * dsy * norm;
        grad[idx(2)] += lc * 2.0 * (t[2] - target_w) * norm;
        grad[idx(3)] += lc * 2.0 * (t[3] - target_h) * norm;

        let pred = BBox::new(
            (sx + cx as f64) / g,
            (sy + cy as f64) / g,
            pw * t[2].exp() / g,
            ph * t[3].exp() / g,
        );
        let (iou, d_iou) = iou_and_grad(&pred, &gt);
        let so = sigmoid_scalar(t[4]);
        let resid = so - iou;
        terms.object += resid * resid * norm;
        grad[idx(4)] += 2.0 * resid * so * (1.0 - so) * norm;
        let scale = -2.0 * resid * norm;
        grad[idx(0)] += scale * d_iou[0] * dsx / g;
        grad[idx(1)] += scale * d_iou[1] * dsy / g;
        grad[idx(2)] += scale * d_iou[2] * pred.w;
        grad[idx(3)] += scale * d_iou[3] * pred.h;

        if num_classes > 1 {
            let probs = softmax(&t[BOX_FIELDS..]);
            let class = asg.gt.class_id;
            if class >= num_classes {
                return Err(Error::Shape(format!(
                    "class id {class} with {num_classes} classes"
                )));
            }
            terms.class -= probs[class].max(f64::MIN_POSITIVE).ln() * norm;
            for (k, p) in probs.iter().enumerate() {
                let onehot = if k == class { 1.0 } else { 0.0 };
                grad[idx(BOX_FIELDS + k)] += (p - onehot) * norm;
            }
        }
    }

    let grad = Tensor::new(s, grad.into_iter().map(T::lit).collect())?;
    Ok((terms, grad))
}

/// Records the detection loss on the tape as a scalar of `raw`.
pub fn yolo_loss<T: Real>(
    sess: &mut Session<'_, T>,
    raw: Var,
    assignments: &Assignments,
    anchors: &AnchorSet,
    num_classes: usize,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let (terms, grad) = yolo_loss_terms(
        sess.tape.value(raw),
        assignments,
        anchors,
        num_classes,
        weights,
    )?;
    let loss = sess.tape.fused_scalar(raw, T::lit(terms.total()), grad)?;
    Ok((loss, terms))
}

/// Raw head values that decode exactly onto `gt` in `(cell, anchor)`:
/// inverse of the decode equations, with `t_o` set to `objectness_logit`.
pub fn encode_target(
    gt: &BBox,
    cell_x: usize,
    cell_y: usize,
    prior: (f64, f64),
    grid: usize,
    objectness_logit: f64,
) -> [f64; 5] {
    let g = grid as f64;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    [
        logit(gt.cx * g - cell_x as f64),
        logit(gt.cy * g - cell_y as f64),
        (gt.w * g / prior.0).ln(),
        (gt.h * g / prior.1).ln(),
        objectness_logit,
    ]
}
