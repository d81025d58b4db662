//! Brute-force references shared by the integration tests and the
//! acceptance run.

#![allow(dead_code)]

pub mod checks;
pub mod grad;

use foci::boxes::{BBox, Detection, GroundTruth};
use foci::rng::SplitMix64;
use foci::tensor::{ConvSpec, Shape, Tensor};

pub fn random_tensor(rng: &mut SplitMix64, shape: Shape, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-scale, scale))
}

/// Direct sliding-window dilated cross-correlation with zero padding.
pub fn conv_oracle(
    input: &Tensor<f64>,
    weights: &Tensor<f64>,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Tensor<f64> {
    let s = input.shape();
    let (k, st, p, d) = (
        spec.kernel as isize,
        spec.stride as isize,
        spec.padding as isize,
        spec.dilation as isize,
    );
    let span = d * (k - 1) + 1;
    let oh = ((s.h as isize + 2 * p - span) / st + 1) as usize;
    let ow = ((s.w as isize + 2 * p - span) / st + 1) as usize;
    Tensor::from_fn(Shape::new(s.n, spec.out_channels, oh, ow), |[n, o, y, x]| {
        let mut acc = bias.map_or(0.0, |b| b[o]);
        for c in 0..s.c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = y as isize * st - p + ky * d;
                    let ix = x as isize * st - p + kx * d;
                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                        continue;
                    }
                    acc += input.at(n, c, iy as usize, ix as usize)
                        * weights.at(o, c, ky as usize, kx as usize);
                }
            }
        }
        acc
    })
}

/// Dense kernel of extent `d(k-1)+1` with the taps of `weights` spaced `d`
/// apart and zeros between them.
pub fn zero_insert(weights: &Tensor<f64>, d: usize) -> Tensor<f64> {
    let s = weights.shape();
    let k = s.h;
    let dense = d * (k - 1) + 1;
    Tensor::from_fn(Shape::new(s.n, s.c, dense, dense), |[o, c, y, x]| {
        if y % d == 0 && x % d == 0 {
            weights.at(o, c, y / d, x / d)
        } else {
            0.0
        }
    })
}

pub fn random_box(rng: &mut SplitMix64) -> BBox {
    let w = rng.uniform(0.05, 0.4);
    let h = rng.uniform(0.05, 0.4);
    BBox::new(rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), w, h)
}

/// Up to `max` detections with coarse scores (so ties occur) and heavily
/// overlapping boxes drawn around a few centres.
pub fn random_detections(rng: &mut SplitMix64, max: usize, classes: usize) -> Vec<Detection> {
    let n = rng.range_inclusive(0, max as u64) as usize;
    let centres: Vec<BBox> = (0..3).map(|_| random_box(rng)).collect();
    (0..n)
        .map(|i| {
            let c = centres[rng.below(3) as usize];
            let jitter = 0.05;
            Detection {
                bbox: BBox::new(
                    c.cx + rng.uniform(-jitter, jitter),
                    c.cy + rng.uniform(-jitter, jitter),
                    c.w * rng.uniform(0.7, 1.3),
                    c.h * rng.uniform(0.7, 1.3),
                ),
                class_id: rng.below(classes as u64) as usize,
                score: (rng.range_inclusive(1, 10) as f64) / 10.0,
                index: i + 1,
            }
        })
        .collect()
}

pub fn ground_truth_near(
    rng: &mut SplitMix64,
    dets: &[Detection],
    extra: usize,
    classes: usize,
) -> Vec<GroundTruth> {
    let mut gts = Vec::new();
    for d in dets {
        if rng.next_f64() < 0.6 {
            gts.push(GroundTruth {
                bbox: BBox::new(
                    d.bbox.cx + rng.uniform(-0.05, 0.05),
                    d.bbox.cy + rng.uniform(-0.05, 0.05),
                    d.bbox.w,
                    d.bbox.h,
                ),
                class_id: d.class_id,
            });
        }
    }
    for _ in 0..rng.range_inclusive(0, extra as u64) {
        gts.push(GroundTruth {
            bbox: random_box(rng),
            class_id: rng.below(classes as u64) as usize,
        });
    }
    gts
}

/// Rank of a detection: higher score first, then lower index.
fn rank_before(a: &Detection, b: &Detection) -> bool {
    a.score > b.score || (a.score == b.score && a.index < b.index)
}

/// The greedy NMS result characterised as a subset: every kept box is
/// unsuppressed by higher-ranked kept boxes, and every dropped box is
/// suppressed by one. Enumerates all subsets and requires a unique answer.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let suppresses = |k: &Detection, d: &Detection| {
        k.class_id == d.class_id && rank_before(k, d) && k.bbox.iou(&d.bbox) > thr
    };
    let mut found: Vec<u32> = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let hit = (0..n).any(|j| kept(j) && suppresses(&dets[j], &dets[i]));
            kept(i) != hit
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "suppression fixpoint is unique");
    let mut out: Vec<Detection> = (0..n)
        .filter(|&i| found[0] & (1 << i) != 0)
        .map(|i| dets[i])
        .collect();
    out.sort_by(|a, b| {
        if rank_before(a, b) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    out
}

/// Sequential matching written against the definition: candidates are the
/// unmatched same-class ground truths, sorted by IoU descending then index.
pub fn match_oracle(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for d in dets {
        let mut cands: Vec<(f64, usize)> = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !taken[*j] && g.class_id == d.class_id)
            .map(|(j, g)| (d.bbox.iou(&g.bbox), j))
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        match cands.first() {
            Some(&(v, j)) if v >= thr => {
                taken[j] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    flags
}

/// Independent parameter count of a network description: backbone convs
/// with four batch-norm vectors each, SAC blocks, pyramid and head.
pub fn parameter_formula(cfg: &foci::config::NetworkConfig) -> usize {
    let mut total = 0;
    let mut c_in = cfg.input_channels;
    for stage in &cfg.stages {
        for conv in &stage.convs {
            total += conv.kernel * conv.kernel * c_in * conv.out_channels + 4 * conv.out_channels;
            c_in = conv.out_channels;
        }
    }
    let f = cfg.fpn_width;
    for (&c, &sac) in cfg.tap_channels().iter().zip(&cfg.sac_taps) {
        if sac {
            total += (9 * c * c + c) + (25 * c * c + c) + (c + 1);
        }
        total += (c * f + f) + (9 * f * f + f);
    }
    let h = cfg.head_channels;
    total += 4 * f * h + h;
    let out = cfg.anchors.len() * (5 + cfg.num_classes);
    total += h * out + out;
    total
}
