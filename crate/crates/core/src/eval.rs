//! Non-maximum suppression, greedy matching, precision-recall and average
//! precision, and foci counting.

use serde::{Deserialize, Serialize};

use crate::boxes::{reindex_by_score, BBox, Detection, GroundTruth};

pub const DEFAULT_NMS_IOU: f64 = 0.45;
pub const DEFAULT_CONF: f64 = 0.25;
pub const DEFAULT_EVAL_IOU: f64 = 0.25;
/// Lowest score kept when ranking detections for average precision.
pub const DEFAULT_SCORE_FLOOR: f64 = 0.005;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

fn by_score(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

/// Per-class greedy suppression of boxes overlapping a kept box by more
/// than `iou_threshold`. Equal scores are resolved by lower detection index.
/// Returns survivors by descending score with their original indices.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(by_score);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// True-positive flag per detection, in the given (score-sorted) order.
/// Each detection takes its best-IoU unmatched ground truth of the same
/// class (lowest index on ties) if that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Vec<bool> {
    let mut matched = vec![false; gts.len()];
    dets.iter()
        .map(|d| match_one(d, gts, &mut matched, iou_threshold))
        .collect()
}

fn match_one(d: &Detection, gts: &[GroundTruth], matched: &mut [bool], iou_threshold: f64) -> bool {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate() {
        if matched[j] || g.class_id != d.class_id {
            continue;
        }
        let v = d.bbox.iou(&g.bbox);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    match best {
        Some((j, v)) if v >= iou_threshold => {
            matched[j] = true;
            true
        }
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Cumulative precision and recall at every rank.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(rank, &hit)| {
            tp += usize::from(hit);
            PrPoint {
                recall: if n_gt == 0 {
                    0.0
                } else {
                    tp as f64 / n_gt as f64
                },
                precision: tp as f64 / (rank + 1) as f64,
            }
        })
        .collect()
}

/// All-point interpolated area under the precision envelope.
pub fn ap(points: &[PrPoint]) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut running: f64 = 0.0;
    for (i, p) in points.iter().enumerate().rev() {
        running = running.max(p.precision);
        envelope[i] = running;
    }
    // integrate over runs of constant envelope so a perfect ranking gives
    // exactly its final recall
    let mut area = 0.0;
    let mut run_start = 0.0;
    let mut run_end = 0.0;
    let mut run_level = f64::NAN;
    for (p, env) in points.iter().zip(envelope) {
        if p.recall > run_end {
            if env != run_level {
                area += (run_end - run_start) * run_level.max(0.0);
                run_start = run_end;
                run_level = env;
            }
            run_end = p.recall;
        }
    }
    if run_end > run_start {
        area += (run_end - run_start) * run_level;
    }
    area
}

/// AP of a ranked flag list; `None` when there is nothing to recall.
/// Computed as an exact fraction while it fits, so that for example
/// `[TP, FP, TP]` over two ground truths is the double nearest `5/6`.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    Some(exact_ap(flags, n_gt).unwrap_or_else(|| ap(&pr_curve(flags, n_gt))))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `sum over hits of max precision at or after the hit, / n_gt`, in
/// integers; `None` on overflow or when the result is not exactly
/// representable before the final division.
fn exact_ap(flags: &[bool], n_gt: usize) -> Option<f64> {
    let mut tp = 0u128;
    let precision: Vec<(u128, u128)> = flags
        .iter()
        .enumerate()
        .map(|(rank, &hit)| {
            tp += u128::from(hit);
            (tp, rank as u128 + 1)
        })
        .collect();
    let (mut num, mut den) = (0u128, 1u128);
    let mut best = (0u128, 1u128);
    for (&(p, q), &hit) in precision.iter().zip(flags).rev() {
        if p * best.1 > best.0 * q {
            best = (p, q);
        }
        if hit {
            let n = num
                .checked_mul(best.1)?
                .checked_add(best.0.checked_mul(den)?)?;
            let d = den.checked_mul(best.1)?;
            let g = gcd(n, d).max(1);
            (num, den) = (n / g, d / g);
        }
    }
    let den = den.checked_mul(n_gt as u128)?;
    let g = gcd(num, den).max(1);
    let (num, den) = (num / g, den / g);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub pr: Vec<PrPoint>,
}

/// Mean over classes whose AP is defined.
pub fn map_at(classes: &[ClassReport]) -> Option<f64> {
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FociCount {
    pub count: usize,
    pub detections: Vec<Detection>,
    pub labels: Vec<String>,
}

/// Keeps detections scoring at least `conf_threshold`, numbered 1..n by
/// descending score.
pub fn count_foci(dets: &[Detection], conf_threshold: f64) -> FociCount {
    let mut detections: Vec<Detection> = dets
        .iter()
        .copied()
        .filter(|d| d.score >= conf_threshold)
        .collect();
    reindex_by_score(&mut detections);
    let labels = detections.iter().map(Detection::label).collect();
    FociCount {
        count: detections.len(),
        detections,
        labels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub map: Option<f64>,
    pub max_recall: f64,
    pub total_gt: usize,
    pub classes: Vec<ClassReport>,
    /// Detections per image scoring at least the counting threshold.
    pub foci_counts: Vec<usize>,
}

/// Scores per-image detections against ground truth. Detections are used as
/// given (apply the score floor and NMS beforehand). Within a class,
/// detections from all images are ranked together by score, then image, then
/// index. Foci counts only include detections scoring at least
/// `count_threshold`.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_threshold: f64,
    count_threshold: f64,
) -> EvalReport {
    assert_eq!(
        dets.len(),
        gts.len(),
        "one detection list per annotated image"
    );
    let mut classes = Vec::with_capacity(num_classes);
    let mut total_tp = 0usize;
    for class in 0..num_classes {
        let mut ranked: Vec<(usize, Detection)> = Vec::new();
        for (img, list) in dets.iter().enumerate() {
            ranked.extend(
                list.iter()
                    .filter(|d| d.class_id == class)
                    .map(|&d| (img, d)),
            );
        }
        ranked.sort_by(|a, b| {
            by_score(&a.1, &b.1)
                .then(a.0.cmp(&b.0))
                .then(a.1.index.cmp(&b.1.index))
        });

        let class_gts: Vec<Vec<GroundTruth>> = gts
            .iter()
            .map(|g| g.iter().copied().filter(|g| g.class_id == class).collect())
            .collect();
        let n_gt: usize = class_gts.iter().map(Vec::len).sum();
        let mut matched: Vec<Vec<bool>> = class_gts.iter().map(|g| vec![false; g.len()]).collect();
        let flags: Vec<bool> = ranked
            .iter()
            .map(|(img, d)| match_one(d, &class_gts[*img], &mut matched[*img], iou_threshold))
            .collect();
        total_tp += flags.iter().filter(|&&f| f).count();
        let pr = pr_curve(&flags, n_gt);
        classes.push(ClassReport {
            class,
            ap: average_precision(&flags, n_gt),
            n_gt,
            pr,
        });
    }
    let total_gt = gts.iter().map(Vec::len).sum();
    EvalReport {
        iou_threshold,
        map: map_at(&classes),
        max_recall: if total_gt == 0 {
            0.0
        } else {
            total_tp as f64 / total_gt as f64
        },
        total_gt,
        classes,
        foci_counts: dets
            .iter()
            .map(|list| list.iter().filter(|d| d.score >= count_threshold).count())
            .collect(),
    }
}
