//! COCO-style evaluation: AP averaged over IoU 0.50:0.05:0.95 with
//! 101-point interpolated precision-recall integration, AP50/AP75,
//! size-stratified AP, per-class APs, and a duplicate-rate diagnostic that
//! scores redundant confident predictions.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::synthdata::Annotation;

/// One scored detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Evaluation summary; AP values are absent (not zero) when no ground
/// truth falls in the relevant area range.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// AP50:95 per class id, absent for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub duplicate_rate: f64,
    pub n_predictions: usize,
}

const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const DUPLICATE_IOU: f64 = 0.5;
pub const DUPLICATE_SCORE_FLOOR: f64 = 0.3;

/// Detection area in pixels given the image pixel area.
fn det_area_px(d: &Detection, image_area_px: f64) -> f64 {
    d.bbox.w * d.bbox.h * image_area_px
}

/// AP for one class at one IoU threshold over an area range;
/// `None` when the range holds no ground truth of this class.
#[allow(clippy::too_many_arguments)]
fn ap_single(
    preds: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    class_id: usize,
    thr: f64,
    area_range: (f64, f64),
    image_area_px: f64,
) -> Option<f64> {
    let in_range = |area: f64| area >= area_range.0 && area < area_range.1;
    let n_gt: usize = gts
        .iter()
        .flatten()
        .filter(|a| a.class_id == class_id && in_range(a.area_px))
        .count();
    if n_gt == 0 {
        return None;
    }

    // (score, image, pred index) sorted by descending score; ties keep
    // (image, index) order for determinism.
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (img, plist) in preds.iter().enumerate() {
        for (i, d) in plist.iter().enumerate() {
            if d.class_id == class_id {
                dets.push((d.score, img, i));
            }
        }
    }
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));

    let mut gt_matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    // Cumulative TP/FP flags in detection order; ignored detections
    // (matched to out-of-range gt, or unmatched with out-of-range area)
    // contribute neither.
    let mut tp_fp: Vec<bool> = Vec::new();
    for &(_, img, pi) in &dets {
        let d = &preds[img][pi];
        // Best unmatched in-range gt.
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts[img].iter().enumerate() {
            if g.class_id != class_id || gt_matched[img][gi] || !in_range(g.area_px) {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            gt_matched[img][gi] = true;
            tp_fp.push(true);
            continue;
        }
        // Out-of-range gt absorbs the detection silently.
        let absorbed = gts[img].iter().any(|g| {
            g.class_id == class_id && !in_range(g.area_px) && iou(&d.bbox, &g.bbox) >= thr
        });
        if absorbed || !in_range(det_area_px(d, image_area_px)) {
            continue;
        }
        tp_fp.push(false);
    }

    // Precision-recall points, then the 101-point interpolated mean.
    let mut precisions = Vec::with_capacity(tp_fp.len());
    let mut recalls = Vec::with_capacity(tp_fp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in &tp_fp {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // Envelope: best precision at recall ≥ r.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut total = 0.0;
    for level in 0..=100 {
        let r = level as f64 / 100.0;
        let idx = recalls.partition_point(|&rec| rec < r);
        if idx < precisions.len() {
            total += precisions[idx];
        }
    }
    Some(total / 101.0)
}

/// AP averaged over the given IoU thresholds and over every class that has
/// ground truth in the area range. `None` when no class qualifies.
pub fn average_precision(
    preds: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    iou_thresholds: &[f64],
    area_range: (f64, f64),
    image_area_px: f64,
) -> Option<f64> {
    let mut classes: Vec<usize> = gts.iter().flatten().map(|a| a.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut sum = 0.0;
    let mut n = 0usize;
    for &c in &classes {
        let mut class_sum = 0.0;
        let mut class_n = 0usize;
        for &thr in iou_thresholds {
            if let Some(ap) = ap_single(preds, gts, c, thr, area_range, image_area_px) {
                class_sum += ap;
                class_n += 1;
            }
        }
        if class_n > 0 {
            sum += class_sum / class_n as f64;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Fraction of confident predictions that redundantly hit an
/// already-matched ground truth of their own class (greedy by score).
pub fn duplicate_rate(
    preds: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    iou_threshold: f64,
    score_floor: f64,
) -> f64 {
    let mut considered = 0usize;
    let mut duplicates = 0usize;
    for (plist, glist) in preds.iter().zip(gts) {
        let mut order: Vec<usize> = (0..plist.len())
            .filter(|&i| plist[i].score >= score_floor)
            .collect();
        order.sort_by(|&a, &b| {
            plist[b]
                .score
                .partial_cmp(&plist[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut matched = vec![false; glist.len()];
        for &i in &order {
            considered += 1;
            let d = &plist[i];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in glist.iter().enumerate() {
                if g.class_id != d.class_id || matched[gi] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                matched[gi] = true;
                continue;
            }
            let hits_matched = glist.iter().enumerate().any(|(gi, g)| {
                matched[gi] && g.class_id == d.class_id && iou(&d.bbox, &g.bbox) >= iou_threshold
            });
            if hits_matched {
                duplicates += 1;
            }
        }
    }
    if considered == 0 {
        0.0
    } else {
        duplicates as f64 / considered as f64
    }
}

/// Full evaluation report at the dataset's size thresholds.
pub fn evaluate(
    preds: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    small_area_px: f64,
    large_area_px: f64,
    image_area_px: f64,
) -> EvalReport {
    let all = (0.0, f64::INFINITY);
    let map = average_precision(preds, gts, &IOU_THRESHOLDS, all, image_area_px);
    let ap50 = average_precision(preds, gts, &[0.5], all, image_area_px);
    let ap75 = average_precision(preds, gts, &[0.75], all, image_area_px);
    let ap_small = average_precision(preds, gts, &IOU_THRESHOLDS, (0.0, small_area_px), image_area_px);
    let ap_medium = average_precision(
        preds,
        gts,
        &IOU_THRESHOLDS,
        (small_area_px, large_area_px),
        image_area_px,
    );
    let ap_large = average_precision(
        preds,
        gts,
        &IOU_THRESHOLDS,
        (large_area_px, f64::INFINITY),
        image_area_px,
    );
    let n_classes = gts
        .iter()
        .flatten()
        .map(|a| a.class_id + 1)
        .max()
        .unwrap_or(0);
    let per_class = (0..n_classes)
        .map(|c| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for &thr in &IOU_THRESHOLDS {
                if let Some(ap) = ap_single(preds, gts, c, thr, all, image_area_px) {
                    sum += ap;
                    n += 1;
                }
            }
            if n == 0 {
                None
            } else {
                Some(sum / n as f64)
            }
        })
        .collect();
    EvalReport {
        map,
        ap50,
        ap75,
        ap_small,
        ap_medium,
        ap_large,
        per_class,
        duplicate_rate: duplicate_rate(preds, gts, DUPLICATE_IOU, DUPLICATE_SCORE_FLOOR),
        n_predictions: preds.iter().map(Vec::len).sum(),
    }
}
