//! Box algebra: normalized center-size boxes, IoU/GIoU, NMS, and
//! invertible affine transforms for mapping boxes between augmentation
//! frames. Corner (xyxy) form exists only at the metric/report boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_EXTENT: f64 = 1e-6;

/// Axis-aligned box in normalized center-size coordinates, clipped to the
/// unit square on construction. Degenerate extents are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let x0 = (cx - w / 2.0).clamp(0.0, 1.0);
        let x1 = (cx + w / 2.0).clamp(0.0, 1.0);
        let y0 = (cy - h / 2.0).clamp(0.0, 1.0);
        let y1 = (cy + h / 2.0).clamp(0.0, 1.0);
        let (w, h) = (x1 - x0, y1 - y0);
        if w <= MIN_EXTENT || h <= MIN_EXTENT {
            return Err(Error::DegenerateBox { w, h });
        }
        Ok(BBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w,
            h,
        })
    }

    /// From corner coordinates (normalized).
    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn xyxy(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn cxcywh(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Normalized area (fraction of the unit square).
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.xyxy();
    let [bx0, by0, bx1, by1] = b.xyxy();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Generalized IoU: IoU − (enclosing − union) / enclosing, in [−1, 1].
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.xyxy();
    let [bx0, by0, bx1, by1] = b.xyxy();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cover = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    inter / union - (cover - union) / cover
}

/// Greedy descending-score non-maximum suppression; returns kept indices.
/// Equal scores break toward the lower input index.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::LengthMismatch {
            context: "nms",
            left: boxes.len(),
            right: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// 2×3 affine map over normalized coordinates: (x, y) ↦ (m·[x y 1]ᵀ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    /// Row-major [[a, b, tx], [c, d, ty]].
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let t = AffineTransform { m };
        let det = t.det();
        if det.abs() < 1e-12 {
            return Err(Error::SingularTransform { det });
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        AffineTransform {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineTransform {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Uniform scale about a fixed point.
    pub fn scale_about(s: f64, px: f64, py: f64) -> Result<Self> {
        AffineTransform::new([[s, 0.0, px * (1.0 - s)], [0.0, s, py * (1.0 - s)]])
    }

    /// Rotation by `angle` radians about a fixed point.
    pub fn rotation_about(angle: f64, px: f64, py: f64) -> Self {
        let (s, c) = angle.sin_cos();
        AffineTransform {
            m: [
                [c, -s, px - c * px + s * py],
                [s, c, py - s * px - c * py],
            ],
        }
    }

    /// Horizontal mirror of the unit square (x ↦ 1 − x).
    pub fn hflip() -> Self {
        AffineTransform {
            m: [[-1.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }

    /// self ∘ other: apply `other` first, then `self`.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let a = &self.m;
        let b = &other.m;
        AffineTransform {
            m: [
                [
                    a[0][0] * b[0][0] + a[0][1] * b[1][0],
                    a[0][0] * b[0][1] + a[0][1] * b[1][1],
                    a[0][0] * b[0][2] + a[0][1] * b[1][2] + a[0][2],
                ],
                [
                    a[1][0] * b[0][0] + a[1][1] * b[1][0],
                    a[1][0] * b[0][1] + a[1][1] * b[1][1],
                    a[1][0] * b[0][2] + a[1][1] * b[1][2] + a[1][2],
                ],
            ],
        }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.det();
        if det.abs() < 1e-12 {
            return Err(Error::SingularTransform { det });
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        AffineTransform::new([
            [ia, ib, -(ia * tx + ib * ty)],
            [ic, id, -(ic * tx + id * ty)],
        ])
    }
}

/// Map boxes through an affine transform: corners are mapped, the
/// axis-aligned hull is re-fit, and the result clipped to the unit square.
/// Boxes pushed fully outside are dropped together with their index.
pub fn transform_boxes(boxes: &[BBox], t: &AffineTransform) -> Result<Vec<(usize, BBox)>> {
    if t.det().abs() < 1e-12 {
        return Err(Error::SingularTransform { det: t.det() });
    }
    let mut out = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let [x0, y0, x1, y1] = b.xyxy();
        let corners = [
            t.apply_point(x0, y0),
            t.apply_point(x1, y0),
            t.apply_point(x0, y1),
            t.apply_point(x1, y1),
        ];
        let hx0 = corners.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hx1 = corners.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let hy0 = corners.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hy1 = corners.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if let Ok(bb) = BBox::from_xyxy(hx0, hy0, hx1, hy1) {
            out.push((i, bb));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
        BBox::new(
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.05..0.4),
            rng.gen_range(0.05..0.4),
        )
        .unwrap()
    }

    #[test]
    fn box_construction_clips_and_rejects_degenerate() {
        let b = BBox::new(0.05, 0.5, 0.2, 0.2).unwrap();
        let [x0, ..] = b.xyxy();
        assert!(x0 >= 0.0);
        assert!(BBox::new(0.5, 0.5, 0.0, 0.2).is_err());
        assert!(BBox::new(-0.5, 0.5, 0.2, 0.2).is_err()); // fully outside
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = BBox::new(0.1, 0.1, 0.1, 0.1).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_third_case_matches_raster_oracle() {
        // xyxy [0,0,2,2] vs [1,0,3,2] scaled into the unit square by 1/4.
        let a = BBox::from_xyxy(0.0, 0.0, 0.5, 0.5).unwrap();
        let b = BBox::from_xyxy(0.25, 0.0, 0.75, 0.5).unwrap();
        // Rasterized area count on a fine grid.
        let n = 400;
        let (mut ia, mut ua) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                let (x, y) = ((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
                let in_a = x > 0.0 && x < 0.5 && y > 0.0 && y < 0.5;
                let in_b = x > 0.25 && x < 0.75 && y > 0.0 && y < 0.5;
                if in_a && in_b {
                    ia += 1;
                }
                if in_a || in_b {
                    ua += 1;
                }
            }
        }
        let oracle = ia as f64 / ua as f64;
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((oracle - 1.0 / 3.0).abs() < 2e-3);
    }

    #[test]
    fn giou_identity_and_separated_case() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        // xyxy [0,0,1,1] vs [2,2,3,3] scaled by 1/3: areas 1/9 each,
        // enclosing 9/9, union 2/9 → giou = 0 − (1 − 2/9)/1 = −7/9.
        let a = BBox::from_xyxy(0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0).unwrap();
        let b = BBox::from_xyxy(2.0 / 3.0, 2.0 / 3.0, 1.0, 1.0).unwrap();
        assert!((giou(&a, &b) + 7.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn giou_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let g = giou(&a, &b);
            assert!((g - giou(&b, &a)).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&g));
            assert!(g <= iou(&a, &b) + 1e-12);
        }
    }

    #[test]
    fn giou_equals_iou_when_enclosing_equals_union_hull() {
        // Two overlapping boxes sharing the same bounding hull as their union:
        // one box inside the other.
        let outer = BBox::new(0.5, 0.5, 0.4, 0.4).unwrap();
        let inner = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        assert!((giou(&outer, &inner) - iou(&outer, &inner)).abs() < 1e-12);
    }

    #[test]
    fn nms_basics() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        assert_eq!(nms(&[b], &[0.7], 0.5).unwrap(), vec![0]);
        let kept = nms(&[b, b], &[0.9, 0.8], 0.5).unwrap();
        assert_eq!(kept, vec![0]);
        assert!(nms(&[b], &[0.9, 0.8], 0.5).is_err());
    }

    #[test]
    fn nms_matches_exhaustive_greedy_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(1..=10);
            let boxes: Vec<BBox> = (0..n).map(|_| rand_box(&mut rng)).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let thr = rng.gen_range(0.2..0.8);
            let kept = nms(&boxes, &scores, thr).unwrap();

            // Reference: literal greedy, no shared helper state.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
            let mut expect: Vec<usize> = Vec::new();
            for &i in &order {
                let mut ok = true;
                for &k in &expect {
                    if iou(&boxes[i], &boxes[k]) > thr {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    expect.push(i);
                }
            }
            assert_eq!(kept, expect);
            // Kept set invariants.
            for (ai, &i) in kept.iter().enumerate() {
                for &j in &kept[ai + 1..] {
                    assert!(iou(&boxes[i], &boxes[j]) <= thr);
                }
            }
            let mut sorted = kept.clone();
            sorted.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
            assert_eq!(kept, sorted);
        }
    }

    #[test]
    fn transform_identity_translation_and_roundtrip() {
        let boxes = vec![
            BBox::new(0.4, 0.4, 0.2, 0.3).unwrap(),
            BBox::new(0.6, 0.5, 0.1, 0.1).unwrap(),
        ];
        let id = AffineTransform::identity();
        let out = transform_boxes(&boxes, &id).unwrap();
        assert_eq!(out.len(), 2);
        for ((_, got), want) in out.iter().zip(&boxes) {
            for (a, b) in got.cxcywh().iter().zip(want.cxcywh()) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let t = AffineTransform::translation(0.1, 0.0);
        let out = transform_boxes(&boxes, &t).unwrap();
        assert!((out[0].1.cx - 0.5).abs() < 1e-12);

        let rt = AffineTransform::rotation_about(0.3, 0.5, 0.5)
            .compose(&AffineTransform::scale_about(0.9, 0.5, 0.5).unwrap());
        let fwd = transform_boxes(&boxes, &rt).unwrap();
        let back = transform_boxes(
            &fwd.iter().map(|(_, b)| *b).collect::<Vec<_>>(),
            &rt.inverse().unwrap(),
        )
        .unwrap();
        // Rotation grows the hull, so only check the round trip of a pure
        // affine without rotation for tight equality.
        assert_eq!(back.len(), 2);

        let t2 = AffineTransform::translation(0.05, -0.03)
            .compose(&AffineTransform::scale_about(1.1, 0.5, 0.5).unwrap());
        let fwd = transform_boxes(&boxes, &t2).unwrap();
        let back = transform_boxes(
            &fwd.iter().map(|(_, b)| *b).collect::<Vec<_>>(),
            &t2.inverse().unwrap(),
        )
        .unwrap();
        for ((_, got), want) in back.iter().zip(&boxes) {
            assert!((got.cx - want.cx).abs() < 1e-6);
            assert!((got.cy - want.cy).abs() < 1e-6);
            assert!((got.w - want.w).abs() < 1e-6);
            assert!((got.h - want.h).abs() < 1e-6);
        }
    }

    #[test]
    fn compose_of_transforms_equals_transform_of_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let t1 = AffineTransform::new([
                [rng.gen_range(0.8..1.2), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
                [rng.gen_range(-0.1..0.1), rng.gen_range(0.8..1.2), rng.gen_range(-0.1..0.1)],
            ])
            .unwrap();
            let t2 = AffineTransform::new([
                [rng.gen_range(0.8..1.2), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
                [rng.gen_range(-0.1..0.1), rng.gen_range(0.8..1.2), rng.gen_range(-0.1..0.1)],
            ])
            .unwrap();
            let (x, y) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let (ax, ay) = t2.apply_point(x, y);
            let (bx, by) = t1.apply_point(ax, ay);
            let (cx, cy) = t1.compose(&t2).apply_point(x, y);
            assert!((bx - cx).abs() < 1e-9 && (by - cy).abs() < 1e-9);

            let inv = t1.inverse().unwrap();
            let (ix, iy) = inv.apply_point(t1.apply_point(x, y).0, t1.apply_point(x, y).1);
            assert!((ix - x).abs() < 1e-9 && (iy - y).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_transform_rejected() {
        assert!(AffineTransform::new([[0.0, 0.0, 0.1], [0.0, 0.0, 0.2]]).is_err());
        let boxes = vec![BBox::new(0.5, 0.5, 0.2, 0.2).unwrap()];
        let t = AffineTransform {
            m: [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
        };
        assert!(transform_boxes(&boxes, &t).is_err());
    }
}
