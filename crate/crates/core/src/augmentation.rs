//! Weak and strong augmentation pipelines over synthetic float images.
//! Geometric ops are recorded as a single [`AffineTransform`] so boxes can
//! be carried exactly between frames; photometric ops and cutout never
//! touch annotations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{transform_boxes, AffineTransform, BBox};
use crate::numerics::Tensor;
use crate::synthdata::Annotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Weak,
    Strong,
}

/// Augmentation policy; weak keeps to exactly-recorded geometric ops,
/// strong adds photometric jitter, translation, rotation, and cutout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugPolicy {
    pub kind: AugKind,
    /// Scale jitter amplitude: factor drawn from [1−a, 1+a].
    pub scale_jitter: f64,
    pub hflip_p: f64,
    pub brightness_p: f64,
    pub contrast_p: f64,
    pub noise_p: f64,
    pub noise_std: f64,
    pub translation_p: f64,
    pub translation_max: f64,
    pub rotate_p: f64,
    pub rotate_max_deg: f64,
    pub cutout_p: f64,
    pub cutout_num_max: usize,
    pub cutout_ratio_lo: f64,
    pub cutout_ratio_hi: f64,
}

impl AugPolicy {
    /// Light geometric-only policy for the teacher view.
    pub fn weak() -> Self {
        AugPolicy {
            kind: AugKind::Weak,
            scale_jitter: 0.1,
            hflip_p: 0.5,
            brightness_p: 0.0,
            contrast_p: 0.0,
            noise_p: 0.0,
            noise_std: 0.0,
            translation_p: 0.0,
            translation_max: 0.0,
            rotate_p: 0.0,
            rotate_max_deg: 0.0,
            cutout_p: 0.0,
            cutout_num_max: 0,
            cutout_ratio_lo: 0.0,
            cutout_ratio_hi: 0.0,
        }
    }

    /// Strong policy for labeled images: geometric scale/flip family,
    /// photometric jitter, and cutout, but no translation or rotation.
    pub fn labeled_strong() -> Self {
        AugPolicy {
            translation_p: 0.0,
            translation_max: 0.0,
            rotate_p: 0.0,
            rotate_max_deg: 0.0,
            ..AugPolicy::strong()
        }
    }

    /// Heavy policy for the unlabeled student view.
    pub fn strong() -> Self {
        AugPolicy {
            kind: AugKind::Strong,
            scale_jitter: 0.1,
            hflip_p: 0.5,
            brightness_p: 0.25,
            contrast_p: 0.25,
            noise_p: 0.25,
            noise_std: 0.05,
            translation_p: 0.3,
            translation_max: 0.12,
            rotate_p: 0.3,
            rotate_max_deg: 30.0,
            cutout_p: 1.0,
            cutout_num_max: 5,
            cutout_ratio_lo: 0.05,
            cutout_ratio_hi: 0.2,
        }
    }

    /// No-op policy (identity transform, untouched pixels).
    pub fn identity() -> Self {
        AugPolicy {
            kind: AugKind::Weak,
            scale_jitter: 0.0,
            hflip_p: 0.0,
            brightness_p: 0.0,
            contrast_p: 0.0,
            noise_p: 0.0,
            noise_std: 0.0,
            translation_p: 0.0,
            translation_max: 0.0,
            rotate_p: 0.0,
            rotate_max_deg: 0.0,
            cutout_p: 0.0,
            cutout_num_max: 0,
            cutout_ratio_lo: 0.0,
            cutout_ratio_hi: 0.0,
        }
    }
}

/// Inverse-warp an [H × W × C] image through an affine map over normalized
/// coordinates, bilinear with zero fill outside the source.
fn warp_image(image: &Tensor, t: &AffineTransform) -> Result<Tensor> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let inv = t.inverse()?;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (nx, ny) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let (sx, sy) = inv.apply_point(nx, ny);
            let gx = sx * w as f64 - 0.5;
            let gy = sy * h as f64 - 0.5;
            if gx < -1.0 || gy < -1.0 || gx > w as f64 || gy > h as f64 {
                continue;
            }
            let x0 = gx.floor() as isize;
            let y0 = gy.floor() as isize;
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            for ch in 0..c {
                let tap = |xi: isize, yi: isize| -> f64 {
                    if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
                        0.0
                    } else {
                        src[(yi as usize * w + xi as usize) * c + ch]
                    }
                };
                out[(y * w + x) * c + ch] = tap(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + tap(x0 + 1, y0) * fx * (1.0 - fy)
                    + tap(x0, y0 + 1) * (1.0 - fx) * fy
                    + tap(x0 + 1, y0 + 1) * fx * fy;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Apply a policy. Returns the augmented image, surviving annotations
/// (indices re-fit through the recorded transform), and the transform
/// mapping input-frame coordinates to the output frame.
pub fn apply(
    image: &Tensor,
    annotations: &[Annotation],
    policy: &AugPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<Annotation>, AffineTransform)> {
    let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);

    // Geometric chain, recorded exactly.
    let mut t = AffineTransform::identity();
    if policy.scale_jitter > 0.0 {
        let s = rng.gen_range(1.0 - policy.scale_jitter..=1.0 + policy.scale_jitter);
        t = AffineTransform::scale_about(s, 0.5, 0.5)?.compose(&t);
    }
    if policy.hflip_p > 0.0 && rng.gen_bool(policy.hflip_p) {
        t = AffineTransform::hflip().compose(&t);
    }
    if policy.translation_p > 0.0 && rng.gen_bool(policy.translation_p) {
        let tx = rng.gen_range(-policy.translation_max..=policy.translation_max);
        let ty = rng.gen_range(-policy.translation_max..=policy.translation_max);
        t = AffineTransform::translation(tx, ty).compose(&t);
    }
    if policy.rotate_p > 0.0 && rng.gen_bool(policy.rotate_p) {
        let deg = rng.gen_range(0.0..=policy.rotate_max_deg);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        t = AffineTransform::rotation_about(sign * deg.to_radians(), 0.5, 0.5).compose(&t);
    }

    let mut out = if t == AffineTransform::identity() {
        image.clone()
    } else {
        warp_image(image, &t)?
    };

    // Photometric ops; annotations untouched.
    if policy.brightness_p > 0.0 && rng.gen_bool(policy.brightness_p) {
        let f = rng.gen_range(0.6..=1.4);
        for v in out.data_mut() {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }
    if policy.contrast_p > 0.0 && rng.gen_bool(policy.contrast_p) {
        let f = rng.gen_range(0.6..=1.4);
        let mean = out.data().iter().sum::<f64>() / out.numel() as f64;
        for v in out.data_mut() {
            *v = ((*v - mean) * f + mean).clamp(0.0, 1.0);
        }
    }
    if policy.noise_p > 0.0 && rng.gen_bool(policy.noise_p) {
        for v in out.data_mut() {
            *v = (*v + policy.noise_std * (rng.gen::<f64>() - 0.5) * 2.0).clamp(0.0, 1.0);
        }
    }
    if policy.cutout_p > 0.0 && policy.cutout_num_max > 0 && rng.gen_bool(policy.cutout_p) {
        let n = rng.gen_range(1..=policy.cutout_num_max);
        let (hh, ww) = (image.shape()[0], image.shape()[1]);
        for _ in 0..n {
            let rw = rng.gen_range(policy.cutout_ratio_lo..=policy.cutout_ratio_hi);
            let rh = rng.gen_range(policy.cutout_ratio_lo..=policy.cutout_ratio_hi);
            let pw = ((rw * w) as usize).max(1);
            let ph = ((rh * h) as usize).max(1);
            let x0 = rng.gen_range(0..ww.saturating_sub(pw).max(1));
            let y0 = rng.gen_range(0..hh.saturating_sub(ph).max(1));
            for y in y0..(y0 + ph).min(hh) {
                for x in x0..(x0 + pw).min(ww) {
                    for c in 0..3 {
                        out.data_mut()[(y * ww + x) * 3 + c] = 0.0;
                    }
                }
            }
        }
    }

    // Boxes ride the recorded transform; classes/areas follow survivors.
    // A pure photometric pass keeps annotations bitwise unchanged.
    let out_annotations = if t == AffineTransform::identity() {
        annotations.to_vec()
    } else {
        let boxes: Vec<BBox> = annotations.iter().map(|a| a.bbox).collect();
        transform_boxes(&boxes, &t)?
            .into_iter()
            .map(|(i, bbox)| Annotation {
                bbox,
                class_id: annotations[i].class_id,
                area_px: bbox.w * w * bbox.h * h,
            })
            .collect()
    };

    Ok((out, out_annotations, t))
}

/// Transform carrying teacher-frame (weak) coordinates into the student
/// frame (strong): strong ∘ weak⁻¹.
pub fn compose_frames(
    weak_t: &AffineTransform,
    strong_t: &AffineTransform,
) -> Result<AffineTransform> {
    Ok(strong_t.compose(&weak_t.inverse()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_annotations() -> Vec<Annotation> {
        vec![
            Annotation {
                bbox: BBox::new(0.4, 0.5, 0.2, 0.3).unwrap(),
                class_id: 1,
                area_px: 0.2 * 64.0 * 0.3 * 64.0,
            },
            Annotation {
                bbox: BBox::new(0.7, 0.3, 0.15, 0.1).unwrap(),
                class_id: 4,
                area_px: 0.15 * 64.0 * 0.1 * 64.0,
            },
        ]
    }

    fn sample_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![64, 64, 3],
            (0..64 * 64 * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_policy_is_identity() {
        let image = sample_image(1);
        let anns = sample_annotations();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (out, out_anns, t) = apply(&image, &anns, &AugPolicy::identity(), &mut rng).unwrap();
        assert_eq!(t, AffineTransform::identity());
        for (a, b) in out.data().iter().zip(image.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out_anns.len(), anns.len());
    }

    #[test]
    fn flip_only_maps_cx_to_one_minus_cx() {
        let image = sample_image(3);
        let anns = sample_annotations();
        let policy = AugPolicy {
            hflip_p: 1.0,
            ..AugPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, out_anns, t) = apply(&image, &anns, &policy, &mut rng).unwrap();
        for (orig, moved) in anns.iter().zip(&out_anns) {
            assert!((moved.bbox.cx - (1.0 - orig.bbox.cx)).abs() < 1e-9);
            assert!((moved.bbox.cy - orig.bbox.cy).abs() < 1e-9);
        }
        // Record consistency: direct analytic flip equals the recorded map.
        let (fx, fy) = t.apply_point(0.3, 0.4);
        assert!((fx - 0.7).abs() < 1e-12 && (fy - 0.4).abs() < 1e-12);
    }

    #[test]
    fn same_seed_identical_output_bytes() {
        let image = sample_image(5);
        let anns = sample_annotations();
        let policy = AugPolicy::strong();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            apply(&image, &anns, &policy, &mut rng).unwrap()
        };
        let (img_a, ann_a, t_a) = run(42);
        let (img_b, ann_b, t_b) = run(42);
        assert_eq!(img_a.data(), img_b.data());
        assert_eq!(ann_a, ann_b);
        assert_eq!(t_a, t_b);
        let (img_c, _, _) = run(43);
        assert_ne!(img_a.data(), img_c.data());
    }

    #[test]
    fn photometric_and_cutout_leave_annotations_unchanged() {
        let image = sample_image(6);
        let anns = sample_annotations();
        let policy = AugPolicy {
            brightness_p: 1.0,
            contrast_p: 1.0,
            noise_p: 1.0,
            noise_std: 0.05,
            cutout_p: 1.0,
            cutout_num_max: 5,
            cutout_ratio_lo: 0.05,
            cutout_ratio_hi: 0.2,
            ..AugPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (out, out_anns, t) = apply(&image, &anns, &policy, &mut rng).unwrap();
        assert_eq!(t, AffineTransform::identity());
        assert_eq!(out_anns, anns);
        assert_ne!(out.data(), image.data());
    }

    #[test]
    fn recorded_transform_matches_direct_box_movement() {
        // translation: boxes move by exactly (tx, ty)
        let image = sample_image(8);
        let anns = sample_annotations();
        let policy = AugPolicy {
            translation_p: 1.0,
            translation_max: 0.08,
            ..AugPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, out_anns, t) = apply(&image, &anns, &policy, &mut rng).unwrap();
        let (tx, ty) = (t.m[0][2], t.m[1][2]);
        for (orig, moved) in anns.iter().zip(&out_anns) {
            assert!((moved.bbox.cx - (orig.bbox.cx + tx)).abs() < 1e-6);
            assert!((moved.bbox.cy - (orig.bbox.cy + ty)).abs() < 1e-6);
        }
    }

    #[test]
    fn compose_frames_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let weak = AffineTransform::new([
                [rng.gen_range(0.9..1.1), 0.0, rng.gen_range(-0.05..0.05)],
                [0.0, rng.gen_range(0.9..1.1), rng.gen_range(-0.05..0.05)],
            ])
            .unwrap();
            let strong = AffineTransform::new([
                [rng.gen_range(0.9..1.1), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)],
                [rng.gen_range(-0.05..0.05), rng.gen_range(0.9..1.1), rng.gen_range(-0.05..0.05)],
            ])
            .unwrap();
            let bridge = compose_frames(&weak, &strong).unwrap();
            let (x, y) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
            // teacher frame → original → student frame
            let (ox, oy) = weak.inverse().unwrap().apply_point(x, y);
            let (sx, sy) = strong.apply_point(ox, oy);
            let (bx, by) = bridge.apply_point(x, y);
            assert!((sx - bx).abs() < 1e-9 && (sy - by).abs() < 1e-9);
        }
        let weak = AffineTransform::translation(0.1, 0.0);
        assert_eq!(
            compose_frames(&weak, &weak).unwrap(),
            weak.compose(&weak.inverse().unwrap())
        );
    }
}
