//! Reliable pseudo-label filtering: confidence thresholding of teacher
//! predictions, m jittered ground-truth groups, per-group one-to-one
//! matching against a prediction pool, top-k consensus selection, and
//! duplicate suppression that uses the remaining (support) predictions as
//! extra overlap evidence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, match_cost, MatchCostWeights};
use crate::detector::Predictions;
use crate::error::{Error, Result};
use crate::geometry::{iou, AffineTransform, BBox};

/// One teacher-proposed box with class and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBox {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Teacher outputs after filtering, still in the teacher (weak) frame,
/// together with the transform that carries them into the student frame.
#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoBox>,
    pub transform: AffineTransform,
    pub iteration: u64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Boxes mapped into the student frame; entries whose boxes leave the
    /// unit square are dropped.
    pub fn in_student_frame(&self) -> Result<Vec<PseudoBox>> {
        let boxes: Vec<BBox> = self.entries.iter().map(|e| e.bbox).collect();
        Ok(crate::geometry::transform_boxes(&boxes, &self.transform)?
            .into_iter()
            .map(|(i, bbox)| PseudoBox {
                bbox,
                class_id: self.entries[i].class_id,
                score: self.entries[i].score,
            })
            .collect())
    }
}

/// Jitter magnitudes for the augmented ground-truth groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterParams {
    /// Center shift amplitude as a fraction of box extent.
    pub center: f64,
    /// Size scale range.
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        JitterParams {
            center: 0.1,
            scale_lo: 0.8,
            scale_hi: 1.25,
        }
    }
}

/// m jittered copies of the pseudo boxes.
#[derive(Debug, Clone)]
pub struct AugmentedGroups {
    pub groups: Vec<Vec<PseudoBox>>,
    pub jitter: JitterParams,
}

impl AugmentedGroups {
    pub fn m(&self) -> usize {
        self.groups.len()
    }
}

/// One pooled match candidate for a pseudo box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub pred_index: usize,
    pub cost: f64,
}

/// Filtering module parameters (σ, m, k and the two IoU gates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub sigma: f64,
    pub m: usize,
    pub k: usize,
    pub tau_support: f64,
    pub tau_dup: f64,
    pub jitter: JitterParams,
    /// Suppress across classes too (off: dedup within class only).
    pub cross_class_dedup: bool,
    /// Use the m−k remaining candidates as extra duplicate evidence.
    pub use_support_evidence: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            sigma: 0.4,
            m: 6,
            k: 4,
            tau_support: 0.5,
            tau_dup: 0.7,
            jitter: JitterParams::default(),
            cross_class_dedup: false,
            use_support_evidence: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.sigma && self.sigma < 1.0) {
            return Err(Error::Config(format!("sigma {} outside (0,1)", self.sigma)));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        if self.k == 0 || self.k > self.m {
            return Err(Error::Config(format!(
                "k must satisfy 1 <= k <= m, got k={} m={}",
                self.k, self.m
            )));
        }
        Ok(())
    }
}

/// Keep teacher predictions whose argmax class is foreground with
/// probability ≥ σ; class is the argmax, score its probability.
pub fn filter_by_confidence(
    teacher_preds: &Predictions,
    sigma: f64,
    iteration: u64,
) -> Result<PseudoLabelSet> {
    if !(0.0 < sigma && sigma < 1.0) {
        return Err(Error::Config(format!("sigma {sigma} outside (0,1)")));
    }
    let background = teacher_preds.class_probs.shape()[1] - 1;
    let mut entries = Vec::new();
    for q in 0..teacher_preds.n() {
        let (class_id, score) = teacher_preds.argmax_class(q);
        if class_id == background || score < sigma {
            continue;
        }
        entries.push(PseudoBox {
            bbox: teacher_preds.boxes[q],
            class_id,
            score,
        });
    }
    Ok(PseudoLabelSet {
        entries,
        transform: AffineTransform::identity(),
        iteration,
    })
}

/// m jittered copies of the pseudo boxes: centers shifted by
/// U(−c, c)·(w, h), sizes scaled per axis by U(lo, hi), clipped. Falls
/// back to the unjittered box when clipping would degenerate it.
pub fn make_augmented_groups(
    p: &PseudoLabelSet,
    m: usize,
    jitter: &JitterParams,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentedGroups> {
    if m == 0 {
        return Err(Error::Config("m must be >= 1".into()));
    }
    let mut groups = Vec::with_capacity(m);
    for _ in 0..m {
        let mut group = Vec::with_capacity(p.entries.len());
        for e in &p.entries {
            let dx = rng.gen_range(-jitter.center..=jitter.center) * e.bbox.w;
            let dy = rng.gen_range(-jitter.center..=jitter.center) * e.bbox.h;
            let sw = rng.gen_range(jitter.scale_lo..=jitter.scale_hi);
            let sh = rng.gen_range(jitter.scale_lo..=jitter.scale_hi);
            let bbox = BBox::new(
                e.bbox.cx + dx,
                e.bbox.cy + dy,
                e.bbox.w * sw,
                e.bbox.h * sh,
            )
            .unwrap_or(e.bbox);
            group.push(PseudoBox {
                bbox,
                class_id: e.class_id,
                score: e.score,
            });
        }
        groups.push(group);
    }
    Ok(AugmentedGroups {
        groups,
        jitter: *jitter,
    })
}

/// Hungarian one-to-one match of each group against the prediction pool,
/// independently per group; candidates pooled per pseudo box, deduplicated
/// by prediction index (keeping the lowest cost) and sorted by cost.
pub fn match_groups(
    student_preds: &Predictions,
    groups: &AugmentedGroups,
    w: &MatchCostWeights,
) -> Result<Vec<Vec<Candidate>>> {
    if student_preds.n() == 0 {
        return Err(Error::Contract("match_groups: empty predictions".into()));
    }
    let n_boxes = groups.groups.first().map_or(0, Vec::len);
    let mut candidates: Vec<Vec<Candidate>> = vec![Vec::new(); n_boxes];
    let n_logits = student_preds.class_probs.shape()[1];
    for group in &groups.groups {
        if group.is_empty() {
            continue;
        }
        let mut cost = Vec::with_capacity(group.len());
        for gt in group {
            let mut row = Vec::with_capacity(student_preds.n());
            for q in 0..student_preds.n() {
                let probs: Vec<f64> = (0..n_logits)
                    .map(|j| student_preds.class_probs.at(q, j))
                    .collect();
                row.push(match_cost(
                    &probs,
                    &student_preds.boxes[q],
                    gt.class_id,
                    &gt.bbox,
                    w,
                )?);
            }
            cost.push(row);
        }
        let assignment = hungarian(&cost)?;
        for (box_i, pred_i) in assignment.pairs {
            let c = cost[box_i][pred_i];
            candidates[box_i].push(Candidate {
                pred_index: pred_i,
                cost: c,
            });
        }
    }
    for list in &mut candidates {
        list.sort_by(|a, b| {
            a.cost
                .partial_cmp(&b.cost)
                .unwrap()
                .then(a.pred_index.cmp(&b.pred_index))
        });
        list.dedup_by_key(|c| c.pred_index);
        list.sort_by(|a, b| {
            a.cost
                .partial_cmp(&b.cost)
                .unwrap()
                .then(a.pred_index.cmp(&b.pred_index))
        });
    }
    Ok(candidates)
}

/// Consensus selection and duplicate suppression. Per pseudo box the k
/// lowest-cost candidates are its top-k and the rest form the support
/// pool. A box is retained only if the mean IoU of its top-k candidate
/// boxes with the pseudo box reaches τ_support; retained boxes are then
/// deduplicated greedily by descending teacher score, treating a support
/// box that bridges two retained boxes at IoU > τ_dup as duplicate
/// evidence against the lower-scoring one.
pub fn select_reliable(
    p: &PseudoLabelSet,
    candidates: &[Vec<Candidate>],
    preds: &Predictions,
    cfg: &FilterConfig,
) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    if candidates.len() != p.entries.len() {
        return Err(Error::LengthMismatch {
            context: "select_reliable",
            left: p.entries.len(),
            right: candidates.len(),
        });
    }

    let mut retained: Vec<usize> = Vec::new();
    let mut support_boxes: Vec<BBox> = Vec::new();
    for (i, entry) in p.entries.iter().enumerate() {
        let list = &candidates[i];
        if list.is_empty() {
            continue;
        }
        let topk = &list[..list.len().min(cfg.k)];
        for c in list.iter().skip(cfg.k) {
            support_boxes.push(preds.boxes[c.pred_index]);
        }
        let mean_iou: f64 = topk
            .iter()
            .map(|c| iou(&preds.boxes[c.pred_index], &entry.bbox))
            .sum::<f64>()
            / topk.len() as f64;
        if mean_iou >= cfg.tau_support {
            retained.push(i);
        }
    }

    // Greedy dedup by descending teacher score, ties to the lower index.
    retained.sort_by(|&a, &b| {
        p.entries[b]
            .score
            .partial_cmp(&p.entries[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut accepted: Vec<usize> = Vec::new();
    for &i in &retained {
        let bi = &p.entries[i];
        let duplicate = accepted.iter().any(|&j| {
            let bj = &p.entries[j];
            if !cfg.cross_class_dedup && bi.class_id != bj.class_id {
                return false;
            }
            if iou(&bi.bbox, &bj.bbox) > cfg.tau_dup {
                return true;
            }
            cfg.use_support_evidence
                && support_boxes
                    .iter()
                    .any(|s| iou(s, &bi.bbox) > cfg.tau_dup && iou(s, &bj.bbox) > cfg.tau_dup)
        });
        if !duplicate {
            accepted.push(i);
        }
    }
    accepted.sort_unstable();

    Ok(PseudoLabelSet {
        entries: accepted.iter().map(|&i| p.entries[i].clone()).collect(),
        transform: p.transform,
        iteration: p.iteration,
    })
}
