//! Query refinement: channel reduction, a single-head attention block over
//! low-resolution tokens, cosine-similarity aggregation of attentional
//! low-res features onto the high-res RoI tokens, and assembly of the
//! refined query groups that cross between teacher and student decoders.
//!
//! Only the weak view is refined; the strong view contributes a plain
//! concatenation. The builders enforce this placement and the attention
//! block counts its invocations per view so tests can assert that no
//! strong-view features ever pass through it.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::detector::QueryGroupMask;
use crate::error::{Error, Result};
use crate::numerics::NodeId;
use crate::params::Session;

static ATTN_CALLS_WEAK: AtomicU64 = AtomicU64::new(0);
static ATTN_CALLS_STRONG: AtomicU64 = AtomicU64::new(0);

/// (weak, strong) invocation counts of [`attention_block`] since the last
/// reset; the strong count must stay zero.
pub fn attention_call_counts() -> (u64, u64) {
    (
        ATTN_CALLS_WEAK.load(Ordering::Relaxed),
        ATTN_CALLS_STRONG.load(Ordering::Relaxed),
    )
}

pub fn reset_attention_call_counts() {
    ATTN_CALLS_WEAK.store(0, Ordering::Relaxed);
    ATTN_CALLS_STRONG.store(0, Ordering::Relaxed);
}

/// Which augmentation view a feature set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewTag {
    /// Teacher side, weak augmentation.
    Weak,
    /// Student side, strong augmentation.
    Strong,
}

/// Where the attention block sits in the refinement path (ablation axis);
/// the default applies it to the low-resolution features only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPlacement {
    None,
    Both,
    HighRes,
    LowRes,
}

/// Refinement behavior knobs, all sweepable from the CLI.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryRefineConfig {
    /// Similarity selection on (refined count 2·W1) or off (W1 + W2).
    pub similarity_enabled: bool,
    /// Temperature of the similarity-weighted aggregation.
    pub similarity_temperature: f64,
    /// τ→0 limit: hard argmax row selection instead of soft aggregation.
    pub similarity_argmax: bool,
    pub attention_placement: AttentionPlacement,
    /// Refining the strong view is rejected by the builders; kept explicit
    /// so a config attempting it fails loudly.
    pub refine_strong_view: bool,
}

impl Default for QueryRefineConfig {
    fn default() -> Self {
        QueryRefineConfig {
            similarity_enabled: true,
            similarity_temperature: 0.1,
            similarity_argmax: false,
            attention_placement: AttentionPlacement::LowRes,
            refine_strong_view: false,
        }
    }
}

/// One view's query features: high-res RoI tokens of the pseudo boxes
/// (W1 × d_model) and low-res backbone tokens (W2 × d_model), W1 ≤ W2.
pub struct QueryFeatures {
    pub high_res: NodeId,
    pub low_res: NodeId,
    pub view: ViewTag,
    pub n_boxes: usize,
}

impl QueryFeatures {
    pub fn new(s: &Session, high_res: NodeId, low_res: NodeId, view: ViewTag) -> Result<Self> {
        let w1 = s.graph.shape(high_res)[0];
        let w2 = s.graph.shape(low_res)[0];
        if w1 > w2 {
            return Err(Error::Contract(format!(
                "query features need W1 <= W2, got {w1} > {w2}"
            )));
        }
        Ok(QueryFeatures {
            high_res,
            low_res,
            view,
            n_boxes: w1,
        })
    }
}

/// A refined query group before projection to decoder width: 16-channel
/// tokens, a validity mask, and for each pseudo box the row of its direct
/// (RoI-derived) token, used to align cross-view consistency pairs.
pub struct RefinedQueries {
    pub tokens: NodeId,
    pub validity: Vec<bool>,
    pub box_token_rows: Vec<usize>,
    pub n_boxes: usize,
}

impl RefinedQueries {
    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity.is_empty()
    }
}

/// Learned linear map to the reduced channel width, resolution preserved.
pub fn reduce_channels(s: &mut Session, x: NodeId) -> Result<NodeId> {
    s.linear(x, "refine.reduce")
}

/// Attention block output: enhanced tokens plus the normalized weights.
pub struct AttentionOut {
    pub enhanced: NodeId,
    pub weights: NodeId,
}

/// Single-head attention over reduced tokens: three learned projections,
/// raw q·kᵀ weights, row softmax, weighted values. Strong-view features
/// are rejected.
pub fn attention_block(s: &mut Session, x: NodeId, view: ViewTag) -> Result<AttentionOut> {
    match view {
        ViewTag::Weak => ATTN_CALLS_WEAK.fetch_add(1, Ordering::Relaxed),
        ViewTag::Strong => {
            ATTN_CALLS_STRONG.fetch_add(1, Ordering::Relaxed);
            return Err(Error::Contract(
                "attention_block applied to strong-view features".into(),
            ));
        }
    };
    let q = s.linear(x, "refine.attn.wq")?;
    let k = s.linear(x, "refine.attn.wk")?;
    let v = s.linear(x, "refine.attn.wv")?;
    let kt = s.graph.transpose(k)?;
    let raw = s.graph.matmul(q, kt)?;
    let weights = s.graph.softmax_rows(raw)?;
    let enhanced = s.graph.matmul(weights, v)?;
    Ok(AttentionOut { enhanced, weights })
}

/// Similarity-weighted aggregation: cosine similarities between each
/// high-res token and every attentional low-res token, softmaxed at
/// temperature τ (or hard argmax), then used to mix the low-res tokens.
pub fn cross_similarity(
    s: &mut Session,
    p: NodeId,
    q: NodeId,
    temperature: f64,
    argmax: bool,
) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "similarity temperature must be positive, got {temperature}"
        )));
    }
    let sim = s.graph.cosine_rows(p, q)?;
    if argmax {
        let (m, n) = (s.graph.shape(sim)[0], s.graph.shape(sim)[1]);
        let values = s.graph.value(sim);
        let picks: Vec<usize> = (0..m)
            .map(|i| {
                let row = &values[i * n..(i + 1) * n];
                let mut best = 0;
                for j in 1..n {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        return s.graph.gather_rows(q, picks);
    }
    let scaled = s.graph.scale(sim, 1.0 / temperature);
    let attn = s.graph.softmax_rows(scaled)?;
    s.graph.matmul(attn, q)
}

/// Weak-view refinement (Fig. 3 path): reduce both feature sets, run the
/// attention block per the configured placement, aggregate by similarity,
/// and concatenate with the reduced high-res tokens. Token count is 2·W1
/// with similarity on, W1 + W2 with it off. Returns `None` when there are
/// no pseudo boxes.
pub fn build_teacher_refined(
    s: &mut Session,
    feats: &QueryFeatures,
    cfg: &QueryRefineConfig,
) -> Result<Option<RefinedQueries>> {
    if feats.view != ViewTag::Weak {
        return Err(Error::Contract(
            "build_teacher_refined takes weak-view features".into(),
        ));
    }
    if feats.n_boxes == 0 {
        return Ok(None);
    }
    let w1 = feats.n_boxes;
    let p = reduce_channels(s, feats.high_res)?;
    let f2 = reduce_channels(s, feats.low_res)?;
    let (p_used, q_used) = match cfg.attention_placement {
        AttentionPlacement::None => (p, f2),
        AttentionPlacement::LowRes => (p, attention_block(s, f2, feats.view)?.enhanced),
        AttentionPlacement::HighRes => (attention_block(s, p, feats.view)?.enhanced, f2),
        AttentionPlacement::Both => (
            attention_block(s, p, feats.view)?.enhanced,
            attention_block(s, f2, feats.view)?.enhanced,
        ),
    };
    let (tokens, box_token_rows) = if cfg.similarity_enabled {
        let f_cs = cross_similarity(
            s,
            p_used,
            q_used,
            cfg.similarity_temperature,
            cfg.similarity_argmax,
        )?;
        let tokens = s.graph.concat_rows(&[f_cs, p])?;
        (tokens, (w1..2 * w1).collect())
    } else {
        let tokens = s.graph.concat_rows(&[p, q_used])?;
        (tokens, (0..w1).collect())
    };
    let n = s.graph.shape(tokens)[0];
    Ok(Some(RefinedQueries {
        tokens,
        validity: vec![true; n],
        box_token_rows,
        n_boxes: w1,
    }))
}

/// Strong-view path: plain token-axis concatenation of the channel-reduced
/// RoI tokens and backbone tokens — no attention, no similarity. A config
/// that asks for strong-view refinement is rejected.
pub fn build_student_concat(
    s: &mut Session,
    feats: &QueryFeatures,
    cfg: &QueryRefineConfig,
) -> Result<Option<RefinedQueries>> {
    if feats.view != ViewTag::Strong {
        return Err(Error::Contract(
            "build_student_concat takes strong-view features".into(),
        ));
    }
    if cfg.refine_strong_view {
        return Err(Error::Config(
            "refinement on the strong view is disabled (teacher-side placement only)".into(),
        ));
    }
    if feats.n_boxes == 0 {
        return Ok(None);
    }
    let w1 = feats.n_boxes;
    let f1 = reduce_channels(s, feats.high_res)?;
    let f2 = reduce_channels(s, feats.low_res)?;
    let tokens = s.graph.concat_rows(&[f1, f2])?;
    let n = s.graph.shape(tokens)[0];
    Ok(Some(RefinedQueries {
        tokens,
        validity: vec![true; n],
        box_token_rows: (0..w1).collect(),
        n_boxes: w1,
    }))
}

/// Project a refined group from reduced width to decoder width.
pub fn project_to_decoder(s: &mut Session, rq: &RefinedQueries) -> Result<NodeId> {
    s.linear(rq.tokens, "refine.proj")
}

/// Cross-view routing of Eqs. 7–8: the student decoder receives
/// `[r_t, q_s]`, the teacher decoder `[r_s, q_t]`, each behind a group
/// mask blocking refined↔original attention both ways.
pub struct CrossViewRouting {
    pub student_mask: QueryGroupMask,
    pub teacher_mask: QueryGroupMask,
}

pub fn route_cross_view(
    r_t: Option<&RefinedQueries>,
    r_s: Option<&RefinedQueries>,
    n_queries: usize,
) -> CrossViewRouting {
    CrossViewRouting {
        student_mask: QueryGroupMask::new(r_t.map_or(0, RefinedQueries::len), n_queries),
        teacher_mask: QueryGroupMask::new(r_s.map_or(0, RefinedQueries::len), n_queries),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{Detector, DetectorConfig};
    use crate::numerics::{finite_diff_grad, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DetectorConfig {
        DetectorConfig {
            d_model: 8,
            reduced_channels: 4,
            ..DetectorConfig::default()
        }
    }

    fn rand_node(
        s: &mut Session,
        rng: &mut ChaCha8Rng,
        rows: usize,
        cols: usize,
    ) -> NodeId {
        s.graph
            .constant(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
    }

    #[test]
    fn reduce_channels_shape_and_zero_input() {
        let det = Detector::init(cfg(), 0).unwrap();
        let mut s = det.session();
        let x = s.graph.constant(vec![5, 8], vec![0.0; 40]).unwrap();
        let y = reduce_channels(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[5, 4]);
        let bias = det.params.get("refine.reduce.b").unwrap().data();
        for row in 0..5 {
            assert_eq!(&s.graph.value(y)[row * 4..(row + 1) * 4], bias);
        }
    }

    #[test]
    fn attention_single_token_weight_one() {
        let det = Detector::init(cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = det.session();
        let x = rand_node(&mut s, &mut rng, 1, 4);
        let out = attention_block(&mut s, x, ViewTag::Weak).unwrap();
        assert_eq!(s.graph.value(out.weights), &[1.0]);
        // Q equals the value projection of the single token.
        let mut s2 = det.session();
        let x2 = s2
            .graph
            .constant(vec![1, 4], s.graph.value(x).to_vec())
            .unwrap();
        let v = s2.linear(x2, "refine.attn.wv").unwrap();
        assert_eq!(s.graph.value(out.enhanced), s2.graph.value(v));
    }

    #[test]
    fn attention_rows_sum_to_one_and_strong_view_rejected() {
        let det = Detector::init(cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = det.session();
        let x = rand_node(&mut s, &mut rng, 7, 4);
        let out = attention_block(&mut s, x, ViewTag::Weak).unwrap();
        let w = s.graph.value(out.weights);
        for i in 0..7 {
            let sum: f64 = w[i * 7..(i + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        reset_attention_call_counts();
        assert!(attention_block(&mut s, x, ViewTag::Strong).is_err());
        assert_eq!(attention_call_counts().1, 1);
    }

    #[test]
    fn attention_identical_rows_give_identical_outputs() {
        let det = Detector::init(cfg(), 5).unwrap();
        let mut s = det.session();
        let row = vec![0.3, -0.7, 0.2, 0.9];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let x = s.graph.constant(vec![4, 4], data).unwrap();
        let out = attention_block(&mut s, x, ViewTag::Weak).unwrap();
        let v = s.graph.value(out.enhanced);
        for i in 1..4 {
            assert_eq!(&v[..4], &v[i * 4..(i + 1) * 4]);
        }
    }

    #[test]
    fn cross_similarity_single_low_res_token() {
        let det = Detector::init(cfg(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = det.session();
        let p = rand_node(&mut s, &mut rng, 3, 4);
        let q = rand_node(&mut s, &mut rng, 1, 4);
        let out = cross_similarity(&mut s, p, q, 0.1, false).unwrap();
        let qv = s.graph.value(q).to_vec();
        for i in 0..3 {
            for k in 0..4 {
                assert!((s.graph.value(out)[i * 4 + k] - qv[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_similarity_argmax_picks_matching_row() {
        let det = Detector::init(cfg(), 8).unwrap();
        let mut s = det.session();
        let target = vec![0.5, -0.25, 0.8, 0.1];
        let p = s.graph.constant(vec![1, 4], target.clone()).unwrap();
        let mut qdata = vec![
            1.0, 1.0, -1.0, 0.3, //
        ];
        qdata.extend_from_slice(&target); // exact match in row 1
        qdata.extend_from_slice(&[-0.5, 0.25, -0.8, -0.1]);
        let q = s.graph.constant(vec![3, 4], qdata).unwrap();
        let out = cross_similarity(&mut s, p, q, 0.1, true).unwrap();
        assert_eq!(s.graph.value(out), &target[..]);
        assert!(cross_similarity(&mut s, p, q, 0.0, false).is_err());
    }

    #[test]
    fn cosine_entries_bounded_random() {
        let det = Detector::init(cfg(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let mut s = det.session();
            let p = rand_node(&mut s, &mut rng, 2, 4);
            let q = rand_node(&mut s, &mut rng, 3, 4);
            let sim = s.graph.cosine_rows(p, q).unwrap();
            for v in s.graph.value(sim) {
                assert!(*v >= -1.0 - 1e-12 && *v <= 1.0 + 1e-12);
            }
        }
    }

    fn feats(
        s: &mut Session,
        rng: &mut ChaCha8Rng,
        w1: usize,
        w2: usize,
        view: ViewTag,
    ) -> QueryFeatures {
        let hi = rand_node(s, rng, w1, 8);
        let lo = rand_node(s, rng, w2, 8);
        QueryFeatures::new(s, hi, lo, view).unwrap()
    }

    #[test]
    fn teacher_refined_token_counts() {
        let det = Detector::init(cfg(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let qr = QueryRefineConfig::default();

        let mut s = det.session();
        let f = feats(&mut s, &mut rng, 3, 9, ViewTag::Weak);
        let rq = build_teacher_refined(&mut s, &f, &qr).unwrap().unwrap();
        assert_eq!(rq.len(), 6); // 2·W1
        assert_eq!(rq.box_token_rows, vec![3, 4, 5]);

        let mut s = det.session();
        let f = feats(&mut s, &mut rng, 3, 9, ViewTag::Weak);
        let no_sim = QueryRefineConfig {
            similarity_enabled: false,
            ..QueryRefineConfig::default()
        };
        let rq = build_teacher_refined(&mut s, &f, &no_sim).unwrap().unwrap();
        assert_eq!(rq.len(), 12); // W1 + W2
        assert_eq!(rq.box_token_rows, vec![0, 1, 2]);
    }

    #[test]
    fn teacher_refined_empty_and_wrong_view() {
        let det = Detector::init(cfg(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let qr = QueryRefineConfig::default();
        let mut s = det.session();
        let f = feats(&mut s, &mut rng, 0, 5, ViewTag::Weak);
        assert!(build_teacher_refined(&mut s, &f, &qr).unwrap().is_none());
        let f = feats(&mut s, &mut rng, 2, 5, ViewTag::Strong);
        assert!(build_teacher_refined(&mut s, &f, &qr).is_err());
    }

    #[test]
    fn student_concat_counts_and_first_block() {
        let det = Detector::init(cfg(), 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let qr = QueryRefineConfig::default();
        let mut s = det.session();
        let f = feats(&mut s, &mut rng, 2, 7, ViewTag::Strong);
        let rq = build_student_concat(&mut s, &f, &qr).unwrap().unwrap();
        assert_eq!(rq.len(), 9); // W1 + W2
        // First W1 rows equal the reduced high-res path alone.
        let mut s2 = det.session();
        let hi = s2
            .graph
            .constant(vec![2, 8], s.graph.value(f.high_res).to_vec())
            .unwrap();
        let reduced = reduce_channels(&mut s2, hi).unwrap();
        assert_eq!(
            &s.graph.value(rq.tokens)[..2 * 4],
            s2.graph.value(reduced)
        );
        // Wrong view and strong-view refinement both rejected.
        let fw = feats(&mut s, &mut rng, 2, 7, ViewTag::Weak);
        assert!(build_student_concat(&mut s, &fw, &qr).is_err());
        let bad = QueryRefineConfig {
            refine_strong_view: true,
            ..QueryRefineConfig::default()
        };
        assert!(build_student_concat(&mut s, &f, &bad).is_err());
    }

    #[test]
    fn routing_masks_shapes() {
        let det = Detector::init(cfg(), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let qr = QueryRefineConfig::default();
        let mut s = det.session();
        let ft = feats(&mut s, &mut rng, 2, 6, ViewTag::Weak);
        let r_t = build_teacher_refined(&mut s, &ft, &qr).unwrap();
        let fs = feats(&mut s, &mut rng, 2, 6, ViewTag::Strong);
        let r_s = build_student_concat(&mut s, &fs, &qr).unwrap();
        let routing = route_cross_view(r_t.as_ref(), r_s.as_ref(), 10);
        assert_eq!(routing.student_mask.n(), 4 + 10);
        assert_eq!(routing.student_mask.blocked().len(), 14 * 14);
        assert_eq!(routing.teacher_mask.n(), 8 + 10);

        let empty = route_cross_view(None, None, 10);
        assert_eq!(empty.student_mask.n(), 10);
        assert_eq!(empty.teacher_mask.n_refined, 0);
    }

    #[test]
    fn refinement_pipeline_gradient_matches_finite_differences() {
        let base = Detector::init(cfg(), 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let hi_data: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lo_data: Vec<f64> = (0..7 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qr = QueryRefineConfig::default();

        let loss_of = |det: &Detector| -> f64 {
            let mut s = det.session();
            let hi = s.graph.constant(vec![3, 8], hi_data.clone()).unwrap();
            let lo = s.graph.constant(vec![7, 8], lo_data.clone()).unwrap();
            let f = QueryFeatures::new(&s, hi, lo, ViewTag::Weak).unwrap();
            let rq = build_teacher_refined(&mut s, &f, &qr).unwrap().unwrap();
            let proj = project_to_decoder(&mut s, &rq).unwrap();
            let n = s.graph.value(proj).len();
            let w: Vec<f64> = (0..n).map(|i| 0.05 + 0.011 * i as f64).collect();
            let shape = s.graph.shape(proj).to_vec();
            let wid = s.graph.constant(shape, w).unwrap();
            let prod = s.graph.mul(proj, wid).unwrap();
            let l = s.graph.sum_all(prod);
            s.graph.scalar(l)
        };

        let mut s = base.session();
        let hi = s.graph.constant(vec![3, 8], hi_data.clone()).unwrap();
        let lo = s.graph.constant(vec![7, 8], lo_data.clone()).unwrap();
        let f = QueryFeatures::new(&s, hi, lo, ViewTag::Weak).unwrap();
        let rq = build_teacher_refined(&mut s, &f, &qr).unwrap().unwrap();
        let proj = project_to_decoder(&mut s, &rq).unwrap();
        let n = s.graph.value(proj).len();
        let w: Vec<f64> = (0..n).map(|i| 0.05 + 0.011 * i as f64).collect();
        let shape = s.graph.shape(proj).to_vec();
        let wid = s.graph.constant(shape, w).unwrap();
        let prod = s.graph.mul(proj, wid).unwrap();
        let loss = s.graph.sum_all(prod);
        let grads = s.backward(loss).unwrap();

        for pname in [
            "refine.reduce.w",
            "refine.attn.wq.w",
            "refine.attn.wk.w",
            "refine.attn.wv.w",
            "refine.proj.w",
        ] {
            let analytic = grads.by_name[pname].clone();
            let orig = base.params.get(pname).unwrap().clone();
            let numeric = finite_diff_grad(
                |t| {
                    let mut probe = base.clone();
                    *probe.params.get_mut(pname).unwrap() = t.clone().requires_grad(true);
                    loss_of(&probe)
                },
                &orig,
                1e-6,
            );
            let err = max_rel_err(&analytic, numeric.data());
            assert!(err < 1e-4, "{pname}: rel err {err}");
        }
    }
}
