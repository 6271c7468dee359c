//! Miniature DETR-style detector: grid-patch encoder with fixed sinusoidal
//! positions, learned object queries, a masked-self-attention decoder with
//! cross-attention to image tokens, class/box heads, and RoI-aligned
//! per-box feature extraction. Refined query groups enter the decoder next
//! to the original queries behind a group mask that blocks attention in
//! both directions, so original-query outputs cannot depend on refined
//! inputs.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::{softmax, NodeId, Tensor};
use crate::params::{ParamSet, Session};

/// Architecture of the toy detector; every size is config-driven.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub image_c: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_decoder_layers: usize,
    pub n_queries: usize,
    /// Foreground classes; the class head adds one background slot.
    pub n_classes: usize,
    pub ffn_dim: usize,
    /// Side of the RoI sampling grid (s×s bilinear taps per box).
    pub roi_samples: usize,
    /// Channel width after reduction in the refinement path.
    pub reduced_channels: usize,
    /// Most pseudo boxes carried into the refined query group.
    pub refined_cap: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_h: 64,
            image_w: 64,
            image_c: 3,
            patch_size: 8,
            d_model: 32,
            n_heads: 4,
            n_decoder_layers: 2,
            n_queries: 30,
            n_classes: 6,
            ffn_dim: 64,
            roi_samples: 2,
            reduced_channels: 16,
            refined_cap: 8,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}×{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes == 0 || self.n_queries == 0 || self.roi_samples == 0 {
            return Err(Error::Config("zero-sized detector dimension".into()));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_size
    }

    /// Token count produced by the encoder (W2).
    pub fn n_tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_c
    }

    /// Class head width: foreground classes plus background.
    pub fn n_logits(&self) -> usize {
        self.n_classes + 1
    }

    pub fn background_class(&self) -> usize {
        self.n_classes
    }

    /// Content hash of the config, stored in checkpoints and manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Attention-blocking mask over (refined ∪ original) query indices:
/// `true` = blocked. Blocks both directions between the groups; attention
/// within each group stays open.
#[derive(Debug, Clone)]
pub struct QueryGroupMask {
    pub n_refined: usize,
    pub n_original: usize,
    blocked: Vec<bool>,
}

impl QueryGroupMask {
    pub fn new(n_refined: usize, n_original: usize) -> Self {
        let n = n_refined + n_original;
        let mut blocked = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                if (i < n_refined) != (j < n_refined) {
                    blocked[i * n + j] = true;
                }
            }
        }
        QueryGroupMask {
            n_refined,
            n_original,
            blocked,
        }
    }

    pub fn n(&self) -> usize {
        self.n_refined + self.n_original
    }

    pub fn blocked(&self) -> &[bool] {
        &self.blocked
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.n() + j]
    }
}

/// Provenance of one decoder query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryGroup {
    Original,
    Refined,
}

/// Per-image set of query outputs: class distributions (including the
/// background slot), boxes, and group provenance.
#[derive(Debug, Clone)]
pub struct Predictions {
    /// [n_queries × (n_classes + 1)], each row sums to 1.
    pub class_probs: Tensor,
    pub boxes: Vec<BBox>,
    pub groups: Vec<QueryGroup>,
}

impl Predictions {
    pub fn n(&self) -> usize {
        self.boxes.len()
    }

    /// Best foreground class and its probability for query `q`.
    pub fn foreground_best(&self, q: usize) -> (usize, f64) {
        let c = self.class_probs.shape()[1] - 1;
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 0..c {
            let p = self.class_probs.at(q, j);
            if p > best.1 {
                best = (j, p);
            }
        }
        best
    }

    /// Argmax over all classes including background.
    pub fn argmax_class(&self, q: usize) -> (usize, f64) {
        let c = self.class_probs.shape()[1];
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 0..c {
            let p = self.class_probs.at(q, j);
            if p > best.1 {
                best = (j, p);
            }
        }
        best
    }

    /// Queries of one group, as indices.
    pub fn group_indices(&self, g: QueryGroup) -> Vec<usize> {
        (0..self.n()).filter(|&q| self.groups[q] == g).collect()
    }
}

/// One detector network: config plus its parameter set.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamSet,
}

impl Detector {
    /// Seeded parameter initialization; weights N(0, 1/√fan_in), biases 0,
    /// layer-norm gain 1.
    pub fn init(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let d = config.d_model;
        let r = config.reduced_channels;

        let weight = |set: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
            let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            set.insert(name, Tensor::new(vec![rows, cols], data).unwrap());
        };
        let zeros = |set: &mut ParamSet, name: &str, n: usize| {
            set.insert(name, Tensor::zeros(vec![n]));
        };
        let ones = |set: &mut ParamSet, name: &str, n: usize| {
            set.insert(name, Tensor::new(vec![n], vec![1.0; n]).unwrap());
        };

        weight(&mut set, "patch_embed.w", config.patch_dim(), d, &mut rng);
        zeros(&mut set, "patch_embed.b", d);
        weight(&mut set, "queries", config.n_queries, d, &mut rng);
        for l in 0..config.n_decoder_layers {
            for attn in ["self", "cross"] {
                for proj in ["q", "k", "v", "o"] {
                    weight(&mut set, &format!("layer{l}.{attn}.w{proj}"), d, d, &mut rng);
                    zeros(&mut set, &format!("layer{l}.{attn}.b{proj}"), d);
                }
            }
            for ln in ["ln1", "ln2", "ln3"] {
                ones(&mut set, &format!("layer{l}.{ln}.g"), d);
                zeros(&mut set, &format!("layer{l}.{ln}.b"), d);
            }
            weight(&mut set, &format!("layer{l}.ffn.w1"), d, config.ffn_dim, &mut rng);
            zeros(&mut set, &format!("layer{l}.ffn.b1"), config.ffn_dim);
            weight(&mut set, &format!("layer{l}.ffn.w2"), config.ffn_dim, d, &mut rng);
            zeros(&mut set, &format!("layer{l}.ffn.b2"), d);
        }
        ones(&mut set, "final_ln.g", d);
        zeros(&mut set, "final_ln.b", d);
        weight(&mut set, "class_head.w", d, config.n_logits(), &mut rng);
        zeros(&mut set, "class_head.b", config.n_logits());
        weight(&mut set, "box_head.w1", d, d, &mut rng);
        zeros(&mut set, "box_head.b1", d);
        weight(&mut set, "box_head.w2", d, 4, &mut rng);
        zeros(&mut set, "box_head.b2", 4);
        let roi_in = config.roi_samples * config.roi_samples * d;
        weight(&mut set, "roi_proj.w", roi_in, d, &mut rng);
        zeros(&mut set, "roi_proj.b", d);
        weight(&mut set, "refine.reduce.w", d, r, &mut rng);
        zeros(&mut set, "refine.reduce.b", r);
        for proj in ["q", "k", "v"] {
            weight(&mut set, &format!("refine.attn.w{proj}.w"), r, r, &mut rng);
            zeros(&mut set, &format!("refine.attn.w{proj}.b"), r);
        }
        weight(&mut set, "refine.proj.w", r, d, &mut rng);
        zeros(&mut set, "refine.proj.b", d);

        Ok(Detector { config, params: set })
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(&self.params)
    }
}

/// Fixed 2-D sinusoidal positional encoding, half the channels for y and
/// half for x, interleaved sin/cos.
pub fn positional_encoding(cfg: &DetectorConfig) -> Tensor {
    let (gh, gw, d) = (cfg.grid_h(), cfg.grid_w(), cfg.d_model);
    let half = d / 2;
    let mut data = vec![0.0; gh * gw * d];
    for i in 0..gh {
        for j in 0..gw {
            let row = i * gw + j;
            for k in 0..half {
                let freq = 10000f64.powf(-2.0 * (k / 2) as f64 / half as f64);
                let (vy, vx) = (i as f64 * freq, j as f64 * freq);
                data[row * d + k] = if k % 2 == 0 { vy.sin() } else { vy.cos() };
                data[row * d + half + k] = if k % 2 == 0 { vx.sin() } else { vx.cos() };
            }
        }
    }
    Tensor::new(vec![gh * gw, d], data).expect("sized buffer")
}

/// Patch rows of an [H × W × C] image: one flattened patch per token.
pub fn image_patches(cfg: &DetectorConfig, image: &Tensor) -> Result<Tensor> {
    if image.shape() != [cfg.image_h, cfg.image_w, cfg.image_c] {
        return Err(Error::Shape {
            context: "image_patches",
            lhs: image.shape().to_vec(),
            rhs: vec![cfg.image_h, cfg.image_w, cfg.image_c],
        });
    }
    let (p, c, w) = (cfg.patch_size, cfg.image_c, cfg.image_w);
    let mut rows = Vec::with_capacity(cfg.n_tokens() * cfg.patch_dim());
    for gi in 0..cfg.grid_h() {
        for gj in 0..cfg.grid_w() {
            for pi in 0..p {
                for pj in 0..p {
                    let (y, x) = (gi * p + pi, gj * p + pj);
                    let base = (y * w + x) * c;
                    rows.extend_from_slice(&image.data()[base..base + c]);
                }
            }
        }
    }
    Tensor::new(vec![cfg.n_tokens(), cfg.patch_dim()], rows)
}

/// Patch embedding without the position term (used by tests and kept
/// separate so the position contract is directly checkable).
pub fn embed_patches(s: &mut Session, cfg: &DetectorConfig, image: &Tensor) -> Result<NodeId> {
    let patches = image_patches(cfg, image)?;
    let pid = s
        .graph
        .constant(patches.shape().to_vec(), patches.data().to_vec())?;
    s.linear(pid, "patch_embed")
}

/// Image → tokens [W2 × d_model]: patch embedding plus fixed sinusoidal
/// positional encoding.
pub fn encode(s: &mut Session, cfg: &DetectorConfig, image: &Tensor) -> Result<NodeId> {
    let emb = embed_patches(s, cfg, image)?;
    let pos = positional_encoding(cfg);
    let pos_id = s.graph.constant(pos.shape().to_vec(), pos.data().to_vec())?;
    s.graph.add(emb, pos_id)
}

/// RoI features of boxes over the token grid: bilinear s×s pooling
/// followed by one learned linear map to d_model per box token.
pub fn roi_features(
    s: &mut Session,
    cfg: &DetectorConfig,
    tokens: NodeId,
    boxes: &[BBox],
) -> Result<NodeId> {
    let raw = s.graph.roi_align(
        tokens,
        cfg.grid_h(),
        cfg.grid_w(),
        cfg.roi_samples,
        boxes.iter().map(BBox::cxcywh).collect(),
    )?;
    s.linear(raw, "roi_proj")
}

/// Head outputs of one decoder layer.
pub struct LayerOut {
    /// Class logits for every query, [n_total × (C+1)].
    pub class_logits: NodeId,
    /// Sigmoid box outputs (cx, cy, w, h), [n_total × 4].
    pub boxes_raw: NodeId,
}

/// Decoder outputs with group structure preserved. The prediction heads
/// run on every decoder layer; the last entry of `aux` is the final
/// layer's output, mirrored in `class_logits`/`boxes_raw`.
pub struct DecodeOut {
    /// Final decoded features, [n_total × d_model].
    pub features: NodeId,
    /// Class logits for every query, [n_total × (C+1)].
    pub class_logits: NodeId,
    /// Sigmoid box outputs (cx, cy, w, h), [n_total × 4].
    pub boxes_raw: NodeId,
    /// Per-layer head outputs in layer order (last = final).
    pub aux: Vec<LayerOut>,
    pub n_refined: usize,
    pub n_total: usize,
}

impl DecodeOut {
    /// Rows of the refined group (first `n_refined`).
    pub fn refined_rows(&self) -> std::ops::Range<usize> {
        0..self.n_refined
    }

    pub fn original_rows(&self) -> std::ops::Range<usize> {
        self.n_refined..self.n_total
    }
}

/// Multi-head attention; `blocked`, when given, is a [nq × nk] mask applied
/// identically per head with exact exclusion semantics.
fn attention(
    s: &mut Session,
    prefix: &str,
    x_q: NodeId,
    x_kv: NodeId,
    n_heads: usize,
    blocked: Option<&[bool]>,
) -> Result<NodeId> {
    let d = s.graph.shape(x_q)[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = project(s, prefix, "q", x_q)?;
    let k = project(s, prefix, "k", x_kv)?;
    let v = project(s, prefix, "v", x_kv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = s.graph.slice_cols(q, h * dh, dh)?;
        let kh = s.graph.slice_cols(k, h * dh, dh)?;
        let vh = s.graph.slice_cols(v, h * dh, dh)?;
        let kt = s.graph.transpose(kh)?;
        let scores = s.graph.matmul(qh, kt)?;
        let scaled = s.graph.scale(scores, scale);
        let weights = match blocked {
            Some(mask) => s.graph.masked_softmax_rows(scaled, mask.to_vec())?,
            None => s.graph.softmax_rows(scaled)?,
        };
        heads.push(s.graph.matmul(weights, vh)?);
    }
    let merged = s.graph.concat_cols(&heads)?;
    project(s, prefix, "o", merged)
}

fn project(s: &mut Session, prefix: &str, which: &str, x: NodeId) -> Result<NodeId> {
    let w = s.param(&format!("{prefix}.w{which}"))?;
    let b = s.param(&format!("{prefix}.b{which}"))?;
    let y = s.graph.matmul(x, w)?;
    s.graph.add_bias(y, b)
}

fn layer_norm(s: &mut Session, prefix: &str, x: NodeId) -> Result<NodeId> {
    let g = s.param(&format!("{prefix}.g"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    s.graph.layer_norm_rows(x, g, b, 1e-5)
}

/// Run the decoder over `[refined ; original]` queries with the group mask.
/// `refined`, when present, must already be projected to d_model. Original
/// queries are the learned embeddings.
pub fn decode(
    s: &mut Session,
    cfg: &DetectorConfig,
    refined: Option<NodeId>,
    tokens: NodeId,
    mask: &QueryGroupMask,
) -> Result<DecodeOut> {
    let queries = s.param("queries")?;
    let (x0, n_refined) = match refined {
        Some(r) => {
            let nr = s.graph.shape(r)[0];
            if s.graph.shape(r)[1] != cfg.d_model {
                return Err(Error::Shape {
                    context: "decode: refined queries",
                    lhs: s.graph.shape(r).to_vec(),
                    rhs: vec![nr, cfg.d_model],
                });
            }
            (s.graph.concat_rows(&[r, queries])?, nr)
        }
        None => (queries, 0),
    };
    let n_total = n_refined + cfg.n_queries;
    if mask.n() != n_total || mask.n_refined != n_refined {
        return Err(Error::Shape {
            context: "decode: mask",
            lhs: vec![mask.n(), mask.n()],
            rhs: vec![n_total, n_total],
        });
    }

    let mut x = x0;
    let mut aux = Vec::with_capacity(cfg.n_decoder_layers);
    let mut features = x0;
    for l in 0..cfg.n_decoder_layers {
        let pre = layer_norm(s, &format!("layer{l}.ln1"), x)?;
        let sa = attention(
            s,
            &format!("layer{l}.self"),
            pre,
            pre,
            cfg.n_heads,
            Some(mask.blocked()),
        )?;
        x = s.graph.add(x, sa)?;

        let pre = layer_norm(s, &format!("layer{l}.ln2"), x)?;
        let ca = attention(s, &format!("layer{l}.cross"), pre, tokens, cfg.n_heads, None)?;
        x = s.graph.add(x, ca)?;

        let pre = layer_norm(s, &format!("layer{l}.ln3"), x)?;
        let h = {
            let w1 = s.param(&format!("layer{l}.ffn.w1"))?;
            let b1 = s.param(&format!("layer{l}.ffn.b1"))?;
            let a = s.graph.matmul(pre, w1)?;
            let a = s.graph.add_bias(a, b1)?;
            let a = s.graph.relu(a);
            let w2 = s.param(&format!("layer{l}.ffn.w2"))?;
            let b2 = s.param(&format!("layer{l}.ffn.b2"))?;
            let o = s.graph.matmul(a, w2)?;
            s.graph.add_bias(o, b2)?
        };
        x = s.graph.add(x, h)?;

        // Shared prediction heads on every layer's normalized output.
        features = layer_norm(s, "final_ln", x)?;
        let class_logits = s.linear(features, "class_head")?;
        let boxes_raw = {
            let w1 = s.param("box_head.w1")?;
            let bb1 = s.param("box_head.b1")?;
            let a = s.graph.matmul(features, w1)?;
            let a = s.graph.add_bias(a, bb1)?;
            let a = s.graph.relu(a);
            let w2 = s.param("box_head.w2")?;
            let bb2 = s.param("box_head.b2")?;
            let o = s.graph.matmul(a, w2)?;
            let o = s.graph.add_bias(o, bb2)?;
            s.graph.sigmoid(o)
        };
        aux.push(LayerOut {
            class_logits,
            boxes_raw,
        });
    }
    let last = aux.last().expect("n_decoder_layers >= 1");
    Ok(DecodeOut {
        features,
        class_logits: last.class_logits,
        boxes_raw: last.boxes_raw,
        aux,
        n_refined,
        n_total,
    })
}

/// Extract value-level predictions from decoder outputs. Raw box extents
/// are floored at 1e-3 so every prediction is a valid box.
pub fn extract_predictions(s: &Session, out: &DecodeOut) -> Result<Predictions> {
    let logits = s.graph.tensor(out.class_logits);
    let class_probs = softmax(&logits, 1)?;
    let raw = s.graph.value(out.boxes_raw);
    let mut boxes = Vec::with_capacity(out.n_total);
    for q in 0..out.n_total {
        let (cx, cy, w, h) = (raw[q * 4], raw[q * 4 + 1], raw[q * 4 + 2], raw[q * 4 + 3]);
        boxes.push(BBox::new(
            cx.clamp(0.0, 1.0),
            cy.clamp(0.0, 1.0),
            w.max(1e-3),
            h.max(1e-3),
        )?);
    }
    let groups = (0..out.n_total)
        .map(|q| {
            if q < out.n_refined {
                QueryGroup::Refined
            } else {
                QueryGroup::Original
            }
        })
        .collect();
    Ok(Predictions {
        class_probs,
        boxes,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_rel_err};
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            image_h: 16,
            image_w: 16,
            image_c: 3,
            patch_size: 8,
            d_model: 8,
            n_heads: 2,
            n_decoder_layers: 2,
            n_queries: 5,
            n_classes: 3,
            ffn_dim: 16,
            roi_samples: 2,
            reduced_channels: 4,
            refined_cap: 4,
        }
    }

    fn rand_image(cfg: &DetectorConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image_h * cfg.image_w * cfg.image_c;
        Tensor::new(
            vec![cfg.image_h, cfg.image_w, cfg.image_c],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = DetectorConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = DetectorConfig::default();
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_zero_image_zero_embedding_gives_positional_encoding() {
        let cfg = small_cfg();
        let mut det = Detector::init(cfg.clone(), 0).unwrap();
        for (_, t) in det
            .params
            .iter_mut()
            .filter(|(n, _)| n.starts_with("patch_embed"))
        {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let image = Tensor::zeros(vec![cfg.image_h, cfg.image_w, cfg.image_c]);
        let mut s = det.session();
        let tokens = encode(&mut s, &cfg, &image).unwrap();
        let pos = positional_encoding(&cfg);
        assert_eq!(s.graph.value(tokens), pos.data());
    }

    #[test]
    fn encode_token_count() {
        let cfg = DetectorConfig::default();
        assert_eq!(cfg.n_tokens(), 64);
        let det = Detector::init(cfg.clone(), 0).unwrap();
        let image = Tensor::zeros(vec![64, 64, 3]);
        let mut s = det.session();
        let tokens = encode(&mut s, &cfg, &image).unwrap();
        assert_eq!(s.graph.shape(tokens), &[64, cfg.d_model]);
        let wrong = Tensor::zeros(vec![32, 64, 3]);
        assert!(encode(&mut s, &cfg, &wrong).is_err());
    }

    #[test]
    fn permuting_patches_permutes_token_rows_without_pos() {
        let cfg = small_cfg(); // 2×2 grid of 8-px patches
        let det = Detector::init(cfg.clone(), 3).unwrap();
        let image = rand_image(&cfg, 4);

        // Swap patch (0,0) and (0,1) in image space.
        let mut swapped = image.clone();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let a = (y * 16 + x) * 3 + c;
                    let b = (y * 16 + x + 8) * 3 + c;
                    let tmp = swapped.data()[a];
                    swapped.data_mut()[a] = swapped.data()[b];
                    swapped.data_mut()[b] = tmp;
                }
            }
        }
        let mut s1 = det.session();
        let t1 = embed_patches(&mut s1, &cfg, &image).unwrap();
        let mut s2 = det.session();
        let t2 = embed_patches(&mut s2, &cfg, &swapped).unwrap();
        let d = cfg.d_model;
        let (v1, v2) = (s1.graph.value(t1), s2.graph.value(t2));
        assert_eq!(&v1[0..d], &v2[d..2 * d]);
        assert_eq!(&v1[d..2 * d], &v2[0..d]);
        assert_eq!(&v1[2 * d..], &v2[2 * d..]);
    }

    #[test]
    fn roi_full_grid_single_sample_is_center_sample() {
        let cfg = small_cfg();
        let det = Detector::init(cfg.clone(), 1).unwrap();
        let mut s = det.session();
        // 2×2 grid with distinct channel-0 values.
        let grid = s
            .graph
            .constant(vec![4, cfg.d_model], {
                let mut v = vec![0.0; 4 * cfg.d_model];
                for (i, val) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
                    v[i * cfg.d_model] = *val;
                }
                v
            })
            .unwrap();
        let full = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        let out = s
            .graph
            .roi_align(grid, 2, 2, 1, vec![full.cxcywh()])
            .unwrap();
        // Center of the unit square bilinearly mixes all four cells equally.
        assert!((s.graph.value(out)[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn roi_matches_dense_bilinear_reference() {
        let cfg = small_cfg();
        let det = Detector::init(cfg.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (gh, gw, d) = (4usize, 4usize, 3usize);
        let grid_data: Vec<f64> = (0..gh * gw * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut s = det.session();
        let grid = s.graph.constant(vec![gh * gw, d], grid_data.clone()).unwrap();
        let b = BBox::new(0.45, 0.55, 0.5, 0.3).unwrap();
        let sref = 3usize;
        let out = s
            .graph
            .roi_align(grid, gh, gw, sref, vec![b.cxcywh()])
            .unwrap();
        let got = s.graph.value(out);

        // Independent dense bilinear reference.
        let sample = |x: f64, y: f64, ch: usize| -> f64 {
            let gx = (x * gw as f64 - 0.5).clamp(0.0, (gw - 1) as f64);
            let gy = (y * gh as f64 - 0.5).clamp(0.0, (gh - 1) as f64);
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(gw - 1), (y0 + 1).min(gh - 1));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let v00 = grid_data[(y0 * gw + x0) * d + ch];
            let v01 = grid_data[(y0 * gw + x1) * d + ch];
            let v10 = grid_data[(y1 * gw + x0) * d + ch];
            let v11 = grid_data[(y1 * gw + x1) * d + ch];
            v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
        };
        let [bx0, by0, ..] = b.xyxy();
        let mut k = 0;
        for vi in 0..sref {
            for ui in 0..sref {
                let x = bx0 + (ui as f64 + 0.5) / sref as f64 * b.w;
                let y = by0 + (vi as f64 + 0.5) / sref as f64 * b.h;
                for ch in 0..d {
                    assert!((got[k] - sample(x, y, ch)).abs() < 1e-9);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn decode_original_outputs_invariant_under_refined_perturbation() {
        let cfg = small_cfg();
        let det = Detector::init(cfg.clone(), 5).unwrap();
        let image = rand_image(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        let run = |refined_data: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut s = det.session();
            let tokens = encode(&mut s, &cfg, &image).unwrap();
            let refined = s
                .graph
                .constant(vec![3, cfg.d_model], refined_data.to_vec())
                .unwrap();
            let mask = QueryGroupMask::new(3, cfg.n_queries);
            let out = decode(&mut s, &cfg, Some(refined), tokens, &mask).unwrap();
            let feats = s.graph.value(out.features).to_vec();
            let logits = s.graph.value(out.class_logits).to_vec();
            let orig_rows = out.original_rows();
            let d = cfg.d_model;
            let c = cfg.n_logits();
            (
                feats[orig_rows.start * d..orig_rows.end * d].to_vec(),
                logits[orig_rows.start * c..orig_rows.end * c].to_vec(),
                feats[..out.n_refined * d].to_vec(),
            )
        };

        let base: Vec<f64> = (0..3 * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (orig_a, logits_a, refined_a) = run(&base);
        for _ in 0..10 {
            let perturbed: Vec<f64> =
                (0..3 * cfg.d_model).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (orig_b, logits_b, refined_b) = run(&perturbed);
            assert_eq!(orig_a, orig_b, "original features must be bitwise stable");
            assert_eq!(logits_a, logits_b);
            assert_ne!(refined_a, refined_b, "perturbation must reach refined rows");
        }
    }

    #[test]
    fn decode_without_refined_group_is_plain_pass() {
        let cfg = small_cfg();
        let det = Detector::init(cfg.clone(), 8).unwrap();
        let image = rand_image(&cfg, 9);
        let mut s = det.session();
        let tokens = encode(&mut s, &cfg, &image).unwrap();
        let mask = QueryGroupMask::new(0, cfg.n_queries);
        let out = decode(&mut s, &cfg, None, tokens, &mask).unwrap();
        assert_eq!(out.n_total, cfg.n_queries);
        let preds = extract_predictions(&s, &out).unwrap();
        assert_eq!(preds.n(), cfg.n_queries);
        for q in 0..preds.n() {
            let sum: f64 = (0..cfg.n_logits()).map(|j| preds.class_probs.at(q, j)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert!(preds.groups.iter().all(|g| *g == QueryGroup::Original));
    }

    #[test]
    fn box_head_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let det = Detector::init(cfg.clone(), 10).unwrap();
        let image = rand_image(&cfg, 11);

        let loss_of = |det: &Detector| -> f64 {
            let mut s = det.session();
            let tokens = encode(&mut s, &cfg, &image).unwrap();
            let mask = QueryGroupMask::new(0, cfg.n_queries);
            let out = decode(&mut s, &cfg, None, tokens, &mask).unwrap();
            // weighted sum of sigmoid box outputs
            let n = s.graph.value(out.boxes_raw).len();
            let w: Vec<f64> = (0..n).map(|i| 0.1 + 0.013 * i as f64).collect();
            let wid = s.graph.constant(vec![cfg.n_queries, 4], w).unwrap();
            let prod = s.graph.mul(out.boxes_raw, wid).unwrap();
            let loss = s.graph.sum_all(prod);
            s.graph.scalar(loss)
        };

        // analytic grads for box head weights
        let mut s = det.session();
        let tokens = encode(&mut s, &cfg, &image).unwrap();
        let mask = QueryGroupMask::new(0, cfg.n_queries);
        let out = decode(&mut s, &cfg, None, tokens, &mask).unwrap();
        let n = s.graph.value(out.boxes_raw).len();
        let w: Vec<f64> = (0..n).map(|i| 0.1 + 0.013 * i as f64).collect();
        let wid = s.graph.constant(vec![cfg.n_queries, 4], w).unwrap();
        let prod = s.graph.mul(out.boxes_raw, wid).unwrap();
        let loss = s.graph.sum_all(prod);
        let grads = s.backward(loss).unwrap();

        for pname in ["box_head.w2", "box_head.b2", "box_head.w1"] {
            let analytic = grads.by_name[pname].clone();
            let orig = det.params.get(pname).unwrap().clone();
            let numeric = finite_diff_grad(
                |t| {
                    let mut probe = det.clone();
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

    #[test]
    fn forward_deterministic_under_fixed_seed() {
        let cfg = small_cfg();
        let image = rand_image(&cfg, 12);
        let run = || {
            let det = Detector::init(cfg.clone(), 77).unwrap();
            let mut s = det.session();
            let tokens = encode(&mut s, &cfg, &image).unwrap();
            let mask = QueryGroupMask::new(0, cfg.n_queries);
            let out = decode(&mut s, &cfg, None, tokens, &mask).unwrap();
            s.graph.value(out.class_logits).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mask_shape_and_blocking_structure() {
        let m = QueryGroupMask::new(2, 3);
        assert_eq!(m.n(), 5);
        assert_eq!(m.blocked().len(), 25);
        for i in 0..5 {
            for j in 0..5 {
                let cross = (i < 2) != (j < 2);
                assert_eq!(m.is_blocked(i, j), cross);
            }
        }
    }
}
