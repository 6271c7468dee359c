//! Deterministic synthetic detection data: colored geometric shapes on a
//! noisy background with explicit small/medium/large stratification and
//! controlled occlusion, plus labeled/unlabeled split management.
//!
//! Dataset directory layout: `header.json` (spec, seed, size thresholds,
//! format version), `annotations.jsonl` (one record per image), and
//! `images.bin` (binary header then row-major f64 pixels).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::numerics::Tensor;

const FORMAT_VERSION: u32 = 1;
const IMAGES_MAGIC: u64 = 0x5353_444c_4142_0001; // "SSDLAB" tag

/// Generator parameters; every image is a pure function of (spec, id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_h: usize,
    pub image_w: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Shape kinds (square/circle/triangle) × two palettes.
    pub n_classes: usize,
    /// Fraction of annotations drawn from the small-area bucket.
    pub small_quota: f64,
    /// Probability that a shape is placed overlapping an earlier one.
    pub occlusion_prob: f64,
    /// Amplitude of uniform background noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_h: 64,
            image_w: 64,
            shapes_min: 1,
            shapes_max: 5,
            n_classes: 6,
            small_quota: 0.3,
            occlusion_prob: 0.25,
            noise_level: 0.15,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes_min == 0 || self.shapes_max < self.shapes_min {
            return Err(Error::Config("bad shapes-per-image range".into()));
        }
        if !(0.0..=1.0).contains(&self.small_quota) || !(0.0..=1.0).contains(&self.occlusion_prob)
        {
            return Err(Error::Config("quota/probability outside [0,1]".into()));
        }
        if self.n_classes == 0 || self.n_classes > 6 {
            return Err(Error::Config("n_classes must be in 1..=6".into()));
        }
        Ok(())
    }

    /// COCO-scaled area thresholds: small < 1/64 of the image area,
    /// large > 1/8.
    pub fn small_area_px(&self) -> f64 {
        (self.image_h * self.image_w) as f64 / 64.0
    }

    pub fn large_area_px(&self) -> f64 {
        (self.image_h * self.image_w) as f64 / 8.0
    }
}

/// One labeled object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
    /// Bounding-box area in pixels (used for size-stratified metrics).
    pub area_px: f64,
}

/// One image with its annotations.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub n_images: usize,
    pub small_area_px: f64,
    pub large_area_px: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Content hash of the dataset header (recorded in run manifests).
    pub fn header_hash(&self) -> String {
        let json = serde_json::to_string(&self.header).expect("header serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

/// Class id → (shape, palette color). Two palettes over three shapes.
fn class_style(class_id: usize) -> (ShapeKind, [f64; 3]) {
    let kind = match class_id % 3 {
        0 => ShapeKind::Square,
        1 => ShapeKind::Circle,
        _ => ShapeKind::Triangle,
    };
    let color = if class_id < 3 {
        [[0.90, 0.20, 0.15], [0.95, 0.75, 0.10], [0.90, 0.35, 0.75]][class_id % 3]
    } else {
        [[0.15, 0.45, 0.90], [0.10, 0.80, 0.55], [0.55, 0.90, 0.95]][class_id % 3]
    };
    (kind, color)
}

fn seed_for_image(seed: u64, id: u64) -> u64 {
    // splitmix64 of the (seed, id) pair
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct PlacedShape {
    kind: ShapeKind,
    color: [f64; 3],
    bbox: BBox,
    class_id: usize,
}

/// Deterministically render one image from (spec, id).
pub fn render_image(spec: &SceneSpec, id: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for_image(spec.seed, id));
    let (h, w) = (spec.image_h, spec.image_w);
    let n_shapes = rng.gen_range(spec.shapes_min..=spec.shapes_max);

    let mut placed: Vec<PlacedShape> = Vec::new();
    for _ in 0..n_shapes {
        let class_id = rng.gen_range(0..spec.n_classes);
        let (kind, color) = class_style(class_id);
        // Pick a size bucket, then a side length in pixels. The small
        // bucket sits strictly below the small-area threshold (side h/8).
        let small = rng.gen_bool(spec.small_quota);
        let hf = h as f64;
        let side_px = if small {
            let lo = (hf / 16.0).max(2.0);
            let hi = (hf / 8.0 - 0.5).max(lo + 0.1);
            rng.gen_range(lo..hi)
        } else if rng.gen_bool(0.7) {
            let lo = hf / 8.0 + 0.5;
            let hi = (hf / 3.0).max(lo + 0.1);
            rng.gen_range(lo..hi)
        } else {
            let lo = hf / 2.83;
            let hi = (hf / 1.9).max(lo + 0.1);
            rng.gen_range(lo..hi)
        };
        let bw = side_px / w as f64;
        let bh = side_px / h as f64;

        let occlude = !placed.is_empty() && rng.gen_bool(spec.occlusion_prob);
        let mut bbox = None;
        for _attempt in 0..50 {
            let (cx, cy) = if occlude {
                // land near a previously placed shape
                let target = &placed[rng.gen_range(0..placed.len())].bbox;
                (
                    (target.cx + rng.gen_range(-0.6..0.6) * target.w).clamp(bw / 2.0, 1.0 - bw / 2.0),
                    (target.cy + rng.gen_range(-0.6..0.6) * target.h).clamp(bh / 2.0, 1.0 - bh / 2.0),
                )
            } else {
                (
                    rng.gen_range(bw / 2.0..1.0 - bw / 2.0),
                    rng.gen_range(bh / 2.0..1.0 - bh / 2.0),
                )
            };
            let candidate = match BBox::new(cx, cy, bw, bh) {
                Ok(b) => b,
                Err(_) => continue,
            };
            let max_overlap = placed
                .iter()
                .map(|p| iou(&candidate, &p.bbox))
                .fold(0.0, f64::max);
            let ok = if occlude {
                max_overlap > 0.3 && max_overlap < 0.7
            } else {
                max_overlap <= 0.3
            };
            if ok {
                bbox = Some(candidate);
                break;
            }
        }
        if let Some(bbox) = bbox {
            placed.push(PlacedShape {
                kind,
                color,
                bbox,
                class_id,
            });
        }
    }

    // Background plus uniform noise, then shapes in placement order.
    let mut pixels = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let base = 0.35 + spec.noise_level * (rng.gen::<f64>() - 0.5) * 2.0;
            for c in 0..3 {
                pixels[(y * w + x) * 3 + c] = base.clamp(0.0, 1.0);
            }
        }
    }
    for shape in &placed {
        let [x0, y0, x1, y1] = shape.bbox.xyxy();
        let (px0, px1) = ((x0 * w as f64) as usize, ((x1 * w as f64).ceil() as usize).min(w));
        let (py0, py1) = ((y0 * h as f64) as usize, ((y1 * h as f64).ceil() as usize).min(h));
        for py in py0..py1 {
            for px in px0..px1 {
                let (u, v) = (
                    ((px as f64 + 0.5) / w as f64 - x0) / shape.bbox.w,
                    ((py as f64 + 0.5) / h as f64 - y0) / shape.bbox.h,
                );
                if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
                    continue;
                }
                let inside = match shape.kind {
                    ShapeKind::Square => true,
                    ShapeKind::Circle => {
                        let (du, dv) = (u - 0.5, v - 0.5);
                        du * du + dv * dv <= 0.25
                    }
                    ShapeKind::Triangle => {
                        // apex at top center, base along the bottom
                        v >= 2.0 * (u - 0.5).abs()
                    }
                };
                if inside {
                    for c in 0..3 {
                        pixels[(py * w + px) * 3 + c] = shape.color[c];
                    }
                }
            }
        }
    }

    let annotations = placed
        .iter()
        .map(|p| Annotation {
            bbox: p.bbox,
            class_id: p.class_id,
            area_px: p.bbox.w * w as f64 * p.bbox.h * h as f64,
        })
        .collect();
    Sample {
        id,
        image: Tensor::new(vec![h, w, 3], pixels).expect("sized buffer"),
        annotations,
    }
}

/// Generate `n_images` samples; pure in (spec, id).
pub fn generate(spec: &SceneSpec, n_images: usize) -> Result<Dataset> {
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::Config("n_images must be >= 1".into()));
    }
    let samples = (0..n_images as u64)
        .map(|id| render_image(spec, id))
        .collect();
    Ok(Dataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            spec: spec.clone(),
            n_images,
            small_area_px: spec.small_area_px(),
            large_area_px: spec.large_area_px(),
        },
        samples,
    })
}

/// Labeled/unlabeled id split, deterministic in (seed, fold).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fraction: f64,
    pub fold: usize,
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
}

pub fn split(n_images: usize, fraction: f64, fold: usize, seed: u64) -> Result<DatasetSplit> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let n_labeled = (n_images as f64 * fraction).round() as usize;
    if n_labeled == 0 {
        return Err(Error::Config(format!(
            "fraction {fraction} yields zero labeled images out of {n_images}"
        )));
    }
    let mut ids: Vec<u64> = (0..n_images as u64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for_image(seed, 0x5350_4c49_5400 + fold as u64));
    // Fisher–Yates
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let mut labeled: Vec<u64> = ids[..n_labeled].to_vec();
    let mut unlabeled: Vec<u64> = ids[n_labeled..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(DatasetSplit {
        fraction,
        fold,
        labeled,
        unlabeled,
    })
}

// ---- on-disk format --------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: u64,
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
    areas: Vec<f64>,
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("header.json"),
        serde_json::to_string_pretty(&ds.header)?,
    )?;

    let mut ann = BufWriter::new(File::create(dir.join("annotations.jsonl"))?);
    for s in &ds.samples {
        let rec = AnnotationRecord {
            id: s.id,
            boxes: s.annotations.iter().map(|a| a.bbox.cxcywh()).collect(),
            classes: s.annotations.iter().map(|a| a.class_id).collect(),
            areas: s.annotations.iter().map(|a| a.area_px).collect(),
        };
        serde_json::to_writer(&mut ann, &rec)?;
        ann.write_all(b"\n")?;
    }
    ann.flush()?;

    let (h, w) = (ds.header.spec.image_h, ds.header.spec.image_w);
    let mut img = BufWriter::new(File::create(dir.join("images.bin"))?);
    img.write_all(&IMAGES_MAGIC.to_le_bytes())?;
    img.write_all(&(FORMAT_VERSION as u64).to_le_bytes())?;
    img.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    for dim in [h as u64, w as u64, 3u64] {
        img.write_all(&dim.to_le_bytes())?;
    }
    for s in &ds.samples {
        for v in s.image.data() {
            img.write_all(&v.to_le_bytes())?;
        }
    }
    img.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let header: DatasetHeader =
        serde_json::from_str(&fs::read_to_string(dir.join("header.json"))?)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }

    let mut img = BufReader::new(File::open(dir.join("images.bin"))?);
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        r.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    if read_u64(&mut img)? != IMAGES_MAGIC {
        return Err(Error::Format("bad image blob magic".into()));
    }
    if read_u64(&mut img)? != FORMAT_VERSION as u64 {
        return Err(Error::Format("bad image blob version".into()));
    }
    let count = read_u64(&mut img)? as usize;
    let h = read_u64(&mut img)? as usize;
    let w = read_u64(&mut img)? as usize;
    let c = read_u64(&mut img)? as usize;

    let ann_file = BufReader::new(File::open(dir.join("annotations.jsonl"))?);
    let mut records = Vec::with_capacity(count);
    for line in ann_file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)?;
        records.push(rec);
    }
    if records.len() != count {
        return Err(Error::Format(format!(
            "annotation count {} does not match image count {count}",
            records.len()
        )));
    }

    let mut samples = Vec::with_capacity(count);
    let numel = h * w * c;
    let mut buf = vec![0u8; numel * 8];
    for rec in records {
        img.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let annotations = rec
            .boxes
            .iter()
            .zip(&rec.classes)
            .zip(&rec.areas)
            .map(|((b, &class_id), &area_px)| {
                Ok(Annotation {
                    bbox: BBox::new(b[0], b[1], b[2], b[3])?,
                    class_id,
                    area_px,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id: rec.id,
            image: Tensor::new(vec![h, w, c], data)?,
            annotations,
        });
    }
    Ok(Dataset { header, samples })
}
