//! Synthetic labelled scenes and the brute-force labelling oracle.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{BBox, ConceptLabel, KgNodeKind, KgRelation, KnowledgeGraph, SpatialRelation};
use crate::ingest::{
    label_embedding, shuffle, spatial_relation, DetectionFile, DetectionRecord, ImageContext,
};
use crate::merge::round_seed;
use crate::search::BACKGROUND;
use crate::train::{write_manifest, ManifestEntry};

pub const CANVAS_WIDTH: u32 = 640;
pub const CANVAS_HEIGHT: u32 = 480;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Standard deviation of the Gaussian jitter added to embeddings.
    pub sigma: f64,
    /// Non-constituent labels added to each compound scene.
    pub distractors: usize,
    pub embedding_dim: usize,
    pub image_dim: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            distractors: 1,
            embedding_dim: 32,
            image_dim: 32,
        }
    }
}

/// A generated scene with the label it was generated for and the label the
/// oracle assigns to its detections.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub file: DetectionFile,
    pub label: String,
    pub oracle: String,
}

fn normal(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("positive sigma"))
}

fn jitter(mut v: Vec<f64>, noise: &Option<Normal<f64>>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if let Some(n) = noise {
        v.iter_mut().for_each(|x| *x += n.sample(rng));
    }
    v
}

/// A rectangular region split into a grid; each object takes its own cell,
/// so boxes never overlap.
#[derive(Debug, Clone, Copy)]
struct Region {
    x: f64,
    y: f64,
    cols: usize,
    rows: usize,
    cell_w: f64,
    cell_h: f64,
}

impl Region {
    fn boxes(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
        assert!(
            n <= self.cols * self.rows,
            "{n} objects do not fit the layout"
        );
        let mut cells: Vec<usize> = (0..self.cols * self.rows).collect();
        shuffle(&mut cells, rng);
        cells[..n]
            .iter()
            .map(|&c| {
                let (cx, cy) = ((c % self.cols) as f64, (c / self.cols) as f64);
                let w = rng.gen_range(0.35..0.9) * self.cell_w;
                let h = rng.gen_range(0.35..0.9) * self.cell_h;
                let x0 = self.x + cx * self.cell_w + rng.gen_range(0.0..self.cell_w - w);
                let y0 = self.y + cy * self.cell_h + rng.gen_range(0.0..self.cell_h - h);
                BBox::new(x0.round(), y0.round(), (x0 + w).round(), (y0 + h).round())
            })
            .collect()
    }
}

/// A 360×240 cluster at a random position. Any two cells lie well inside
/// the relation radius of the canvas.
fn cluster(rng: &mut ChaCha8Rng) -> Region {
    Region {
        x: rng.gen_range(0.0..280.0_f64).round(),
        y: rng.gen_range(0.0..240.0_f64).round(),
        cols: 4,
        rows: 2,
        cell_w: 90.0,
        cell_h: 120.0,
    }
}

/// One half of the canvas, 300×300, for side-by-side composites.
fn half(left: bool) -> Region {
    Region {
        x: if left { 0.0 } else { 340.0 },
        y: 90.0,
        cols: 3,
        rows: 2,
        cell_w: 100.0,
        cell_h: 150.0,
    }
}

fn constituent_labels(k: &KnowledgeGraph, compound: usize) -> Vec<String> {
    k.constituents(compound)
        .into_iter()
        .map(|c| k.node(c).label.to_string())
        .collect()
}

fn compound_index(k: &KnowledgeGraph, label: &str) -> Result<usize> {
    let l = ConceptLabel::new(label)?;
    k.index_of(&l)
        .filter(|&i| k.node(i).kind == KgNodeKind::Compound)
        .ok_or_else(|| Error::Validation(format!("`{label}` is not a compound")))
}

fn primitive_labels(k: &KnowledgeGraph) -> Vec<String> {
    k.primitives()
        .into_iter()
        .map(|i| k.node(i).label.to_string())
        .collect()
}

/// Picks at least `ceil(0.6·n)` constituents of `compound`, plus distractors.
fn compound_labels(
    k: &KnowledgeGraph,
    compound: usize,
    distractors: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    let mut parts = constituent_labels(k, compound);
    if parts.len() < 2 {
        return Err(Error::Validation(format!(
            "compound `{}` has fewer than 2 constituents",
            k.node(compound).label
        )));
    }
    let min = (parts.len() * 3).div_ceil(5);
    let take = rng.gen_range(min..=parts.len());
    shuffle(&mut parts, rng);
    parts.truncate(take);
    let own: BTreeSet<String> = constituent_labels(k, compound).into_iter().collect();
    let pool: Vec<String> = primitive_labels(k)
        .into_iter()
        .filter(|l| !own.contains(l))
        .collect();
    for _ in 0..distractors.min(pool.len()) {
        loop {
            let d = &pool[rng.gen_range(0..pool.len())];
            if !parts.contains(d) {
                parts.push(d.clone());
                break;
            }
        }
    }
    Ok(parts)
}

/// Random labels on which no compound reaches 50% constituent recall.
fn background_labels(k: &KnowledgeGraph, rng: &mut ChaCha8Rng) -> Vec<String> {
    let pool = primitive_labels(k);
    loop {
        let n = rng.gen_range(2..=5).min(pool.len());
        let mut picks = pool.clone();
        shuffle(&mut picks, rng);
        picks.truncate(n);
        if oracle_label(k, &picks) == BACKGROUND {
            return picks;
        }
    }
}

fn detections(
    labels: &[String],
    boxes: &[BBox],
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<DetectionRecord> {
    let n = normal(noise.sigma);
    labels
        .iter()
        .zip(boxes)
        .map(|(label, &bbox)| {
            let confidence = (rng.gen_range(0.7..=1.0_f64) * 1000.0).round() / 1000.0;
            let embedding = jitter(label_embedding(label, noise.embedding_dim), &n, rng);
            DetectionRecord {
                label: label.clone(),
                bbox,
                confidence,
                embedding: Some(embedding),
            }
        })
        .collect()
}

fn image_context(label: &str, noise: &NoiseConfig, rng: &mut ChaCha8Rng) -> ImageContext {
    let e = jitter(
        label_embedding(&format!("image:{label}"), noise.image_dim),
        &normal(noise.sigma),
        rng,
    );
    ImageContext {
        width: CANVAS_WIDTH,
        height: CANVAS_HEIGHT,
        embedding: Some(e),
    }
}

/// Generates one scene of `compound`, or a background scene for `None`.
pub fn generate_scene(
    k: &KnowledgeGraph,
    compound: Option<&str>,
    noise: &NoiseConfig,
    rng_seed: u64,
) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (labels, label) = match compound {
        Some(c) if c != BACKGROUND => {
            let idx = compound_index(k, c)?;
            (
                compound_labels(k, idx, noise.distractors, &mut rng)?,
                c.to_string(),
            )
        }
        _ => (background_labels(k, &mut rng), BACKGROUND.to_string()),
    };
    let boxes = cluster(&mut rng).boxes(labels.len(), &mut rng);
    let dets = detections(&labels, &boxes, noise, &mut rng);
    let oracle = oracle_label(k, &labels);
    Ok(SyntheticScene {
        file: DetectionFile {
            image: image_context(&label, noise, &mut rng),
            detections: dets,
        },
        label,
        oracle,
    })
}

/// Two compounds side by side: `left` in the left half of the canvas,
/// `right` in the right half. Returns the scene and both labels.
pub fn generate_composite(
    k: &KnowledgeGraph,
    left: &str,
    right: &str,
    noise: &NoiseConfig,
    rng_seed: u64,
) -> Result<(DetectionFile, [String; 2])> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let a = compound_labels(k, compound_index(k, left)?, 0, &mut rng)?;
    let b = compound_labels(k, compound_index(k, right)?, 0, &mut rng)?;
    let mut boxes = half(true).boxes(a.len(), &mut rng);
    boxes.extend(half(false).boxes(b.len(), &mut rng));
    let labels: Vec<String> = a.into_iter().chain(b).collect();
    let dets = detections(&labels, &boxes, noise, &mut rng);
    let file = DetectionFile {
        image: image_context(&format!("{left}+{right}"), noise, &mut rng),
        detections: dets,
    };
    Ok((file, [left.to_string(), right.to_string()]))
}

/// Labels the detections by exhaustive constituent recall: the best compound
/// if its recall is at least 0.5, else background. Ties go to the
/// lexicographically smallest label.
pub fn oracle_label(k: &KnowledgeGraph, labels: &[String]) -> String {
    let present: BTreeSet<&str> = labels.iter().map(|s| s.trim()).collect();
    let mut best: Option<(f64, &str)> = None;
    for (i, node) in k.nodes().iter().enumerate() {
        if node.kind != KgNodeKind::Compound {
            continue;
        }
        let parts: Vec<&str> = k
            .edges()
            .iter()
            .filter(|e| e.relation == KgRelation::PartOf && e.dst == i)
            .map(|e| k.nodes()[e.src].label.as_str())
            .collect();
        if parts.is_empty() {
            continue;
        }
        let hit = parts.iter().filter(|p| present.contains(*p)).count();
        let recall = hit as f64 / parts.len() as f64;
        let name = node.label.as_str();
        best = match best {
            Some((r, n)) if r > recall || (r == recall && n < name) => Some((r, n)),
            _ => Some((recall, name)),
        };
    }
    match best {
        Some((r, name)) if r >= 0.5 => name.to_string(),
        _ => BACKGROUND.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub scenes: usize,
    /// Probability that a scene is background.
    pub background_fraction: f64,
    pub noise: NoiseConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            background_fraction: 0.2,
            noise: NoiseConfig::default(),
        }
    }
}

/// Scenes of uniformly random compounds, with background mixed in.
pub fn generate_dataset(
    k: &KnowledgeGraph,
    cfg: &DatasetConfig,
    rng_seed: u64,
) -> Result<Vec<SyntheticScene>> {
    let compounds: Vec<String> = k
        .compounds()
        .into_iter()
        .map(|c| k.node(c).label.to_string())
        .collect();
    if compounds.is_empty() {
        return Err(Error::Validation("knowledge graph has no compounds".into()));
    }
    if !(cfg.noise.sigma >= 0.0 && cfg.noise.sigma.is_finite()) {
        return Err(Error::Validation(format!(
            "sigma {} must be finite and non-negative",
            cfg.noise.sigma
        )));
    }
    if !(0.0..=1.0).contains(&cfg.background_fraction) {
        return Err(Error::Validation(format!(
            "background fraction {} outside [0, 1]",
            cfg.background_fraction
        )));
    }
    (0..cfg.scenes)
        .map(|i| {
            let seed = round_seed(rng_seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pick = if rng.gen_bool(cfg.background_fraction) {
                None
            } else {
                Some(compounds[rng.gen_range(0..compounds.len())].as_str())
            };
            generate_scene(k, pick, &cfg.noise, rng.gen())
        })
        .collect()
}

/// Writes each scene to `dir/scenes/NNNNN.json` and a manifest labelled
/// with oracle labels to `dir/manifest.jsonl`. Returns the manifest path.
pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<PathBuf> {
    let scene_dir = dir.join("scenes");
    std::fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let rel = format!("scenes/{i:05}.json");
        let path = dir.join(&rel);
        std::fs::write(&path, s.file.to_json()).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            detections: rel,
            label: s.oracle.clone(),
        });
    }
    let manifest = dir.join("manifest.jsonl");
    std::fs::write(&manifest, write_manifest(&entries)).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Random box pairs labelled by the geometric relation rule, for fitting
/// the learned edge classifier.
pub fn edge_training_pairs(
    n: usize,
    rng_seed: u64,
) -> Vec<(BBox, BBox, f64, Option<SpatialRelation>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (w, h) = (f64::from(CANVAS_WIDTH), f64::from(CANVAS_HEIGHT));
    let diag = w.hypot(h);
    let random_box = |rng: &mut ChaCha8Rng| {
        let bw = rng.gen_range(10.0..200.0_f64);
        let bh = rng.gen_range(10.0..200.0_f64);
        let x0 = rng.gen_range(0.0..w - bw);
        let y0 = rng.gen_range(0.0..h - bh);
        BBox::new(x0, y0, x0 + bw, y0 + bh)
    };
    (0..n)
        .map(|_| {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            (a, b, diag, spatial_relation(&a, &b, diag))
        })
        .collect()
}
