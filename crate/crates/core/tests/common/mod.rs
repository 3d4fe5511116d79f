#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenekg::graph::{BBox, KnowledgeGraph, MergedGraph};
use scenekg::ingest::{build_scene_graph, DetectionRecord, ImageContext, IngestConfig};
use scenekg::kg::{from_file, CompoundSpec, KgFile, KG_VERSION};
use scenekg::merge::merge;
use scenekg::search::ModelDims;

pub const EMBED: usize = 4;
pub const IMAGE: usize = 3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A KG with 3..9 primitives `p*` and 1..4 compounds `k*`.
pub fn random_kg_file(rng: &mut impl Rng) -> KgFile {
    let n = rng.gen_range(3..9);
    let concepts: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
    let compounds = (0..rng.gen_range(1..4))
        .map(|j| {
            let want = rng.gen_range(2..=n.min(4));
            let mut parts = concepts.clone();
            parts.shuffle(rng);
            parts.truncate(want);
            CompoundSpec {
                label: format!("k{j}"),
                constituents: parts,
                weights: None,
            }
        })
        .collect();
    KgFile {
        version: KG_VERSION.into(),
        concepts,
        compounds,
        extra_edges: Vec::new(),
    }
}

pub fn random_kg(rng: &mut impl Rng) -> KnowledgeGraph {
    from_file(&random_kg_file(rng)).expect("generated KG is valid")
}

pub fn random_box(rng: &mut impl Rng) -> BBox {
    let w = rng.gen_range(10.0..200.0);
    let h = rng.gen_range(10.0..200.0);
    let x0 = rng.gen_range(0.0..(640.0 - w));
    let y0 = rng.gen_range(0.0..(480.0 - h));
    BBox::new(x0, y0, x0 + w, y0 + h)
}

pub fn image(rng: &mut impl Rng) -> ImageContext {
    ImageContext {
        width: 640,
        height: 480,
        embedding: Some((0..IMAGE).map(|_| rng.gen_range(-1.0..1.0)).collect()),
    }
}

/// 1..8 detections over the KG's primitives plus an occasional unknown label.
pub fn random_detections(kg: &KnowledgeGraph, rng: &mut impl Rng) -> Vec<DetectionRecord> {
    let prims: Vec<String> = kg
        .primitives()
        .into_iter()
        .map(|p| kg.node(p).label.to_string())
        .collect();
    (0..rng.gen_range(1..8))
        .map(|_| {
            let label = if rng.gen_bool(0.1) {
                "unknown".to_string()
            } else {
                prims[rng.gen_range(0..prims.len())].clone()
            };
            DetectionRecord {
                label,
                bbox: random_box(rng),
                confidence: rng.gen_range(0.5..1.0),
                embedding: None,
            }
        })
        .collect()
}

pub fn ingest() -> IngestConfig {
    IngestConfig {
        embedding_dim: EMBED,
        ..IngestConfig::default()
    }
}

pub fn merged_with(
    kg: KnowledgeGraph,
    dets: &[DetectionRecord],
    ctx: &ImageContext,
) -> MergedGraph {
    merge(
        build_scene_graph(ctx, dets, &ingest()).expect("scene builds"),
        kg,
    )
}

/// A random KG merged with a random scene over it.
pub fn random_merged(seed: u64) -> (MergedGraph, ImageContext) {
    let mut r = rng(seed);
    let kg = random_kg(&mut r);
    let dets = random_detections(&kg, &mut r);
    let ctx = image(&mut r);
    (merged_with(kg, &dets, &ctx), ctx)
}

pub fn small_dims(kg: &KnowledgeGraph) -> ModelDims {
    ModelDims {
        embedding: EMBED,
        hidden: 3,
        image: IMAGE,
        edge: 2,
        message_hidden: 4,
        importance_hidden: 4,
        ..ModelDims::for_kg(kg)
    }
}
