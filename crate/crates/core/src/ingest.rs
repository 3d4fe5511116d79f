//! Detection files to scene graphs.
//!
//! Detector output (labelled boxes with optional appearance embeddings) is
//! read from JSON and turned into a [`SceneGraph`] whose edges carry spatial
//! relations between every pair of nearby boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{parse_json, Error, Result};
use crate::graph::{
    BBox, ConceptLabel, KnowledgeGraph, SceneGraph, SgEdge, SgNode, SpatialRelation,
};
use crate::tensor::{
    adam_step, ff_forward, softmax, Activation, AdamConfig, AdamState, FeedForwardNet, Matrix, Tape,
};

/// Wire form of a detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub image: ImageContext,
    pub detections: Vec<DetectionRecord>,
}

impl DetectionFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("detection file serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageContext {
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
}

impl ImageContext {
    pub fn diagonal(&self) -> f64 {
        f64::from(self.width).hypot(f64::from(self.height))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub label: String,
    pub bbox: BBox,
    pub confidence: f64,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
}

/// Parses and validates a detection file.
pub fn parse_detection_file(bytes: &[u8]) -> Result<(ImageContext, Vec<DetectionRecord>)> {
    let file: DetectionFile = parse_json(bytes)?;
    let ctx = file.image;
    if ctx.width == 0 || ctx.height == 0 {
        return Err(Error::Validation(format!(
            "image size {}x{}",
            ctx.width, ctx.height
        )));
    }
    if let Some(e) = &ctx.embedding {
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite image embedding".into()));
        }
    }
    for (index, d) in file.detections.iter().enumerate() {
        let fail = |message: String| Err(Error::Record { index, message });
        if ConceptLabel::new(&d.label).is_err() {
            return fail("empty label".into());
        }
        if !d.bbox.is_well_ordered() {
            return fail(format!(
                "bbox {:?} is not well-ordered",
                <[f64; 4]>::from(d.bbox)
            ));
        }
        if !(0.0..=1.0).contains(&d.confidence) {
            return fail(format!("confidence {} outside [0, 1]", d.confidence));
        }
        if let Some(e) = &d.embedding {
            if e.iter().any(|v| !v.is_finite()) {
                return fail("non-finite embedding".into());
            }
        }
    }
    Ok((ctx, file.detections))
}

/// Indices of records whose label the knowledge graph does not know.
pub fn unknown_labels(records: &[DetectionRecord], kg: &KnowledgeGraph) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            ConceptLabel::new(&r.label)
                .map(|l| kg.index_of(&l).is_none())
                .unwrap_or(true)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Deterministic spatial relation of box `a` to box `b`.
///
/// Precedence: contains, inside, overlaps, then a directional relation along
/// the dominant axis of center displacement when the boxes are separated
/// along that axis, otherwise near. No relation is returned for boxes whose
/// centers are at least half the image diagonal apart.
pub fn spatial_relation(a: &BBox, b: &BBox, diag: f64) -> Option<SpatialRelation> {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let (dx, dy) = (bx - ax, by - ay);
    if dx.hypot(dy) >= 0.5 * diag {
        return None;
    }
    if a.strictly_encloses(b) {
        return Some(SpatialRelation::Contains);
    }
    if b.strictly_encloses(a) {
        return Some(SpatialRelation::Inside);
    }
    if a.intersection_area(b) > 0.0 {
        return Some(SpatialRelation::Overlaps);
    }
    let rel = if dx.abs() >= dy.abs() {
        if dx > 0.0 && a.x1 <= b.x0 {
            SpatialRelation::LeftOf
        } else if dx < 0.0 && b.x1 <= a.x0 {
            SpatialRelation::RightOf
        } else {
            SpatialRelation::Near
        }
    } else if dy > 0.0 && a.y1 <= b.y0 {
        SpatialRelation::Above
    } else if dy < 0.0 && b.y1 <= a.y0 {
        SpatialRelation::Below
    } else {
        SpatialRelation::Near
    };
    Some(rel)
}

/// Number of outputs of the learned edge classifier: 8 relations + "no edge".
pub const EDGE_CLASSES: usize = 9;
pub const EDGE_FEATURES: usize = 8;

/// Geometric features of a box pair, normalized by the image diagonal:
/// `[Δcx, Δcy, IoU, area_a, area_b, ln aspect_a, ln aspect_b, distance]`.
pub fn edge_features(a: &BBox, b: &BBox, diag: f64) -> [f64; EDGE_FEATURES] {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let (dx, dy) = ((bx - ax) / diag, (by - ay) / diag);
    let d2 = diag * diag;
    [
        dx,
        dy,
        a.iou(b),
        a.area() / d2 * 10.0,
        b.area() / d2 * 10.0,
        (a.width() / a.height()).ln(),
        (b.width() / b.height()).ln(),
        dx.hypot(dy),
    ]
}

/// Learned alternative to [`spatial_relation`]: a small feed-forward net over
/// [`edge_features`] producing relation logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeClassifier {
    pub net: FeedForwardNet,
}

impl EdgeClassifier {
    pub fn new(hidden: usize, rng: &mut impl Rng) -> Self {
        let net = FeedForwardNet::random(
            &[EDGE_FEATURES, hidden, hidden, EDGE_CLASSES],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            rng,
        )
        .expect("valid dims");
        Self { net }
    }

    pub fn predict(&self, a: &BBox, b: &BBox, diag: f64) -> Result<Option<SpatialRelation>> {
        let logits = ff_forward(&self.net, &edge_features(a, b, diag))?;
        let best = argmax(&logits);
        Ok(SpatialRelation::ALL.get(best).copied())
    }

    /// Fits the classifier to labelled box pairs with per-sample Adam steps.
    /// Returns the mean loss of the final epoch.
    pub fn fit(
        &mut self,
        pairs: &[(BBox, BBox, f64, Option<SpatialRelation>)],
        epochs: usize,
        lr: f64,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let mut state = AdamState::new(self.net.params(), AdamConfig::default());
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut last = 0.0;
        for _ in 0..epochs {
            shuffle(&mut order, rng);
            let mut total = 0.0;
            for &i in &order {
                let (a, b, diag, rel) = &pairs[i];
                let target = rel.map_or(EDGE_CLASSES - 1, SpatialRelation::index);
                let mut tape = Tape::new();
                let bound = self.net.bind(&mut tape, 0);
                let x = tape.constant(Matrix::row_vector(&edge_features(a, b, *diag))?);
                let z = bound.forward(&mut tape, x)?;
                let loss = tape.masked_cross_entropy(z, target, &[true; EDGE_CLASSES])?;
                total += tape.scalar(loss);
                let grads = tape.backward(loss)?;
                let g: Vec<Matrix> = self
                    .net
                    .params()
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        grads
                            .get(crate::tensor::ParamId(k))
                            .cloned()
                            .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
                    })
                    .collect();
                adam_step(&mut self.net.params_mut(), &g, &mut state, lr)?;
            }
            last = total / pairs.len().max(1) as f64;
        }
        Ok(last)
    }

    /// Class probabilities, for diagnostics.
    pub fn probabilities(&self, a: &BBox, b: &BBox, diag: f64) -> Result<Vec<f64>> {
        Ok(softmax(&ff_forward(&self.net, &edge_features(a, b, diag))?))
    }
}

pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Default)]
pub enum EdgeMode {
    #[default]
    Geometric,
    Learned(EdgeClassifier),
}

#[derive(Debug, Clone)]
pub struct IngestConfig {
    /// Node embedding dimension D.
    pub embedding_dim: usize,
    pub min_confidence: f64,
    pub edge_mode: EdgeMode,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            min_confidence: 0.0,
            edge_mode: EdgeMode::Geometric,
        }
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic pseudo-random unit vector for a label.
pub fn label_embedding(label: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(label));
    let mut v: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Builds the scene graph from validated detections.
pub fn build_scene_graph(
    ctx: &ImageContext,
    dets: &[DetectionRecord],
    cfg: &IngestConfig,
) -> Result<SceneGraph> {
    let diag = ctx.diagonal();
    let mut nodes = Vec::new();
    for (index, d) in dets.iter().enumerate() {
        if d.confidence < cfg.min_confidence {
            continue;
        }
        let label = ConceptLabel::new(&d.label).map_err(|_| Error::Record {
            index,
            message: "empty label".into(),
        })?;
        let embedding = match &d.embedding {
            Some(e) if e.len() == cfg.embedding_dim => e.clone(),
            Some(e) => {
                return Err(Error::Record {
                    index,
                    message: format!("embedding length {} != {}", e.len(), cfg.embedding_dim),
                })
            }
            None => label_embedding(label.as_str(), cfg.embedding_dim),
        };
        nodes.push(SgNode {
            id: nodes.len(),
            label,
            bbox: d.bbox,
            confidence: d.confidence,
            embedding,
        });
    }
    if nodes.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            let (a, b) = (&nodes[i].bbox, &nodes[j].bbox);
            let rel = match &cfg.edge_mode {
                EdgeMode::Geometric => spatial_relation(a, b, diag),
                EdgeMode::Learned(c) => c.predict(a, b, diag)?,
            };
            if let Some(rel) = rel {
                edges.push(SgEdge {
                    src: i,
                    dst: j,
                    relation: rel,
                });
                edges.push(SgEdge {
                    src: j,
                    dst: i,
                    relation: rel.converse(),
                });
            }
        }
    }
    SceneGraph::new(nodes, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"{
  "image": {"width": 640, "height": 480, "embedding": null},
  "detections": [
    {"label": "stove", "bbox": [10, 10, 50, 50], "confidence": 0.9, "embedding": null},
    {"label": "sink", "bbox": [60, 10, 100, 50], "confidence": 0.8, "embedding": null}
  ]
}"#;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1)
    }

    #[test]
    fn parses_sample() {
        let (ctx, recs) = parse_detection_file(SAMPLE.as_bytes()).unwrap();
        assert_eq!((ctx.width, ctx.height), (640, 480));
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].bbox, b(10.0, 10.0, 50.0, 50.0));
        assert_eq!(recs[1].label, "sink");
    }

    #[test]
    fn parses_empty_detections() {
        let (_, recs) =
            parse_detection_file(br#"{"image": {"width": 4, "height": 4}, "detections": []}"#)
                .unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn confidence_out_of_range_names_record() {
        let text = SAMPLE.replace("0.8", "1.5");
        match parse_detection_file(text.as_bytes()) {
            Err(Error::Record { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_bbox_and_syntax() {
        let text = SAMPLE.replace("[60, 10, 100, 50]", "[100, 10, 60, 50]");
        assert!(matches!(
            parse_detection_file(text.as_bytes()),
            Err(Error::Record { index: 1, .. })
        ));
        let err = parse_detection_file(b"{\"image\": }").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 10, .. }), "{err}");
        let err = parse_detection_file(br#"{"image": {"width": 4, "height": 4}, "detections": [{"label": "a", "bbox": [0,0,1], "confidence": 1}]}"#).unwrap_err();
        assert!(err.to_string().contains("detections[0].bbox"), "{err}");
    }

    #[test]
    fn relation_examples() {
        let big = b(0.0, 0.0, 100.0, 100.0);
        let small = b(10.0, 10.0, 20.0, 20.0);
        assert_eq!(
            spatial_relation(&big, &small, 1000.0),
            Some(SpatialRelation::Contains)
        );
        assert_eq!(
            spatial_relation(&small, &big, 1000.0),
            Some(SpatialRelation::Inside)
        );
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(
            spatial_relation(&a, &b(20.0, 0.0, 30.0, 10.0), 1000.0),
            Some(SpatialRelation::LeftOf)
        );
        assert_eq!(
            spatial_relation(&a, &b(600.0, 600.0, 610.0, 610.0), 1000.0),
            None
        );
        assert_eq!(
            spatial_relation(&a, &b(5.0, 5.0, 15.0, 15.0), 1000.0),
            Some(SpatialRelation::Overlaps)
        );
        assert_eq!(
            spatial_relation(&a, &b(0.0, 30.0, 10.0, 40.0), 1000.0),
            Some(SpatialRelation::Above)
        );
        // dominant x displacement but separated only vertically
        let wide = b(0.0, 0.0, 100.0, 10.0);
        let tall = b(90.0, 20.0, 100.0, 30.0);
        assert_eq!(
            spatial_relation(&wide, &tall, 1000.0),
            Some(SpatialRelation::Near)
        );
    }

    #[test]
    fn stove_left_of_sink() {
        let (ctx, recs) = parse_detection_file(SAMPLE.as_bytes()).unwrap();
        let sg = build_scene_graph(&ctx, &recs, &IngestConfig::default()).unwrap();
        assert_eq!(sg.len(), 2);
        let edges: Vec<_> = sg
            .edges()
            .iter()
            .map(|e| (e.src, e.dst, e.relation))
            .collect();
        assert_eq!(
            edges,
            vec![
                (0, 1, SpatialRelation::LeftOf),
                (1, 0, SpatialRelation::RightOf)
            ]
        );
    }

    #[test]
    fn single_detection_has_no_edges() {
        let (ctx, recs) = parse_detection_file(SAMPLE.as_bytes()).unwrap();
        let sg = build_scene_graph(&ctx, &recs[..1], &IngestConfig::default()).unwrap();
        assert_eq!((sg.len(), sg.edges().len()), (1, 0));
    }

    #[test]
    fn confidence_filter_can_empty_the_scene() {
        let (ctx, recs) = parse_detection_file(SAMPLE.as_bytes()).unwrap();
        let cfg = IngestConfig {
            min_confidence: 0.95,
            ..Default::default()
        };
        assert!(matches!(
            build_scene_graph(&ctx, &recs, &cfg),
            Err(Error::EmptyScene)
        ));
    }

    #[test]
    fn fallback_embeddings_are_deterministic_unit_vectors() {
        let e = label_embedding("stove", 32);
        assert_eq!(e, label_embedding("stove", 32));
        assert_ne!(e, label_embedding("sink", 32));
        assert!((e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_embedding_width_is_rejected() {
        let text = SAMPLE.replacen(
            "0.9, \"embedding\": null",
            "0.9, \"embedding\": [1.0, 2.0]",
            1,
        );
        let (ctx, recs) = parse_detection_file(text.as_bytes()).unwrap();
        assert!(matches!(
            build_scene_graph(&ctx, &recs, &IngestConfig::default()),
            Err(Error::Record { index: 0, .. })
        ));
    }
}
