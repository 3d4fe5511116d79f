//! Knowledge graph files, the shipped default graph, and the constituent
//! recall baseline.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{parse_json, Error, Result};
use crate::graph::{
    validate_kg, ConceptLabel, KgEdge, KgNode, KgNodeKind, KgRelation, KnowledgeGraph,
};

pub const KG_VERSION: &str = "kg/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgFile {
    pub version: String,
    pub concepts: Vec<String>,
    #[serde(default)]
    pub compounds: Vec<CompoundSpec>,
    #[serde(default, rename = "extra-edges", alias = "extra_edges")]
    pub extra_edges: Vec<ExtraEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundSpec {
    pub label: String,
    pub constituents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraEdge {
    pub src: String,
    pub dst: String,
    pub relation: KgRelation,
}

/// Parses and validates a KG file.
pub fn load_kg(bytes: &[u8]) -> Result<KnowledgeGraph> {
    let file: KgFile = parse_json(bytes)?;
    from_file(&file)
}

pub fn from_file(file: &KgFile) -> Result<KnowledgeGraph> {
    if file.version != KG_VERSION {
        return Err(Error::Version(file.version.clone()));
    }
    let mut nodes = Vec::new();
    for name in &file.concepts {
        nodes.push(KgNode {
            label: ConceptLabel::new(name)?,
            kind: KgNodeKind::Primitive,
            index: nodes.len(),
        });
    }
    let primitives = nodes.len();
    for c in &file.compounds {
        nodes.push(KgNode {
            label: ConceptLabel::new(&c.label)?,
            kind: KgNodeKind::Compound,
            index: nodes.len(),
        });
    }
    let lookup = KnowledgeGraph::from_parts(nodes.clone(), Vec::new());
    let find = |name: &str| -> Result<usize> {
        let l = ConceptLabel::new(name)?;
        lookup
            .index_of(&l)
            .ok_or_else(|| Error::UnknownConcept(l.to_string()))
    };

    let mut edges = Vec::new();
    for (ci, c) in file.compounds.iter().enumerate() {
        if let Some(w) = &c.weights {
            if w.len() != c.constituents.len() || w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "weights of compound `{}`",
                    c.label
                )));
            }
        }
        for (k, name) in c.constituents.iter().enumerate() {
            let src = find(name)?;
            if src >= primitives {
                return Err(Error::UnknownConcept(format!(
                    "{name} (not a declared concept)"
                )));
            }
            edges.push(KgEdge {
                src,
                dst: primitives + ci,
                relation: KgRelation::PartOf,
                weight: c.weights.as_ref().map(|w| w[k]),
            });
        }
    }
    for e in &file.extra_edges {
        edges.push(KgEdge {
            src: find(&e.src)?,
            dst: find(&e.dst)?,
            relation: e.relation,
            weight: None,
        });
    }
    let kg = KnowledgeGraph::from_parts(nodes, edges);
    let violations = validate_kg(&kg);
    if violations.is_empty() {
        Ok(kg)
    } else {
        Err(Error::Kg(violations))
    }
}

/// Inverse of [`from_file`].
pub fn to_file(kg: &KnowledgeGraph) -> KgFile {
    let label = |i: usize| kg.node(i).label.to_string();
    let concepts = kg.primitives().into_iter().map(label).collect();
    let compounds = kg
        .compounds()
        .into_iter()
        .map(|c| {
            let parts: Vec<&KgEdge> = kg
                .edges()
                .iter()
                .filter(|e| e.relation == KgRelation::PartOf && e.dst == c)
                .collect();
            let weights = if parts.iter().any(|e| e.weight.is_some()) {
                Some(parts.iter().map(|e| e.weight.unwrap_or(1.0)).collect())
            } else {
                None
            };
            CompoundSpec {
                label: label(c),
                constituents: parts.iter().map(|e| label(e.src)).collect(),
                weights,
            }
        })
        .collect();
    let extra_edges = kg
        .edges()
        .iter()
        .filter(|e| e.relation != KgRelation::PartOf)
        .map(|e| ExtraEdge {
            src: label(e.src),
            dst: label(e.dst),
            relation: e.relation,
        })
        .collect();
    KgFile {
        version: KG_VERSION.into(),
        concepts,
        compounds,
        extra_edges,
    }
}

pub fn save_kg(kg: &KnowledgeGraph) -> String {
    serde_json::to_string_pretty(&to_file(kg)).expect("kg serializes")
}

/// Scores every compound by the fraction of its constituents present in
/// `labels`. Sorted by score, then intersection size (both descending), then
/// label.
pub fn symbolic_baseline<'a>(
    k: &KnowledgeGraph,
    labels: impl IntoIterator<Item = &'a ConceptLabel>,
) -> Vec<(ConceptLabel, f64)> {
    let present: BTreeSet<usize> = labels.into_iter().filter_map(|l| k.index_of(l)).collect();
    let mut scored: Vec<(ConceptLabel, f64, usize)> = k
        .compounds()
        .into_iter()
        .map(|c| {
            let parts = k.constituents(c);
            let hit = parts.iter().filter(|p| present.contains(p)).count();
            let score = if parts.is_empty() {
                0.0
            } else {
                hit as f64 / parts.len() as f64
            };
            (k.node(c).label.clone(), score, hit)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then(b.2.cmp(&a.2))
            .then(a.0.cmp(&b.0))
    });
    scored.into_iter().map(|(l, s, _)| (l, s)).collect()
}

/// Top-1 decision of the symbolic baseline: the best compound, or `None`
/// (background) when no compound has any constituent present.
pub fn baseline_prediction<'a>(
    k: &KnowledgeGraph,
    labels: impl IntoIterator<Item = &'a ConceptLabel>,
) -> Option<ConceptLabel> {
    symbolic_baseline(k, labels)
        .into_iter()
        .next()
        .filter(|(_, s)| *s > 0.0)
        .map(|(l, _)| l)
}

/// Concept names that belong to no compound in the default graph.
pub const CONTEXT_CONCEPTS: [&str; 8] = [
    "wall", "floor", "ceiling", "person", "window", "door", "sky", "plant",
];

/// Twenty indoor and outdoor scene types. Any two compounds share at most one
/// constituent, and every compound has between four and six.
pub const DEFAULT_COMPOUNDS: [(&str, &[&str]); 20] = [
    (
        "kitchen",
        &[
            "stove",
            "sink",
            "fridge",
            "microwave",
            "cabinet",
            "dishwasher",
        ],
    ),
    (
        "bathroom",
        &[
            "toilet",
            "bathtub",
            "shower",
            "towel",
            "mirror",
            "washbasin",
        ],
    ),
    (
        "bedroom",
        &["bed", "pillow", "wardrobe", "nightstand", "blanket"],
    ),
    (
        "living_room",
        &[
            "sofa",
            "television",
            "coffee_table",
            "armchair",
            "fireplace",
            "rug",
        ],
    ),
    (
        "dining_room",
        &["dining_table", "chair", "chandelier", "sideboard", "plate"],
    ),
    (
        "office",
        &[
            "desk",
            "computer",
            "office_chair",
            "monitor",
            "printer",
            "keyboard",
        ],
    ),
    (
        "classroom",
        &["blackboard", "student_desk", "projector", "globe", "chair"],
    ),
    (
        "library",
        &["bookshelf", "book", "reading_lamp", "reading_table"],
    ),
    ("harbor", &["boat", "water", "dock", "crane", "buoy"]),
    (
        "beach",
        &["sand", "water", "umbrella", "surfboard", "palm_tree"],
    ),
    ("forest", &["tree", "fern", "moss", "log", "mushroom"]),
    ("mountain", &["peak", "rock", "snow", "cliff", "glacier"]),
    (
        "street",
        &[
            "car",
            "streetlight",
            "crosswalk",
            "traffic_light",
            "sidewalk",
            "building",
        ],
    ),
    (
        "parking_lot",
        &["car", "parking_meter", "barrier", "ticket_machine"],
    ),
    ("park", &["bench", "tree", "grass", "fountain", "path"]),
    (
        "playground",
        &["slide", "swing", "sandbox", "seesaw", "climbing_frame"],
    ),
    (
        "airport",
        &[
            "airplane",
            "runway",
            "control_tower",
            "jet_bridge",
            "luggage_cart",
        ],
    ),
    ("highway", &["truck", "guardrail", "road_sign", "overpass"]),
    (
        "restaurant",
        &["counter", "menu_board", "waiter", "plate", "bar_stool"],
    ),
    (
        "garage",
        &["car", "workbench", "toolbox", "garage_door", "tire"],
    ),
];

/// The shipped 20-compound knowledge graph.
pub fn default_kg_file() -> KgFile {
    let mut concepts: Vec<String> = Vec::new();
    for (_, parts) in DEFAULT_COMPOUNDS {
        for p in parts {
            if !concepts.iter().any(|c| c == p) {
                concepts.push((*p).to_string());
            }
        }
    }
    concepts.extend(CONTEXT_CONCEPTS.iter().map(|s| s.to_string()));
    let compounds = DEFAULT_COMPOUNDS
        .iter()
        .map(|(label, parts)| CompoundSpec {
            label: (*label).into(),
            constituents: parts.iter().map(|s| s.to_string()).collect(),
            weights: None,
        })
        .collect();
    let extra = |src: &str, dst: &str, relation| ExtraEdge {
        src: src.into(),
        dst: dst.into(),
        relation,
    };
    KgFile {
        version: KG_VERSION.into(),
        concepts,
        compounds,
        extra_edges: vec![
            extra("stove", "fridge", KgRelation::RelatedTo),
            extra("bed", "pillow", KgRelation::RelatedTo),
            extra("chair", "desk", KgRelation::Affords),
            extra("bench", "path", KgRelation::RelatedTo),
        ],
    }
}

pub fn default_kg() -> KnowledgeGraph {
    from_file(&default_kg_file()).expect("default knowledge graph is valid")
}

/// Two-compound miniature: kitchen ← {stove, sink, fridge}, harbor ← {boat,
/// water, dock}.
pub fn mini_kg_file() -> KgFile {
    KgFile {
        version: KG_VERSION.into(),
        concepts: ["stove", "sink", "fridge", "boat", "water", "dock"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        compounds: vec![
            CompoundSpec {
                label: "kitchen".into(),
                constituents: vec!["stove".into(), "sink".into(), "fridge".into()],
                weights: None,
            },
            CompoundSpec {
                label: "harbor".into(),
                constituents: vec!["boat".into(), "water".into(), "dock".into()],
                weights: None,
            },
        ],
        extra_edges: vec![],
    }
}

pub fn mini_kg() -> KnowledgeGraph {
    from_file(&mini_kg_file()).expect("mini knowledge graph is valid")
}
