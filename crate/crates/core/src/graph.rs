//! Typed graphs shared by every pipeline stage: the scene graph, the
//! knowledge graph, their merged union and the active subgraph of a search.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical lowercase concept name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConceptLabel(String);

impl ConceptLabel {
    pub fn new(name: &str) -> Result<Self> {
        let canonical = name.trim().to_lowercase();
        if canonical.is_empty() {
            return Err(Error::Validation("empty concept label".into()));
        }
        Ok(Self(canonical))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ConceptLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::new(&s)
    }
}

impl From<ConceptLabel> for String {
    fn from(l: ConceptLabel) -> String {
        l.0
    }
}

impl fmt::Display for ConceptLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Axis-aligned box in pixels, `(x0, y0)` top-left and `(x1, y1)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_well_ordered(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite())
            && self.x0 < self.x1
            && self.y0 < self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }

    /// `self` encloses `other` with no shared edge.
    pub fn strictly_encloses(&self, other: &BBox) -> bool {
        self.x0 < other.x0 && self.y0 < other.y0 && self.x1 > other.x1 && self.y1 > other.y1
    }
}

/// Spatial relation of a source box to a destination box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialRelation {
    LeftOf,
    RightOf,
    Above,
    Below,
    Overlaps,
    Contains,
    Inside,
    Near,
}

impl SpatialRelation {
    pub const ALL: [SpatialRelation; 8] = [
        SpatialRelation::LeftOf,
        SpatialRelation::RightOf,
        SpatialRelation::Above,
        SpatialRelation::Below,
        SpatialRelation::Overlaps,
        SpatialRelation::Contains,
        SpatialRelation::Inside,
        SpatialRelation::Near,
    ];

    pub fn converse(self) -> Self {
        use SpatialRelation::*;
        match self {
            LeftOf => RightOf,
            RightOf => LeftOf,
            Above => Below,
            Below => Above,
            Contains => Inside,
            Inside => Contains,
            Overlaps => Overlaps,
            Near => Near,
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&r| r == self).expect("listed")
    }

    pub fn as_str(self) -> &'static str {
        use SpatialRelation::*;
        match self {
            LeftOf => "left-of",
            RightOf => "right-of",
            Above => "above",
            Below => "below",
            Overlaps => "overlaps",
            Contains => "contains",
            Inside => "inside",
            Near => "near",
        }
    }
}

/// One detected object instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgNode {
    pub id: usize,
    pub label: ConceptLabel,
    pub bbox: BBox,
    pub confidence: f64,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: SpatialRelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    nodes: Vec<SgNode>,
    edges: Vec<SgEdge>,
}

impl SceneGraph {
    /// Checks endpoint validity, absence of self-edges, and that every edge
    /// has its converse stored.
    pub fn new(nodes: Vec<SgNode>, edges: Vec<SgEdge>) -> Result<Self> {
        let n = nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Contract(format!(
                    "scene node {i} carries id {}",
                    node.id
                )));
            }
        }
        let set: BTreeSet<(usize, usize, SpatialRelation)> =
            edges.iter().map(|e| (e.src, e.dst, e.relation)).collect();
        for e in &edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::Contract(format!(
                    "edge {}→{} out of range",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(Error::Contract(format!("self-edge on node {}", e.src)));
            }
            if !set.contains(&(e.dst, e.src, e.relation.converse())) {
                return Err(Error::Contract(format!(
                    "edge {}→{} {} lacks its converse",
                    e.src,
                    e.dst,
                    e.relation.as_str()
                )));
            }
        }
        Ok(Self { nodes, edges })
    }

    pub fn nodes(&self) -> &[SgNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[SgEdge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KgNodeKind {
    Primitive,
    Compound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KgRelation {
    PartOf,
    Affords,
    RelatedTo,
}

impl KgRelation {
    pub const ALL: [KgRelation; 3] = [
        KgRelation::PartOf,
        KgRelation::Affords,
        KgRelation::RelatedTo,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&r| r == self).expect("listed")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    pub label: ConceptLabel,
    pub kind: KgNodeKind,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KgEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: KgRelation,
    /// Optional constituent weight carried from the KG file. Not used for
    /// scoring.
    pub weight: Option<f64>,
}

/// Structural problems found by [`validate_kg`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KgViolation {
    DuplicateLabel(String),
    PartOfDirection { src: usize, dst: usize },
    EmptyCompound(String),
    DanglingIndex { src: usize, dst: usize },
    MisnumberedNode(usize),
}

impl fmt::Display for KgViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KgViolation::DuplicateLabel(l) => write!(f, "duplicate label `{l}`"),
            KgViolation::PartOfDirection { src, dst } => {
                write!(
                    f,
                    "part-of direction: edge {src}→{dst} must run primitive→compound"
                )
            }
            KgViolation::EmptyCompound(l) => write!(f, "empty compound `{l}`"),
            KgViolation::DanglingIndex { src, dst } => {
                write!(f, "dangling index in edge {src}→{dst}")
            }
            KgViolation::MisnumberedNode(i) => {
                write!(f, "node at position {i} has a different index")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    nodes: Vec<KgNode>,
    edges: Vec<KgEdge>,
    label_index: BTreeMap<ConceptLabel, usize>,
}

impl KnowledgeGraph {
    /// Assembles a graph without validating it; see [`validate_kg`]. When a
    /// label repeats, the index maps it to its first occurrence.
    pub fn from_parts(nodes: Vec<KgNode>, edges: Vec<KgEdge>) -> Self {
        let mut label_index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            label_index.entry(n.label.clone()).or_insert(i);
        }
        Self {
            nodes,
            edges,
            label_index,
        }
    }

    pub fn nodes(&self) -> &[KgNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[KgEdge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, label: &ConceptLabel) -> Option<usize> {
        self.label_index.get(label).copied()
    }

    pub fn node(&self, index: usize) -> &KgNode {
        &self.nodes[index]
    }

    /// Node indices of compound concepts, ascending. Class `i` of a search
    /// model is `compounds()[i]`.
    pub fn compounds(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.kind == KgNodeKind::Compound)
            .map(|n| n.index)
            .collect()
    }

    pub fn primitives(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.kind == KgNodeKind::Primitive)
            .map(|n| n.index)
            .collect()
    }

    /// Primitive node indices with a part-of edge into `compound`.
    pub fn constituents(&self, compound: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter(|e| e.relation == KgRelation::PartOf && e.dst == compound)
            .map(|e| e.src)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Reports every structural violation; an empty list means the graph is sound.
pub fn validate_kg(k: &KnowledgeGraph) -> Vec<KgViolation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, n) in k.nodes.iter().enumerate() {
        if n.index != i {
            out.push(KgViolation::MisnumberedNode(i));
        }
        if !seen.insert(&n.label) {
            out.push(KgViolation::DuplicateLabel(n.label.to_string()));
        }
    }
    let mut has_constituent = vec![false; k.nodes.len()];
    for e in &k.edges {
        if e.src >= k.nodes.len() || e.dst >= k.nodes.len() {
            out.push(KgViolation::DanglingIndex {
                src: e.src,
                dst: e.dst,
            });
            continue;
        }
        if e.relation == KgRelation::PartOf {
            if k.nodes[e.src].kind != KgNodeKind::Primitive
                || k.nodes[e.dst].kind != KgNodeKind::Compound
            {
                out.push(KgViolation::PartOfDirection {
                    src: e.src,
                    dst: e.dst,
                });
            } else {
                has_constituent[e.dst] = true;
            }
        }
    }
    for n in &k.nodes {
        if n.kind == KgNodeKind::Compound && !has_constituent[n.index] {
            out.push(KgViolation::EmptyCompound(n.label.to_string()));
        }
    }
    out
}

/// Edge type as seen by the search: 8 spatial kinds, 3 KG kinds and the
/// SG↔KG link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Spatial(SpatialRelation),
    Kg(KgRelation),
    Link,
}

impl EdgeKind {
    pub const COUNT: usize = 12;

    pub fn index(self) -> usize {
        match self {
            EdgeKind::Spatial(r) => r.index(),
            EdgeKind::Kg(r) => 8 + r.index(),
            EdgeKind::Link => 11,
        }
    }
}

/// Global node id in a [`MergedGraph`]: scene nodes first, then KG nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Sg(usize),
    Kg(usize),
}

/// Union of a scene graph and a knowledge graph plus label links.
#[derive(Debug, Clone)]
pub struct MergedGraph {
    sg: SceneGraph,
    kg: KnowledgeGraph,
    links: Vec<(usize, usize)>,
    adjacency: Vec<Vec<(NodeId, EdgeKind)>>,
}

impl MergedGraph {
    /// Builds the unified adjacency. `links` pairs scene node indices with KG
    /// node indices. Scene edges are stored per direction already; KG and
    /// link edges are entered in both adjacency lists.
    pub(crate) fn from_parts(
        sg: SceneGraph,
        kg: KnowledgeGraph,
        links: Vec<(usize, usize)>,
    ) -> Self {
        let n_sg = sg.len();
        let mut adjacency = vec![Vec::new(); n_sg + kg.len()];
        for e in sg.edges() {
            // message from src arrives at dst tagged with src's relation to dst
            adjacency[e.dst].push((NodeId(e.src), EdgeKind::Spatial(e.relation)));
        }
        for e in kg.edges() {
            let (a, b) = (n_sg + e.src, n_sg + e.dst);
            adjacency[b].push((NodeId(a), EdgeKind::Kg(e.relation)));
            adjacency[a].push((NodeId(b), EdgeKind::Kg(e.relation)));
        }
        for &(s, k) in &links {
            adjacency[s].push((NodeId(n_sg + k), EdgeKind::Link));
            adjacency[n_sg + k].push((NodeId(s), EdgeKind::Link));
        }
        Self {
            sg,
            kg,
            links,
            adjacency,
        }
    }

    pub fn sg(&self) -> &SceneGraph {
        &self.sg
    }

    pub fn kg(&self) -> &KnowledgeGraph {
        &self.kg
    }

    pub fn links(&self) -> &[(usize, usize)] {
        &self.links
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn sg_count(&self) -> usize {
        self.sg.len()
    }

    pub fn sg_id(&self, i: usize) -> NodeId {
        NodeId(i)
    }

    pub fn kg_id(&self, i: usize) -> NodeId {
        NodeId(self.sg.len() + i)
    }

    pub fn resolve(&self, id: NodeId) -> Result<NodeRef> {
        if id.0 < self.sg.len() {
            Ok(NodeRef::Sg(id.0))
        } else if id.0 < self.adjacency.len() {
            Ok(NodeRef::Kg(id.0 - self.sg.len()))
        } else {
            Err(Error::InvalidNode(id.0))
        }
    }

    pub fn is_sg(&self, id: NodeId) -> bool {
        id.0 < self.sg.len()
    }

    /// Incident edges of `id` as `(neighbor, kind)` pairs.
    pub fn incident(&self, id: NodeId) -> Result<&[(NodeId, EdgeKind)]> {
        self.adjacency
            .get(id.0)
            .map(Vec::as_slice)
            .ok_or(Error::InvalidNode(id.0))
    }

    pub fn label(&self, id: NodeId) -> Result<&ConceptLabel> {
        Ok(match self.resolve(id)? {
            NodeRef::Sg(i) => &self.sg.nodes()[i].label,
            NodeRef::Kg(i) => &self.kg.node(i).label,
        })
    }

    /// Human-readable name used in traces: `sg:<index>:<label>` or `kg:<label>`.
    pub fn node_name(&self, id: NodeId) -> String {
        match self.resolve(id) {
            Ok(NodeRef::Sg(i)) => format!("sg:{i}:{}", self.sg.nodes()[i].label),
            Ok(NodeRef::Kg(i)) => format!("kg:{}", self.kg.node(i).label),
            Err(_) => format!("invalid:{}", id.0),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.adjacency.len()).map(NodeId)
    }
}

/// Every node sharing an edge with `id`, in either direction.
pub fn neighbors(m: &MergedGraph, id: NodeId) -> Result<BTreeSet<NodeId>> {
    Ok(m.incident(id)?
        .iter()
        .map(|&(n, _)| n)
        .filter(|&n| n != id)
        .collect())
}

/// Nodes adjacent to `active` that are not themselves active.
pub fn compute_frontier(m: &MergedGraph, active: &BTreeSet<NodeId>) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    for &a in active {
        if let Ok(inc) = m.incident(a) {
            for &(n, _) in inc {
                if !active.contains(&n) {
                    out.insert(n);
                }
            }
        }
    }
    out
}

/// The active subgraph of one search round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub active: BTreeSet<NodeId>,
    pub frontier: BTreeSet<NodeId>,
    pub iteration: usize,
}

impl ActiveSet {
    pub fn new(m: &MergedGraph, active: BTreeSet<NodeId>, iteration: usize) -> Result<Self> {
        if let Some(bad) = active.iter().find(|id| id.0 >= m.node_count()) {
            return Err(Error::InvalidNode(bad.0));
        }
        let frontier = compute_frontier(m, &active);
        Ok(Self {
            active,
            frontier,
            iteration,
        })
    }
}
