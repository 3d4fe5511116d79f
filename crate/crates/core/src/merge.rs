//! Merging a scene graph with a knowledge graph and seeding search rounds.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{
    ActiveSet, EdgeKind, KgNodeKind, KnowledgeGraph, MergedGraph, NodeId, SceneGraph,
};

/// Joins `s` and `k` into one graph, linking each scene node to the
/// primitive KG node with the same label.
pub fn merge(s: SceneGraph, k: KnowledgeGraph) -> MergedGraph {
    let links = s
        .nodes()
        .iter()
        .filter_map(|n| {
            k.index_of(&n.label)
                .filter(|&i| k.node(i).kind == KgNodeKind::Primitive)
                .map(|i| (n.id, i))
        })
        .collect();
    MergedGraph::from_parts(s, k, links)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Seeding {
    Seeded {
        seed: NodeId,
        active: ActiveSet,
    },
    /// Every scene node is excluded; nothing left to seed.
    FullyCovered,
}

/// Picks one scene node outside `exclude` uniformly at random and activates
/// it together with its scene neighbors and the KG nodes linked to any of
/// them.
pub fn seed_active(m: &MergedGraph, rng_seed: u64, exclude: &BTreeSet<NodeId>) -> Result<Seeding> {
    let eligible: Vec<NodeId> = (0..m.sg_count())
        .map(|i| m.sg_id(i))
        .filter(|id| !exclude.contains(id))
        .collect();
    if eligible.is_empty() {
        return Ok(Seeding::FullyCovered);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let seed = eligible[rng.gen_range(0..eligible.len())];

    let mut scene = BTreeSet::from([seed]);
    for &(n, kind) in m.incident(seed)? {
        if matches!(kind, EdgeKind::Spatial(_)) {
            scene.insert(n);
        }
    }
    let mut active = scene.clone();
    for &s in &scene {
        for &(n, kind) in m.incident(s)? {
            if kind == EdgeKind::Link {
                active.insert(n);
            }
        }
    }
    Ok(Seeding::Seeded {
        seed,
        active: ActiveSet::new(m, active, 0)?,
    })
}

/// Seed for the next re-seeding round, or `None` once every scene node has
/// been covered.
pub fn reseed_plan(
    m: &MergedGraph,
    covered: &BTreeSet<NodeId>,
    rng_seed: u64,
) -> Result<Option<(NodeId, ActiveSet)>> {
    Ok(match seed_active(m, rng_seed, covered)? {
        Seeding::Seeded { seed, active } => Some((seed, active)),
        Seeding::FullyCovered => None,
    })
}

/// Seed used for round `round` of a search seeded with `rng_seed`.
pub fn round_seed(rng_seed: u64, round: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = rng_seed ^ (round as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{neighbors, BBox, ConceptLabel, SgEdge, SgNode, SpatialRelation};
    use crate::kg::mini_kg;

    fn node(i: usize, label: &str) -> SgNode {
        SgNode {
            id: i,
            label: ConceptLabel::new(label).unwrap(),
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            confidence: 1.0,
            embedding: vec![0.0; 4],
        }
    }

    fn pair(a: usize, b: usize) -> [SgEdge; 2] {
        [
            SgEdge {
                src: a,
                dst: b,
                relation: SpatialRelation::LeftOf,
            },
            SgEdge {
                src: b,
                dst: a,
                relation: SpatialRelation::RightOf,
            },
        ]
    }

    fn stove_sink() -> MergedGraph {
        let sg =
            SceneGraph::new(vec![node(0, "stove"), node(1, "sink")], pair(0, 1).to_vec()).unwrap();
        merge(sg, mini_kg())
    }

    fn kg_node(m: &MergedGraph, label: &str) -> NodeId {
        m.kg_id(m.kg().index_of(&ConceptLabel::new(label).unwrap()).unwrap())
    }

    #[test]
    fn merge_counts() {
        let m = stove_sink();
        assert_eq!(m.node_count(), 10);
        assert_eq!(m.links().len(), 2);
    }

    #[test]
    fn unknown_label_stays_unlinked() {
        let sg = SceneGraph::new(vec![node(0, "unicorn")], vec![]).unwrap();
        let m = merge(sg, mini_kg());
        assert_eq!(m.node_count(), 9);
        assert!(m.links().is_empty());
        assert!(neighbors(&m, NodeId(0)).unwrap().is_empty());
    }

    #[test]
    fn neighborhood_examples() {
        let m = stove_sink();
        let stove_kg = kg_node(&m, "stove");
        let want: BTreeSet<_> = [kg_node(&m, "kitchen"), NodeId(0)].into();
        assert_eq!(neighbors(&m, stove_kg).unwrap(), want);

        let sg = SceneGraph::new(
            vec![node(0, "stove"), node(1, "sink"), node(2, "fridge")],
            [pair(0, 1), pair(0, 2)].concat(),
        )
        .unwrap();
        let m3 = merge(sg, mini_kg());
        assert_eq!(neighbors(&m3, NodeId(0)).unwrap().len(), 3);

        let frontier = crate::graph::compute_frontier(&m, &BTreeSet::from([NodeId(0)]));
        assert_eq!(frontier, BTreeSet::from([NodeId(1), stove_kg]));
    }

    #[test]
    fn seed_single_node() {
        let sg = SceneGraph::new(vec![node(0, "stove")], vec![]).unwrap();
        let m = merge(sg, mini_kg());
        match seed_active(&m, 1, &BTreeSet::new()).unwrap() {
            Seeding::Seeded { seed, active } => {
                assert_eq!(seed, NodeId(0));
                assert_eq!(
                    active.active,
                    BTreeSet::from([NodeId(0), kg_node(&m, "stove")])
                );
                assert_eq!(active.iteration, 0);
                assert_eq!(active.frontier, BTreeSet::from([kg_node(&m, "kitchen")]));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seed_pulls_in_scene_neighbors_and_links() {
        let m = stove_sink();
        let exclude = BTreeSet::from([NodeId(1)]);
        let Seeding::Seeded { seed, active } = seed_active(&m, 3, &exclude).unwrap() else {
            panic!()
        };
        assert_eq!(seed, NodeId(0));
        let want: BTreeSet<_> = [
            NodeId(0),
            NodeId(1),
            kg_node(&m, "stove"),
            kg_node(&m, "sink"),
        ]
        .into();
        assert_eq!(active.active, want);
    }

    #[test]
    fn full_exclusion_is_covered() {
        let m = stove_sink();
        let all = BTreeSet::from([NodeId(0), NodeId(1)]);
        assert_eq!(seed_active(&m, 0, &all).unwrap(), Seeding::FullyCovered);
        assert!(reseed_plan(&m, &all, 0).unwrap().is_none());
    }

    #[test]
    fn reseed_draws_from_all_when_nothing_covered() {
        let sg = SceneGraph::new(
            vec![node(0, "stove"), node(1, "sink"), node(2, "boat")],
            vec![],
        )
        .unwrap();
        let m = merge(sg, mini_kg());
        let mut seen = BTreeSet::new();
        for s in 0..64 {
            let (seed, _) = reseed_plan(&m, &BTreeSet::new(), s).unwrap().unwrap();
            seen.insert(seed);
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn seeding_is_deterministic() {
        let m = stove_sink();
        let a = seed_active(&m, 99, &BTreeSet::new()).unwrap();
        let b = seed_active(&m, 99, &BTreeSet::new()).unwrap();
        assert_eq!(a, b);
        assert_ne!(round_seed(5, 0), round_seed(5, 1));
    }
}
