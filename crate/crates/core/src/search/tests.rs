use super::*;
use crate::graph::{BBox, ConceptLabel};
use crate::ingest::{build_scene_graph, DetectionRecord, IngestConfig};
use crate::kg::mini_kg;
use crate::merge::merge;
use crate::tensor::{Activation, FeedForwardNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn det(label: &str, x0: f64) -> DetectionRecord {
    DetectionRecord {
        label: label.into(),
        bbox: BBox::new(x0, 10.0, x0 + 40.0, 50.0),
        confidence: 0.9,
        embedding: None,
    }
}

fn ctx() -> ImageContext {
    ImageContext {
        width: 640,
        height: 480,
        embedding: None,
    }
}

fn scene(labels: &[&str], dim: usize) -> MergedGraph {
    let dets: Vec<_> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| det(l, 10.0 + 50.0 * i as f64))
        .collect();
    let cfg = IngestConfig {
        embedding_dim: dim,
        ..IngestConfig::default()
    };
    merge(build_scene_graph(&ctx(), &dets, &cfg).unwrap(), mini_kg())
}

fn small_dims(m: &MergedGraph) -> ModelDims {
    ModelDims {
        embedding: 4,
        hidden: 3,
        image: 2,
        edge: 2,
        message_hidden: 5,
        importance_hidden: 4,
        ..ModelDims::for_kg(m.kg())
    }
}

fn zeroed(mut model: SearchModel) -> SearchModel {
    for p in model.params_mut() {
        *p = Matrix::zeros(p.rows(), p.cols());
    }
    model
}

fn kg(m: &MergedGraph, label: &str) -> NodeId {
    m.kg_id(m.kg().index_of(&ConceptLabel::new(label).unwrap()).unwrap())
}

fn active(m: &MergedGraph, ids: &[NodeId]) -> ActiveSet {
    ActiveSet::new(m, ids.iter().copied().collect(), 0).unwrap()
}

fn all_states(m: &MergedGraph, model: &SearchModel) -> StateMap {
    initial_states(m, m.ids(), model).unwrap()
}

// Straight-line re-implementation of one propagation step.
fn mlp(net: &FeedForwardNet, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in net.layers() {
        let (i, o) = layer.weight.shape();
        let mut out = vec![0.0; o];
        for (j, cell) in out.iter_mut().enumerate() {
            let mut s = layer.bias.get(0, j);
            for (k, xk) in h.iter().enumerate().take(i) {
                s += xk * layer.weight.get(k, j);
            }
            *cell = match layer.activation {
                Activation::Relu => s.max(0.0),
                Activation::Identity => s,
                Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
            };
        }
        h = out;
    }
    h
}

fn oracle_propagate(
    m: &MergedGraph,
    states: &StateMap,
    a: &ActiveSet,
    model: &SearchModel,
) -> StateMap {
    let mut out = states.clone();
    for &v in a.active.iter().chain(&a.frontier) {
        let hv = &states[&v];
        let mut msgs: Vec<Vec<f64>> = Vec::new();
        for &(u, kind) in m.incident(v).unwrap() {
            if u == v || !a.active.contains(&u) {
                continue;
            }
            let mut x = states[&u].clone();
            x.extend(hv);
            x.extend(model.edge_embeddings.row(kind.index()));
            msgs.push(mlp(&model.message_net, &x));
        }
        if msgs.is_empty() {
            continue;
        }
        let n = msgs.len() as f64;
        let agg: Vec<f64> = (0..hv.len())
            .map(|j| msgs.iter().map(|mm| mm[j]).sum::<f64>() / n)
            .collect();
        let mut z = model.gate_bias.get(0, 0);
        for (j, x) in hv.iter().chain(&agg).enumerate() {
            z += x * model.gate_weight.get(j, 0);
        }
        let g = 1.0 / (1.0 + (-z).exp());
        let h: Vec<f64> = hv
            .iter()
            .zip(&agg)
            .map(|(h, a)| (1.0 - g) * h + g * a.tanh())
            .collect();
        out.insert(v, h);
    }
    out
}

#[test]
fn isolated_node_is_unchanged() {
    let m = merge(
        build_scene_graph(
            &ctx(),
            &[det("unicorn", 10.0)],
            &IngestConfig {
                embedding_dim: 4,
                ..IngestConfig::default()
            },
        )
        .unwrap(),
        mini_kg(),
    );
    let model = SearchModel::new(small_dims(&m), 1);
    let a = active(&m, &[NodeId(0)]);
    let s = all_states(&m, &model);
    assert_eq!(propagate(&m, &s, &a, &model).unwrap(), s);
}

#[test]
fn zero_weights_blend_toward_tanh_bias() {
    let m = scene(&["stove", "sink"], 4);
    let mut model = zeroed(SearchModel::new(small_dims(&m), 2));
    let h = model.dims.hidden;
    let last = model.message_net.layers().len() - 1;
    *model.message_net.params_mut()[2 * last + 1] = Matrix::filled(1, h, 0.3);
    model.gate_bias = Matrix::filled(1, 1, 0.2);
    let a = active(&m, &[NodeId(0), NodeId(1)]);
    let mut s = StateMap::new();
    for id in a.active.iter().chain(&a.frontier) {
        s.insert(*id, vec![0.7; h]);
    }
    let out = propagate(&m, &s, &a, &model).unwrap();
    let g = sigmoid(0.2);
    let want = (1.0 - g) * 0.7 + g * 0.3f64.tanh();
    for id in [NodeId(0), NodeId(1)] {
        for x in &out[&id] {
            assert!((x - want).abs() < 1e-15);
        }
    }
    assert_eq!(out[&NodeId(0)], out[&NodeId(1)]);
}

#[test]
fn propagate_matches_straight_line_oracle() {
    let m = scene(&["stove", "sink", "fridge"], 4);
    for seed in 0..10 {
        let model = SearchModel::new(small_dims(&m), seed);
        let a = active(&m, &[NodeId(0), NodeId(1), kg(&m, "stove")]);
        assert!(a.active.len() + a.frontier.len() >= 5);
        let s = all_states(&m, &model);
        let got = propagate(&m, &s, &a, &model).unwrap();
        let want = oracle_propagate(&m, &s, &a, &model);
        for (id, w) in &want {
            for (x, y) in got[id].iter().zip(w) {
                assert!((x - y).abs() < 1e-10, "node {id:?}");
            }
        }
    }
}

#[test]
fn missing_state_is_a_contract_violation() {
    let m = scene(&["stove", "sink"], 4);
    let model = SearchModel::new(small_dims(&m), 0);
    let a = active(&m, &[NodeId(0)]);
    let err = propagate(&m, &StateMap::new(), &a, &model).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    assert!(!err.is_input_error());
}

#[test]
fn empty_frontier_scores_nothing() {
    let m = scene(&["stove"], 4);
    let model = SearchModel::new(small_dims(&m), 0);
    let everything: Vec<NodeId> = m.ids().collect();
    let a = active(&m, &everything);
    assert!(a.frontier.is_empty());
    let s = all_states(&m, &model);
    assert!(
        score_frontier(&s, &a, &ctx(), &model, &SearchConfig::default())
            .unwrap()
            .is_empty()
    );
}

#[test]
fn zero_importance_net_gives_one_half() {
    let m = scene(&["stove", "sink"], 4);
    let mut model = SearchModel::new(small_dims(&m), 0);
    for p in model.importance_net.params_mut() {
        *p = Matrix::zeros(p.rows(), p.cols());
    }
    let a = active(&m, &[NodeId(0)]);
    let s = all_states(&m, &model);
    let scores = score_frontier(&s, &a, &ctx(), &model, &SearchConfig::default()).unwrap();
    assert_eq!(scores.keys().copied().collect::<BTreeSet<_>>(), a.frontier);
    assert!(scores.values().all(|&v| v == 0.5));
}

#[test]
fn image_conditioning_only_matters_with_a_nonzero_image() {
    let m = scene(&["stove", "sink"], 4);
    let model = SearchModel::new(small_dims(&m), 3);
    let a = active(&m, &[NodeId(0)]);
    let s = all_states(&m, &model);
    let object = SearchConfig::default();
    let image = SearchConfig {
        image_conditioning: true,
        ..object
    };
    let with = |e: Vec<f64>| ImageContext {
        embedding: Some(e),
        ..ctx()
    };
    let lit = with(vec![0.8, -0.6]);
    let a1 = score_frontier(&s, &a, &lit, &model, &object).unwrap();
    let a2 = score_frontier(&s, &a, &lit, &model, &image).unwrap();
    assert_ne!(a1, a2);
    let dark = with(vec![0.0, 0.0]);
    let b1 = score_frontier(&s, &a, &dark, &model, &object).unwrap();
    let b2 = score_frontier(&s, &a, &dark, &model, &image).unwrap();
    let bits = |m: &BTreeMap<NodeId, f64>| m.values().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&b1), bits(&b2));
    assert_eq!(bits(&a1), bits(&b1));
}

#[test]
fn expansion_threshold_is_strict() {
    let m = scene(&["stove", "sink"], 4);
    let a = active(&m, &[NodeId(0)]);
    let mut f = a.frontier.iter().copied();
    let (x, y) = (f.next().unwrap(), f.next().unwrap());
    let cfg = SearchConfig::default();

    let scores = BTreeMap::from([(x, 0.6), (y, 0.4)]);
    let (next, added, max) = expand(&m, &a, &scores, &cfg).unwrap();
    assert_eq!(added, BTreeSet::from([x]));
    assert_eq!(max, 0.6);
    assert_eq!(next.iteration, 1);
    assert!(next.active.contains(&x));
    assert_eq!(next.frontier, compute_frontier(&m, &next.active));

    let low = BTreeMap::from([(x, 0.5), (y, 0.2)]);
    let (same, added, max) = expand(&m, &a, &low, &cfg).unwrap();
    assert!(added.is_empty());
    assert_eq!(max, f64::NEG_INFINITY);
    assert_eq!(same.active, a.active);
}

#[test]
fn halting_rule() {
    let cfg = SearchConfig::default();
    let one = BTreeSet::from([NodeId(3)]);
    assert!(should_halt(&BTreeSet::new(), f64::NEG_INFINITY, 1, &cfg));
    assert!(!should_halt(&one, 0.9, 1, &cfg));
    assert!(should_halt(&one, 0.7, 1, &cfg));
    assert!(should_halt(&one, 0.75, 1, &cfg));
    assert!(should_halt(&one, 0.9, cfg.t_max, &cfg));
    let fixed = SearchConfig {
        dynamic_halting: false,
        ..cfg
    };
    assert!(!should_halt(&BTreeSet::new(), 0.1, 1, &fixed));
    assert!(should_halt(&BTreeSet::new(), 0.1, fixed.t_max, &fixed));
}

#[test]
fn config_bounds() {
    assert!(SearchConfig::default().validate().is_ok());
    for bad in [
        SearchConfig {
            gamma: 0.0,
            ..SearchConfig::default()
        },
        SearchConfig {
            lambda: 1.0,
            ..SearchConfig::default()
        },
        SearchConfig {
            t_max: 0,
            ..SearchConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn zero_classifier_masks_inactive_compounds() {
    let m = scene(&["stove", "sink"], 4);
    let model = zeroed(SearchModel::new(small_dims(&m), 0));
    let s = all_states(&m, &model);
    let a = active(&m, &[NodeId(0), kg(&m, "kitchen")]);
    let z = classify(&m, &s, &a, &model).unwrap();
    let classes = class_labels(m.kg());
    for (c, v) in classes.iter().zip(&z) {
        match c.as_str() {
            "kitchen" | BACKGROUND => assert_eq!(*v, 0.0),
            _ => assert_eq!(*v, f64::NEG_INFINITY),
        }
    }
    let b = active(&m, &[NodeId(0)]);
    let z = classify(&m, &s, &b, &model).unwrap();
    assert_eq!(z[0], f64::NEG_INFINITY, "kitchen inactive");
    assert_eq!(*z.last().unwrap(), 0.0);
}

#[test]
fn classify_matches_mean_pool_oracle() {
    let m = scene(&["stove", "sink", "boat"], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for seed in 0..20 {
        let model = SearchModel::new(small_dims(&m), seed);
        let ids: Vec<NodeId> = m.ids().filter(|_| rng.gen_bool(0.6)).collect();
        if ids.is_empty() {
            continue;
        }
        let a = active(&m, &ids);
        let s = all_states(&m, &model);
        let got = classify(&m, &s, &a, &model).unwrap();
        let h = model.dims.hidden;
        let pooled: Vec<f64> = (0..h)
            .map(|j| ids.iter().map(|id| s[id][j]).sum::<f64>() / ids.len() as f64)
            .collect();
        let compounds = m.kg().compounds();
        for (c, g) in got.iter().enumerate() {
            let live = c == compounds.len() || ids.contains(&m.kg_id(compounds[c]));
            if !live {
                assert_eq!(*g, f64::NEG_INFINITY);
                continue;
            }
            let mut want = model.classifier_bias.get(0, c);
            for (j, p) in pooled.iter().enumerate() {
                want += p * model.classifier_weight.get(j, c);
            }
            assert!((g - want).abs() < 1e-12);
        }
    }
}

#[test]
fn classify_rejects_empty_active_set() {
    let m = scene(&["stove"], 4);
    let model = SearchModel::new(small_dims(&m), 0);
    let a = ActiveSet {
        active: BTreeSet::new(),
        frontier: BTreeSet::new(),
        iteration: 0,
    };
    assert!(classify(&m, &StateMap::new(), &a, &model).is_err());
}

#[test]
fn search_covers_scene_and_is_deterministic() {
    let m = scene(&["stove", "sink", "fridge", "boat", "unicorn"], 4);
    let model = SearchModel::new(small_dims(&m), 5);
    let cfg = SearchConfig::default();
    let a = run_search(&m, &ctx(), &model, &cfg, 11).unwrap();
    let b = run_search(&m, &ctx(), &model, &cfg, 11).unwrap();
    assert_eq!(a, b);
    let covered = a.trace.covered();
    assert!((0..m.sg_count()).all(|i| covered.contains(&m.sg_id(i))));
    assert_eq!(a.scores.len(), model.dims.classes);
    assert!(a.scores[a.prediction].is_finite());
    assert!(a.scores.last().unwrap().is_finite());
}

#[test]
fn iteration_cap_of_one() {
    let m = scene(&["stove", "sink", "fridge"], 4);
    let model = SearchModel::new(small_dims(&m), 8);
    let cfg = SearchConfig {
        t_max: 1,
        gamma: 0.01,
        ..SearchConfig::default()
    };
    let out = run_search(&m, &ctx(), &model, &cfg, 0).unwrap();
    for r in &out.trace.rounds {
        assert_eq!(r.iterations.len(), 1);
        assert_eq!(r.halt, HaltReason::IterationCap);
    }
}

#[test]
fn inactive_compound_never_wins() {
    let m = scene(&["boat", "water"], 4);
    for seed in 0..20 {
        let model = SearchModel::new(small_dims(&m), seed);
        let out = run_search(&m, &ctx(), &model, &SearchConfig::default(), seed).unwrap();
        let covered = out.trace.covered();
        let compounds = m.kg().compounds();
        if out.prediction < compounds.len() {
            assert!(covered.contains(&m.kg_id(compounds[out.prediction])));
        }
        for (c, &k) in compounds.iter().enumerate() {
            if !covered.contains(&m.kg_id(k)) {
                assert_eq!(out.scores[c], f64::NEG_INFINITY);
            }
        }
    }
}

#[test]
fn replay_reproduces_trace() {
    let m = scene(&["stove", "sink", "fridge", "boat"], 4);
    let model = SearchModel::new(small_dims(&m), 4);
    let cfg = SearchConfig {
        gamma: 0.3,
        lambda: 0.4,
        ..SearchConfig::default()
    };
    let first = run_search(&m, &ctx(), &model, &cfg, 2).unwrap();
    let again =
        run_search_with(&m, &ctx(), &model, &cfg, 2, Expansion::Replay(&first.trace)).unwrap();
    assert_eq!(first.scores, again.scores);
    for (a, b) in first.trace.rounds.iter().zip(&again.trace.rounds) {
        assert_eq!(a.final_active, b.final_active);
        assert_eq!(a.iterations, b.iterations);
    }
}

#[test]
fn teacher_expansion_adds_targets_only() {
    let m = scene(&["stove", "sink"], 4);
    let model = SearchModel::new(small_dims(&m), 4);
    let targets = BTreeSet::from([
        NodeId(0),
        NodeId(1),
        kg(&m, "stove"),
        kg(&m, "sink"),
        kg(&m, "kitchen"),
    ]);
    let out = run_search_with(
        &m,
        &ctx(),
        &model,
        &SearchConfig::default(),
        0,
        Expansion::Teacher(&targets),
    )
    .unwrap();
    let round = &out.trace.rounds[0];
    assert!(round.final_active.iter().all(|n| targets.contains(n)));
    assert!(round.final_active.contains(&kg(&m, "kitchen")));
    assert!(out.scores[0].is_finite());
}

#[test]
fn fixed_importance_is_antitone_in_gamma() {
    let m = scene(&["stove", "sink", "fridge", "boat"], 4);
    let score = |n: NodeId| ((n.0 * 7919) % 100) as f64 / 100.0;
    let run = |gamma: f64| {
        let cfg = SearchConfig {
            gamma,
            dynamic_halting: false,
            ..SearchConfig::default()
        };
        search_with_fixed_importance(&m, &cfg, 9, &score).unwrap()
    };
    let lo = run(0.2);
    let hi = run(0.6);
    assert_eq!(lo.rounds[0].seed, hi.rounds[0].seed);
    let a: BTreeSet<_> = lo.rounds[0].final_active.iter().collect();
    let b: BTreeSet<_> = hi.rounds[0].final_active.iter().collect();
    assert!(b.is_subset(&a));
}

#[test]
fn trace_json_names_nodes() {
    let m = scene(&["stove", "sink"], 4);
    let model = SearchModel::new(small_dims(&m), 1);
    let out = run_search(&m, &ctx(), &model, &SearchConfig::default(), 0).unwrap();
    let v = out.trace.to_json(&m, &class_labels(m.kg()));
    let rounds = v.as_array().unwrap();
    assert_eq!(rounds.len(), out.trace.rounds.len());
    let r0 = &rounds[0];
    assert!(r0["seed"].as_str().unwrap().starts_with("sg:"));
    for it in r0["iterations"].as_array().unwrap() {
        assert_eq!(
            it["added"].as_array().unwrap().len(),
            it["importance"].as_array().unwrap().len()
        );
    }
    assert!(r0["scores"]["background"].is_number());
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let m = scene(&["stove"], 4);
    let model = SearchModel::new(small_dims(&m), 1);
    let ck = Checkpoint::new(model, SearchConfig::default(), m.kg());
    let json = ck.to_json();
    let back = Checkpoint::load_for(json.as_bytes(), m.kg()).unwrap();
    assert_eq!(back, ck);
    let other = crate::kg::default_kg();
    assert!(matches!(
        Checkpoint::load_for(json.as_bytes(), &other),
        Err(Error::CheckpointMismatch(_))
    ));
    let bumped = json.replace("model/1", "model/9");
    assert!(matches!(
        Checkpoint::from_json(bumped.as_bytes()),
        Err(Error::Version(_))
    ));
}
