//! The merged-graph search network.
//!
//! A search runs in rounds. Each round is seeded from a scene node not yet
//! covered, then alternates propagation over the active subgraph with
//! importance scoring of its frontier. Frontier nodes scoring above `gamma`
//! join the active set; the round halts when nothing joins, when no joining
//! node scores above `lambda`, or at `t_max`. A linear head classifies the
//! final active set, with compounds whose KG node stayed inactive masked out.
//! Round logits are pooled into one score per class.

mod model;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub(crate) use model::BoundModel;
pub use model::{class_labels, Checkpoint, ModelDims, SearchModel, BACKGROUND, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::graph::{compute_frontier, ActiveSet, EdgeKind, MergedGraph, NodeId, NodeRef};
use crate::ingest::ImageContext;
use crate::merge::{reseed_plan, round_seed};
use crate::tensor::{sigmoid, Matrix, Tape, Var};

/// How per-round logits are combined into the final class scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundAggregation {
    #[default]
    Max,
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Importance threshold: frontier nodes scoring strictly above join.
    pub gamma: f64,
    /// Halting threshold on the best newly added importance.
    pub lambda: f64,
    pub t_max: usize,
    pub image_conditioning: bool,
    /// When false, every round runs exactly `t_max` iterations.
    pub dynamic_halting: bool,
    pub aggregation: RoundAggregation,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            lambda: 0.75,
            t_max: 10,
            image_conditioning: false,
            dynamic_halting: true,
            aggregation: RoundAggregation::Max,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.gamma) {
            return Err(Error::Validation(format!(
                "gamma {} not in (0, 1)",
                self.gamma
            )));
        }
        if !open(self.lambda) {
            return Err(Error::Validation(format!(
                "lambda {} not in (0, 1)",
                self.lambda
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Validation("t_max must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HaltReason {
    NothingAdded,
    BelowLambda,
    IterationCap,
    /// A replayed round ran out of recorded iterations.
    ReplayEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub added: Vec<NodeId>,
    pub importance: Vec<f64>,
    pub frontier_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub seed: NodeId,
    pub initial_active: Vec<NodeId>,
    pub iterations: Vec<IterationTrace>,
    pub final_active: Vec<NodeId>,
    pub halt: HaltReason,
    /// Masked class logits of this round; masked entries are `-inf`.
    #[serde(skip)]
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchTrace {
    pub rounds: Vec<RoundTrace>,
}

impl SearchTrace {
    /// Scene and KG nodes active at the end of any round.
    pub fn covered(&self) -> BTreeSet<NodeId> {
        self.rounds
            .iter()
            .flat_map(|r| r.final_active.iter().copied())
            .collect()
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.rounds.is_empty() {
            return 0.0;
        }
        self.rounds
            .iter()
            .map(|r| r.iterations.len())
            .sum::<usize>() as f64
            / self.rounds.len() as f64
    }

    /// One JSON object per round with node names resolved against `m`.
    pub fn to_json(&self, m: &MergedGraph, classes: &[String]) -> serde_json::Value {
        let names = |ids: &[NodeId]| ids.iter().map(|&id| m.node_name(id)).collect::<Vec<_>>();
        let rounds = self
            .rounds
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let scores: serde_json::Map<String, serde_json::Value> = classes
                    .iter()
                    .zip(&r.logits)
                    .map(|(c, &v)| (c.clone(), finite_or_null(v)))
                    .collect();
                serde_json::json!({
                    "round": i,
                    "seed": m.node_name(r.seed),
                    "initial_active": names(&r.initial_active),
                    "iterations": r.iterations.iter().map(|it| serde_json::json!({
                        "added": names(&it.added),
                        "importance": it.importance,
                        "frontier_size": it.frontier_size,
                    })).collect::<Vec<_>>(),
                    "final_active": names(&r.final_active),
                    "halt": r.halt,
                    "scores": scores,
                })
            })
            .collect();
        serde_json::Value::Array(rounds)
    }
}

pub(crate) fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// Expansion decisions for a search.
#[derive(Debug, Clone, Copy)]
pub enum Expansion<'a> {
    /// Threshold the model's importance scores at `gamma`.
    Model,
    /// Add exactly the frontier nodes in the given target set.
    Teacher(&'a BTreeSet<NodeId>),
    /// Repeat the additions recorded in a previous trace.
    Replay(&'a SearchTrace),
}

/// Adds every frontier node scoring strictly above `gamma`. Returns the next
/// active set, the added nodes and the highest added importance (`-inf`
/// when nothing was added).
pub fn expand(
    m: &MergedGraph,
    active: &ActiveSet,
    scores: &BTreeMap<NodeId, f64>,
    cfg: &SearchConfig,
) -> Result<(ActiveSet, BTreeSet<NodeId>, f64)> {
    let added: BTreeSet<NodeId> = scores
        .iter()
        .filter(|(_, &s)| s > cfg.gamma)
        .map(|(&n, _)| n)
        .collect();
    add_nodes(m, active, added, scores)
}

fn add_nodes(
    m: &MergedGraph,
    active: &ActiveSet,
    added: BTreeSet<NodeId>,
    scores: &BTreeMap<NodeId, f64>,
) -> Result<(ActiveSet, BTreeSet<NodeId>, f64)> {
    if let Some(stray) = added.iter().find(|n| !active.frontier.contains(n)) {
        return Err(Error::Contract(format!(
            "node {} is not on the frontier",
            stray.0
        )));
    }
    let max = added
        .iter()
        .map(|n| scores.get(n).copied().unwrap_or(f64::NEG_INFINITY))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut next = active.active.clone();
    next.extend(added.iter().copied());
    let frontier = compute_frontier(m, &next);
    Ok((
        ActiveSet {
            active: next,
            frontier,
            iteration: active.iteration + 1,
        },
        added,
        max,
    ))
}

/// Dynamic halting rule, evaluated after iteration `t`.
pub fn should_halt(
    added: &BTreeSet<NodeId>,
    max_added_importance: f64,
    t: usize,
    cfg: &SearchConfig,
) -> bool {
    halt_reason(added, max_added_importance, t, cfg).is_some()
}

fn halt_reason(
    added: &BTreeSet<NodeId>,
    max_added: f64,
    t: usize,
    cfg: &SearchConfig,
) -> Option<HaltReason> {
    if t >= cfg.t_max {
        return Some(HaltReason::IterationCap);
    }
    if !cfg.dynamic_halting {
        return None;
    }
    if added.is_empty() {
        Some(HaltReason::NothingAdded)
    } else if max_added <= cfg.lambda {
        Some(HaltReason::BelowLambda)
    } else {
        None
    }
}

/// Hooks the round loop calls into; implemented by the network and by
/// fixed-score drivers.
pub(crate) trait RoundDriver {
    fn begin_round(&mut self, m: &MergedGraph, active: &ActiveSet) -> Result<()>;
    /// Propagates over `active` and returns an importance for every frontier
    /// node.
    fn step(&mut self, m: &MergedGraph, active: &ActiveSet) -> Result<BTreeMap<NodeId, f64>>;
    /// Returns the round's masked logits.
    fn end_round(&mut self, m: &MergedGraph, active: &ActiveSet) -> Result<Vec<f64>>;
}

pub(crate) fn search_loop<D: RoundDriver>(
    m: &MergedGraph,
    cfg: &SearchConfig,
    rng_seed: u64,
    driver: &mut D,
    expansion: Expansion<'_>,
) -> Result<SearchTrace> {
    cfg.validate()?;
    if m.sg_count() == 0 {
        return Err(Error::EmptyScene);
    }
    let mut covered = BTreeSet::new();
    let mut rounds = Vec::new();
    while let Some((seed, mut active)) =
        reseed_plan(m, &covered, round_seed(rng_seed, rounds.len()))?
    {
        let r = rounds.len();
        let replay = match expansion {
            Expansion::Replay(trace) => Some(
                trace
                    .rounds
                    .get(r)
                    .ok_or_else(|| Error::Contract(format!("replay trace has no round {r}")))?,
            ),
            _ => None,
        };
        driver.begin_round(m, &active)?;
        let initial_active: Vec<NodeId> = active.active.iter().copied().collect();
        let mut iterations = Vec::new();
        let halt = loop {
            let scores = driver.step(m, &active)?;
            let frontier_size = active.frontier.len();
            let (next, added, max) = match expansion {
                Expansion::Model => expand(m, &active, &scores, cfg)?,
                Expansion::Teacher(targets) => {
                    let chosen = active.frontier.intersection(targets).copied().collect();
                    add_nodes(m, &active, chosen, &scores)?
                }
                Expansion::Replay(_) => {
                    let rec = &replay.expect("replay round").iterations[iterations.len()];
                    add_nodes(m, &active, rec.added.iter().copied().collect(), &scores)?
                }
            };
            iterations.push(IterationTrace {
                importance: added
                    .iter()
                    .map(|n| scores.get(n).copied().unwrap_or(f64::NAN))
                    .collect(),
                added: added.iter().copied().collect(),
                frontier_size,
            });
            active = next;
            let t = active.iteration;
            let reason = match expansion {
                Expansion::Model => halt_reason(&added, max, t, cfg),
                Expansion::Teacher(_) => {
                    if t >= cfg.t_max {
                        Some(HaltReason::IterationCap)
                    } else if added.is_empty() {
                        Some(HaltReason::NothingAdded)
                    } else {
                        None
                    }
                }
                Expansion::Replay(_) => {
                    let rec = replay.expect("replay round");
                    (iterations.len() >= rec.iterations.len()).then_some(HaltReason::ReplayEnd)
                }
            };
            if let Some(reason) = reason {
                break reason;
            }
        };
        covered.extend(active.active.iter().copied().filter(|&id| m.is_sg(id)));
        let logits = driver.end_round(m, &active)?;
        rounds.push(RoundTrace {
            seed,
            initial_active,
            iterations,
            final_active: active.active.iter().copied().collect(),
            halt,
            logits,
        });
    }
    Ok(SearchTrace { rounds })
}

/// Runs the round loop with a fixed, context-free importance per node.
/// Classification is skipped; only the expansion dynamics are traced.
pub fn search_with_fixed_importance(
    m: &MergedGraph,
    cfg: &SearchConfig,
    rng_seed: u64,
    importance: &dyn Fn(NodeId) -> f64,
) -> Result<SearchTrace> {
    struct Fixed<'a>(&'a dyn Fn(NodeId) -> f64);
    impl RoundDriver for Fixed<'_> {
        fn begin_round(&mut self, _: &MergedGraph, _: &ActiveSet) -> Result<()> {
            Ok(())
        }
        fn step(&mut self, _: &MergedGraph, active: &ActiveSet) -> Result<BTreeMap<NodeId, f64>> {
            Ok(active.frontier.iter().map(|&n| (n, (self.0)(n))).collect())
        }
        fn end_round(&mut self, _: &MergedGraph, _: &ActiveSet) -> Result<Vec<f64>> {
            Ok(Vec::new())
        }
    }
    search_loop(m, cfg, rng_seed, &mut Fixed(importance), Expansion::Model)
}

pub(crate) type VarStates = BTreeMap<NodeId, Var>;

/// Tape-backed evaluation context for one search.
pub struct Session<'m> {
    pub(crate) tape: Tape,
    model: &'m SearchModel,
    bound: BoundModel,
    kg_rows: BTreeMap<usize, Var>,
    edge_rows: [Option<Var>; EdgeKind::COUNT],
}

impl<'m> Session<'m> {
    pub fn new(model: &'m SearchModel, recording: bool) -> Self {
        let mut tape = if recording {
            Tape::new()
        } else {
            Tape::inference()
        };
        let bound = model.bind(&mut tape);
        Self {
            tape,
            model,
            bound,
            kg_rows: BTreeMap::new(),
            edge_rows: [None; EdgeKind::COUNT],
        }
    }

    /// Continues on an existing tape whose vars already hold the model's
    /// parameters.
    pub(crate) fn with_tape(model: &'m SearchModel, tape: Tape, vars: &[Var]) -> Result<Self> {
        let bound = model.bind_vars(vars)?;
        Ok(Self {
            tape,
            model,
            bound,
            kg_rows: BTreeMap::new(),
            edge_rows: [None; EdgeKind::COUNT],
        })
    }

    pub fn model(&self) -> &SearchModel {
        self.model
    }

    fn edge_row(&mut self, kind: EdgeKind) -> Result<Var> {
        let i = kind.index();
        if let Some(v) = self.edge_rows[i] {
            return Ok(v);
        }
        let v = self.tape.row(self.bound.edge_embeddings, i)?;
        self.edge_rows[i] = Some(v);
        Ok(v)
    }

    /// Initial state: projected embedding for scene nodes, table row for KG
    /// nodes.
    pub(crate) fn init_state(&mut self, m: &MergedGraph, id: NodeId) -> Result<Var> {
        match m.resolve(id)? {
            NodeRef::Sg(i) => {
                let e = &m.sg().nodes()[i].embedding;
                if e.len() != self.model.dims.embedding {
                    return Err(Error::Validation(format!(
                        "scene node {i} embedding has {} values, model expects {}",
                        e.len(),
                        self.model.dims.embedding
                    )));
                }
                let x = self.tape.constant(Matrix::row_vector(e)?);
                Ok(self.tape.matmul(x, self.bound.sg_projection)?)
            }
            NodeRef::Kg(i) => {
                if let Some(&v) = self.kg_rows.get(&i) {
                    return Ok(v);
                }
                let v = self.tape.row(self.bound.kg_embeddings, i)?;
                self.kg_rows.insert(i, v);
                Ok(v)
            }
        }
    }

    pub(crate) fn ensure_states(
        &mut self,
        m: &MergedGraph,
        states: &mut VarStates,
        active: &ActiveSet,
    ) -> Result<()> {
        for &id in active.active.iter().chain(&active.frontier) {
            if let std::collections::btree_map::Entry::Vacant(slot) = states.entry(id) {
                slot.insert(self.init_state(m, id)?);
            }
        }
        Ok(())
    }

    pub(crate) fn propagate(
        &mut self,
        m: &MergedGraph,
        states: &VarStates,
        active: &ActiveSet,
    ) -> Result<VarStates> {
        let missing = |id: NodeId| Error::Contract(format!("no state for node {}", id.0));
        let mut next = states.clone();
        for &v in active.active.iter().chain(&active.frontier) {
            let hv = *states.get(&v).ok_or_else(|| missing(v))?;
            let mut messages = Vec::new();
            for &(u, kind) in m.incident(v)? {
                if u == v || !active.active.contains(&u) {
                    continue;
                }
                let hu = *states.get(&u).ok_or_else(|| missing(u))?;
                let e = self.edge_row(kind)?;
                let x = self.tape.concat(&[hu, hv, e])?;
                messages.push(self.bound.message_net.forward(&mut self.tape, x)?);
            }
            if messages.is_empty() {
                continue;
            }
            let tape = &mut self.tape;
            let agg = tape.mean(&messages)?;
            let update = tape.tanh(agg)?;
            let gate_in = tape.concat(&[hv, agg])?;
            let gz = tape.matmul(gate_in, self.bound.gate_weight)?;
            let gz = tape.add(gz, self.bound.gate_bias)?;
            let g = tape.sigmoid(gz)?;
            let keep = tape.one_minus(g)?;
            let old = tape.scale_by(hv, keep)?;
            let new = tape.scale_by(update, g)?;
            next.insert(v, tape.add(old, new)?);
        }
        Ok(next)
    }

    /// Importance logits (pre-sigmoid) for every frontier node.
    pub(crate) fn score_frontier(
        &mut self,
        states: &VarStates,
        active: &ActiveSet,
        image: Var,
    ) -> Result<BTreeMap<NodeId, Var>> {
        let mut out = BTreeMap::new();
        if active.frontier.is_empty() {
            return Ok(out);
        }
        let context = self.mean_state(states, active)?;
        for &n in &active.frontier {
            let hn = *states
                .get(&n)
                .ok_or_else(|| Error::Contract(format!("no state for frontier node {}", n.0)))?;
            let x = self.tape.concat(&[hn, context, image])?;
            out.insert(n, self.bound.importance_net.forward(&mut self.tape, x)?);
        }
        Ok(out)
    }

    fn mean_state(&mut self, states: &VarStates, active: &ActiveSet) -> Result<Var> {
        let vars = active
            .active
            .iter()
            .map(|id| {
                states
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("no state for node {}", id.0)))
            })
            .collect::<Result<Vec<_>>>()?;
        if vars.is_empty() {
            return Err(Error::Contract("empty active set".into()));
        }
        Ok(self.tape.mean(&vars)?)
    }

    /// Class logits of the mean active state and the activation mask.
    pub(crate) fn classify(
        &mut self,
        m: &MergedGraph,
        states: &VarStates,
        active: &ActiveSet,
    ) -> Result<(Var, Vec<bool>)> {
        let pooled = self.mean_state(states, active)?;
        let z = self.tape.matmul(pooled, self.bound.classifier_weight)?;
        let z = self.tape.add(z, self.bound.classifier_bias)?;
        Ok((z, class_mask(m, active)))
    }

    /// Constant 1×D_img image input, zeroed without image conditioning.
    pub(crate) fn image_input(&mut self, ctx: &ImageContext, cfg: &SearchConfig) -> Result<Var> {
        let dim = self.model.dims.image;
        let v = match &ctx.embedding {
            Some(e) if e.len() != dim => {
                return Err(Error::Validation(format!(
                    "image embedding has {} values, model expects {dim}",
                    e.len()
                )))
            }
            Some(e) if cfg.image_conditioning => e.clone(),
            _ => vec![0.0; dim],
        };
        Ok(self.tape.constant(Matrix::row_vector(&v)?))
    }
}

/// `true` for the background class and for compounds whose KG node is active.
pub fn class_mask(m: &MergedGraph, active: &ActiveSet) -> Vec<bool> {
    let mut mask: Vec<bool> = m
        .kg()
        .compounds()
        .into_iter()
        .map(|c| active.active.contains(&m.kg_id(c)))
        .collect();
    mask.push(true);
    mask
}

/// A frontier node's importance logit.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ScoredNode {
    pub node: NodeId,
    pub logit: Var,
}

struct NetDriver<'s, 'm> {
    session: &'s mut Session<'m>,
    image: Var,
    states: VarStates,
    scored: Vec<ScoredNode>,
    round_logits: Vec<(Var, Vec<bool>)>,
}

impl RoundDriver for NetDriver<'_, '_> {
    fn begin_round(&mut self, _: &MergedGraph, _: &ActiveSet) -> Result<()> {
        self.states.clear();
        Ok(())
    }

    fn step(&mut self, m: &MergedGraph, active: &ActiveSet) -> Result<BTreeMap<NodeId, f64>> {
        let mut states = std::mem::take(&mut self.states);
        self.session.ensure_states(m, &mut states, active)?;
        self.states = self.session.propagate(m, &states, active)?;
        let logits = self
            .session
            .score_frontier(&self.states, active, self.image)?;
        let mut out = BTreeMap::new();
        for (node, logit) in logits {
            self.scored.push(ScoredNode { node, logit });
            out.insert(node, sigmoid(self.session.tape.scalar(logit)));
        }
        Ok(out)
    }

    fn end_round(&mut self, m: &MergedGraph, active: &ActiveSet) -> Result<Vec<f64>> {
        let (z, mask) = self.session.classify(m, &self.states, active)?;
        let values = masked_values(self.session.tape.value(z).as_slice(), &mask);
        self.round_logits.push((z, mask));
        Ok(values)
    }
}

fn masked_values(z: &[f64], mask: &[bool]) -> Vec<f64> {
    z.iter()
        .zip(mask)
        .map(|(&v, &keep)| if keep { v } else { f64::NEG_INFINITY })
        .collect()
}

/// Output of a full forward search on a session.
pub(crate) struct ForwardSearch {
    pub trace: SearchTrace,
    /// Pooled logits; masked columns carry a gradient path but no score.
    pub pooled: Var,
    pub mask: Vec<bool>,
    pub scored: Vec<ScoredNode>,
}

pub(crate) fn forward_search(
    session: &mut Session<'_>,
    m: &MergedGraph,
    ctx: &ImageContext,
    cfg: &SearchConfig,
    rng_seed: u64,
    expansion: Expansion<'_>,
) -> Result<ForwardSearch> {
    let image = session.image_input(ctx, cfg)?;
    let mut driver = NetDriver {
        session,
        image,
        states: BTreeMap::new(),
        scored: Vec::new(),
        round_logits: Vec::new(),
    };
    let trace = search_loop(m, cfg, rng_seed, &mut driver, expansion)?;
    let NetDriver {
        session,
        scored,
        round_logits,
        ..
    } = driver;
    let (pooled, mask) = pool_rounds(&mut session.tape, &round_logits, cfg.aggregation)?;
    Ok(ForwardSearch {
        trace,
        pooled,
        mask,
        scored,
    })
}

fn pool_rounds(
    tape: &mut Tape,
    rounds: &[(Var, Vec<bool>)],
    how: RoundAggregation,
) -> Result<(Var, Vec<bool>)> {
    let classes = rounds
        .first()
        .map(|(_, m)| m.len())
        .ok_or_else(|| Error::Contract("search produced no rounds".into()))?;
    let r = rounds.len();
    let mut weights = vec![vec![0.0; classes]; r];
    let mut mask = vec![false; classes];
    for j in 0..classes {
        let live: Vec<usize> = (0..r).filter(|&k| rounds[k].1[j]).collect();
        mask[j] = !live.is_empty();
        let pick_max = |candidates: &[usize]| {
            let mut best = candidates[0];
            for &k in candidates {
                if tape.value(rounds[k].0).as_slice()[j] > tape.value(rounds[best].0).as_slice()[j]
                {
                    best = k;
                }
            }
            best
        };
        match (how, live.is_empty()) {
            (RoundAggregation::Max, false) => weights[pick_max(&live)][j] = 1.0,
            (RoundAggregation::Mean, false) => live
                .iter()
                .for_each(|&k| weights[k][j] = 1.0 / live.len() as f64),
            (RoundAggregation::Sum, false) => live.iter().for_each(|&k| weights[k][j] = 1.0),
            (_, true) => {
                let all: Vec<usize> = (0..r).collect();
                weights[pick_max(&all)][j] = 1.0;
            }
        }
    }
    let vars: Vec<Var> = rounds.iter().map(|(v, _)| *v).collect();
    Ok((tape.pool(&vars, weights)?, mask))
}

/// Final result of a search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// One score per class; `-inf` for compounds never activated.
    pub scores: Vec<f64>,
    pub prediction: usize,
    pub trace: SearchTrace,
}

/// Runs the full multi-round search with the model's own expansion decisions.
pub fn run_search(
    m: &MergedGraph,
    ctx: &ImageContext,
    model: &SearchModel,
    cfg: &SearchConfig,
    rng_seed: u64,
) -> Result<SearchOutcome> {
    run_search_with(m, ctx, model, cfg, rng_seed, Expansion::Model)
}

pub fn run_search_with(
    m: &MergedGraph,
    ctx: &ImageContext,
    model: &SearchModel,
    cfg: &SearchConfig,
    rng_seed: u64,
    expansion: Expansion<'_>,
) -> Result<SearchOutcome> {
    model.check_kg(m.kg())?;
    let mut session = Session::new(model, false);
    let out = forward_search(&mut session, m, ctx, cfg, rng_seed, expansion)?;
    let scores = masked_values(session.tape.value(out.pooled).as_slice(), &out.mask);
    let prediction = argmax(&scores);
    Ok(SearchOutcome {
        scores,
        prediction,
        trace: out.trace,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Plain per-node hidden states, for the standalone operations below.
pub type StateMap = BTreeMap<NodeId, Vec<f64>>;

fn load_states(session: &mut Session<'_>, states: &StateMap) -> Result<VarStates> {
    states
        .iter()
        .map(|(&id, h)| Ok((id, session.tape.constant(Matrix::row_vector(h)?))))
        .collect()
}

fn read_states(session: &Session<'_>, states: &VarStates) -> StateMap {
    states
        .iter()
        .map(|(&id, &v)| (id, session.tape.value(v).as_slice().to_vec()))
        .collect()
}

/// Initial hidden states for the given nodes.
pub fn initial_states(
    m: &MergedGraph,
    ids: impl IntoIterator<Item = NodeId>,
    model: &SearchModel,
) -> Result<StateMap> {
    let mut session = Session::new(model, false);
    let mut vs = VarStates::new();
    for id in ids {
        let v = session.init_state(m, id)?;
        vs.insert(id, v);
    }
    Ok(read_states(&session, &vs))
}

/// One propagation step over `active`; states must cover active and frontier.
pub fn propagate(
    m: &MergedGraph,
    states: &StateMap,
    active: &ActiveSet,
    model: &SearchModel,
) -> Result<StateMap> {
    let mut session = Session::new(model, false);
    let vs = load_states(&mut session, states)?;
    let out = session.propagate(m, &vs, active)?;
    Ok(read_states(&session, &out))
}

/// Importance in (0, 1) of every frontier node.
pub fn score_frontier(
    states: &StateMap,
    active: &ActiveSet,
    ctx: &ImageContext,
    model: &SearchModel,
    cfg: &SearchConfig,
) -> Result<BTreeMap<NodeId, f64>> {
    let mut session = Session::new(model, false);
    let vs = load_states(&mut session, states)?;
    let image = session.image_input(ctx, cfg)?;
    let logits = session.score_frontier(&vs, active, image)?;
    Ok(logits
        .into_iter()
        .map(|(n, z)| (n, sigmoid(session.tape.scalar(z))))
        .collect())
}

/// Masked class logits for a final active set.
pub fn classify(
    m: &MergedGraph,
    states: &StateMap,
    active: &ActiveSet,
    model: &SearchModel,
) -> Result<Vec<f64>> {
    let mut session = Session::new(model, false);
    let vs = load_states(&mut session, states)?;
    let (z, mask) = session.classify(m, &vs, active)?;
    Ok(masked_values(session.tape.value(z).as_slice(), &mask))
}

#[cfg(test)]
mod tests;
