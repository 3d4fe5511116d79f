//! Training and evaluation of the search network.
//!
//! The loss is cross-entropy of the pooled class scores against the scene
//! label, plus `alpha` times the mean binary cross-entropy of every
//! importance score produced during the search against k-hop path targets.
//! Expansion decisions are discrete and carry no gradient.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::error::{parse_json, Error, Result};
use crate::exec::{self, Execution};
use crate::graph::{ConceptLabel, KgNodeKind, KnowledgeGraph, MergedGraph, NodeId};
use crate::ingest::{
    build_scene_graph, shuffle, DetectionFile, DetectionRecord, ImageContext, IngestConfig,
};
use crate::kg::baseline_prediction;
use crate::merge::{merge, round_seed};
use crate::search::{
    argmax, class_labels, forward_search, run_search, Expansion, SearchConfig, SearchModel,
    SearchTrace, Session, BACKGROUND,
};
use crate::tensor::{adam_step, gradient_check, AdamConfig, AdamState, Matrix, ParamId, Tape, Var};

/// A labelled scene before graph construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub ctx: ImageContext,
    pub detections: Vec<DetectionRecord>,
    pub label: String,
}

impl TrainExample {
    pub fn new(file: DetectionFile, label: impl Into<String>) -> Self {
        Self {
            ctx: file.image,
            detections: file.detections,
            label: label.into(),
        }
    }
}

/// A labelled scene merged with the knowledge graph, ready for search.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: MergedGraph,
    pub ctx: ImageContext,
    /// Class index: compound position in KG order, or the last index for
    /// background.
    pub target: usize,
}

/// Index of `label` among [`class_labels`].
pub fn class_index(kg: &KnowledgeGraph, label: &str) -> Result<usize> {
    class_labels(kg)
        .iter()
        .position(|c| c == label)
        .ok_or_else(|| {
            Error::Validation(format!(
                "label `{label}` is neither a compound nor background"
            ))
        })
}

pub fn prepare(ex: &TrainExample, kg: &KnowledgeGraph, ingest: &IngestConfig) -> Result<Prepared> {
    let target = class_index(kg, &ex.label)?;
    let sg = build_scene_graph(&ex.ctx, &ex.detections, ingest)?;
    Ok(Prepared {
        graph: merge(sg, kg.clone()),
        ctx: ex.ctx.clone(),
        target,
    })
}

pub fn prepare_all(
    examples: &[TrainExample],
    kg: &KnowledgeGraph,
    ingest: &IngestConfig,
    exec: Execution,
) -> Result<Vec<Prepared>> {
    exec::try_map(exec, examples, |i, ex| {
        prepare(ex, kg, ingest).map_err(|e| Error::Record {
            index: i,
            message: e.to_string(),
        })
    })
}

fn distances(m: &MergedGraph, sources: impl IntoIterator<Item = NodeId>) -> Result<Vec<usize>> {
    let mut dist = vec![usize::MAX; m.node_count()];
    let mut queue = VecDeque::new();
    for s in sources {
        dist[s.0] = 0;
        queue.push_back(s);
    }
    while let Some(u) = queue.pop_front() {
        for &(v, _) in m.incident(u)? {
            if dist[v.0] == usize::MAX {
                dist[v.0] = dist[u.0] + 1;
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}

/// Nodes lying on a path of at most `k_hops` edges between a scene node and
/// the KG node of the truth compound. Empty for background.
pub fn importance_targets(m: &MergedGraph, truth: &str, k_hops: usize) -> Result<BTreeSet<NodeId>> {
    if truth == BACKGROUND {
        return Ok(BTreeSet::new());
    }
    let label = ConceptLabel::new(truth)?;
    let c = m
        .kg()
        .index_of(&label)
        .filter(|&i| m.kg().node(i).kind == KgNodeKind::Compound)
        .ok_or_else(|| Error::Validation(format!("`{truth}` is not a compound")))?;
    targets_for_node(m, m.kg_id(c), k_hops)
}

fn targets_for_class(m: &MergedGraph, class: usize, k_hops: usize) -> Result<BTreeSet<NodeId>> {
    match m.kg().compounds().get(class) {
        Some(&c) => targets_for_node(m, m.kg_id(c), k_hops),
        None => Ok(BTreeSet::new()),
    }
}

fn targets_for_node(m: &MergedGraph, truth: NodeId, k_hops: usize) -> Result<BTreeSet<NodeId>> {
    let from_scene = distances(m, (0..m.sg_count()).map(|i| m.sg_id(i)))?;
    let from_truth = distances(m, [truth])?;
    Ok(m.ids()
        .filter(|id| {
            let (a, b) = (from_scene[id.0], from_truth[id.0]);
            a != usize::MAX && b != usize::MAX && a + b <= k_hops
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the importance loss.
    pub alpha: f64,
    /// Teacher-force expansion to the importance targets during the first
    /// half of the epochs. Has no effect when `alpha` is 0.
    pub teacher_forcing: bool,
    pub k_hops: usize,
    /// Examples per optimizer step; gradients are averaged.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: crate::tensor::DEFAULT_LR,
            seed: 0,
            alpha: 1.0,
            teacher_forcing: true,
            k_hops: 2,
            batch_size: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Validation(format!(
                "alpha {} must be finite and non-negative",
                self.alpha
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate {}", self.lr)));
        }
        if self.batch_size == 0 || self.k_hops == 0 {
            return Err(Error::Validation(
                "batch size and k-hops must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub classification: f64,
    pub importance: f64,
    pub total: f64,
    /// Importance scores entering the importance loss.
    pub scored: usize,
}

/// Builds the training loss for one example on `session`'s tape.
pub(crate) fn example_loss(
    session: &mut Session<'_>,
    p: &Prepared,
    search: &SearchConfig,
    alpha: f64,
    targets: Option<&BTreeSet<NodeId>>,
    expansion: Expansion<'_>,
    rng_seed: u64,
) -> Result<(Var, LossParts, SearchTrace)> {
    let fwd = forward_search(session, &p.graph, &p.ctx, search, rng_seed, expansion)?;
    let mut mask = fwd.mask.clone();
    mask[p.target] = true;
    let tape = &mut session.tape;
    let ce = tape.masked_cross_entropy(fwd.pooled, p.target, &mask)?;
    let mut parts = LossParts {
        classification: tape.scalar(ce),
        ..LossParts::default()
    };
    let mut total = ce;
    if alpha > 0.0 && !fwd.scored.is_empty() {
        let targets =
            targets.ok_or_else(|| Error::Contract("importance loss without targets".into()))?;
        let terms = fwd
            .scored
            .iter()
            .map(|s| {
                tape.bce_with_logits(s.logit, if targets.contains(&s.node) { 1.0 } else { 0.0 })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mean = tape.mean(&terms)?;
        parts.importance = tape.scalar(mean);
        parts.scored = terms.len();
        let weighted = tape.scale(mean, alpha)?;
        total = tape.add(ce, weighted)?;
    }
    parts.total = tape.scalar(total);
    Ok((total, parts, fwd.trace))
}

/// Finite-difference check of the full training loss with every expansion
/// decision frozen to `frozen`. Returns the largest relative error over all
/// model parameters.
pub fn loss_gradient_check(
    model: &SearchModel,
    p: &Prepared,
    search: &SearchConfig,
    alpha: f64,
    k_hops: usize,
    frozen: &SearchTrace,
    rng_seed: u64,
) -> Result<f64> {
    let targets = targets_for_class(&p.graph, p.target, k_hops)?;
    let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
    let as_tensor = |e: Error| match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    };
    let err = gradient_check(
        |tape: &mut Tape, vars: &[Var]| {
            let owned = std::mem::take(tape);
            let mut session = Session::with_tape(model, owned, vars).map_err(as_tensor)?;
            let out = example_loss(
                &mut session,
                p,
                search,
                alpha,
                Some(&targets),
                Expansion::Replay(frozen),
                rng_seed,
            );
            *tape = session.tape;
            out.map(|(loss, _, _)| loss).map_err(as_tensor)
        },
        &params,
    )?;
    Ok(err)
}

fn non_finite(context: String) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite(op)) => {
            Error::NonFiniteLoss(format!("{context}: non-finite value in {op}"))
        }
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub teacher_forced: bool,
    pub classification: f64,
    pub importance: f64,
    pub total: f64,
}

/// Optimizer state and bookkeeping around a [`SearchModel`].
#[derive(Debug, Clone)]
pub struct Trainer {
    model: SearchModel,
    adam: AdamState,
    cfg: TrainConfig,
    search: SearchConfig,
    target_reads: usize,
}

impl Trainer {
    pub fn new(model: SearchModel, cfg: TrainConfig, search: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        search.validate()?;
        model.validate()?;
        let adam = AdamState::new(model.params(), AdamConfig::default());
        Ok(Self {
            model,
            adam,
            cfg,
            search,
            target_reads: 0,
        })
    }

    pub fn model(&self) -> &SearchModel {
        &self.model
    }

    pub fn into_model(self) -> SearchModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// How many times importance targets have been computed.
    pub fn target_reads(&self) -> usize {
        self.target_reads
    }

    /// Whether expansion is teacher-forced in `epoch`.
    pub fn teacher_forced(&self, epoch: usize) -> bool {
        self.cfg.teacher_forcing && self.cfg.alpha > 0.0 && epoch < self.cfg.epochs / 2
    }

    fn example_gradients(
        &self,
        p: &Prepared,
        teacher: bool,
        rng_seed: u64,
    ) -> Result<(Vec<Matrix>, LossParts, bool)> {
        let targets = if teacher || self.cfg.alpha > 0.0 {
            Some(targets_for_class(&p.graph, p.target, self.cfg.k_hops)?)
        } else {
            None
        };
        let expansion = match (&targets, teacher) {
            (Some(t), true) => Expansion::Teacher(t),
            _ => Expansion::Model,
        };
        let mut session = Session::new(&self.model, true);
        let (loss, parts, _) = example_loss(
            &mut session,
            p,
            &self.search,
            self.cfg.alpha,
            targets.as_ref(),
            expansion,
            rng_seed,
        )?;
        let grads = session.tape.backward(loss)?;
        let dense = self
            .model
            .params()
            .iter()
            .enumerate()
            .map(|(i, m)| {
                grads
                    .get(ParamId(i))
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
            })
            .collect();
        Ok((dense, parts, targets.is_some()))
    }

    /// One optimizer step on a single example.
    pub fn train_step(&mut self, p: &Prepared, teacher: bool, rng_seed: u64) -> Result<LossParts> {
        self.train_batch(&[p], teacher, &[rng_seed], Execution::Sequential)
    }

    /// One optimizer step on the averaged gradients of `batch`. Per-example
    /// gradients are computed under `exec`; reduction is in batch order.
    pub fn train_batch(
        &mut self,
        batch: &[&Prepared],
        teacher: bool,
        seeds: &[u64],
        exec: Execution,
    ) -> Result<LossParts> {
        if batch.is_empty() || batch.len() != seeds.len() {
            return Err(Error::Contract(format!(
                "{} examples, {} seeds",
                batch.len(),
                seeds.len()
            )));
        }
        let this = &*self;
        let results = exec::try_map(exec, batch, |i, p| {
            this.example_gradients(p, teacher, seeds[i])
                .map_err(non_finite(format!("batch example {i}")))
        })?;
        let n = results.len() as f64;
        let mut sum: Vec<Matrix> = Vec::new();
        let mut parts = LossParts::default();
        for (grads, lp, read) in results {
            if read {
                self.target_reads += 1;
            }
            if sum.is_empty() {
                sum = grads;
            } else {
                for (s, g) in sum.iter_mut().zip(&grads) {
                    s.add_assign(g);
                }
            }
            parts.classification += lp.classification / n;
            parts.importance += lp.importance / n;
            parts.total += lp.total / n;
            parts.scored += lp.scored;
        }
        if batch.len() > 1 {
            for s in &mut sum {
                *s = s.scale(1.0 / n)?;
            }
        }
        adam_step(
            &mut self.model.params_mut(),
            &sum,
            &mut self.adam,
            self.cfg.lr,
        )?;
        Ok(parts)
    }

    /// Runs every configured epoch over `data`, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        data: &[Prepared],
        exec: Execution,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut history = Vec::new();
        for epoch in 0..self.cfg.epochs {
            let epoch_seed = round_seed(self.cfg.seed, epoch);
            let mut order: Vec<usize> = (0..data.len()).collect();
            shuffle(&mut order, &mut ChaCha8Rng::seed_from_u64(epoch_seed));
            let teacher = self.teacher_forced(epoch);
            let mut stats = EpochStats {
                epoch,
                teacher_forced: teacher,
                classification: 0.0,
                importance: 0.0,
                total: 0.0,
            };
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
                let seeds: Vec<u64> = chunk.iter().map(|&i| round_seed(epoch_seed, i)).collect();
                let parts = self.train_batch(&batch, teacher, &seeds, exec)?;
                let w = chunk.len() as f64 / data.len() as f64;
                stats.classification += parts.classification * w;
                stats.importance += parts.importance * w;
                stats.total += parts.total * w;
            }
            on_epoch(&stats);
            history.push(stats);
        }
        Ok(history)
    }
}

/// Accuracy report over a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub classes: Vec<String>,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Number of rounds that ran for each iteration count.
    #[serde(rename = "per-round-iteration-histogram")]
    pub iteration_histogram: BTreeMap<usize, usize>,
    pub mean_iterations: f64,
}

impl Metrics {
    /// `pairs` holds `(truth, predicted)` class indices.
    pub fn from_predictions<'a>(
        classes: Vec<String>,
        pairs: &[(usize, usize)],
        traces: impl IntoIterator<Item = &'a SearchTrace>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let c = classes.len();
        let mut confusion = vec![vec![0; c]; c];
        for &(t, p) in pairs {
            confusion[t][p] += 1;
        }
        let correct = pairs.iter().filter(|(t, p)| t == p).count();
        let mut iteration_histogram = BTreeMap::new();
        let (mut rounds, mut iterations) = (0usize, 0usize);
        for trace in traces {
            for r in &trace.rounds {
                *iteration_histogram.entry(r.iterations.len()).or_insert(0) += 1;
                rounds += 1;
                iterations += r.iterations.len();
            }
        }
        Ok(Self {
            classes,
            total: pairs.len(),
            correct,
            accuracy: correct as f64 / pairs.len() as f64,
            confusion,
            iteration_histogram,
            mean_iterations: if rounds == 0 {
                0.0
            } else {
                iterations as f64 / rounds as f64
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Seed of the search for example `index` during evaluation.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    round_seed(seed ^ 0x5eed_e7a1, index)
}

/// Top-1 accuracy of the model, searching every example independently.
pub fn evaluate(
    data: &[Prepared],
    model: &SearchModel,
    search: &SearchConfig,
    exec: Execution,
    seed: u64,
) -> Result<Metrics> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let outcomes = exec::try_map(exec, data, |i, p| {
        run_search(&p.graph, &p.ctx, model, search, eval_seed(seed, i))
    })?;
    let pairs: Vec<(usize, usize)> = data
        .iter()
        .zip(&outcomes)
        .map(|(p, o)| (p.target, o.prediction))
        .collect();
    Metrics::from_predictions(
        class_labels(first.graph.kg()),
        &pairs,
        outcomes.iter().map(|o| &o.trace),
    )
}

/// Top-1 accuracy of the symbolic constituent-recall baseline.
pub fn evaluate_baseline(data: &[Prepared]) -> Result<Metrics> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let classes = class_labels(first.graph.kg());
    let pairs = data
        .iter()
        .map(|p| {
            let kg = p.graph.kg();
            let labels: Vec<&ConceptLabel> =
                p.graph.sg().nodes().iter().map(|n| &n.label).collect();
            let pred = match baseline_prediction(kg, labels) {
                Some(l) => class_index(kg, l.as_str())?,
                None => classes.len() - 1,
            };
            Ok((p.target, pred))
        })
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_predictions(classes, &pairs, [])
}

/// Class with the highest score, ties to the lower index.
pub fn top1(scores: &[f64]) -> usize {
    argmax(scores)
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Detection file path, relative to the manifest's directory unless
    /// absolute.
    pub detections: String,
    pub label: String,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_json(l.as_bytes()).map_err(|e| Error::Record {
                index: i,
                message: format!("manifest line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("manifest entry serializes") + "\n")
        .collect()
}

/// Reads a manifest and every detection file it names.
pub fn load_manifest(path: &Path) -> Result<Vec<TrainExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text)?
        .into_iter()
        .map(|entry| {
            let file = base.join(&entry.detections);
            let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let (ctx, detections) = crate::ingest::parse_detection_file(&bytes)
                .map_err(|e| Error::Validation(format!("{}: {e}", file.display())))?;
            Ok(TrainExample {
                ctx,
                detections,
                label: entry.label,
            })
        })
        .collect()
}
