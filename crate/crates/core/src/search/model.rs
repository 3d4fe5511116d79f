use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SearchConfig;
use crate::error::{parse_json, Error, Result};
use crate::graph::{EdgeKind, KnowledgeGraph};
use crate::tensor::{Activation, BoundNet, FeedForwardNet, Matrix, ParamId, Tape, Var};

pub const CHECKPOINT_VERSION: &str = "model/1";
pub const BACKGROUND: &str = "background";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Scene node embedding width D.
    pub embedding: usize,
    /// Hidden state width H.
    pub hidden: usize,
    /// Image embedding width.
    pub image: usize,
    /// Edge-type embedding width.
    pub edge: usize,
    pub message_hidden: usize,
    pub importance_hidden: usize,
    pub kg_nodes: usize,
    /// Compounds plus background.
    pub classes: usize,
}

impl ModelDims {
    pub fn for_kg(kg: &KnowledgeGraph) -> Self {
        Self {
            embedding: 32,
            hidden: 32,
            image: 32,
            edge: 8,
            message_hidden: 32,
            importance_hidden: 64,
            kg_nodes: kg.len(),
            classes: kg.compounds().len() + 1,
        }
    }
}

/// All learned parameters of the search network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchModel {
    pub dims: ModelDims,
    /// D×H projection of scene node embeddings.
    pub sg_projection: Matrix,
    /// |K|×H state initializers for KG nodes.
    pub kg_embeddings: Matrix,
    /// One row per [`EdgeKind`].
    pub edge_embeddings: Matrix,
    /// (H + H + E) → H message function.
    pub message_net: FeedForwardNet,
    /// 2H×1 weights of the scalar update gate over `[h_v, aggregate]`.
    pub gate_weight: Matrix,
    pub gate_bias: Matrix,
    /// (H + H + D_img) → 1 importance logit.
    pub importance_net: FeedForwardNet,
    pub classifier_weight: Matrix,
    pub classifier_bias: Matrix,
}

const FIXED_PARAMS: usize = 7;

impl SearchModel {
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = dims.hidden;
        let uniform = |r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng| {
            let data = (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect();
            Matrix::new(r, c, data).expect("finite init")
        };
        let glorot = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            let limit = (6.0 / (r + c) as f64).sqrt();
            uniform(r, c, limit, rng)
        };
        let sg_projection = glorot(dims.embedding, h, &mut rng);
        let kg_embeddings = uniform(dims.kg_nodes, h, 0.5, &mut rng);
        let edge_embeddings = uniform(EdgeKind::COUNT, dims.edge, 0.5, &mut rng);
        let message_net = FeedForwardNet::random(
            &[2 * h + dims.edge, dims.message_hidden, h],
            &[Activation::Relu, Activation::Identity],
            &mut rng,
        )
        .expect("dims");
        let gate_weight = glorot(2 * h, 1, &mut rng);
        let importance_net = FeedForwardNet::random(
            &[2 * h + dims.image, dims.importance_hidden, 1],
            &[Activation::Relu, Activation::Identity],
            &mut rng,
        )
        .expect("dims");
        let classifier_weight = glorot(h, dims.classes, &mut rng);
        Self {
            dims,
            sg_projection,
            kg_embeddings,
            edge_embeddings,
            message_net,
            gate_weight,
            gate_bias: Matrix::zeros(1, 1),
            importance_net,
            classifier_weight,
            classifier_bias: Matrix::zeros(1, dims.classes),
        }
    }

    /// Every parameter in [`ParamId`] order.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![
            &self.sg_projection,
            &self.kg_embeddings,
            &self.edge_embeddings,
            &self.gate_weight,
            &self.gate_bias,
            &self.classifier_weight,
            &self.classifier_bias,
        ];
        out.extend(self.message_net.params());
        out.extend(self.importance_net.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.sg_projection,
            &mut self.kg_embeddings,
            &mut self.edge_embeddings,
            &mut self.gate_weight,
            &mut self.gate_bias,
            &mut self.classifier_weight,
            &mut self.classifier_bias,
        ];
        out.extend(self.message_net.params_mut());
        out.extend(self.importance_net.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        FIXED_PARAMS + self.message_net.param_count() + self.importance_net.param_count()
    }

    /// Names matching [`SearchModel::params`], for diagnostics.
    pub fn param_names(&self) -> Vec<String> {
        let mut out: Vec<String> = [
            "sg_projection",
            "kg_embeddings",
            "edge_embeddings",
            "gate_weight",
            "gate_bias",
            "classifier_weight",
            "classifier_bias",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..self.message_net.layers().len() {
            out.push(format!("message_net.{i}.weight"));
            out.push(format!("message_net.{i}.bias"));
        }
        for i in 0..self.importance_net.layers().len() {
            out.push(format!("importance_net.{i}.weight"));
            out.push(format!("importance_net.{i}.bias"));
        }
        out
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> BoundModel {
        let p = |tape: &mut Tape, i: usize, m: &Matrix| tape.param(ParamId(i), m);
        let sg_projection = p(tape, 0, &self.sg_projection);
        let kg_embeddings = p(tape, 1, &self.kg_embeddings);
        let edge_embeddings = p(tape, 2, &self.edge_embeddings);
        let gate_weight = p(tape, 3, &self.gate_weight);
        let gate_bias = p(tape, 4, &self.gate_bias);
        let classifier_weight = p(tape, 5, &self.classifier_weight);
        let classifier_bias = p(tape, 6, &self.classifier_bias);
        let message_net = self.message_net.bind(tape, FIXED_PARAMS);
        let importance_net = self
            .importance_net
            .bind(tape, FIXED_PARAMS + self.message_net.param_count());
        BoundModel {
            sg_projection,
            kg_embeddings,
            edge_embeddings,
            gate_weight,
            gate_bias,
            classifier_weight,
            classifier_bias,
            message_net,
            importance_net,
        }
    }

    /// Builds the bound view from vars already on a tape, one per parameter
    /// in [`SearchModel::params`] order.
    pub(crate) fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        if vars.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.param_count()
            )));
        }
        let split = FIXED_PARAMS + self.message_net.param_count();
        Ok(BoundModel {
            sg_projection: vars[0],
            kg_embeddings: vars[1],
            edge_embeddings: vars[2],
            gate_weight: vars[3],
            gate_bias: vars[4],
            classifier_weight: vars[5],
            classifier_bias: vars[6],
            message_net: self.message_net.bind_vars(&vars[FIXED_PARAMS..split])?,
            importance_net: self.importance_net.bind_vars(&vars[split..])?,
        })
    }

    /// Checks internal shape consistency.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let h = d.hidden;
        let expect = |name: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(Error::CheckpointMismatch(format!(
                    "{name} is {:?}, expected {shape:?}",
                    m.shape()
                )))
            }
        };
        expect("sg_projection", &self.sg_projection, (d.embedding, h))?;
        expect("kg_embeddings", &self.kg_embeddings, (d.kg_nodes, h))?;
        expect(
            "edge_embeddings",
            &self.edge_embeddings,
            (EdgeKind::COUNT, d.edge),
        )?;
        expect("gate_weight", &self.gate_weight, (2 * h, 1))?;
        expect("gate_bias", &self.gate_bias, (1, 1))?;
        expect("classifier_weight", &self.classifier_weight, (h, d.classes))?;
        expect("classifier_bias", &self.classifier_bias, (1, d.classes))?;
        let net = |name: &str, n: &FeedForwardNet, input: usize, output: usize| {
            if n.input_dim() == input && n.output_dim() == output {
                Ok(())
            } else {
                Err(Error::CheckpointMismatch(format!(
                    "{name} maps {}→{}, expected {input}→{output}",
                    n.input_dim(),
                    n.output_dim()
                )))
            }
        };
        net("message_net", &self.message_net, 2 * h + d.edge, h)?;
        net("importance_net", &self.importance_net, 2 * h + d.image, 1)?;
        Ok(())
    }

    /// Checks that the model was built for this knowledge graph.
    pub fn check_kg(&self, kg: &KnowledgeGraph) -> Result<()> {
        if self.dims.kg_nodes != kg.len() || self.dims.classes != kg.compounds().len() + 1 {
            return Err(Error::CheckpointMismatch(format!(
                "model has {} KG nodes / {} classes, graph has {} / {}",
                self.dims.kg_nodes,
                self.dims.classes,
                kg.len(),
                kg.compounds().len() + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BoundModel {
    pub sg_projection: Var,
    pub kg_embeddings: Var,
    pub edge_embeddings: Var,
    pub gate_weight: Var,
    pub gate_bias: Var,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
    pub message_net: BoundNet,
    pub importance_net: BoundNet,
}

/// Class names, compounds in KG order followed by background.
pub fn class_labels(kg: &KnowledgeGraph) -> Vec<String> {
    let mut out: Vec<String> = kg
        .compounds()
        .into_iter()
        .map(|c| kg.node(c).label.to_string())
        .collect();
    out.push(BACKGROUND.into());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub dims: ModelDims,
    pub config: SearchConfig,
    pub classes: Vec<String>,
    pub model: SearchModel,
}

impl Checkpoint {
    pub fn new(model: SearchModel, config: SearchConfig, kg: &KnowledgeGraph) -> Self {
        Self {
            version: CHECKPOINT_VERSION.into(),
            dims: model.dims,
            config,
            classes: class_labels(kg),
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = parse_json(bytes)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version(ck.version));
        }
        if ck.dims != ck.model.dims {
            return Err(Error::CheckpointMismatch(
                "header dims differ from model dims".into(),
            ));
        }
        ck.model.validate()?;
        ck.config.validate()?;
        Ok(ck)
    }

    /// Loads and checks compatibility with `kg`.
    pub fn load_for(bytes: &[u8], kg: &KnowledgeGraph) -> Result<Self> {
        let ck = Self::from_json(bytes)?;
        ck.model.check_kg(kg)?;
        if ck.classes != class_labels(kg) {
            return Err(Error::CheckpointMismatch("class labels differ".into()));
        }
        Ok(ck)
    }
}
