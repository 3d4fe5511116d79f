use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{sigmoid, ParamId, Tape, Var};
use crate::error::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

/// One affine layer `y = act(x·W + b)` with `W` shaped in×out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Matrix, activation: Activation) -> Result<Self, TensorError> {
        if bias.shape() != (1, weight.cols()) {
            return Err(TensorError::Shape {
                op: "Layer::new",
                lhs: weight.shape(),
                rhs: bias.shape(),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// A stack of affine layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForwardNet {
    layers: Vec<Layer>,
}

impl FeedForwardNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self, TensorError> {
        if layers.is_empty() {
            return Err(TensorError::Empty("FeedForwardNet"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(TensorError::Shape {
                    op: "FeedForwardNet::new",
                    lhs: pair[0].weight.shape(),
                    rhs: pair[1].weight.shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights and zero biases. `dims` lists the layer widths
    /// from input to output; `acts` gives one activation per layer.
    pub fn random(
        dims: &[usize],
        acts: &[Activation],
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        if dims.len() < 2 || acts.len() != dims.len() - 1 {
            return Err(TensorError::Invalid(format!(
                "{} dims for {} activations",
                dims.len(),
                acts.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(d, &act)| {
                let w = glorot(d[0], d[1], rng);
                Layer::new(w, Matrix::zeros(1, d[1]), act)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Weight and bias of every layer, in order.
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        2 * self.layers.len()
    }

    /// Places the parameters on the tape with consecutive ids starting at
    /// `first`.
    pub fn bind(&self, tape: &mut Tape, first: usize) -> BoundNet {
        let vars = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    tape.param(ParamId(first + 2 * i), &l.weight),
                    tape.param(ParamId(first + 2 * i + 1), &l.bias),
                    l.activation,
                )
            })
            .collect();
        BoundNet { vars }
    }

    /// Reuses vars already on a tape, two per layer in [`Self::params`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundNet, TensorError> {
        if vars.len() != self.param_count() {
            return Err(TensorError::Invalid(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.param_count()
            )));
        }
        let vars = self
            .layers
            .iter()
            .zip(vars.chunks(2))
            .map(|(l, w)| (w[0], w[1], l.activation))
            .collect();
        Ok(BoundNet { vars })
    }
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Matrix::new(fan_in, fan_out, data).expect("finite initializer")
}

/// Parameters of a [`FeedForwardNet`] placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundNet {
    vars: Vec<(Var, Var, Activation)>,
}

impl BoundNet {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for &(w, b, act) in &self.vars {
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = match act {
                Activation::Relu => tape.relu(z)?,
                Activation::Identity => z,
                Activation::Sigmoid => tape.sigmoid(z)?,
            };
        }
        Ok(h)
    }
}

/// Evaluates the network on a single input vector.
pub fn ff_forward(net: &FeedForwardNet, x: &[f64]) -> Result<Vec<f64>, TensorError> {
    if x.len() != net.input_dim() {
        return Err(TensorError::Shape {
            op: "ff_forward",
            lhs: (1, x.len()),
            rhs: net.layers[0].weight.shape(),
        });
    }
    let mut h = Matrix::row_vector(x)?;
    for layer in &net.layers {
        let z = h.matmul(&layer.weight)?.add(&layer.bias)?;
        h = z.map("ff_forward", |v| layer.activation.apply(v))?;
    }
    Ok(h.into_vec())
}
