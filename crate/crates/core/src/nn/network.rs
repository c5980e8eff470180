use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var, NORM_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Shape of a fully connected network. ReLU sits between layers, never after
/// the last one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub normalize_output: bool,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, layer_widths: Vec<usize>, normalize_output: bool) -> Self {
        Self {
            input_dim,
            layer_widths,
            activation: Activation::Relu,
            normalize_output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("network input_dim must be positive"));
        }
        if self.layer_widths.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::config("network layer widths must be positive"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&self.input_dim)
    }

    fn fan_ins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(self.input_dim)
            .chain(self.layer_widths.iter().copied())
            .zip(self.layer_widths.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

/// Weights of one network plus the number of optimizer steps applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub layers: Vec<Layer>,
    pub step: u64,
}

/// Adjoints for every layer of a [`Parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Parameters {
    /// He-style uniform initialisation, `U(-√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .fan_ins()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer {
                    weight: Tensor::from_parts(vec![fan_in, fan_out], data),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self { layers, step: 0 })
    }

    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .fan_ins()
            .map(|(fan_in, fan_out)| Layer {
                weight: Tensor::zeros(&[fan_in, fan_out]),
                bias: Tensor::zeros(&[fan_out]),
            })
            .collect();
        Ok(Self { layers, step: 0 })
    }

    /// Checks that the weight shapes chain as `spec` prescribes.
    pub fn conforms_to(&self, spec: &NetworkSpec) -> bool {
        self.layers.len() == spec.layer_widths.len()
            && self
                .layers
                .iter()
                .zip(spec.fan_ins())
                .all(|(l, (i, o))| l.weight.shape() == [i, o] && l.bias.shape() == [o])
    }

    pub fn num_values(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// Weights and biases in layer order, `[w0, b0, w1, b1, …]`.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    /// Inverse of [`Parameters::tensors`].
    pub fn from_tensors(spec: &NetworkSpec, tensors: &[Tensor], step: u64) -> Result<Self> {
        if tensors.len() != 2 * spec.layer_widths.len() {
            return Err(Error::contract("tensor count does not match the network spec"));
        }
        let p = Self {
            layers: tensors
                .chunks(2)
                .map(|wb| Layer {
                    weight: wb[0].clone(),
                    bias: wb[1].clone(),
                })
                .collect(),
            step,
        };
        if !p.conforms_to(spec) {
            return Err(Error::contract("tensor shapes do not match the network spec"));
        }
        Ok(p)
    }

    /// Records the weights on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundNetwork<'t> {
        BoundNetwork {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone(), trainable),
                        tape.leaf(l.bias.clone(), trainable),
                    )
                })
                .collect(),
        }
    }
}

/// A network whose weights live on a tape.
pub struct BoundNetwork<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundNetwork<'t> {
    /// Network over variables laid out as [`Parameters::tensors`].
    pub fn from_vars(vars: &[Var<'t>]) -> Result<Self> {
        if vars.is_empty() || !vars.len().is_multiple_of(2) {
            return Err(Error::contract("expected weight/bias variable pairs"));
        }
        Ok(Self {
            layers: vars.chunks(2).map(|wb| (wb[0], wb[1])).collect(),
        })
    }

    pub fn forward(&self, input: Var<'t>, normalize_output: bool) -> Result<Var<'t>> {
        let mut h = input;
        let last = self.layers.len().saturating_sub(1);
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(*w)?.add(*b)?;
            if i != last {
                h = h.relu()?;
            }
        }
        if normalize_output {
            h = h.l2_normalize(1, NORM_EPS)?;
        }
        Ok(h)
    }

    /// Adjoints after backward; `None` if the weights were bound as constants.
    pub fn gradients(&self) -> Option<Gradients> {
        self.layers
            .iter()
            .map(|(w, b)| {
                Some(Layer {
                    weight: w.grad()?,
                    bias: b.grad()?,
                })
            })
            .collect::<Option<Vec<_>>>()
            .map(|layers| Gradients { layers })
    }
}

/// Deterministic forward pass of `batch` (`N × input_dim`).
pub fn encode(params: &Parameters, spec: &NetworkSpec, batch: &Tensor) -> Result<Tensor> {
    if batch.rank() != 2 || batch.shape()[1] != spec.input_dim {
        return Err(Error::InvalidShape {
            op: "encode",
            lhs: batch.shape().to_vec(),
            rhs: vec![spec.input_dim],
        });
    }
    if !params.conforms_to(spec) {
        return Err(Error::contract("parameters do not match the network spec"));
    }
    let tape = Tape::new();
    let net = params.bind(&tape, false);
    let x = tape.constant(batch.clone());
    Ok(net.forward(x, spec.normalize_output)?.value())
}
