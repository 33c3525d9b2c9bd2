//! Trainable parameters, reverse-mode differentiation and the two networks of
//! the model: the convolutional encoder-decoder and the implicit MLP that maps
//! region embeddings to filters.

mod backbone;
pub mod conv;
mod graph;
mod mlp;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{read_tensor, write_tensor, Tensor};

pub use backbone::{Backbone, BackboneConfig, LayerSpec};
pub use graph::{Graph, Var};
pub use mlp::{ImplicitMlp, ImplicitMlpConfig};

/// How a parameter is filled by [`init_parameters`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zero,
    /// Kaiming-uniform with the gain of a leaky ReLU of the given slope
    /// (slope 0 is plain ReLU). Fan-in is the product of all axes but the first.
    KaimingUniform { slope: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub init: Init,
}

impl Parameter {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn fan_in(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered, name-unique collection of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a zero-valued parameter.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let n = shape.iter().product();
        self.params.push(Parameter {
            name,
            shape,
            value: vec![0.0; n],
            grad: vec![0.0; n],
            init,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self, id: ParamId) -> f64 {
        self.get(id).grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Write one `<name>.scft` per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for p in &self.params {
            let t = Tensor::from_f64(p.shape.clone(), p.value.clone())?;
            write_tensor(dir.join(format!("{}.scft", p.name)), &t)?;
        }
        Ok(())
    }

    /// Overwrite every registered parameter with the tensor of the same name in `dir`.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        for p in &mut self.params {
            let t = read_tensor(dir.join(format!("{}.scft", p.name)))?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: p.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
            let v = t.as_f64().ok_or_else(|| Error::DType {
                expected: "f64",
                actual: t.dtype().name(),
            })?;
            p.value.copy_from_slice(v);
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

/// Fill every parameter according to its [`Init`], in registration order,
/// from a single seeded stream.
pub fn init_parameters(params: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.iter_mut() {
        match p.init {
            Init::Zero => p.value.fill(0.0),
            Init::KaimingUniform { slope } => {
                let bound = leaky_gain(slope) * (3.0 / p.fan_in() as f64).sqrt();
                for v in &mut p.value {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        p.grad.fill(0.0);
    }
}
