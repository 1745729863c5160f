use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::tensor::Tensor;

/// Handle to a trainable tensor held by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat registry of named parameters. Layers keep `ParamId`s into it, so a
/// layer value is cheap to clone and two call sites that hold the same id
/// literally share weights.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform init in `±sqrt(6 / fan_in)` (He-uniform for ReLU stacks).
    pub fn add_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replace every parameter value; shapes and names must match.
    pub fn load_values(&mut self, named: Vec<(String, Tensor)>) -> Result<(), String> {
        if named.len() != self.tensors.len() {
            return Err(format!("expected {} parameters, got {}", self.tensors.len(), named.len()));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(format!("parameter {i}: expected `{}`, found `{name}`", self.names[i]));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(format!(
                    "parameter `{name}`: expected shape {:?}, found {:?}",
                    self.tensors[i].shape(),
                    t.shape()
                ));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }
}
