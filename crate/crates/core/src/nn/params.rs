//! Named parameter declarations and storage.

use std::collections::HashMap;

use htr_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained and weight-decayed.
    Weight,
    /// Trained without weight decay (norms, biases, LayerScale, position tables).
    NoDecay,
    /// Not trained by the optimizer (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: ParamKind,
    /// Only needed while training; dropped by decode-time models.
    pub train_only: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Collects parameter declarations while a model is being assembled.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    train_only: bool,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks every parameter declared from now on as training-only.
    pub fn set_train_only(&mut self, on: bool) {
        self.train_only = on;
    }

    pub fn add(&mut self, name: String, shape: &[usize], init: Init, kind: ParamKind) -> ParamId {
        assert!(
            self.specs.iter().all(|s| s.name != name),
            "parameter {name} declared twice"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            kind,
            train_only: self.train_only,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn weight(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        self.add(name, shape, Init::Normal(std), ParamKind::Weight)
    }

    pub fn no_decay(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.add(name, shape, init, ParamKind::NoDecay)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

fn name_seed(name: &str, seed: u64) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b) ^ seed
}

fn initial_value(spec: &ParamSpec, seed: u64) -> Tensor {
    let n = spec.numel();
    let data = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Const(c) => vec![c; n],
        Init::Normal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(&spec.name, seed));
            (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect()
        }
        Init::Uniform(bound) => {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(&spec.name, seed));
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        }
    };
    Tensor::new(&spec.shape, data)
}

/// Parameter values in declaration order, addressable by id or name.
#[derive(Clone, Debug)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.specs == other.specs && self.values == other.values
    }
}

impl ParamStore {
    /// Initializes every parameter from a stream derived from its name and
    /// `seed`, so values do not depend on declaration order.
    pub fn initialize(specs: Vec<ParamSpec>, seed: u64) -> Self {
        let values = specs.iter().map(|s| initial_value(s, seed)).collect();
        Self::from_parts(specs, values)
    }

    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<Tensor>) -> Self {
        assert_eq!(specs.len(), values.len());
        let by_name = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Self {
            specs,
            values,
            by_name,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| &self.values[id.0])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.find(name).map(|id| &mut self.values[id.0])
    }

    /// Trainable element count (buffers excluded).
    pub fn trainable_count(&self) -> usize {
        count_trainable(&self.specs)
    }
}

pub fn count_trainable(specs: &[ParamSpec]) -> usize {
    specs
        .iter()
        .filter(|s| s.kind != ParamKind::Buffer)
        .map(ParamSpec::numel)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_ignores_declaration_order() {
        let mut a = ParamBuilder::new();
        a.weight("x".into(), &[3], 1.0);
        a.weight("y".into(), &[4], 1.0);
        let mut b = ParamBuilder::new();
        b.weight("y".into(), &[4], 1.0);
        b.weight("x".into(), &[3], 1.0);
        let sa = ParamStore::initialize(a.into_specs(), 5);
        let sb = ParamStore::initialize(b.into_specs(), 5);
        assert_eq!(sa.get("x"), sb.get("x"));
        assert_eq!(sa.get("y"), sb.get("y"));
        let sc = ParamStore::initialize(sa.specs().to_vec(), 6);
        assert_ne!(sa.get("x"), sc.get("x"));
    }

    #[test]
    #[should_panic]
    fn duplicate_names_panic() {
        let mut b = ParamBuilder::new();
        b.weight("x".into(), &[1], 1.0);
        b.weight("x".into(), &[1], 1.0);
    }
}
