//! Per-pass state: the autodiff tape plus everything a forward pass records.

use htr_autograd::{BatchStats, Gradients, Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamKind, ParamStore};

/// Batch statistics observed by one training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    grads: bool,
    training: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate>,
    attention: Option<Vec<Tensor>>,
}

impl<'a> Ctx<'a> {
    /// `training` switches batch-norm statistics and stochastic depth;
    /// `grads` makes parameters differentiable.
    pub fn new(store: &'a ParamStore, training: bool, grads: bool, rng: ChaCha8Rng) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            grads,
            training,
            rng,
            bn_updates: Vec::new(),
            attention: None,
        }
    }

    /// Deterministic evaluation pass without gradients.
    pub fn eval(store: &'a ParamStore) -> Self {
        use rand::SeedableRng;
        Self::new(store, false, false, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Tape variable for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = self.grads && self.store.spec(id).kind != ParamKind::Buffer;
        let v = self.g.leaf(self.store.value(id).clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value_of(&self, id: ParamId) -> &Tensor {
        self.store.value(id)
    }

    pub fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Starts keeping every encoder attention map, `[B, heads, L, L]` each.
    pub fn capture_attention(&mut self) {
        self.attention = Some(Vec::new());
    }

    pub fn capturing_attention(&self) -> bool {
        self.attention.is_some()
    }

    pub fn push_attention(&mut self, probs: Tensor) {
        if let Some(a) = &mut self.attention {
            a.push(probs);
        }
    }

    pub fn attention_maps(&self) -> &[Tensor] {
        self.attention.as_deref().unwrap_or(&[])
    }

    /// Parameter gradients indexed like the store; `None` for parameters the
    /// pass never touched.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}
