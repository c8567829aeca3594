//! Named parameter storage, graph binding, and the Adam optimizer.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, Tensor};

/// Parameter groups of the stage-wise training schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Lora,
    CollabEmbeddings,
    ItemSemantic,
    ProjCtoL,
    ProjWtoL,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Backbone,
        ParamGroup::Lora,
        ParamGroup::CollabEmbeddings,
        ParamGroup::ItemSemantic,
        ParamGroup::ProjCtoL,
        ParamGroup::ProjWtoL,
    ];

    /// Key prefix for parameters of this group.
    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "lm",
            ParamGroup::Lora => "lora",
            ParamGroup::CollabEmbeddings => "collab",
            ParamGroup::ItemSemantic => "bank",
            ParamGroup::ProjCtoL => "proj_c2l",
            ParamGroup::ProjWtoL => "proj_w2l",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Lora => "lora",
            ParamGroup::CollabEmbeddings => "collab_embeddings",
            ParamGroup::ItemSemantic => "item_semantic",
            ParamGroup::ProjCtoL => "proj_c2l",
            ParamGroup::ProjWtoL => "proj_w2l",
        }
    }
}

/// Set of parameter groups that receive gradients.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask(pub std::collections::BTreeSet<ParamGroup>);

impl TrainMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        Self(groups.iter().copied().collect())
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        self.0.contains(&g)
    }
}

/// Ordered map of named tensors belonging to one [`ParamGroup`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    group: ParamGroup,
    tensors: BTreeMap<String, Arc<Tensor<S>>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(group: ParamGroup) -> Self {
        Self {
            group,
            tensors: BTreeMap::new(),
        }
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.shared(name)
    }

    pub fn shared(&self, name: &str) -> &Arc<Tensor<S>> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{}.{name}` missing", self.group.prefix()))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name).map(|t| &**t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn key(&self, name: &str) -> String {
        format!("{}.{name}", self.group.prefix())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Canonical serialization used for freeze audits: every tensor in name
    /// order, each preceded by its name line.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.tensors {
            out.extend_from_slice(name.as_bytes());
            out.push(b'\n');
            out.extend(t.to_dump_bytes());
        }
        out
    }

    /// Writes one `<prefix>.<name>.tensor` dump per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in &self.tensors {
            t.save(&dir.join(format!("{}.tensor", self.key(name))))?;
        }
        Ok(())
    }

    /// Loads every `<prefix>.*.tensor` file of this group from `dir`.
    pub fn load(group: ParamGroup, dir: &Path) -> Result<Self> {
        let mut store = Self::new(group);
        let prefix = format!("{}.", group.prefix());
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: Vec<_> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|f| f.starts_with(&prefix) && f.ends_with(".tensor"))
            .collect();
        files.sort();
        for f in files {
            let name = &f[prefix.len()..f.len() - ".tensor".len()];
            store.insert(name, Tensor::read(&dir.join(&f))?);
        }
        if store.tensors.is_empty() {
            return Err(Error::Checkpoint(format!(
                "no `{}` tensors in {}",
                group.as_str(),
                dir.display()
            )));
        }
        Ok(store)
    }
}

/// Gradients keyed by `<prefix>.<name>`.
#[derive(Clone, Debug, Default)]
pub struct NamedGrads<S> {
    pub grads: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> NamedGrads<S> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    /// `self += k · other`
    pub fn add_scaled(&mut self, other: &NamedGrads<S>, k: S) {
        for (key, g) in &other.grads {
            match self.grads.get_mut(key) {
                Some(acc) => {
                    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += k * v;
                    }
                }
                None => {
                    self.grads.insert(key.clone(), g.map(|v| v * k));
                }
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<S>> {
        self.grads.get(key)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

/// A graph under construction plus the parameters bound into it.
pub struct Ctx<S> {
    pub g: Graph<S>,
    bound: HashMap<String, NodeId>,
}

impl<S: Scalar> Default for Ctx<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Ctx<S> {
    pub fn new() -> Self {
        Self {
            g: Graph::new(),
            bound: HashMap::new(),
        }
    }

    /// Binds `store[name]` as a leaf. Trainable bindings become graph
    /// parameters; frozen ones become constants and never see a gradient.
    pub fn bind(&mut self, store: &ParamStore<S>, name: &str, trainable: bool) -> NodeId {
        let key = store.key(name);
        if let Some(&id) = self.bound.get(&key) {
            return id;
        }
        let t = Arc::clone(store.shared(name));
        let id = if trainable {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.bound.insert(key, id);
        id
    }

    /// [`Ctx::bind`] with trainability taken from `mask`.
    pub fn bind_in(&mut self, store: &ParamStore<S>, name: &str, mask: &TrainMask) -> NodeId {
        self.bind(store, name, mask.contains(store.group()))
    }

    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.g.constant(t)
    }

    pub fn bound_id(&self, key: &str) -> Option<NodeId> {
        self.bound.get(key).copied()
    }

    /// Backward from `loss`; returns gradients of every trainable binding.
    pub fn grads(&self, loss: NodeId) -> Result<NamedGrads<S>> {
        let mut by_node = self.g.backward(loss)?;
        let mut out = NamedGrads::new();
        for (key, &id) in &self.bound {
            if self.g.is_param(id) {
                if let Some(t) = by_node.take(id) {
                    out.grads.insert(key.clone(), t);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    cfg: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Every gradient key must belong to one of
    /// `stores`; parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &NamedGrads<S>, stores: &mut [&mut ParamStore<S>]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = S::of(1.0 - b1.powi(t));
        let bc2 = S::of(1.0 - b2.powi(t));
        let (lr, eps) = (S::of(self.cfg.lr), S::of(self.cfg.eps));
        let (b1, b2) = (S::of(b1), S::of(b2));
        for (key, g) in &grads.grads {
            let (prefix, name) = key
                .split_once('.')
                .ok_or_else(|| Error::contract("adam", format!("malformed key {key}")))?;
            let store = stores
                .iter_mut()
                .find(|s| s.group().prefix() == prefix)
                .ok_or_else(|| Error::contract("adam", format!("no store for gradient {key}")))?;
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::contract("adam", format!("unknown parameter {key}")))?;
            let (m, v) = self
                .moments
                .entry(key.clone())
                .or_insert_with(|| (vec![S::zero(); g.numel()], vec![S::zero(); g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new(ParamGroup::ProjWtoL);
        store.insert("w", Tensor::row_vector(vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let mut ctx = Ctx::new();
            let w = ctx.bind(&store, "w", true);
            let sq = ctx.g.mul(w, w).unwrap();
            let loss = ctx.g.sum(sq).unwrap();
            let grads = ctx.grads(loss).unwrap();
            opt.step(&grads, &mut [&mut store]).unwrap();
        }
        assert!(store.get("w").data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_binding_has_no_gradient() {
        let mut store = ParamStore::<f64>::new(ParamGroup::Backbone);
        store.insert("w", Tensor::row_vector(vec![1.0]).unwrap());
        let mut ctx = Ctx::new();
        let w = ctx.bind(&store, "w", false);
        let loss = ctx.g.sum(w).unwrap();
        assert!(ctx.grads(loss).unwrap().grads.is_empty());
    }

    #[test]
    fn zero_gradient_leaves_parameter_bit_identical() {
        let mut store = ParamStore::<f64>::new(ParamGroup::ItemSemantic);
        store.insert("e", Tensor::row_vector(vec![0.123, -4.5]).unwrap());
        let before = store.to_bytes();
        let mut grads = NamedGrads::new();
        grads.grads.insert("bank.e".into(), Tensor::zeros(&[1, 2]));
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3));
        for _ in 0..3 {
            opt.step(&grads, &mut [&mut store]).unwrap();
        }
        assert_eq!(store.to_bytes(), before);
    }

    #[test]
    fn store_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f64>::new(ParamGroup::Lora);
        store.insert("l0.wq.a", Tensor::matrix(1, 2, vec![0.5, 1.5]).unwrap());
        store.insert("l0.wq.b", Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap());
        store.save(dir.path()).unwrap();
        let back = ParamStore::<f64>::load(ParamGroup::Lora, dir.path()).unwrap();
        assert_eq!(back.to_bytes(), store.to_bytes());
    }
}
