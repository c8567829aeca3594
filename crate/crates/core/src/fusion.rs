//! Hybrid prompts: placeholder rows of the plain token embeddings are
//! replaced by projected collaborative vectors (user, item) and a projected
//! semantic vector (warm), and the frozen language model scores the result.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collab::{CollabModel, ProjCtoL, SemanticBank};
use crate::data::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::evalrep::auc;
use crate::minilm::{bce_node, encode_split, Example, MiniLm, Slots, Tokenizer};
use crate::params::{Ctx, ParamGroup, ParamStore, TrainMask};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tensor};
use crate::train::{fit, FitConfig, FitLog, Stores};

/// Square linear map on semantic vectors, no bias. Stored input-major and
/// applied as `x·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjWtoL<S> {
    pub store: ParamStore<S>,
}

impl<S: Scalar> ProjWtoL<S> {
    /// `W ~ N(0, 1/d_L)`.
    pub fn new(d_l: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new(ParamGroup::ProjWtoL);
        store.insert("w", Tensor::randn(&[d_l, d_l], 1.0 / (d_l as f64).sqrt(), rng));
        Self { store }
    }

    pub fn from_store(store: ParamStore<S>) -> Result<Self> {
        match store.try_get("w") {
            Some(w) if w.rows() == w.cols() => Ok(Self { store }),
            _ => Err(Error::Checkpoint("warm projection missing or not square".into())),
        }
    }

    pub fn d(&self) -> usize {
        self.store.get("w").rows()
    }

    pub fn forward(&self, ctx: &mut Ctx<S>, x: NodeId, mask: &TrainMask) -> Result<NodeId> {
        let d = ctx.g.value(x).cols();
        if d != self.d() {
            return Err(Error::contract(
                "proj_w2l",
                format!("input dimension {d}, expected {}", self.d()),
            ));
        }
        let w = ctx.bind_in(&self.store, "w", mask);
        ctx.g.matmul(x, w)
    }
}

/// `(Proj_C→L(e_u), Proj_C→L(e_i), Proj_W→L(e^L_i))`, each `[1, d_L]`.
pub fn project_tokens<S: Scalar>(
    ctx: &mut Ctx<S>,
    e_user: NodeId,
    e_item: NodeId,
    e_sem: NodeId,
    c2l: &ProjCtoL<S>,
    w2l: &ProjWtoL<S>,
    mask: &TrainMask,
) -> Result<(NodeId, NodeId, NodeId)> {
    let u = c2l.forward(ctx, e_user, mask)?;
    let i = c2l.forward(ctx, e_item, mask)?;
    let w = w2l.forward(ctx, e_sem, mask)?;
    if ctx.g.value(u).cols() != ctx.g.value(w).cols() {
        return Err(Error::contract("project_tokens", "projections disagree on d_L"));
    }
    Ok((u, i, w))
}

/// Replaces row `pos` of `plain` (`[L, d]`) by each `(pos, row)`; every
/// other row is passed through unchanged.
pub fn inject<S: Scalar>(ctx: &mut Ctx<S>, plain: NodeId, rows: &[(usize, NodeId)]) -> Result<NodeId> {
    if rows.is_empty() {
        return Ok(plain);
    }
    let len = ctx.g.value(plain).rows();
    let mut pos: Vec<usize> = rows.iter().map(|r| r.0).collect();
    if let Some(&p) = pos.iter().find(|&&p| p >= len) {
        return Err(Error::Lookup { op: "inject", index: p, len });
    }
    pos.sort_unstable();
    if pos.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::contract("inject", "duplicate placeholder positions"));
    }
    let ids: Vec<NodeId> = rows.iter().map(|r| r.1).collect();
    let stacked = if ids.len() == 1 { ids[0] } else { ctx.g.concat_rows(&ids)? };
    ctx.g.scatter_rows(plain, stacked, rows.iter().map(|r| r.0).collect())
}

/// Stage-3 objective: binary cross-entropy of the fused prediction.
pub fn stage3_loss<S: Scalar>(ctx: &mut Ctx<S>, p: NodeId, y: u8) -> Result<NodeId> {
    bce_node(ctx, p, y)
}

/// Frozen language model plus the four stage-3 trainable groups.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel<S> {
    pub lm: MiniLm<S>,
    pub collab: CollabModel<S>,
    pub bank: SemanticBank<S>,
    pub c2l: ProjCtoL<S>,
    pub w2l: ProjWtoL<S>,
}

impl<S: Scalar> Stores<S> for FusionModel<S> {
    fn stores_mut(&mut self) -> Vec<&mut ParamStore<S>> {
        vec![
            &mut self.collab.store,
            &mut self.bank.store,
            &mut self.c2l.store,
            &mut self.w2l.store,
        ]
    }
}

/// Plain and fused embedding nodes of one prompt.
pub struct Fused {
    pub plain: NodeId,
    pub fused: NodeId,
    /// `(position, injected row)` for each placeholder present.
    pub rows: Vec<(usize, NodeId)>,
}

impl<S: Scalar> FusionModel<S> {
    pub fn fuse(&self, ctx: &mut Ctx<S>, ds: &InteractionDataset, ex: &Example, mask: &TrainMask) -> Result<Fused> {
        let it = &ds.interactions[ex.interaction];
        let p = &ex.prompt;
        let plain = self.lm.embed(ctx, &p.ids, mask)?;
        let mut rows = Vec::with_capacity(3);
        if p.user_pos.is_some() || p.item_pos.is_some() {
            let users = ctx.bind_in(&self.collab.store, CollabModel::<S>::USERS, mask);
            let items = ctx.bind_in(&self.collab.store, CollabModel::<S>::ITEMS, mask);
            if let Some(pos) = p.user_pos {
                let e = ctx.g.lookup(users, vec![it.user])?;
                rows.push((pos, self.c2l.forward(ctx, e, mask)?));
            }
            if let Some(pos) = p.item_pos {
                let e = ctx.g.lookup(items, vec![it.item])?;
                rows.push((pos, self.c2l.forward(ctx, e, mask)?));
            }
        }
        if let Some(pos) = p.warm_pos {
            let sem = ctx.bind_in(&self.bank.store, SemanticBank::<S>::ITEMS, mask);
            let e = ctx.g.lookup(sem, vec![it.item])?;
            rows.push((pos, self.w2l.forward(ctx, e, mask)?));
        }
        let fused = inject(ctx, plain, &rows)?;
        Ok(Fused { plain, fused, rows })
    }

    pub fn score_node(&self, ctx: &mut Ctx<S>, ds: &InteractionDataset, ex: &Example, mask: &TrainMask) -> Result<NodeId> {
        let f = self.fuse(ctx, ds, ex, mask)?;
        self.lm.score_embedded(ctx, f.fused, mask)
    }

    pub fn score(&self, ds: &InteractionDataset, ex: &Example) -> Result<S> {
        let mut ctx = Ctx::new();
        let p = self.score_node(&mut ctx, ds, ex, &TrainMask::none())?;
        ctx.g.value(p).item()
    }

    pub fn scores(&self, ds: &InteractionDataset, examples: &[Example]) -> Result<Vec<S>> {
        examples.iter().map(|e| self.score(ds, e)).collect()
    }

    pub fn auc(&self, ds: &InteractionDataset, examples: &[Example]) -> Result<f64> {
        let s = self.scores(ds, examples)?;
        let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
        auc(&s, &labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage3Config {
    pub k_hist: usize,
    pub slots: Slots,
    /// Trainable groups of each sequential sub-training; one entry is joint
    /// training.
    pub phases: Vec<TrainMask>,
    pub fit: FitConfig,
}

impl Stage3Config {
    pub fn joint_mask() -> TrainMask {
        TrainMask::of(&[
            ParamGroup::CollabEmbeddings,
            ParamGroup::ItemSemantic,
            ParamGroup::ProjCtoL,
            ParamGroup::ProjWtoL,
        ])
    }
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            k_hist: 10,
            slots: Slots::ALL,
            phases: vec![Self::joint_mask()],
            fit: FitConfig {
                lr: 1e-4,
                epochs: 20,
                batch_size: 16,
                patience: 5,
                seed: 0,
            },
        }
    }
}

/// Trains the fusion model phase by phase with the language model frozen.
pub fn train_stage3<S: Scalar>(
    fm: &mut FusionModel<S>,
    tok: &Tokenizer,
    ds: &InteractionDataset,
    cfg: &Stage3Config,
) -> Result<Vec<FitLog>> {
    let max_len = fm.lm.cfg.max_len;
    let train = encode_split(tok, ds, Split::Train, cfg.k_hist, cfg.slots, max_len)?;
    let valid = encode_split(tok, ds, Split::Valid, cfg.k_hist, cfg.slots, max_len)?;
    let ix: Vec<usize> = (0..train.len()).collect();
    let full = Stage3Config::joint_mask();
    let mut logs = Vec::new();
    for (n, phase) in cfg.phases.iter().enumerate() {
        if phase.0.iter().any(|g| !full.contains(*g)) {
            return Err(Error::contract("train_stage3", "phase trains a group outside the stage-3 set"));
        }
        let fit_cfg = FitConfig {
            seed: cfg.fit.seed.wrapping_add(n as u64),
            ..cfg.fit.clone()
        };
        logs.push(fit(
            fm,
            &ix,
            &fit_cfg,
            "stage 3",
            |m: &FusionModel<S>, ctx: &mut Ctx<S>, e: usize| {
                let p = m.score_node(ctx, ds, &train[e], phase)?;
                stage3_loss(ctx, p, train[e].label)
            },
            |m| m.auc(ds, &valid),
        )?);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_warm_projection_passes_vectors_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w2l = ProjWtoL::<f64>::new(3, &mut rng);
        w2l.store.insert("w", Tensor::identity(3));
        let mut ctx = Ctx::new();
        let x = ctx.constant(Tensor::row_vector(vec![0.5, -1.0, 2.0]).unwrap());
        let y = w2l.forward(&mut ctx, x, &TrainMask::none()).unwrap();
        assert_eq!(ctx.g.value(y), ctx.g.value(x));
    }

    #[test]
    fn shared_projection_and_zero_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c2l = ProjCtoL::<f64>::new(2, 4, 3, &mut rng);
        let w2l = ProjWtoL::<f64>::new(3, &mut rng);
        let none = TrainMask::none();
        let mut ctx = Ctx::new();
        let e = ctx.constant(Tensor::row_vector(vec![0.3, -0.7]).unwrap());
        let e2 = ctx.constant(Tensor::row_vector(vec![0.3, -0.7]).unwrap());
        let s = ctx.constant(Tensor::row_vector(vec![1.0, 0.0, 0.0]).unwrap());
        let (u, i, _) = project_tokens(&mut ctx, e, e2, s, &c2l, &w2l, &none).unwrap();
        assert_eq!(ctx.g.value(u), ctx.g.value(i));

        for k in ["w1", "w2"] {
            let shape = c2l.store.get(k).shape().to_vec();
            c2l.store.insert(k, Tensor::zeros(&shape));
        }
        let z = ctx.constant(Tensor::zeros(&[1, 2]));
        let zs = ctx.constant(Tensor::zeros(&[1, 3]));
        let (u, _, w) = project_tokens(&mut ctx, z, z, zs, &c2l, &w2l, &none).unwrap();
        assert!(ctx.g.value(u).data().iter().all(|&v| v == 0.0));
        assert!(ctx.g.value(w).data().iter().all(|&v| v == 0.0));
        assert!(project_tokens(&mut ctx, zs, z, zs, &c2l, &w2l, &none).is_err());
    }

    #[test]
    fn inject_replaces_only_placeholder_rows() {
        let mut ctx = Ctx::<f64>::new();
        let plain = ctx.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let a = ctx.constant(Tensor::row_vector(vec![0.0, 0.0]).unwrap());
        let b = ctx.constant(Tensor::row_vector(vec![-1.0, 9.5]).unwrap());
        let f = inject(&mut ctx, plain, &[(3, a), (1, b)]).unwrap();
        let v = ctx.g.value(f);
        assert_eq!(v.row(0), &[1.0, 2.0]);
        assert_eq!(v.row(1), &[-1.0, 9.5]);
        assert_eq!(v.row(2), &[5.0, 6.0]);
        assert_eq!(v.row(3), &[0.0, 0.0]);
        assert!(inject(&mut ctx, plain, &[(1, a), (1, b)]).is_err());
        assert!(inject(&mut ctx, plain, &[(4, a)]).is_err());
    }

    #[test]
    fn stage3_loss_examples() {
        let mut ctx = Ctx::<f64>::new();
        let half = ctx.constant(Tensor::full(&[1, 1], 0.5));
        let l = stage3_loss(&mut ctx, half, 1).unwrap();
        assert!((ctx.g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let sure = ctx.constant(Tensor::full(&[1, 1], 1.0 - 1e-15));
        let l = stage3_loss(&mut ctx, sure, 1).unwrap();
        assert!(ctx.g.value(l).item().unwrap() < 1e-11);
    }
}
