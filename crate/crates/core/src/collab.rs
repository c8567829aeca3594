//! Matrix-factorization collaborative model, the collaborative→semantic
//! projection, the semantic item bank, and their joint training objective
//! (squared error plus an in-batch InfoNCE alignment term).

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::evalrep::auc;
use crate::params::{Adam, AdamConfig, Ctx, NamedGrads, ParamGroup, ParamStore, TrainMask};
use crate::scalar::Scalar;
use crate::tensor::{kernels, NodeId, Tensor};
use crate::train::EpochLog;

/// User and item embedding tables (`m × d_C`, `n × d_C`).
#[derive(Clone, Debug, PartialEq)]
pub struct CollabModel<S> {
    pub store: ParamStore<S>,
}

impl<S: Scalar> CollabModel<S> {
    pub const USERS: &'static str = "users";
    pub const ITEMS: &'static str = "items";

    /// Gaussian initialization, `σ = 0.01`.
    pub fn new(n_users: usize, n_items: usize, d_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new(ParamGroup::CollabEmbeddings);
        store.insert(Self::USERS, Tensor::randn(&[n_users, d_c], 0.01, rng));
        store.insert(Self::ITEMS, Tensor::randn(&[n_items, d_c], 0.01, rng));
        Self { store }
    }

    pub fn from_store(store: ParamStore<S>) -> Result<Self> {
        let (u, i) = (store.try_get(Self::USERS), store.try_get(Self::ITEMS));
        match (u, i) {
            (Some(u), Some(i)) if u.cols() == i.cols() => Ok(Self { store }),
            _ => Err(Error::Checkpoint("collab tables missing or mismatched".into())),
        }
    }

    pub fn users(&self) -> &Tensor<S> {
        self.store.get(Self::USERS)
    }

    pub fn items(&self) -> &Tensor<S> {
        self.store.get(Self::ITEMS)
    }

    pub fn d_c(&self) -> usize {
        self.users().cols()
    }

    pub fn n_users(&self) -> usize {
        self.users().rows()
    }

    pub fn n_items(&self) -> usize {
        self.items().rows()
    }

    /// `⟨e_u, e_i⟩`
    pub fn predict(&self, user: usize, item: usize) -> Result<S> {
        if user >= self.n_users() {
            return Err(Error::Lookup { op: "predict", index: user, len: self.n_users() });
        }
        if item >= self.n_items() {
            return Err(Error::Lookup { op: "predict", index: item, len: self.n_items() });
        }
        Ok(kernels::dot(self.users().row(user), self.items().row(item)))
    }
}

/// Two-layer map `W2·GELU(W1·x + b1) + b2` from `d_C` to `d_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjCtoL<S> {
    pub store: ParamStore<S>,
}

impl<S: Scalar> ProjCtoL<S> {
    /// Weights `N(0, 1/fan_in)`, zero biases.
    pub fn new(d_c: usize, hidden: usize, d_l: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new(ParamGroup::ProjCtoL);
        store.insert("w1", Tensor::randn(&[hidden, d_c], 1.0 / (d_c as f64).sqrt(), rng));
        store.insert("b1", Tensor::zeros(&[1, hidden]));
        store.insert("w2", Tensor::randn(&[d_l, hidden], 1.0 / (hidden as f64).sqrt(), rng));
        store.insert("b2", Tensor::zeros(&[1, d_l]));
        Self { store }
    }

    pub fn from_store(store: ParamStore<S>) -> Result<Self> {
        for k in ["w1", "b1", "w2", "b2"] {
            if store.try_get(k).is_none() {
                return Err(Error::Checkpoint(format!("projection missing `{k}`")));
            }
        }
        Ok(Self { store })
    }

    pub fn d_in(&self) -> usize {
        self.store.get("w1").cols()
    }

    pub fn d_out(&self) -> usize {
        self.store.get("w2").rows()
    }

    pub fn hidden(&self) -> usize {
        self.store.get("w1").rows()
    }

    /// Rows of `x` (`B × d_C`) to `B × d_L`.
    pub fn forward(&self, ctx: &mut Ctx<S>, x: NodeId, mask: &TrainMask) -> Result<NodeId> {
        let d = ctx.g.value(x).cols();
        if d != self.d_in() {
            return Err(Error::contract(
                "proj_c2l",
                format!("input dimension {d}, expected {}", self.d_in()),
            ));
        }
        let w1 = ctx.bind_in(&self.store, "w1", mask);
        let b1 = ctx.bind_in(&self.store, "b1", mask);
        let w2 = ctx.bind_in(&self.store, "w2", mask);
        let b2 = ctx.bind_in(&self.store, "b2", mask);
        let w1t = ctx.g.transpose(w1)?;
        let h = ctx.g.matmul(x, w1t)?;
        let h = ctx.g.add(h, b1)?;
        let h = ctx.g.gelu(h)?;
        let w2t = ctx.g.transpose(w2)?;
        let y = ctx.g.matmul(h, w2t)?;
        ctx.g.add(y, b2)
    }

    /// Graph-free evaluation on a batch of rows.
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut ctx = Ctx::new();
        let xi = ctx.constant(x.clone());
        let y = self.forward(&mut ctx, xi, &TrainMask::none())?;
        Ok(ctx.g.value(y).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Distilled,
    Aligned,
}

/// Per-item semantic vectors (`n × d_L`).
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticBank<S> {
    pub store: ParamStore<S>,
    pub provenance: Provenance,
    /// Checkpoint the vectors were distilled from.
    pub source: String,
}

#[derive(Serialize, Deserialize)]
struct BankIndex {
    provenance: Provenance,
    source: String,
    /// Raw item id → row.
    rows: BTreeMap<i64, usize>,
}

impl<S: Scalar> SemanticBank<S> {
    pub const ITEMS: &'static str = "items";

    pub fn new(vectors: Tensor<S>, provenance: Provenance, source: impl Into<String>) -> Self {
        let mut store = ParamStore::new(ParamGroup::ItemSemantic);
        store.insert(Self::ITEMS, vectors);
        Self {
            store,
            provenance,
            source: source.into(),
        }
    }

    pub fn vectors(&self) -> &Tensor<S> {
        self.store.get(Self::ITEMS)
    }

    pub fn d_l(&self) -> usize {
        self.vectors().cols()
    }

    pub fn len(&self) -> usize {
        self.vectors().rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `bank.items.tensor` and `bank.json` (provenance and the
    /// item id → row index).
    pub fn save(&self, dir: &Path, item_ids: &[i64]) -> Result<()> {
        self.store.save(dir)?;
        let index = BankIndex {
            provenance: self.provenance,
            source: self.source.clone(),
            rows: item_ids.iter().enumerate().map(|(r, &id)| (id, r)).collect(),
        };
        let p = dir.join("bank.json");
        std::fs::write(&p, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let store = ParamStore::load(ParamGroup::ItemSemantic, dir)?;
        let p = dir.join("bank.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let index: BankIndex = serde_json::from_str(&text)?;
        let bank = Self {
            store,
            provenance: index.provenance,
            source: index.source,
        };
        if index.rows.len() != bank.len() {
            return Err(Error::Checkpoint(format!(
                "bank index has {} items, tensor has {} rows",
                index.rows.len(),
                bank.len()
            )));
        }
        Ok(bank)
    }
}

/// Mean squared error `mean((y − ⟨e_u, e_i⟩)²)` as a graph node.
pub fn collab_loss_node<S: Scalar>(
    ctx: &mut Ctx<S>,
    model: &CollabModel<S>,
    batch: &[(usize, usize, u8)],
    mask: &TrainMask,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::contract("collab_loss", "empty batch"));
    }
    let users = ctx.bind_in(&model.store, CollabModel::<S>::USERS, mask);
    let items = ctx.bind_in(&model.store, CollabModel::<S>::ITEMS, mask);
    let eu = ctx.g.lookup(users, batch.iter().map(|b| b.0).collect())?;
    let ei = ctx.g.lookup(items, batch.iter().map(|b| b.1).collect())?;
    let prod = ctx.g.mul(eu, ei)?;
    let ones = ctx.constant(Tensor::full(&[model.d_c(), 1], S::one()));
    let scores = ctx.g.matmul(prod, ones)?;
    let y = ctx.constant(Tensor::matrix(batch.len(), 1, batch.iter().map(|b| S::of(b.2 as f64)).collect())?);
    let diff = ctx.g.sub(y, scores)?;
    let sq = ctx.g.mul(diff, diff)?;
    ctx.g.mean(sq)
}

/// `mean_b(‖e_u‖² + ‖e_i‖²)` over the batch rows.
pub fn l2_node<S: Scalar>(
    ctx: &mut Ctx<S>,
    model: &CollabModel<S>,
    batch: &[(usize, usize, u8)],
    mask: &TrainMask,
) -> Result<NodeId> {
    let users = ctx.bind_in(&model.store, CollabModel::<S>::USERS, mask);
    let items = ctx.bind_in(&model.store, CollabModel::<S>::ITEMS, mask);
    let eu = ctx.g.lookup(users, batch.iter().map(|b| b.0).collect())?;
    let ei = ctx.g.lookup(items, batch.iter().map(|b| b.1).collect())?;
    let su = ctx.g.mul(eu, eu)?;
    let si = ctx.g.mul(ei, ei)?;
    let s = ctx.g.add(su, si)?;
    let s = ctx.g.sum(s)?;
    ctx.g.scale(s, 1.0 / batch.len() as f64)
}

pub fn collab_loss<S: Scalar>(model: &CollabModel<S>, batch: &[(usize, usize, u8)]) -> Result<S> {
    let mut ctx = Ctx::new();
    let l = collab_loss_node(&mut ctx, model, batch, &TrainMask::none())?;
    ctx.g.value(l).item()
}

/// In-batch InfoNCE with cosine similarity: for each anchor item `i`,
/// `−log softmax_j(cos(proj(e^C_i), e^L_j)/τ)[i]`, averaged over anchors.
pub fn align_loss_node<S: Scalar>(
    ctx: &mut Ctx<S>,
    model: &CollabModel<S>,
    proj: &ProjCtoL<S>,
    bank: &SemanticBank<S>,
    items: &[usize],
    tau: f64,
    mask: &TrainMask,
) -> Result<NodeId> {
    if items.is_empty() {
        return Err(Error::contract("align_loss", "empty item batch"));
    }
    if !(tau > 0.0) {
        return Err(Error::contract("align_loss", format!("temperature must be positive, got {tau}")));
    }
    let table = ctx.bind_in(&model.store, CollabModel::<S>::ITEMS, mask);
    let ec = ctx.g.lookup(table, items.to_vec())?;
    let projected = proj.forward(ctx, ec, mask)?;
    let sem = ctx.bind_in(&bank.store, SemanticBank::<S>::ITEMS, mask);
    let el = ctx.g.lookup(sem, items.to_vec())?;
    infonce_node(ctx, projected, el, tau)
}

/// InfoNCE over rows of `anchors` against rows of `targets`; row `i` of each
/// form the positive pair.
pub fn infonce_node<S: Scalar>(ctx: &mut Ctx<S>, anchors: NodeId, targets: NodeId, tau: f64) -> Result<NodeId> {
    let b = ctx.g.value(anchors).rows();
    let cos = ctx.g.cosine_similarity(anchors, targets)?;
    let logits = ctx.g.scale(cos, 1.0 / tau)?;
    let p = ctx.g.row_softmax(logits)?;
    let logp = ctx.g.log(p)?;
    let eye = ctx.constant(Tensor::identity(b));
    let diag = ctx.g.mul(logp, eye)?;
    let s = ctx.g.sum(diag)?;
    ctx.g.scale(s, -1.0 / b as f64)
}

pub fn align_loss<S: Scalar>(
    model: &CollabModel<S>,
    proj: &ProjCtoL<S>,
    bank: &SemanticBank<S>,
    items: &[usize],
    tau: f64,
) -> Result<S> {
    let mut ctx = Ctx::new();
    let l = align_loss_node(&mut ctx, model, proj, bank, items, tau, &TrainMask::none())?;
    ctx.g.value(l).item()
}

/// Per-item `cos(proj(e^C_i), e^L_i)`; `None` for zero-norm vectors.
pub fn paired_cosines<S: Scalar>(
    model: &CollabModel<S>,
    proj: &ProjCtoL<S>,
    bank: &SemanticBank<S>,
) -> Result<Vec<Option<S>>> {
    let projected = proj.apply(model.items())?;
    Ok((0..bank.len())
        .map(|i| kernels::cosine(projected.row(i), bank.vectors().row(i)))
        .collect())
}

/// Mean of [`paired_cosines`] over items with non-degenerate vectors.
pub fn mean_paired_cosine<S: Scalar>(
    model: &CollabModel<S>,
    proj: &ProjCtoL<S>,
    bank: &SemanticBank<S>,
) -> Result<f64> {
    let cs: Vec<f64> = paired_cosines(model, proj, bank)?.into_iter().flatten().map(S::as_f64).collect();
    if cs.is_empty() {
        return Err(Error::Degenerate("no item has non-zero vectors".into()));
    }
    Ok(cs.iter().sum::<f64>() / cs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub tau: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Catalog items per alignment term.
    pub align_batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Hidden width of the projection; `2·d_C` when zero.
    pub proj_hidden: usize,
    /// L2 penalty on the embedding rows touched by each batch.
    pub l2: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 0.1,
            lr: 1e-2,
            batch_size: 64,
            align_batch: 64,
            epochs: 200,
            patience: 5,
            seed: 0,
            proj_hidden: 0,
            l2: 0.1,
        }
    }
}

pub struct Stage2Output<S> {
    pub collab: CollabModel<S>,
    pub bank: SemanticBank<S>,
    pub proj: ProjCtoL<S>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub init_mean_cosine: f64,
    pub final_mean_cosine: f64,
}

/// AUC of the inner-product scorer on one split.
pub fn mf_auc<S: Scalar>(model: &CollabModel<S>, ds: &InteractionDataset, split: Split) -> Result<f64> {
    let ix = ds.indices(split);
    let scores = ix
        .iter()
        .map(|&k| model.predict(ds.interactions[k].user, ds.interactions[k].item))
        .collect::<Result<Vec<S>>>()?;
    let labels: Vec<u8> = ix.iter().map(|&k| ds.interactions[k].label).collect();
    auc(&scores, &labels)
}

/// Joint training of `L_collab + λ·L_align`. The collaborative tables, the
/// projection and the semantic bank all receive gradients; with `λ = 0` the
/// alignment term is skipped entirely, which leaves the bank and projection
/// untouched. The epoch with the best validation AUC is returned.
pub fn train_stage2<S: Scalar>(
    ds: &InteractionDataset,
    bank: &SemanticBank<S>,
    d_c: usize,
    cfg: &AlignConfig,
) -> Result<Stage2Output<S>> {
    if bank.provenance != Provenance::Distilled {
        return Err(Error::contract("train_stage2", "bank must be freshly distilled"));
    }
    if bank.len() != ds.n_items() {
        return Err(Error::contract(
            "train_stage2",
            format!("bank has {} items, dataset {}", bank.len(), ds.n_items()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hidden = if cfg.proj_hidden == 0 { 2 * d_c } else { cfg.proj_hidden };
    let mut collab = CollabModel::new(ds.n_users(), ds.n_items(), d_c, &mut rng);
    let mut proj = ProjCtoL::new(d_c, hidden, bank.d_l(), &mut rng);
    let mut bank = bank.clone();
    let init_mean_cosine = mean_paired_cosine(&collab, &proj, &bank)?;

    let mask = TrainMask::of(&[ParamGroup::CollabEmbeddings, ParamGroup::ItemSemantic, ParamGroup::ProjCtoL]);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let train: Vec<(usize, usize, u8)> = ds
        .indices(Split::Train)
        .into_iter()
        .map(|k| {
            let it = &ds.interactions[k];
            (it.user, it.item, it.label)
        })
        .collect();
    if train.is_empty() {
        return Err(Error::EmptyDataset { stage: "stage2 train split" });
    }
    let mut catalog: Vec<usize> = (0..ds.n_items()).collect();
    let mut catalog_pos = catalog.len();

    let mut best = (f64::NEG_INFINITY, 0usize, collab.clone(), proj.clone(), bank.clone());
    let mut log = Vec::new();
    let mut stale = 0;
    let mut order = train.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut ctx = Ctx::new();
            let mut loss = collab_loss_node(&mut ctx, &collab, batch, &mask)?;
            if cfg.l2 > 0.0 {
                let reg = l2_node(&mut ctx, &collab, batch, &mask)?;
                let reg = ctx.g.scale(reg, cfg.l2)?;
                loss = ctx.g.add(loss, reg)?;
            }
            if cfg.lambda > 0.0 {
                let nb = cfg.align_batch.clamp(1, catalog.len());
                if catalog_pos + nb > catalog.len() {
                    catalog.shuffle(&mut rng);
                    catalog_pos = 0;
                }
                let items = &catalog[catalog_pos..catalog_pos + nb];
                catalog_pos += nb;
                let al = align_loss_node(&mut ctx, &collab, &proj, &bank, items, cfg.tau, &mask)?;
                let al = ctx.g.scale(al, cfg.lambda)?;
                loss = ctx.g.add(loss, al)?;
            }
            let value = ctx.g.value(loss).item()?.as_f64();
            let grads: NamedGrads<S> = ctx.grads(loss)?;
            if !value.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    at: format!("stage 2 epoch {epoch} step {steps}"),
                    detail: format!("loss {value}"),
                });
            }
            drop(ctx);
            opt.step(&grads, &mut [&mut collab.store, &mut proj.store, &mut bank.store])?;
            loss_sum += value;
            steps += 1;
        }
        let valid_auc = mf_auc(&collab, ds, Split::Valid)?;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / steps as f64,
            valid_auc,
        });
        if valid_auc > best.0 {
            best = (valid_auc, epoch, collab.clone(), proj.clone(), bank.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, collab, proj, mut bank) = best;
    bank.provenance = Provenance::Aligned;
    let final_mean_cosine = mean_paired_cosine(&collab, &proj, &bank)?;
    Ok(Stage2Output {
        collab,
        bank,
        proj,
        log,
        best_epoch,
        init_mean_cosine,
        final_mean_cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(users: &[[f64; 2]], items: &[[f64; 2]]) -> CollabModel<f64> {
        let mut store = ParamStore::new(ParamGroup::CollabEmbeddings);
        store.insert("users", Tensor::from_rows(&users.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
        store.insert("items", Tensor::from_rows(&items.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
        CollabModel::from_store(store).unwrap()
    }

    #[test]
    fn predict_is_inner_product() {
        let m = tiny_model(&[[1.0, 2.0], [0.0, 0.0]], &[[3.0, -1.0]]);
        assert_eq!(m.predict(0, 0).unwrap(), 1.0);
        assert_eq!(m.predict(1, 0).unwrap(), 0.0);
        assert!(matches!(m.predict(2, 0), Err(Error::Lookup { .. })));
    }

    #[test]
    fn collab_loss_examples() {
        let m = tiny_model(&[[1.0, 0.0]], &[[1.0, 0.0], [0.0, 0.0], [0.5, 0.0]]);
        assert_eq!(collab_loss(&m, &[(0, 0, 1)]).unwrap(), 0.0);
        assert_eq!(collab_loss(&m, &[(0, 1, 1)]).unwrap(), 1.0);
        assert_eq!(collab_loss(&m, &[(0, 2, 1), (0, 2, 0)]).unwrap(), 0.25);
        assert!(collab_loss(&m, &[]).is_err());
    }

    #[test]
    fn infonce_identity_cosines() {
        // Oracle: −log(e / (e + 1)) for both anchors.
        let oracle = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((oracle - 0.313_261_687_518_222_9).abs() < 1e-15);
        let mut ctx = Ctx::<f64>::new();
        let a = ctx.constant(Tensor::identity(2));
        let b = ctx.constant(Tensor::identity(2));
        let l = infonce_node(&mut ctx, a, b, 1.0).unwrap();
        assert!((ctx.g.value(l).item().unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn infonce_single_item_is_zero_and_large_tau_is_log_b() {
        let mut ctx = Ctx::<f64>::new();
        let a = ctx.constant(Tensor::row_vector(vec![0.3, -1.0]).unwrap());
        let b = ctx.constant(Tensor::row_vector(vec![2.0, 0.5]).unwrap());
        let l = infonce_node(&mut ctx, a, b, 0.07).unwrap();
        assert_eq!(ctx.g.value(l).item().unwrap(), 0.0);

        let rows = vec![vec![1.0, 0.2], vec![-0.3, 1.0], vec![0.5, 0.5]];
        let mut ctx = Ctx::<f64>::new();
        let a = ctx.constant(Tensor::from_rows(&rows).unwrap());
        let b = ctx.constant(Tensor::from_rows(&[vec![0.1, 1.0], vec![1.0, 0.0], vec![-1.0, 0.3]]).unwrap());
        let l = infonce_node(&mut ctx, a, b, 1e9).unwrap();
        assert!((ctx.g.value(l).item().unwrap() - 3f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let mut ctx = Ctx::<f64>::new();
        let a = ctx.constant(Tensor::row_vector(vec![0.0, 0.0]).unwrap());
        let b = ctx.constant(Tensor::row_vector(vec![1.0, 0.0]).unwrap());
        assert!(matches!(infonce_node(&mut ctx, a, b, 0.1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn projection_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ProjCtoL::<f64>::new(4, 8, 6, &mut rng);
        assert!(p.apply(&Tensor::zeros(&[2, 3])).is_err());
        assert_eq!(p.apply(&Tensor::zeros(&[2, 4])).unwrap().shape(), &[2, 6]);
    }
}
