//! Mini-batch training loop shared by the language-model stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, Ctx, NamedGrads, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::NodeId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch of the retained snapshot; 0 is the untrained model.
    pub best_epoch: usize,
    pub best_valid_auc: f64,
}

/// Models whose parameters live in [`ParamStore`]s.
pub trait Stores<S> {
    fn stores_mut(&mut self) -> Vec<&mut ParamStore<S>>;
}

/// Mean gradient and mean loss of `loss` over `batch`, accumulated in batch
/// order so results do not depend on anything but the inputs.
pub fn batch_grads<S: Scalar, M>(
    model: &M,
    batch: &[usize],
    loss: &impl Fn(&M, &mut Ctx<S>, usize) -> Result<NodeId>,
) -> Result<(f64, NamedGrads<S>)> {
    let mut total = NamedGrads::new();
    let mut sum = 0.0;
    let w = S::of(1.0 / batch.len() as f64);
    for &ex in batch {
        let mut ctx = Ctx::new();
        let l = loss(model, &mut ctx, ex)?;
        sum += ctx.g.value(l).item()?.as_f64();
        total.add_scaled(&ctx.grads(l)?, w);
    }
    Ok((sum / batch.len() as f64, total))
}

/// Adam over shuffled mini-batches of `examples`. After every epoch `valid`
/// scores the model (higher is better); training stops after `patience`
/// epochs without improvement and the best snapshot, including the initial
/// model as epoch 0, is restored into `model`.
pub fn fit<S: Scalar, M: Stores<S> + Clone>(
    model: &mut M,
    examples: &[usize],
    cfg: &FitConfig,
    stage: &'static str,
    loss: impl Fn(&M, &mut Ctx<S>, usize) -> Result<NodeId>,
    valid: impl Fn(&M) -> Result<f64>,
) -> Result<FitLog> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset { stage });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order = examples.to_vec();
    let mut best = (valid(model)?, 0usize, model.clone());
    let mut log = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let (value, grads) = batch_grads(model, batch, &loss)?;
            if !value.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    at: format!("{stage} epoch {epoch} step {steps}"),
                    detail: format!("loss {value}"),
                });
            }
            opt.step(&grads, &mut model.stores_mut())?;
            loss_sum += value;
            steps += 1;
        }
        let valid_auc = valid(model)?;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / steps as f64,
            valid_auc,
        });
        if valid_auc > best.0 {
            best = (valid_auc, epoch, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_valid_auc, best_epoch, snapshot) = best;
    *model = snapshot;
    Ok(FitLog {
        epochs: log,
        best_epoch,
        best_valid_auc,
    })
}
