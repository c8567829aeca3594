//! Miniature decoder-only language model with LoRA adapters, its
//! word-level tokenizer, prompt templates and supervised fine-tuning on
//! text-only recommendation prompts.

mod model;
pub mod prompt;
pub mod tokenizer;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::evalrep::auc;
use crate::params::{Ctx, ParamGroup, ParamStore, TrainMask};
use crate::scalar::Scalar;
use crate::train::{fit, FitConfig, FitLog, Stores};

pub use model::{bce_node, sft_loss, yes_no_node, yes_no_probability, Encoded, MiniLm, MiniLmConfig, LORA_TARGETS};
pub use prompt::{encode_interaction, item_prompt, EncodedPrompt, Slots};
pub use tokenizer::{ReservedIds, Tokenizer, RESERVED_IDS};

impl<S: Scalar> Stores<S> for MiniLm<S> {
    fn stores_mut(&mut self) -> Vec<&mut ParamStore<S>> {
        vec![&mut self.backbone, &mut self.lora]
    }
}

/// Vocabulary over the templates and every catalog title.
pub fn build_vocab(ds: &InteractionDataset) -> Tokenizer {
    let corpus = prompt::template_corpus();
    Tokenizer::build(
        corpus
            .iter()
            .map(String::as_str)
            .chain(ds.items.iter().map(|it| it.title.as_str())),
    )
}

/// An encoded interaction ready for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub interaction: usize,
    pub prompt: EncodedPrompt,
    pub label: u8,
}

pub fn encode_split(
    tok: &Tokenizer,
    ds: &InteractionDataset,
    split: Split,
    k_hist: usize,
    slots: Slots,
    max_len: usize,
) -> Result<Vec<Example>> {
    ds.indices(split)
        .into_iter()
        .map(|k| {
            Ok(Example {
                interaction: k,
                prompt: encode_interaction(tok, ds, k, k_hist, slots, max_len)?,
                label: ds.interactions[k].label,
            })
        })
        .collect()
}

/// `ŷ` for each example under the text-only model.
pub fn score_examples<S: Scalar>(model: &MiniLm<S>, examples: &[Example]) -> Result<Vec<S>> {
    examples.iter().map(|e| model.score(&e.prompt.ids)).collect()
}

pub fn examples_auc<S: Scalar>(model: &MiniLm<S>, examples: &[Example]) -> Result<f64> {
    let scores = score_examples(model, examples)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    auc(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    /// Most recent history entries placed in a prompt.
    pub k_hist: usize,
    pub fit: FitConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            k_hist: 10,
            fit: FitConfig {
                lr: 1e-3,
                epochs: 20,
                batch_size: 16,
                patience: 5,
                seed: 0,
            },
        }
    }
}

/// Fine-tunes only the adapters on text-only prompts with binary
/// cross-entropy, keeping the best validation-AUC snapshot.
pub fn train_stage1<S: Scalar>(
    model: &mut MiniLm<S>,
    tok: &Tokenizer,
    ds: &InteractionDataset,
    cfg: &Stage1Config,
) -> Result<FitLog> {
    if !model.lora_enabled {
        return Err(Error::contract("train_stage1", "adapters must be enabled"));
    }
    let max_len = model.cfg.max_len;
    let train = encode_split(tok, ds, Split::Train, cfg.k_hist, Slots::NONE, max_len)?;
    let valid = encode_split(tok, ds, Split::Valid, cfg.k_hist, Slots::NONE, max_len)?;
    let mask = TrainMask::of(&[ParamGroup::Lora]);
    let ix: Vec<usize> = (0..train.len()).collect();
    fit(
        model,
        &ix,
        &cfg.fit,
        "stage 1",
        |m: &MiniLm<S>, ctx: &mut Ctx<S>, e: usize| {
            let p = m.score_node(ctx, &train[e].prompt.ids, &mask)?;
            bce_node(ctx, p, train[e].label)
        },
        |m| examples_auc(m, &valid),
    )
}

#[derive(Serialize, Deserialize)]
struct LmManifest {
    config: MiniLmConfig,
    reserved: ReservedIds,
}

/// Writes backbone and adapter tensors, `tokenizer.json` and `model.json`.
pub fn save_lm<S: Scalar>(dir: &Path, model: &MiniLm<S>, tok: &Tokenizer) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.backbone.save(dir)?;
    model.lora.save(dir)?;
    tok.save(&dir.join("tokenizer.json"))?;
    let m = LmManifest {
        config: model.cfg.clone(),
        reserved: tok.reserved(),
    };
    let p = dir.join("model.json");
    std::fs::write(&p, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(p, e))
}

pub fn load_lm<S: Scalar>(dir: &Path) -> Result<(MiniLm<S>, Tokenizer)> {
    let p = dir.join("model.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: LmManifest = serde_json::from_str(&text)?;
    let tok = Tokenizer::load(&dir.join("tokenizer.json"))?;
    if m.reserved != tok.reserved() || m.config.vocab != tok.len() {
        return Err(Error::Checkpoint(format!("{}: tokenizer does not match model", dir.display())));
    }
    let backbone = ParamStore::load(ParamGroup::Backbone, dir)?;
    let lora = ParamStore::load(ParamGroup::Lora, dir)?;
    Ok((MiniLm::from_stores(m.config, backbone, lora)?, tok))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    fn tiny(vocab: usize) -> MiniLmConfig {
        MiniLmConfig {
            vocab,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_len: 16,
            lora_rank: 2,
            lora_alpha: 4.0,
        }
    }

    #[test]
    fn yes_no_examples() {
        let mut row = vec![0.0f64; 8];
        assert_eq!(yes_no_probability(&row).unwrap(), 0.5);
        row[RESERVED_IDS.yes] = 3f64.ln();
        assert!((yes_no_probability(&row).unwrap() - 0.75).abs() < 1e-15);
        row[RESERVED_IDS.yes] = 1000.0;
        assert!((yes_no_probability(&row).unwrap() - 1.0).abs() < 1e-12);
        row[RESERVED_IDS.yes] = -1000.0;
        assert!(yes_no_probability(&row).unwrap() >= 0.0);
    }

    #[test]
    fn sft_loss_examples() {
        assert!((sft_loss(&[(0.5f64, 1)]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((sft_loss(&[(0.5f64, 1), (0.5, 0)]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(sft_loss(&[(1.0f64, 1), (0.0, 0)]).unwrap() < 1e-11);
    }

    #[test]
    fn causal_rows_ignore_the_future() {
        let m = MiniLm::<f64>::new(tiny(12), 3).unwrap();
        let a = m.forward(&[7, 8, 9, 10]).unwrap();
        let b = m.forward(&[7, 8, 11, 10]).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
        assert_eq!(a, m.forward(&[7, 8, 9, 10]).unwrap());
    }

    #[test]
    fn zero_b_adapters_are_transparent() {
        let mut m = MiniLm::<f64>::new(tiny(12), 3).unwrap();
        let on = m.forward(&[7, 8, 9]).unwrap();
        m.lora_enabled = false;
        assert_eq!(on, m.forward(&[7, 8, 9]).unwrap());
    }

    #[test]
    fn overlength_is_rejected() {
        let m = MiniLm::<f64>::new(tiny(12), 3).unwrap();
        let ids = vec![7; 17];
        assert!(matches!(m.forward(&ids), Err(Error::Overlength { len: 17, max_len: 16 })));
    }

    #[test]
    fn score_matches_full_logits() {
        let m = MiniLm::<f64>::new(tiny(12), 5).unwrap();
        let ids = [7, 9, 8, 10, 11];
        let logits = m.forward(&ids).unwrap();
        let p = yes_no_probability(logits.row(4)).unwrap();
        assert!((m.score(&ids).unwrap() - p).abs() < 1e-15);
    }

    #[test]
    fn adapter_gradient_check() {
        let mut m = MiniLm::<f64>::new(tiny(12), 9).unwrap();
        for name in m.lora.names().map(String::from).collect::<Vec<_>>() {
            if name.ends_with(".b") {
                let shape = m.lora.get(&name).shape().to_vec();
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
                m.lora.insert(name, Tensor::randn(&shape, 0.3, &mut rng));
            }
        }
        let mask = TrainMask::of(&[ParamGroup::Lora]);
        let mut ctx = Ctx::new();
        let p = m.score_node(&mut ctx, &[7, 8, 9, 10], &mask).unwrap();
        let loss = bce_node(&mut ctx, p, 1).unwrap();
        for key in ["lora.l0.wq.b", "lora.l1.w2.a", "lora.l1.wv.b"] {
            let id = ctx.bound_id(key).unwrap();
            let err = grad_check(&mut ctx.g, loss, id, 1e-5).unwrap();
            assert!(err < 1e-3, "{key}: {err}");
        }
        let grads = ctx.grads(loss).unwrap();
        assert!(grads.grads.keys().all(|k| k.starts_with("lora.")));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tok = Tokenizer::build(["a b c d e"]);
        let m = MiniLm::<f64>::new(tiny(tok.len()), 2).unwrap();
        save_lm(dir.path(), &m, &tok).unwrap();
        let (m2, tok2) = load_lm::<f64>(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(tok, tok2);
    }
}
