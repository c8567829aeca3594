//! Semantic item vectors harvested from the fine-tuned language model: the
//! final hidden state at the last position of each item's description
//! prompt.

use crate::collab::{Provenance, SemanticBank};
use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::minilm::{item_prompt, MiniLm, Tokenizer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn distill_item<S: Scalar>(model: &MiniLm<S>, tok: &Tokenizer, title: &str) -> Result<Vec<S>> {
    if !model.lora_enabled {
        return Err(Error::contract("distill_item", "adapters must be enabled"));
    }
    model.last_state(&item_prompt(tok, title, model.cfg.max_len)?)
}

/// One vector per catalog item, in dense item order, cold items included.
pub fn distill_all<S: Scalar>(
    model: &MiniLm<S>,
    tok: &Tokenizer,
    ds: &InteractionDataset,
    source: &str,
) -> Result<SemanticBank<S>> {
    let mut data = Vec::with_capacity(ds.n_items() * model.d_model());
    for it in &ds.items {
        data.extend(distill_item(model, tok, &it.title)?);
    }
    let t = Tensor::matrix(ds.n_items(), model.d_model(), data)?;
    if !t.all_finite() {
        return Err(Error::NonFinite { op: "distill_all" });
    }
    Ok(SemanticBank::new(t, Provenance::Distilled, source))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::minilm::{build_vocab, MiniLmConfig};
    use crate::tensor::cosine;

    #[test]
    fn bank_covers_catalog_and_round_trips() {
        let ds = synth_generate(&SynthConfig {
            n_users: 30,
            n_items: 40,
            density: 0.2,
            cold_fraction: 0.1,
            ..SynthConfig::default()
        })
        .unwrap();
        let tok = build_vocab(&ds);
        let cfg = MiniLmConfig {
            vocab: tok.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_len: 32,
            lora_rank: 2,
            lora_alpha: 4.0,
        };
        let m = MiniLm::<f64>::new(cfg, 4).unwrap();
        let before = m.clone();
        let bank = distill_all(&m, &tok, &ds, "lm-test").unwrap();
        assert_eq!(m, before);
        assert_eq!(bank.len(), ds.n_items());
        assert_eq!(bank.d_l(), 8);
        assert!(ds.train_items().iter().any(|&w| !w));
        let v = distill_item(&m, &tok, ds.title(3)).unwrap();
        assert_eq!(v.as_slice(), bank.vectors().row(3));
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bank, distill_all(&m, &tok, &ds, "lm-test").unwrap());

        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<i64> = ds.items.iter().map(|i| i.id).collect();
        bank.save(dir.path(), &ids).unwrap();
        assert_eq!(SemanticBank::<f64>::load(dir.path()).unwrap(), bank);
    }
}
