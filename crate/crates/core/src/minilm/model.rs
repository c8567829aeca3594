use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Ctx, ParamGroup, ParamStore, TrainMask};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tensor};

use super::tokenizer::RESERVED_IDS;

/// Matrices that carry a LoRA adapter in every block.
pub const LORA_TARGETS: [&str; 6] = ["wq", "wk", "wv", "wo", "w1", "w2"];

/// Additive mask value for future positions.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiniLmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl MiniLmConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_len: 256,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab <= RESERVED_IDS.warm || self.max_len == 0 || self.n_layers == 0 || self.lora_rank == 0 {
            return Err(Error::Config("vocab, max_len, n_layers and lora_rank must be positive".into()));
        }
        Ok(())
    }

    /// Shape `[in, out]` of a block matrix.
    fn dims(&self, name: &str) -> (usize, usize) {
        let d = self.d_model;
        match name {
            "w1" => (d, 4 * d),
            "w2" => (4 * d, d),
            _ => (d, d),
        }
    }
}

/// Decoder-only transformer: token and learned positional embeddings,
/// pre-norm causal attention and GELU feed-forward blocks, a final
/// normalization and an output head tied to the token table.
///
/// Block matrices are stored input-major (`[in, out]`, applied as `x·W`).
/// Adapters follow the usual layout `A: [r, in]`, `B: [out, r]`, adding
/// `(α/r)·x·Aᵀ·Bᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniLm<S> {
    pub cfg: MiniLmConfig,
    pub backbone: ParamStore<S>,
    pub lora: ParamStore<S>,
    pub lora_enabled: bool,
}

/// Node handles produced by [`MiniLm::encode`].
pub struct Encoded {
    /// Final normalized hidden states `[L, d]`.
    pub hidden: NodeId,
    /// Per layer, per head attention probabilities `[L, L]`.
    pub attention: Vec<Vec<NodeId>>,
}

impl<S: Scalar> MiniLm<S> {
    pub fn new(cfg: MiniLmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let mut backbone = ParamStore::new(ParamGroup::Backbone);
        backbone.insert("tok_emb", Tensor::randn(&[cfg.vocab, d], 1.0, &mut rng));
        backbone.insert("pos_emb", Tensor::randn(&[cfg.max_len, d], 0.1, &mut rng));
        let mut lora = ParamStore::new(ParamGroup::Lora);
        for l in 0..cfg.n_layers {
            for name in LORA_TARGETS {
                let (i, o) = cfg.dims(name);
                let key = format!("l{l}.{name}");
                backbone.insert(key.clone(), Tensor::randn(&[i, o], 1.0 / (i as f64).sqrt(), &mut rng));
                lora.insert(format!("{key}.a"), Tensor::randn(&[cfg.lora_rank, i], 1.0 / (i as f64).sqrt(), &mut rng));
                lora.insert(format!("{key}.b"), Tensor::zeros(&[o, cfg.lora_rank]));
            }
        }
        Ok(Self {
            cfg,
            backbone,
            lora,
            lora_enabled: true,
        })
    }

    pub fn from_stores(cfg: MiniLmConfig, backbone: ParamStore<S>, lora: ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let check = |store: &ParamStore<S>, name: &str, shape: &[usize]| match store.try_get(name) {
            Some(t) if t.shape() == shape => Ok(()),
            _ => Err(Error::Checkpoint(format!("`{}` missing or of wrong shape", store.key(name)))),
        };
        check(&backbone, "tok_emb", &[cfg.vocab, cfg.d_model])?;
        check(&backbone, "pos_emb", &[cfg.max_len, cfg.d_model])?;
        for l in 0..cfg.n_layers {
            for name in LORA_TARGETS {
                let (i, o) = cfg.dims(name);
                check(&backbone, &format!("l{l}.{name}"), &[i, o])?;
                check(&lora, &format!("l{l}.{name}.a"), &[cfg.lora_rank, i])?;
                check(&lora, &format!("l{l}.{name}.b"), &[o, cfg.lora_rank])?;
            }
        }
        Ok(Self {
            cfg,
            backbone,
            lora,
            lora_enabled: true,
        })
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    /// Plain token-embedding rows `[L, d]` (no positions).
    pub fn embed(&self, ctx: &mut Ctx<S>, ids: &[usize], mask: &TrainMask) -> Result<NodeId> {
        let table = ctx.bind_in(&self.backbone, "tok_emb", mask);
        ctx.g.lookup(table, ids.to_vec())
    }

    fn linear(&self, ctx: &mut Ctx<S>, x: NodeId, key: &str, mask: &TrainMask) -> Result<NodeId> {
        let w = ctx.bind_in(&self.backbone, key, mask);
        let y = ctx.g.matmul(x, w)?;
        if !self.lora_enabled {
            return Ok(y);
        }
        let a = ctx.bind_in(&self.lora, &format!("{key}.a"), mask);
        let b = ctx.bind_in(&self.lora, &format!("{key}.b"), mask);
        let at = ctx.g.transpose(a)?;
        let bt = ctx.g.transpose(b)?;
        let xa = ctx.g.matmul(x, at)?;
        let xab = ctx.g.matmul(xa, bt)?;
        let delta = ctx.g.scale(xab, self.cfg.lora_alpha / self.cfg.lora_rank as f64)?;
        ctx.g.add(y, delta)
    }

    /// Adds positional embeddings to `emb` (`[L, d]`) and runs the blocks.
    pub fn encode(&self, ctx: &mut Ctx<S>, emb: NodeId, mask: &TrainMask) -> Result<Encoded> {
        let (len, d) = ctx.g.value(emb).dims2();
        if len > self.cfg.max_len {
            return Err(Error::Overlength {
                len,
                max_len: self.cfg.max_len,
            });
        }
        if d != self.cfg.d_model || len == 0 {
            return Err(Error::contract("minilm.encode", format!("input [{len}, {d}], model width {}", self.cfg.d_model)));
        }
        let pos_table = ctx.bind_in(&self.backbone, "pos_emb", mask);
        let pos = ctx.g.lookup(pos_table, (0..len).collect())?;
        let mut x = ctx.g.add(emb, pos)?;
        let causal = ctx.constant(Tensor::from_parts(
            vec![len, len],
            (0..len * len)
                .map(|k| if k % len > k / len { S::of(MASKED) } else { S::zero() })
                .collect(),
        ));
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let h = ctx.g.layer_norm(x)?;
            let q = self.linear(ctx, h, &format!("l{l}.wq"), mask)?;
            let k = self.linear(ctx, h, &format!("l{l}.wk"), mask)?;
            let v = self.linear(ctx, h, &format!("l{l}.wv"), mask)?;
            let mut outs = Vec::with_capacity(heads);
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = ctx.g.slice_cols(q, hd * dh, dh)?;
                let kh = ctx.g.slice_cols(k, hd * dh, dh)?;
                let vh = ctx.g.slice_cols(v, hd * dh, dh)?;
                let kt = ctx.g.transpose(kh)?;
                let s = ctx.g.matmul(qh, kt)?;
                let s = ctx.g.scale(s, scale)?;
                let s = ctx.g.add(s, causal)?;
                let p = ctx.g.row_softmax(s)?;
                outs.push(ctx.g.matmul(p, vh)?);
                probs.push(p);
            }
            let cat = if heads == 1 { outs[0] } else { ctx.g.concat_cols(&outs)? };
            let o = self.linear(ctx, cat, &format!("l{l}.wo"), mask)?;
            x = ctx.g.add(x, o)?;
            let h = ctx.g.layer_norm(x)?;
            let f = self.linear(ctx, h, &format!("l{l}.w1"), mask)?;
            let f = ctx.g.gelu(f)?;
            let f = self.linear(ctx, f, &format!("l{l}.w2"), mask)?;
            x = ctx.g.add(x, f)?;
            attention.push(probs);
        }
        let hidden = ctx.g.layer_norm(x)?;
        Ok(Encoded { hidden, attention })
    }

    /// Full logits `[L, |V|]` through the tied head.
    pub fn logits(&self, ctx: &mut Ctx<S>, hidden: NodeId, mask: &TrainMask) -> Result<NodeId> {
        let table = ctx.bind_in(&self.backbone, "tok_emb", mask);
        let t = ctx.g.transpose(table)?;
        ctx.g.matmul(hidden, t)
    }

    /// Hidden state at the last position, `[1, d]`.
    pub fn last_hidden(&self, ctx: &mut Ctx<S>, hidden: NodeId) -> Result<NodeId> {
        let len = ctx.g.value(hidden).rows();
        ctx.g.lookup(hidden, vec![len - 1])
    }

    /// `[l_YES, l_NO]` at the last position, `[1, 2]`. Equal to the two
    /// corresponding columns of the last row of [`MiniLm::logits`].
    pub fn yes_no_logits(&self, ctx: &mut Ctx<S>, hidden: NodeId, mask: &TrainMask) -> Result<NodeId> {
        let last = self.last_hidden(ctx, hidden)?;
        let table = ctx.bind_in(&self.backbone, "tok_emb", mask);
        let rows = ctx.g.lookup(table, vec![RESERVED_IDS.yes, RESERVED_IDS.no])?;
        let t = ctx.g.transpose(rows)?;
        ctx.g.matmul(last, t)
    }

    /// Token ids to `ŷ` node (`[1, 1]`).
    pub fn score_node(&self, ctx: &mut Ctx<S>, ids: &[usize], mask: &TrainMask) -> Result<NodeId> {
        let emb = self.embed(ctx, ids, mask)?;
        self.score_embedded(ctx, emb, mask)
    }

    /// Embedded sequence to `ŷ` node (`[1, 1]`).
    pub fn score_embedded(&self, ctx: &mut Ctx<S>, emb: NodeId, mask: &TrainMask) -> Result<NodeId> {
        let enc = self.encode(ctx, emb, mask)?;
        let l = self.yes_no_logits(ctx, enc.hidden, mask)?;
        yes_no_node(ctx, l)
    }

    /// Evaluation-only `ŷ` for a token sequence.
    pub fn score(&self, ids: &[usize]) -> Result<S> {
        let mut ctx = Ctx::new();
        let p = self.score_node(&mut ctx, ids, &TrainMask::none())?;
        ctx.g.value(p).item()
    }

    /// Evaluation-only final hidden state at the last position.
    pub fn last_state(&self, ids: &[usize]) -> Result<Vec<S>> {
        let mut ctx = Ctx::new();
        let none = TrainMask::none();
        let emb = self.embed(&mut ctx, ids, &none)?;
        let enc = self.encode(&mut ctx, emb, &none)?;
        let last = self.last_hidden(&mut ctx, enc.hidden)?;
        Ok(ctx.g.value(last).data().to_vec())
    }

    /// Evaluation-only full logits.
    pub fn forward(&self, ids: &[usize]) -> Result<Tensor<S>> {
        let mut ctx = Ctx::new();
        let none = TrainMask::none();
        let emb = self.embed(&mut ctx, ids, &none)?;
        let enc = self.encode(&mut ctx, emb, &none)?;
        let l = self.logits(&mut ctx, enc.hidden, &none)?;
        Ok(ctx.g.value(l).clone())
    }
}

/// Two-way softmax over `[l_YES, l_NO]` (`[1, 2]`), probability of YES.
pub fn yes_no_node<S: Scalar>(ctx: &mut Ctx<S>, logits: NodeId) -> Result<NodeId> {
    let p = ctx.g.row_softmax(logits)?;
    ctx.g.slice_cols(p, 0, 1)
}

/// `exp(l_YES) / (exp(l_YES) + exp(l_NO))` read from a full logits row.
pub fn yes_no_probability<S: Scalar>(logits_row: &[S]) -> Result<S> {
    let (y, n) = match (logits_row.get(RESERVED_IDS.yes), logits_row.get(RESERVED_IDS.no)) {
        (Some(&y), Some(&n)) => (y, n),
        _ => {
            return Err(Error::Lookup {
                op: "yes_no_probability",
                index: RESERVED_IDS.no.max(RESERVED_IDS.yes),
                len: logits_row.len(),
            })
        }
    };
    let m = y.max(n);
    let (ey, en) = ((y - m).exp(), (n - m).exp());
    Ok(ey / (ey + en))
}

/// Binary cross-entropy of `ŷ` (`[1, 1]`) against `y`, with `ŷ` clamped to
/// `[1e-12, 1 − 1e-12]`.
pub fn bce_node<S: Scalar>(ctx: &mut Ctx<S>, p: NodeId, y: u8) -> Result<NodeId> {
    let p = ctx.g.clamp(p, 1e-12, 1.0 - 1e-12)?;
    let q = if y == 1 {
        p
    } else {
        let one = ctx.constant(Tensor::full(&[1, 1], S::one()));
        ctx.g.sub(one, p)?
    };
    let lq = ctx.g.log(q)?;
    let l = ctx.g.scale(lq, -1.0)?;
    ctx.g.sum(l)
}

/// Mean binary cross-entropy over `(ŷ, y)` pairs.
pub fn sft_loss<S: Scalar>(pairs: &[(S, u8)]) -> Result<S> {
    if pairs.is_empty() {
        return Err(Error::contract("sft_loss", "empty batch"));
    }
    let mut total = 0.0;
    for &(p, y) in pairs {
        let mut ctx = Ctx::new();
        let pn = ctx.constant(Tensor::full(&[1, 1], p));
        let l = bce_node(&mut ctx, pn, y)?;
        total += ctx.g.value(l).item()?.as_f64();
    }
    Ok(S::of(total / pairs.len() as f64))
}
