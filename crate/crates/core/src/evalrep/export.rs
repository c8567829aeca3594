use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::collab::{paired_cosines, CollabModel, ProjCtoL, SemanticBank};
use crate::error::{Error, Result};
use crate::minilm::MiniLm;
use crate::params::{Ctx, TrainMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const COSINE_BINS: usize = 50;

/// Histogram of per-item `cos(proj(e^C_i), e^L_i)` over `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
    /// Items with a zero-norm vector on either side.
    pub skipped: usize,
}

pub fn cosine_report<S: Scalar>(
    collab: &CollabModel<S>,
    proj: &ProjCtoL<S>,
    bank: &SemanticBank<S>,
) -> Result<CosineReport> {
    let all = paired_cosines(collab, proj, bank)?;
    let mut cs: Vec<f64> = all.iter().flatten().map(|c| c.as_f64()).collect();
    if cs.is_empty() {
        return Err(Error::Degenerate("every item has a zero-norm vector".into()));
    }
    let mut counts = vec![0; COSINE_BINS];
    for &c in &cs {
        let b = (((c + 1.0) / 2.0) * COSINE_BINS as f64).floor() as isize;
        counts[b.clamp(0, COSINE_BINS as isize - 1) as usize] += 1;
    }
    let mean = cs.iter().sum::<f64>() / cs.len() as f64;
    cs.sort_by(f64::total_cmp);
    let n = cs.len();
    let median = if n % 2 == 1 { cs[n / 2] } else { (cs[n / 2 - 1] + cs[n / 2]) / 2.0 };
    Ok(CosineReport {
        counts,
        mean,
        median,
        skipped: all.len() - n,
    })
}

impl CosineReport {
    /// `bin_lo,bin_hi,count` rows.
    pub fn to_csv(&self) -> String {
        let w = 2.0 / COSINE_BINS as f64;
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            let lo = -1.0 + b as f64 * w;
            let _ = writeln!(out, "{lo:.2},{:.2},{c}", lo + w);
        }
        out
    }
}

/// CSV with header `item_id,source,v0..v{d-1}`: one `collab-projected` row
/// and one `semantic` row per item. Values use the shortest representation
/// that parses back to the same number.
pub fn embedding_csv<S: Scalar>(
    collab: &CollabModel<S>,
    proj: &ProjCtoL<S>,
    bank: &SemanticBank<S>,
    item_ids: &[i64],
) -> Result<String> {
    if item_ids.len() != bank.len() || collab.n_items() != bank.len() {
        return Err(Error::contract("embedding_export", "item counts disagree"));
    }
    let projected = proj.apply(collab.items())?;
    let d = bank.d_l();
    let mut out = String::from("item_id,source");
    for j in 0..d {
        let _ = write!(out, ",v{j}");
    }
    out.push('\n');
    for (source, table) in [("collab-projected", &projected), ("semantic", bank.vectors())] {
        for (i, id) in item_ids.iter().enumerate() {
            let _ = write!(out, "{id},{source}");
            for v in table.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn embedding_export<S: Scalar>(
    collab: &CollabModel<S>,
    proj: &ProjCtoL<S>,
    bank: &SemanticBank<S>,
    item_ids: &[i64],
    path: &Path,
) -> Result<()> {
    let csv = embedding_csv(collab, proj, bank, item_ids)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

/// Head-averaged attention `[L, L]` of each requested layer for an
/// embedded sequence (`[L, d]`, before positional embeddings).
pub fn attention_maps<S: Scalar>(lm: &MiniLm<S>, embedded: &Tensor<S>, layers: &[usize]) -> Result<Vec<Tensor<S>>> {
    if let Some(&l) = layers.iter().find(|&&l| l >= lm.cfg.n_layers) {
        return Err(Error::Lookup {
            op: "attention_export",
            index: l,
            len: lm.cfg.n_layers,
        });
    }
    let mut ctx = Ctx::new();
    let emb = ctx.constant(embedded.clone());
    let enc = lm.encode(&mut ctx, emb, &TrainMask::none())?;
    let heads = S::of_usize(lm.cfg.n_heads);
    Ok(layers
        .iter()
        .map(|&l| {
            let probs = &enc.attention[l];
            let mut acc = ctx.g.value(probs[0]).clone();
            for &p in &probs[1..] {
                for (a, &b) in acc.data_mut().iter_mut().zip(ctx.g.value(p).data()) {
                    *a += b;
                }
            }
            acc.map(|v| v / heads)
        })
        .collect())
}

/// Square matrix as CSV with token labels on both axes.
pub fn attention_csv<S: Scalar>(tokens: &[String], m: &Tensor<S>) -> Result<String> {
    if m.rows() != tokens.len() || m.cols() != tokens.len() {
        return Err(Error::contract("attention_csv", "labels do not match matrix"));
    }
    let quote = |t: &str| {
        if t.contains([',', '"']) {
            format!("\"{}\"", t.replace('"', "\"\""))
        } else {
            t.to_string()
        }
    };
    let mut out = String::from("token");
    for t in tokens {
        let _ = write!(out, ",{}", quote(t));
    }
    out.push('\n');
    for (i, t) in tokens.iter().enumerate() {
        out.push_str(&quote(t));
        for v in m.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::Provenance;
    use crate::minilm::{MiniLmConfig, Tokenizer};
    use crate::params::{ParamGroup, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn artifacts(seed: u64) -> (CollabModel<f64>, ProjCtoL<f64>, SemanticBank<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let collab = CollabModel::new(3, 20, 4, &mut rng);
        let proj = ProjCtoL::new(4, 8, 64, &mut rng);
        let bank = SemanticBank::new(Tensor::randn(&[20, 64], 1.0, &mut rng), Provenance::Distilled, "t");
        (collab, proj, bank)
    }

    #[test]
    fn identical_vectors_fill_top_bin() {
        let (collab, proj, _) = artifacts(0);
        let bank = SemanticBank::new(proj.apply(collab.items()).unwrap(), Provenance::Aligned, "t");
        let r = cosine_report(&collab, &proj, &bank).unwrap();
        assert_eq!(r.counts[COSINE_BINS - 1], 20);
        assert_eq!(r.skipped, 0);
        assert!((r.mean - 1.0).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), COSINE_BINS + 1);
    }

    #[test]
    fn zero_vectors_are_skipped() {
        let (collab, proj, mut bank) = artifacts(1);
        let mut v = bank.vectors().clone();
        v.row_mut(2).iter_mut().for_each(|x| *x = 0.0);
        bank.store.insert("items", v);
        let r = cosine_report(&collab, &proj, &bank).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.counts.iter().sum::<usize>(), 19);
    }

    #[test]
    fn embedding_csv_round_trips() {
        let (collab, proj, bank) = artifacts(2);
        let ids: Vec<i64> = (100..120).collect();
        let csv = embedding_csv(&collab, &proj, &bank, &ids).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 40);
        assert!(lines[0].starts_with("item_id,source,v0,v1"));
        let row: Vec<&str> = lines[21].split(',').collect();
        assert_eq!(row[0], "100");
        assert_eq!(row[1], "semantic");
        let parsed: Vec<f64> = row[2..].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(parsed.as_slice(), bank.vectors().row(0));
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let tok = Tokenizer::build(["a , b c"]);
        let cfg = MiniLmConfig {
            vocab: tok.len(),
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_len: 8,
            lora_rank: 2,
            lora_alpha: 4.0,
        };
        let lm = MiniLm::<f64>::new(cfg, 0).unwrap();
        let ids = tok.encode("a <User_ID> , b <Warm_ID>");
        let table: &ParamStore<f64> = &lm.backbone;
        assert_eq!(table.group(), ParamGroup::Backbone);
        let mut ctx = Ctx::new();
        let e = lm.embed(&mut ctx, &ids, &TrainMask::none()).unwrap();
        let maps = attention_maps(&lm, ctx.g.value(e), &[0, 1]).unwrap();
        for m in &maps {
            for i in 0..ids.len() {
                let s: f64 = m.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(m.row(i)[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
        let labels: Vec<String> = ids.iter().map(|&i| tok.token(i).unwrap().to_string()).collect();
        let csv = attention_csv(&labels, &maps[1]).unwrap();
        assert!(csv.lines().next().unwrap().contains("<User_ID>"));
        assert!(csv.lines().next().unwrap().contains("\",\""));
        assert!(attention_maps(&lm, ctx.g.value(e), &[2]).is_err());
    }
}
