//! Run configuration: every hyperparameter of the three stages, readable
//! from `key = value` files. Blank lines and `#` comments are ignored;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collab::AlignConfig;
use crate::data::{hex_string, SynthConfig};
use crate::error::{Error, Result};
use crate::minilm::MiniLmConfig;
use crate::train::FitConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Dataset directory (as written by `ingest` or `synth`).
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints and reports.
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub synth: SynthConfig,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// History entries per prompt.
    pub k_hist: usize,
    pub stage1: FitConfig,
    pub d_c: usize,
    /// Stage-2 settings; its `seed` field is ignored in favour of `seed`.
    pub stage2: AlignConfig,
    pub stage3: FitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lm = MiniLmConfig::new(0);
        Self {
            data: None,
            out: None,
            seed: 0,
            synth: SynthConfig::default(),
            d_model: lm.d_model,
            n_layers: lm.n_layers,
            n_heads: lm.n_heads,
            max_len: lm.max_len,
            lora_rank: lm.lora_rank,
            lora_alpha: lm.lora_alpha,
            k_hist: 10,
            stage1: FitConfig {
                lr: 1e-3,
                epochs: 20,
                batch_size: 16,
                patience: 5,
                seed: 0,
            },
            d_c: 32,
            stage2: AlignConfig::default(),
            stage3: FitConfig {
                lr: 1e-4,
                epochs: 20,
                batch_size: 16,
                patience: 5,
                seed: 0,
            },
        }
    }
}

/// Accepted keys, in documentation order.
pub const KEYS: &[&str] = &[
    "data",
    "out",
    "seed",
    "synth.users",
    "synth.items",
    "synth.rank",
    "synth.density",
    "synth.noise",
    "synth.seed",
    "synth.cold_fraction",
    "synth.clusters",
    "synth.spread",
    "synth.ratios",
    "d_model",
    "n_layers",
    "n_heads",
    "max_len",
    "lora_rank",
    "lora_alpha",
    "k_hist",
    "stage1.lr",
    "stage1.epochs",
    "stage1.batch_size",
    "stage1.patience",
    "d_c",
    "proj_hidden",
    "lambda",
    "tau",
    "l2",
    "align_batch",
    "stage2.lr",
    "stage2.epochs",
    "stage2.batch_size",
    "stage2.patience",
    "stage3.lr",
    "stage3.epochs",
    "stage3.batch_size",
    "stage3.patience",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_ratios(value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(':')
        .map(|p| parse("synth.ratios", p.trim()))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        &[a, b, c] if a > 0.0 && b > 0.0 && c > 0.0 => Ok([a, b, c]),
        _ => Err(Error::Config(format!("synth.ratios must be three positive numbers a:b:c, got `{value}`"))),
    }
}

impl RunConfig {
    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "seed" => self.seed = parse(key, v)?,
            "synth.users" => self.synth.n_users = parse(key, v)?,
            "synth.items" => self.synth.n_items = parse(key, v)?,
            "synth.rank" => self.synth.rank = parse(key, v)?,
            "synth.density" => self.synth.density = parse(key, v)?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "synth.cold_fraction" => self.synth.cold_fraction = parse(key, v)?,
            "synth.clusters" => self.synth.clusters = parse(key, v)?,
            "synth.spread" => self.synth.spread = parse(key, v)?,
            "synth.ratios" => self.synth.ratios = parse_ratios(v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "lora_rank" => self.lora_rank = parse(key, v)?,
            "lora_alpha" => self.lora_alpha = parse(key, v)?,
            "k_hist" => self.k_hist = parse(key, v)?,
            "stage1.lr" => self.stage1.lr = parse(key, v)?,
            "stage1.epochs" => self.stage1.epochs = parse(key, v)?,
            "stage1.batch_size" => self.stage1.batch_size = parse(key, v)?,
            "stage1.patience" => self.stage1.patience = parse(key, v)?,
            "d_c" => self.d_c = parse(key, v)?,
            "proj_hidden" => self.stage2.proj_hidden = parse(key, v)?,
            "lambda" => self.stage2.lambda = parse(key, v)?,
            "tau" => self.stage2.tau = parse(key, v)?,
            "l2" => self.stage2.l2 = parse(key, v)?,
            "align_batch" => self.stage2.align_batch = parse(key, v)?,
            "stage2.lr" => self.stage2.lr = parse(key, v)?,
            "stage2.epochs" => self.stage2.epochs = parse(key, v)?,
            "stage2.batch_size" => self.stage2.batch_size = parse(key, v)?,
            "stage2.patience" => self.stage2.patience = parse(key, v)?,
            "stage3.lr" => self.stage3.lr = parse(key, v)?,
            "stage3.epochs" => self.stage3.epochs = parse(key, v)?,
            "stage3.batch_size" => self.stage3.batch_size = parse(key, v)?,
            "stage3.patience" => self.stage3.patience = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.lm_config(8).validate()?;
        if self.d_c == 0 || self.k_hist == 0 {
            return Err(Error::Config("d_c and k_hist must be positive".into()));
        }
        if !(self.stage2.tau > 0.0) || self.stage2.lambda < 0.0 {
            return Err(Error::Config("tau must be positive and lambda non-negative".into()));
        }
        for (name, f) in [("stage1", &self.stage1), ("stage3", &self.stage3)] {
            if f.batch_size == 0 || !(f.lr > 0.0) {
                return Err(Error::Config(format!("{name}: batch_size and lr must be positive")));
            }
        }
        Ok(())
    }

    pub fn lm_config(&self, vocab: usize) -> MiniLmConfig {
        MiniLmConfig {
            vocab,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_len: self.max_len,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
        }
    }

    /// Hash of every setting that affects results (paths excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data = None;
        c.out = None;
        let json = serde_json::to_string(&c).unwrap_or_default();
        hex_string(&Sha256::digest(json.as_bytes()))
    }

    /// `key = value` lines reproducing this configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.synth;
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        if let Some(d) = &self.data {
            put("data", d.display().to_string());
        }
        if let Some(o) = &self.out {
            put("out", o.display().to_string());
        }
        put("seed", self.seed.to_string());
        put("synth.users", s.n_users.to_string());
        put("synth.items", s.n_items.to_string());
        put("synth.rank", s.rank.to_string());
        put("synth.density", s.density.to_string());
        put("synth.noise", s.noise.to_string());
        put("synth.seed", s.seed.to_string());
        put("synth.cold_fraction", s.cold_fraction.to_string());
        put("synth.clusters", s.clusters.to_string());
        put("synth.spread", s.spread.to_string());
        put("synth.ratios", format!("{}:{}:{}", s.ratios[0], s.ratios[1], s.ratios[2]));
        put("d_model", self.d_model.to_string());
        put("n_layers", self.n_layers.to_string());
        put("n_heads", self.n_heads.to_string());
        put("max_len", self.max_len.to_string());
        put("lora_rank", self.lora_rank.to_string());
        put("lora_alpha", self.lora_alpha.to_string());
        put("k_hist", self.k_hist.to_string());
        for (p, f) in [("stage1", &self.stage1), ("stage3", &self.stage3)] {
            put(&format!("{p}.lr"), f.lr.to_string());
            put(&format!("{p}.epochs"), f.epochs.to_string());
            put(&format!("{p}.batch_size"), f.batch_size.to_string());
            put(&format!("{p}.patience"), f.patience.to_string());
        }
        let a = &self.stage2;
        put("d_c", self.d_c.to_string());
        put("proj_hidden", a.proj_hidden.to_string());
        put("lambda", a.lambda.to_string());
        put("tau", a.tau.to_string());
        put("l2", a.l2.to_string());
        put("align_batch", a.align_batch.to_string());
        put("stage2.lr", a.lr.to_string());
        put("stage2.epochs", a.epochs.to_string());
        put("stage2.batch_size", a.batch_size.to_string());
        put("stage2.patience", a.patience.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let mut c = RunConfig::default();
        c.apply_text("# desk run\nd_model = 32\nlambda=0.5\n\nsynth.ratios = 6:1:1 # train heavy\n", Path::new("x"))
            .unwrap();
        assert_eq!(c.d_model, 32);
        assert_eq!(c.stage2.lambda, 0.5);
        assert_eq!(c.synth.ratios, [6.0, 1.0, 1.0]);
        let e = c.apply_text("d_model = 32\nbogus = 1\n", Path::new("cfg.txt")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(e.to_string().contains("bogus"));
        assert!(c.apply_text("d_model = many", Path::new("x")).is_err());
        assert!(c.apply_text("no equals sign", Path::new("x")).is_err());
    }

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut c = RunConfig::default();
        c.set("stage3.lr", "0.001").unwrap();
        c.set("out", "runs/a").unwrap();
        let text = c.to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let mut want: Vec<&str> = KEYS.iter().copied().filter(|&k| k != "data").collect();
        let mut got = keys.clone();
        want.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, want);
        let mut d = RunConfig::default();
        d.apply_text(&text, Path::new("x")).unwrap();
        assert_eq!(c, d);
        assert_eq!(c.hash(), d.hash());
    }

    #[test]
    fn hash_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
