use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{tag_warm_cold, temporal_split, InteractionDataset, RawRecord};
use crate::error::{Error, Result};

/// Words naming the signed latent axes: entry `2k` is `+axis k`, `2k+1` is
/// `−axis k`.
pub const CLUSTER_WORDS: [&str; 16] = [
    "amber", "azure", "crimson", "dusk", "ember", "frost", "golden", "harbor", "ivory", "jade",
    "lunar", "maple", "north", "onyx", "pearl", "quartz",
];

/// Second-axis descriptors, same indexing as [`CLUSTER_WORDS`].
const SHADE_WORDS: [&str; 16] = [
    "saga", "tale", "quest", "story", "song", "dream", "road", "night", "storm", "garden", "voyage",
    "legend", "river", "signal", "empire", "echo",
];

const TIME_SPAN: f64 = 1_000_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub rank: usize,
    pub density: f64,
    pub noise: f64,
    pub seed: u64,
    /// Share of items that only appear after the train period.
    pub cold_fraction: f64,
    /// Draw latent factors from |N(0,1)| instead of N(0,1).
    pub nonnegative: bool,
    pub ratios: [f64; 3],
    /// Users and items are each drawn around this many latent centroids;
    /// zero draws every factor independently.
    pub clusters: usize,
    /// Standard deviation of a factor around its centroid.
    pub spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 300,
            rank: 4,
            density: 0.05,
            noise: 0.1,
            seed: 7,
            cold_fraction: 0.03,
            nonnegative: false,
            ratios: [6.0, 1.0, 1.0],
            clusters: 3,
            spread: 0.1,
        }
    }
}

fn signed_axis(v: &[f64], skip: Option<usize>) -> (usize, usize) {
    let (k, _) = v
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != skip)
        .fold((usize::MAX, -1.0), |best, (k, x)| if x.abs() > best.1 { (k, x.abs()) } else { best });
    (k, 2 * k + (v[k] < 0.0) as usize)
}

/// Planted low-rank preference data. `label = 1` iff `⟨u, v⟩ + noise·ε > 0`.
/// Titles name the item's dominant and secondary signed latent axes, so the
/// text channel carries partial signal. The returned dataset is split and
/// warm/cold tagged.
pub fn synth_generate(cfg: &SynthConfig) -> Result<InteractionDataset> {
    if cfg.n_users == 0 || cfg.n_items == 0 || cfg.rank == 0 {
        return Err(Error::Config("synth needs positive users, items and rank".into()));
    }
    if !(cfg.density > 0.0 && cfg.density <= 1.0) {
        return Err(Error::Config(format!("density must be in (0,1], got {}", cfg.density)));
    }
    if cfg.rank > CLUSTER_WORDS.len() / 2 {
        return Err(Error::Config(format!("rank at most {}", CLUSTER_WORDS.len() / 2)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let factor = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..cfg.rank)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                if cfg.nonnegative {
                    z.abs()
                } else {
                    z
                }
            })
            .collect()
    };
    let table = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        if cfg.clusters == 0 {
            return (0..n).map(|_| factor(rng)).collect();
        }
        let centroids: Vec<Vec<f64>> = (0..cfg.clusters).map(|_| factor(rng)).collect();
        (0..n)
            .map(|_| {
                let c = &centroids[rng.random_range(0..cfg.clusters)];
                c.iter()
                    .map(|&x| {
                        let z: f64 = StandardNormal.sample(rng);
                        let v = x + cfg.spread * z;
                        if cfg.nonnegative {
                            v.abs()
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let users = table(cfg.n_users, &mut rng);
    let items = table(cfg.n_items, &mut rng);
    let n_cold = (cfg.n_items as f64 * cfg.cold_fraction).round() as usize;
    let cold: Vec<bool> = {
        let mut order: Vec<usize> = (0..cfg.n_items).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut c = vec![false; cfg.n_items];
        for &i in &order[..n_cold] {
            c[i] = true;
        }
        c
    };
    let titles: HashMap<i64, String> = items
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (axis, primary) = signed_axis(v, None);
            let title = if cfg.rank > 1 {
                let (_, secondary) = signed_axis(v, Some(axis));
                format!("{} {} m{i}", CLUSTER_WORDS[primary], SHADE_WORDS[secondary])
            } else {
                format!("{} m{i}", CLUSTER_WORDS[primary])
            };
            (i as i64, title)
        })
        .collect();
    // Cold items only receive interactions after the train period.
    let cold_start = cfg.ratios[0] / cfg.ratios.iter().sum::<f64>();
    let mut records = Vec::new();
    for (u, uf) in users.iter().enumerate() {
        for (i, vf) in items.iter().enumerate() {
            if rng.random::<f64>() >= cfg.density {
                continue;
            }
            let start = if cold[i] { cold_start } else { 0.0 };
            let t = (TIME_SPAN * (start + (1.0 - start) * rng.random::<f64>())) as i64;
            let eps: f64 = StandardNormal.sample(&mut rng);
            let score: f64 = uf.iter().zip(vf).map(|(a, b)| a * b).sum::<f64>() + cfg.noise * eps;
            let label = (score > 0.0) as u8;
            let rating = match (label, score.abs() > 1.0) {
                (1, true) => 5,
                (1, false) => 4,
                (_, false) => 3,
                (_, true) => 1,
            };
            records.push(RawRecord {
                user_id: u as i64,
                item_id: i as i64,
                rating,
                timestamp: t,
                label,
                split: None,
                cold: false,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset { stage: "synth" });
    }
    let mut ds = InteractionDataset::from_records(records, &titles)?;
    temporal_split(&mut ds, cfg.ratios)?;
    tag_warm_cold(&mut ds)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn positive_rank_one_noise_free_is_all_positive() {
        let cfg = SynthConfig {
            n_users: 20,
            n_items: 30,
            rank: 1,
            density: 0.5,
            noise: 0.0,
            nonnegative: true,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        assert!(ds.interactions.iter().all(|it| it.label == 1));
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = synth_generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn withheld_items_are_cold() {
        let ds = synth_generate(&SynthConfig::default()).unwrap();
        let m = ds.manifest();
        assert!(m.splits["test"].cold_items > 0);
        assert_eq!(m.splits["train"].cold_interactions, 0);
        // Catalog is the set of referenced items; each has a title.
        assert!(ds.items.iter().all(|it| it.title.split(' ').count() == 3));
        assert!(ds.interactions.iter().any(|it| it.split == Split::Test && it.cold));
    }

    #[test]
    fn degenerate_config_rejected() {
        let cfg = SynthConfig {
            n_users: 0,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&cfg).is_err());
    }
}
