//! Three-stage orchestration: adapter fine-tuning, distillation, aligned
//! collaborative training and fused fine-tuning, with the trainable/frozen
//! schedule enforced by gradient masks and audited by byte comparison of
//! the serialized parameter groups.

mod checkpoint;
mod variant;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collab::{train_stage2, ProjCtoL, SemanticBank, Stage2Output};
use crate::config::RunConfig;
use crate::data::{hex_string, InteractionDataset, Split};
use crate::distill::distill_all;
use crate::error::{Error, Result};
use crate::evalrep::{warm_cold_report, MetricsReport};
use crate::fusion::{train_stage3, FusionModel, ProjWtoL, Stage3Config};
use crate::minilm::{build_vocab, encode_split, score_examples, train_stage1, Example, MiniLm, Slots, Stage1Config, Tokenizer};
use crate::params::{ParamGroup, ParamStore, TrainMask};
use crate::scalar::Scalar;
use crate::train::{FitConfig, FitLog};

pub use checkpoint::{
    ensure_stage1, ensure_stage2, ensure_stage3, evaluate_run, load_bank, load_stage1, load_stage2, load_stage3,
    save_distill, save_stage1, save_stage2, save_stage3, stage_dir, Manifest, Stage1Artifacts, MANIFEST,
};
pub use variant::{TrainOrder, Variant, VariantSpec};

/// Trainable and frozen parameter groups of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: u8,
    pub trainable: TrainMask,
    pub frozen: TrainMask,
    pub data: String,
    pub epochs: usize,
    pub patience: usize,
}

pub fn stage_plan(stage: u8, cfg: &RunConfig) -> Result<StagePlan> {
    use ParamGroup::*;
    let (trainable, data, epochs, patience) = match stage {
        1 => (
            TrainMask::of(&[Lora]),
            "train split, text-only prompts",
            cfg.stage1.epochs,
            cfg.stage1.patience,
        ),
        2 => (
            TrainMask::of(&[CollabEmbeddings, ItemSemantic, ProjCtoL]),
            "train split interactions and the full item catalog",
            cfg.stage2.epochs,
            cfg.stage2.patience,
        ),
        3 => (
            TrainMask::of(&[CollabEmbeddings, ItemSemantic, ProjCtoL, ProjWtoL]),
            "train split, prompts with placeholders",
            cfg.stage3.epochs,
            cfg.stage3.patience,
        ),
        _ => return Err(Error::Config(format!("no stage {stage}; stages are 1, 2 and 3"))),
    };
    let frozen = TrainMask(ParamGroup::ALL.iter().copied().filter(|g| !trainable.contains(*g)).collect());
    Ok(StagePlan {
        stage,
        trainable,
        frozen,
        data: data.into(),
        epochs,
        patience,
    })
}

/// SHA-256 of a store's serialized bytes.
pub fn group_digest<S: Scalar>(store: &ParamStore<S>) -> String {
    hex_string(&Sha256::digest(store.to_bytes()))
}

/// Digest of every given store, keyed by group name.
pub fn fingerprint<S: Scalar>(stores: &[&ParamStore<S>]) -> BTreeMap<String, String> {
    stores
        .iter()
        .map(|s| (s.group().as_str().to_string(), group_digest(s)))
        .collect()
}

/// Fails with [`Error::FrozenDrift`] when a group frozen in `plan` has a
/// different digest after the stage than before it.
pub fn audit_frozen(
    plan: &StagePlan,
    before: &BTreeMap<String, String>,
    after: &BTreeMap<String, String>,
) -> Result<()> {
    for g in &plan.frozen.0 {
        let name = g.as_str();
        if let (Some(a), Some(b)) = (before.get(name), after.get(name)) {
            if a != b {
                return Err(Error::FrozenDrift {
                    stage: plan.stage,
                    group: name.to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Derives an independent seed for one use of the run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn stage1_config(cfg: &RunConfig) -> Stage1Config {
    Stage1Config {
        k_hist: cfg.k_hist,
        fit: FitConfig {
            seed: derive_seed(cfg.seed, "stage1"),
            ..cfg.stage1.clone()
        },
    }
}

pub struct Stage1Output<S> {
    pub lm: MiniLm<S>,
    pub tok: Tokenizer,
    pub log: FitLog,
}

/// Builds the vocabulary, initializes the model and fine-tunes its adapters.
pub fn run_stage1<S: Scalar>(ds: &InteractionDataset, cfg: &RunConfig) -> Result<Stage1Output<S>> {
    cfg.validate()?;
    let plan = stage_plan(1, cfg)?;
    let tok = build_vocab(ds);
    let mut lm = MiniLm::new(cfg.lm_config(tok.len()), derive_seed(cfg.seed, "lm-init"))?;
    let before = fingerprint(&[&lm.backbone, &lm.lora]);
    let log = train_stage1(&mut lm, &tok, ds, &stage1_config(cfg))?;
    audit_frozen(&plan, &before, &fingerprint(&[&lm.backbone, &lm.lora]))?;
    Ok(Stage1Output { lm, tok, log })
}

/// Distills the semantic bank; the model must come out bit-identical.
pub fn run_distill<S: Scalar>(
    lm: &MiniLm<S>,
    tok: &Tokenizer,
    ds: &InteractionDataset,
    source: &str,
) -> Result<SemanticBank<S>> {
    let before = fingerprint(&[&lm.backbone, &lm.lora]);
    let bank = distill_all(lm, tok, ds, source)?;
    let plan = StagePlan {
        stage: 1,
        trainable: TrainMask::none(),
        frozen: TrainMask::of(&[ParamGroup::Backbone, ParamGroup::Lora]),
        data: "item catalog".into(),
        epochs: 0,
        patience: 0,
    };
    audit_frozen(&plan, &before, &fingerprint(&[&lm.backbone, &lm.lora]))?;
    Ok(bank)
}

pub fn align_config(cfg: &RunConfig, alignment: bool) -> crate::collab::AlignConfig {
    crate::collab::AlignConfig {
        seed: derive_seed(cfg.seed, "stage2"),
        lambda: if alignment { cfg.stage2.lambda } else { 0.0 },
        ..cfg.stage2.clone()
    }
}

/// Collaborative training with (`alignment`) or without the contrastive
/// term. Without it the bank must come back bit-identical.
pub fn run_stage2<S: Scalar>(
    ds: &InteractionDataset,
    bank: &SemanticBank<S>,
    cfg: &RunConfig,
    alignment: bool,
) -> Result<Stage2Output<S>> {
    cfg.validate()?;
    let acfg = align_config(cfg, alignment);
    let out = train_stage2(ds, bank, cfg.d_c, &acfg)?;
    if acfg.lambda == 0.0 && group_digest(&out.bank.store) != group_digest(&bank.store) {
        return Err(Error::FrozenDrift {
            stage: 2,
            group: ParamGroup::ItemSemantic.as_str().into(),
        });
    }
    Ok(out)
}

/// Assembles the stage-3 model. The collaborative-to-LM projection is the
/// stage-2 projection when the variant warm-starts it, otherwise a fresh
/// random one drawn from a seed shared by all variants.
pub fn init_fusion<S: Scalar>(
    lm: &MiniLm<S>,
    s2: &Stage2Output<S>,
    cfg: &RunConfig,
    spec: &VariantSpec,
) -> FusionModel<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "stage3-init"));
    let random = ProjCtoL::new(s2.proj.d_in(), s2.proj.hidden(), s2.proj.d_out(), &mut rng);
    let w2l = ProjWtoL::new(lm.d_model(), &mut rng);
    FusionModel {
        lm: lm.clone(),
        collab: s2.collab.clone(),
        bank: s2.bank.clone(),
        c2l: if spec.warm_start { s2.proj.clone() } else { random },
        w2l,
    }
}

pub fn stage3_config(cfg: &RunConfig, spec: &VariantSpec) -> Stage3Config {
    Stage3Config {
        k_hist: cfg.k_hist,
        slots: spec.slots(),
        phases: spec.phases(),
        fit: FitConfig {
            seed: derive_seed(cfg.seed, "stage3"),
            ..cfg.stage3.clone()
        },
    }
}

/// Stage-3 training with the language model audited unchanged.
pub fn run_stage3<S: Scalar>(
    fm: &mut FusionModel<S>,
    tok: &Tokenizer,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    spec: &VariantSpec,
) -> Result<Vec<FitLog>> {
    cfg.validate()?;
    let plan = stage_plan(3, cfg)?;
    let before = fingerprint(&[&fm.lm.backbone, &fm.lm.lora]);
    let logs = train_stage3(fm, tok, ds, &stage3_config(cfg, spec))?;
    audit_frozen(&plan, &before, &fingerprint(&[&fm.lm.backbone, &fm.lm.lora]))?;
    Ok(logs)
}

fn scored(examples: &[Example], scores: Vec<impl Scalar>) -> Vec<(usize, f64)> {
    examples
        .iter()
        .zip(scores)
        .map(|(e, s)| (e.interaction, s.as_f64()))
        .collect()
}

/// Warm/cold report of the fused model on one split.
pub fn fusion_report<S: Scalar>(
    fm: &FusionModel<S>,
    tok: &Tokenizer,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    spec: &VariantSpec,
    split: Split,
    dataset: &str,
) -> Result<MetricsReport> {
    let ex = encode_split(tok, ds, split, cfg.k_hist, spec.slots(), fm.lm.cfg.max_len)?;
    let s = fm.scores(ds, &ex)?;
    warm_cold_report(dataset, &spec.name, ds, &scored(&ex, s))
}

/// Name of the text-only stage-1 model in reports.
pub const STAGE1_NAME: &str = "stage1-only";

/// Warm/cold report of the text-only stage-1 model on one split.
pub fn text_report<S: Scalar>(
    lm: &MiniLm<S>,
    tok: &Tokenizer,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    split: Split,
    dataset: &str,
) -> Result<MetricsReport> {
    let ex = encode_split(tok, ds, split, cfg.k_hist, Slots::NONE, lm.cfg.max_len)?;
    let s = score_examples(lm, &ex)?;
    warm_cold_report(dataset, STAGE1_NAME, ds, &scored(&ex, s))
}

/// Validation AUC of the fused model on warm interactions only.
pub fn warm_valid_auc<S: Scalar>(
    fm: &FusionModel<S>,
    tok: &Tokenizer,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    spec: &VariantSpec,
) -> Result<f64> {
    let ex: Vec<Example> = encode_split(tok, ds, Split::Valid, cfg.k_hist, spec.slots(), fm.lm.cfg.max_len)?
        .into_iter()
        .filter(|e| !ds.interactions[e.interaction].cold)
        .collect();
    fm.auc(ds, &ex)
}

/// Stage-1 and stage-2 results shared by every variant of one run.
pub struct SharedStages<S> {
    pub stage1: Stage1Output<S>,
    pub distilled: SemanticBank<S>,
    aligned: Option<Stage2Output<S>>,
    plain: Option<Stage2Output<S>>,
}

impl<S: Scalar> SharedStages<S> {
    pub fn build(ds: &InteractionDataset, cfg: &RunConfig) -> Result<Self> {
        let stage1 = run_stage1(ds, cfg)?;
        let distilled = run_distill(&stage1.lm, &stage1.tok, ds, "stage1")?;
        Ok(Self {
            stage1,
            distilled,
            aligned: None,
            plain: None,
        })
    }

    /// Stage-2 output with or without alignment, trained on first use.
    pub fn stage2(&mut self, ds: &InteractionDataset, cfg: &RunConfig, alignment: bool) -> Result<&Stage2Output<S>> {
        let slot = if alignment { &mut self.aligned } else { &mut self.plain };
        if slot.is_none() {
            *slot = Some(run_stage2(ds, &self.distilled, cfg, alignment)?);
        }
        Ok(slot.as_ref().expect("filled above"))
    }

    /// Stage-2 output if it has been trained.
    pub fn trained(&self, alignment: bool) -> Option<&Stage2Output<S>> {
        if alignment {
            self.aligned.as_ref()
        } else {
            self.plain.as_ref()
        }
    }
}

pub struct VariantRun<S> {
    pub spec: VariantSpec,
    /// Warm-slice validation AUC before any stage-3 update.
    pub step0_warm_valid_auc: f64,
    pub logs: Vec<FitLog>,
    pub test: MetricsReport,
    pub model: FusionModel<S>,
}

/// Runs stage 3 of one variant on top of the shared stages and reports its
/// test metrics.
pub fn run_variant<S: Scalar>(
    shared: &mut SharedStages<S>,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    variant: Variant,
    dataset: &str,
) -> Result<VariantRun<S>> {
    let spec = variant.spec();
    shared.stage2(ds, cfg, spec.alignment)?;
    let s2 = shared.trained(spec.alignment).expect("trained above");
    let lm = &shared.stage1.lm;
    let tok = &shared.stage1.tok;
    let mut fm = init_fusion(lm, s2, cfg, &spec);
    let step0_warm_valid_auc = warm_valid_auc(&fm, tok, ds, cfg, &spec)?;
    let logs = run_stage3(&mut fm, tok, ds, cfg, &spec)?;
    let test = fusion_report(&fm, tok, ds, cfg, &spec, Split::Test, dataset)?;
    Ok(VariantRun {
        spec,
        step0_warm_valid_auc,
        logs,
        test,
        model: fm,
    })
}
