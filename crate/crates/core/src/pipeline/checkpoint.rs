//! On-disk run layout. Every stage directory holds its tensor dumps and a
//! `manifest.json` recording the configuration, data hash, seed, toggles,
//! per-group digests and the artifact ids of its inputs.
//!
//! ```text
//! <out>/config.txt
//! <out>/stage1/                 adapters, backbone, tokenizer
//! <out>/distill/                distilled semantic bank
//! <out>/stage2-aligned/         collaborative tables, projection, bank
//! <out>/stage2-plain/           the same trained without alignment
//! <out>/stage3/<variant>/       fused stage-3 groups
//! <out>/eval/<variant>/         report.json, report.txt
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    fingerprint, fusion_report, init_fusion, run_distill, run_stage1, run_stage2, run_stage3, stage_plan,
    text_report, warm_valid_auc, Stage1Output, StagePlan, Variant, VariantSpec,
};
use crate::collab::{CollabModel, ProjCtoL, SemanticBank, Stage2Output};
use crate::config::RunConfig;
use crate::data::{hex_string, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::evalrep::{text_table, MetricsReport};
use crate::fusion::{FusionModel, ProjWtoL};
use crate::minilm::{load_lm, save_lm, MiniLm, Tokenizer};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::train::{EpochLog, FitLog};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub variant: Option<VariantSpec>,
    pub seed: u64,
    pub config_hash: String,
    pub data_hash: String,
    pub plan: Option<StagePlan>,
    /// Artifact ids of the checkpoints this one was built from.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each saved parameter group.
    pub groups: BTreeMap<String, String>,
    pub artifact_id: String,
    pub logs: Vec<FitLog>,
    /// Scalar diagnostics such as mean cosines or step-0 AUC.
    pub metrics: BTreeMap<String, f64>,
    pub config: RunConfig,
}

impl Manifest {
    fn new(stage: &str, ds: &InteractionDataset, cfg: &RunConfig) -> Self {
        Self {
            stage: stage.into(),
            variant: None,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            data_hash: ds.content_hash(),
            plan: None,
            inputs: BTreeMap::new(),
            groups: BTreeMap::new(),
            artifact_id: String::new(),
            logs: Vec::new(),
            metrics: BTreeMap::new(),
            config: cfg.clone(),
        }
    }

    fn seal(mut self, groups: BTreeMap<String, String>) -> Self {
        let mut h = Sha256::new();
        h.update(self.stage.as_bytes());
        for (k, v) in self.inputs.iter().chain(&groups) {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        self.groups = groups;
        self.artifact_id = hex_string(&h.finalize())[..16].to_string();
        self
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(MANIFEST), &(serde_json::to_string_pretty(self)? + "\n"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Directory of a stage: `stage1`, `distill`, `stage2-aligned`,
/// `stage2-plain`, `stage3/<slug>` or `eval/<slug>`.
pub fn stage_dir(out: &Path, stage: &str, variant: Option<Variant>) -> PathBuf {
    match variant {
        Some(v) => out.join(stage).join(v.slug()),
        None => out.join(stage),
    }
}

fn stage2_name(alignment: bool) -> &'static str {
    if alignment {
        "stage2-aligned"
    } else {
        "stage2-plain"
    }
}

/// Reads a prerequisite's manifest, checking that it was produced from the
/// same data and seed.
fn prerequisite(dir: &Path, needed_by: u8, what: &str, ds: &InteractionDataset, cfg: &RunConfig) -> Result<Manifest> {
    if !dir.join(MANIFEST).is_file() {
        return Err(Error::MissingPrerequisite {
            stage: needed_by,
            what: format!("{what} checkpoint at {}", dir.display()),
        });
    }
    let m = Manifest::read(dir)?;
    if m.data_hash != ds.content_hash() {
        return Err(Error::Checkpoint(format!("{} was built from different data", dir.display())));
    }
    if m.seed != cfg.seed {
        return Err(Error::Checkpoint(format!(
            "{} was built with seed {}, this run uses {}",
            dir.display(),
            m.seed,
            cfg.seed
        )));
    }
    Ok(m)
}

/// Fails when a loaded group no longer matches its recorded digest.
fn verify<S: Scalar>(dir: &Path, m: &Manifest, stores: &[&ParamStore<S>]) -> Result<()> {
    for (k, v) in fingerprint(stores) {
        if m.groups.get(&k) != Some(&v) {
            return Err(Error::Checkpoint(format!("{}: `{k}` does not match its manifest", dir.display())));
        }
    }
    Ok(())
}

pub fn save_stage1<S: Scalar>(out: &Path, ds: &InteractionDataset, cfg: &RunConfig, s1: &Stage1Output<S>) -> Result<Manifest> {
    let dir = stage_dir(out, "stage1", None);
    save_lm(&dir, &s1.lm, &s1.tok)?;
    let mut m = Manifest::new("stage1", ds, cfg);
    m.plan = Some(stage_plan(1, cfg)?);
    m.logs = vec![s1.log.clone()];
    let m = m.seal(fingerprint(&[&s1.lm.backbone, &s1.lm.lora]));
    m.write(&dir)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    Ok(m)
}

pub fn load_stage1<S: Scalar>(
    out: &Path,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    needed_by: u8,
) -> Result<(MiniLm<S>, Tokenizer, Manifest)> {
    let dir = stage_dir(out, "stage1", None);
    let m = prerequisite(&dir, needed_by, "stage-1", ds, cfg)?;
    let (lm, tok) = load_lm::<S>(&dir)?;
    verify(&dir, &m, &[&lm.backbone, &lm.lora])?;
    Ok((lm, tok, m))
}

pub fn save_distill<S: Scalar>(
    out: &Path,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    bank: &SemanticBank<S>,
    stage1: &Manifest,
) -> Result<Manifest> {
    let dir = stage_dir(out, "distill", None);
    let ids: Vec<i64> = ds.items.iter().map(|it| it.id).collect();
    bank.save(&dir, &ids)?;
    let mut m = Manifest::new("distill", ds, cfg);
    m.inputs.insert("stage1".into(), stage1.artifact_id.clone());
    let m = m.seal(fingerprint(&[&bank.store]));
    m.write(&dir)?;
    Ok(m)
}

pub fn load_bank<S: Scalar>(
    out: &Path,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    needed_by: u8,
) -> Result<(SemanticBank<S>, Manifest)> {
    let dir = stage_dir(out, "distill", None);
    let m = prerequisite(&dir, needed_by, "distilled bank", ds, cfg)?;
    let bank = SemanticBank::<S>::load(&dir)?;
    verify(&dir, &m, &[&bank.store])?;
    Ok((bank, m))
}

pub fn save_stage2<S: Scalar>(
    out: &Path,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    alignment: bool,
    s2: &Stage2Output<S>,
    distill: &Manifest,
) -> Result<Manifest> {
    let dir = stage_dir(out, stage2_name(alignment), None);
    s2.collab.store.save(&dir)?;
    s2.proj.store.save(&dir)?;
    let ids: Vec<i64> = ds.items.iter().map(|it| it.id).collect();
    s2.bank.save(&dir, &ids)?;
    let mut m = Manifest::new(stage2_name(alignment), ds, cfg);
    m.plan = Some(stage_plan(2, cfg)?);
    m.inputs.insert("distill".into(), distill.artifact_id.clone());
    m.logs = vec![FitLog {
        best_valid_auc: s2
            .log
            .iter()
            .find(|e| e.epoch == s2.best_epoch)
            .map_or(f64::NAN, |e| e.valid_auc),
        best_epoch: s2.best_epoch,
        epochs: s2.log.clone(),
    }];
    m.metrics.insert("lambda".into(), super::align_config(cfg, alignment).lambda);
    m.metrics.insert("init_mean_cosine".into(), s2.init_mean_cosine);
    m.metrics.insert("final_mean_cosine".into(), s2.final_mean_cosine);
    let m = m.seal(fingerprint(&[&s2.collab.store, &s2.proj.store, &s2.bank.store]));
    m.write(&dir)?;
    Ok(m)
}

pub fn load_stage2<S: Scalar>(
    out: &Path,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    alignment: bool,
    needed_by: u8,
) -> Result<(Stage2Output<S>, Manifest)> {
    let dir = stage_dir(out, stage2_name(alignment), None);
    let what = if alignment { "aligned stage-2" } else { "unaligned stage-2" };
    let m = prerequisite(&dir, needed_by, what, ds, cfg)?;
    let collab = CollabModel::from_store(ParamStore::load(ParamGroup::CollabEmbeddings, &dir)?)?;
    let proj = ProjCtoL::from_store(ParamStore::load(ParamGroup::ProjCtoL, &dir)?)?;
    let bank = SemanticBank::<S>::load(&dir)?;
    verify(&dir, &m, &[&collab.store, &proj.store, &bank.store])?;
    let log = m.logs.first().cloned().unwrap_or(FitLog {
        epochs: Vec::<EpochLog>::new(),
        best_epoch: 0,
        best_valid_auc: f64::NAN,
    });
    let metric = |k: &str| m.metrics.get(k).copied().unwrap_or(f64::NAN);
    let out = Stage2Output {
        collab,
        bank,
        proj,
        log: log.epochs,
        best_epoch: log.best_epoch,
        init_mean_cosine: metric("init_mean_cosine"),
        final_mean_cosine: metric("final_mean_cosine"),
    };
    Ok((out, m))
}

#[allow(clippy::too_many_arguments)]
pub fn save_stage3<S: Scalar>(
    out: &Path,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    variant: Variant,
    fm: &FusionModel<S>,
    logs: &[FitLog],
    step0_warm_valid_auc: f64,
    inputs: &[&Manifest],
) -> Result<Manifest> {
    let dir = stage_dir(out, "stage3", Some(variant));
    for s in [&fm.collab.store, &fm.c2l.store, &fm.w2l.store] {
        s.save(&dir)?;
    }
    let ids: Vec<i64> = ds.items.iter().map(|it| it.id).collect();
    fm.bank.save(&dir, &ids)?;
    let mut m = Manifest::new("stage3", ds, cfg);
    m.variant = Some(variant.spec());
    m.plan = Some(stage_plan(3, cfg)?);
    for i in inputs {
        m.inputs.insert(i.stage.clone(), i.artifact_id.clone());
    }
    m.logs = logs.to_vec();
    m.metrics.insert("step0_warm_valid_auc".into(), step0_warm_valid_auc);
    let m = m.seal(fingerprint(&[
        &fm.lm.backbone,
        &fm.lm.lora,
        &fm.collab.store,
        &fm.bank.store,
        &fm.c2l.store,
        &fm.w2l.store,
    ]));
    m.write(&dir)?;
    Ok(m)
}

pub fn load_stage3<S: Scalar>(
    out: &Path,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    variant: Variant,
) -> Result<(FusionModel<S>, Tokenizer, Manifest)> {
    let (lm, tok, _) = load_stage1::<S>(out, ds, cfg, 3)?;
    let dir = stage_dir(out, "stage3", Some(variant));
    let m = prerequisite(&dir, 3, &format!("{variant} stage-3"), ds, cfg).map_err(|e| match e {
        Error::MissingPrerequisite { what, .. } => Error::MissingPrerequisite { stage: 4, what },
        e => e,
    })?;
    let fm = FusionModel {
        lm,
        collab: CollabModel::from_store(ParamStore::load(ParamGroup::CollabEmbeddings, &dir)?)?,
        bank: SemanticBank::load(&dir)?,
        c2l: ProjCtoL::from_store(ParamStore::load(ParamGroup::ProjCtoL, &dir)?)?,
        w2l: ProjWtoL::from_store(ParamStore::load(ParamGroup::ProjWtoL, &dir)?)?,
    };
    verify(
        &dir,
        &m,
        &[&fm.lm.backbone, &fm.lm.lora, &fm.collab.store, &fm.bank.store, &fm.c2l.store, &fm.w2l.store],
    )?;
    Ok((fm, tok, m))
}

/// Stage-1 model, tokenizer and manifest, then the distilled bank and its
/// manifest.
pub type Stage1Artifacts<S> = (MiniLm<S>, Tokenizer, Manifest, SemanticBank<S>, Manifest);

/// Loads stage 1 and the distilled bank, running and saving whichever is
/// missing.
pub fn ensure_stage1<S: Scalar>(
    out: &Path,
    ds: &InteractionDataset,
    cfg: &RunConfig,
) -> Result<Stage1Artifacts<S>> {
    let (lm, tok, m1) = match load_stage1::<S>(out, ds, cfg, 1) {
        Ok(x) => x,
        Err(Error::MissingPrerequisite { .. }) => {
            let s1 = run_stage1::<S>(ds, cfg)?;
            let m = save_stage1(out, ds, cfg, &s1)?;
            (s1.lm, s1.tok, m)
        }
        Err(e) => return Err(e),
    };
    let (bank, md) = match load_bank::<S>(out, ds, cfg, 2) {
        Ok(x) => x,
        Err(Error::MissingPrerequisite { .. }) => {
            let bank = run_distill(&lm, &tok, ds, &m1.artifact_id)?;
            let m = save_distill(out, ds, cfg, &bank, &m1)?;
            (bank, m)
        }
        Err(e) => return Err(e),
    };
    Ok((lm, tok, m1, bank, md))
}

/// Loads or trains the stage-2 checkpoint with or without alignment.
pub fn ensure_stage2<S: Scalar>(
    out: &Path,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    alignment: bool,
    bank: &SemanticBank<S>,
    distill: &Manifest,
) -> Result<(Stage2Output<S>, Manifest)> {
    match load_stage2::<S>(out, ds, cfg, alignment, 3) {
        Err(Error::MissingPrerequisite { .. }) => {
            let s2 = run_stage2(ds, bank, cfg, alignment)?;
            let m = save_stage2(out, ds, cfg, alignment, &s2, distill)?;
            Ok((s2, m))
        }
        r => r,
    }
}

/// Trains and saves stage 3 of `variant` from existing stage-1, distill and
/// stage-2 checkpoints; with `create` missing prerequisites are trained
/// instead of reported.
pub fn ensure_stage3<S: Scalar>(
    out: &Path,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    variant: Variant,
    create: bool,
) -> Result<Manifest> {
    let spec = variant.spec();
    let (lm, tok, m1, s2, m2) = if create {
        let (lm, tok, m1, bank, md) = ensure_stage1::<S>(out, ds, cfg)?;
        let (s2, m2) = ensure_stage2(out, ds, cfg, spec.alignment, &bank, &md)?;
        (lm, tok, m1, s2, m2)
    } else {
        let (lm, tok, m1) = load_stage1::<S>(out, ds, cfg, 3)?;
        let (s2, m2) = load_stage2::<S>(out, ds, cfg, spec.alignment, 3)?;
        (lm, tok, m1, s2, m2)
    };
    let mut fm = init_fusion(&lm, &s2, cfg, &spec);
    let step0 = warm_valid_auc(&fm, &tok, ds, cfg, &spec)?;
    let logs = run_stage3(&mut fm, &tok, ds, cfg, &spec)?;
    save_stage3(out, ds, cfg, variant, &fm, &logs, step0, &[&m1, &m2])
}

/// Test-split reports of the stage-1-only model and of `variant`, written
/// to `eval/<slug>/report.{json,txt}` with a manifest.
pub fn evaluate_run<S: Scalar>(
    out: &Path,
    ds: &InteractionDataset,
    cfg: &RunConfig,
    variant: Variant,
    dataset: &str,
) -> Result<Vec<MetricsReport>> {
    let (fm, tok, m3) = load_stage3::<S>(out, ds, cfg, variant)?;
    let spec = variant.spec();
    let reports = vec![
        text_report(&fm.lm, &tok, ds, cfg, Split::Test, dataset)?,
        fusion_report(&fm, &tok, ds, cfg, &spec, Split::Test, dataset)?,
    ];
    let dir = stage_dir(out, "eval", Some(variant));
    write_text(&dir.join("report.json"), &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    write_text(&dir.join("report.txt"), &text_table(&reports))?;
    let mut m = Manifest::new("eval", ds, cfg);
    m.variant = Some(spec);
    m.inputs.insert("stage3".into(), m3.artifact_id.clone());
    for r in &reports {
        if let Some(a) = r.all.auc {
            m.metrics.insert(format!("{}.test_auc", r.variant), a);
        }
    }
    let m = m.seal(BTreeMap::new());
    m.write(&dir)?;
    Ok(reports)
}
