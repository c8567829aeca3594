//! Command-line entry point: dataset preparation, the three training
//! stages, evaluation, ablations and exports over a run directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sella::config::RunConfig;
use sella::data::{ingest, synth_generate, tag_warm_cold, temporal_split, IngestConfig, InteractionDataset, Split, TimeWindow};
use sella::evalrep::{attention_csv, attention_maps, cosine_report, embedding_export, text_table, MetricsReport};
use sella::minilm::encode_split;
use sella::params::{Ctx, TrainMask};
use sella::pipeline::{
    ensure_stage3, evaluate_run, load_bank, load_stage1, load_stage2, load_stage3, run_distill, run_stage1, run_stage2,
    save_distill, save_stage1, save_stage2, Manifest, Variant,
};

#[derive(Parser, Debug)]
#[command(name = "sella", version, about = "Collaborative-token recommendation with a miniature language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that works on a run directory.
#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// `key = value` config file, or a stage manifest whose recorded
    /// configuration is reused.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory written by `ingest` or `synth`; overrides the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for checkpoints, manifests and reports; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct VariantArg {
    /// Variant name (for example SeLLa-Rec, SeLLa-w/o, SeLLa-Proj).
    #[arg(long, default_value = "SeLLa-Rec")]
    variant: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read ratings and titles, binarize, split chronologically and tag cold items.
    Ingest {
        /// Ratings file: user, item, rating, timestamp separated by tabs or `::`.
        #[arg(long)]
        ratings: PathBuf,
        /// Items file: item id and title separated by a tab or `::`.
        #[arg(long)]
        items: PathBuf,
        /// Ratings strictly above this value are positive.
        #[arg(long, default_value_t = 3)]
        threshold: u8,
        /// Keep users with strictly more interactions than this.
        #[arg(long, default_value_t = 20)]
        min_interactions: usize,
        /// Timestamp window `START..END`; either side may be empty.
        #[arg(long, default_value = "..")]
        window: String,
        /// Train:valid:test ratios.
        #[arg(long, default_value = "10:5:5")]
        ratios: String,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a planted low-rank dataset.
    Synth {
        /// `key = value` file; only `synth.*` keys are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of users.
        #[arg(long)]
        users: Option<usize>,
        /// Number of items.
        #[arg(long)]
        items: Option<usize>,
        /// Rank of the planted latent factors.
        #[arg(long)]
        rank: Option<usize>,
        /// Probability that a user-item pair is observed.
        #[arg(long)]
        density: Option<f64>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the adapters on text-only prompts.
    Stage1(RunArgs),
    /// Harvest the semantic item bank from the stage-1 model.
    Distill(RunArgs),
    /// Train the collaborative model with contrastive alignment.
    Stage2 {
        #[command(flatten)]
        run: RunArgs,
        /// Train without the alignment term.
        #[arg(long)]
        no_align: bool,
    },
    /// Train the fused model from existing stage-1 and stage-2 checkpoints.
    Stage3 {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        variant: VariantArg,
    },
    /// Report test metrics of a trained variant and the stage-1-only model.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        variant: VariantArg,
    },
    /// Train and evaluate ablation variants, reusing finished stages.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Variant to run; repeat for several, or pass `all`.
        #[arg(long, required = true)]
        variant: Vec<String>,
    },
    /// Export per-item cosine histogram and paired embeddings of a stage-2 checkpoint.
    ExportAlign {
        #[command(flatten)]
        run: RunArgs,
        /// Use the checkpoint trained without alignment.
        #[arg(long)]
        no_align: bool,
    },
    /// Export head-averaged attention maps for one fused test prompt.
    ExportAttn {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        variant: VariantArg,
        /// Position of the prompt within the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated layer indices; all layers when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// Run one stage, or the whole pipeline followed by evaluation.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Stage to run (1 includes distillation).
        #[arg(long, conflicts_with = "all", value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: Option<u8>,
        /// Run stages 1 to 3 and evaluate.
        #[arg(long)]
        all: bool,
    },
}

struct Run {
    cfg: RunConfig,
    ds: InteractionDataset,
    out: PathBuf,
    dataset: String,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("{} is not a stage manifest", path.display()))?;
        return Ok(m.config);
    }
    let mut cfg = RunConfig::default();
    cfg.apply_text(&text, path)?;
    Ok(cfg)
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn open(&self) -> Result<Run> {
        let cfg = self.config()?;
        let Some(data) = cfg.data.clone() else {
            bail!("no dataset: pass --data or set `data` in the config");
        };
        let Some(out) = cfg.out.clone() else {
            bail!("no run directory: pass --out or set `out` in the config");
        };
        let ds = InteractionDataset::load(&data)?;
        let dataset = data
            .file_name()
            .map_or_else(|| "dataset".to_string(), |n| n.to_string_lossy().into_owned());
        Ok(Run { cfg, ds, out, dataset })
    }
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let mut cfg = RunConfig::default();
    cfg.set("synth.ratios", s)?;
    Ok(cfg.synth.ratios)
}

fn print_reports(reports: &[MetricsReport]) {
    print!("{}", text_table(reports));
}

fn stage1(r: &Run) -> Result<()> {
    let s1 = run_stage1::<f64>(&r.ds, &r.cfg)?;
    let m = save_stage1(&r.out, &r.ds, &r.cfg, &s1)?;
    println!(
        "stage 1: best epoch {} valid AUC {:.4} ({})",
        s1.log.best_epoch, s1.log.best_valid_auc, m.artifact_id
    );
    Ok(())
}

fn distill(r: &Run) -> Result<()> {
    let (lm, tok, m1) = load_stage1::<f64>(&r.out, &r.ds, &r.cfg, 2)?;
    let bank = run_distill(&lm, &tok, &r.ds, &m1.artifact_id)?;
    let m = save_distill(&r.out, &r.ds, &r.cfg, &bank, &m1)?;
    println!("distill: {} items, d={} ({})", bank.len(), bank.d_l(), m.artifact_id);
    Ok(())
}

fn stage2(r: &Run, alignment: bool) -> Result<()> {
    let (bank, md) = load_bank::<f64>(&r.out, &r.ds, &r.cfg, 2)?;
    let s2 = run_stage2(&r.ds, &bank, &r.cfg, alignment)?;
    let m = save_stage2(&r.out, &r.ds, &r.cfg, alignment, &s2, &md)?;
    println!(
        "stage 2{}: best epoch {} mean cosine {:.4} -> {:.4} ({})",
        if alignment { "" } else { " (no alignment)" },
        s2.best_epoch,
        s2.init_mean_cosine,
        s2.final_mean_cosine,
        m.artifact_id
    );
    Ok(())
}

fn stage3(r: &Run, v: Variant, create: bool) -> Result<()> {
    let m = ensure_stage3::<f64>(&r.out, &r.ds, &r.cfg, v, create)?;
    let best: Vec<String> = m.logs.iter().map(|l| format!("{:.4}", l.best_valid_auc)).collect();
    println!("stage 3 {v}: best valid AUC {} ({})", best.join(" then "), m.artifact_id);
    Ok(())
}

fn eval(r: &Run, v: Variant) -> Result<Vec<MetricsReport>> {
    evaluate_run::<f64>(&r.out, &r.ds, &r.cfg, v, &r.dataset).map_err(Into::into)
}

fn ablate(r: &Run, names: &[String]) -> Result<()> {
    let variants: Vec<Variant> = if names.iter().any(|n| n.eq_ignore_ascii_case("all")) {
        Variant::ALL.to_vec()
    } else {
        names.iter().map(|n| Variant::parse(n)).collect::<sella::Result<_>>()?
    };
    let mut rows = Vec::new();
    for v in variants {
        stage3(r, v, true)?;
        let reports = eval(r, v)?;
        if rows.is_empty() {
            rows.push(reports[0].clone());
        }
        rows.push(reports[1].clone());
    }
    let dir = r.out.join("ablate");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    std::fs::write(dir.join("report.txt"), text_table(&rows))?;
    print_reports(&rows);
    Ok(())
}

fn export_align(r: &Run, alignment: bool) -> Result<()> {
    let (s2, _) = load_stage2::<f64>(&r.out, &r.ds, &r.cfg, alignment, 2)?;
    let dir = r
        .out
        .join("export")
        .join(if alignment { "align-aligned" } else { "align-plain" });
    std::fs::create_dir_all(&dir)?;
    let rep = cosine_report(&s2.collab, &s2.proj, &s2.bank)?;
    std::fs::write(dir.join("cosine.csv"), rep.to_csv())?;
    let summary = serde_json::json!({
        "mean": rep.mean,
        "median": rep.median,
        "skipped": rep.skipped,
        "init_mean": s2.init_mean_cosine,
    });
    std::fs::write(dir.join("cosine.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let ids: Vec<i64> = r.ds.items.iter().map(|it| it.id).collect();
    embedding_export(&s2.collab, &s2.proj, &s2.bank, &ids, &dir.join("embeddings.csv"))?;
    println!("cosine mean {:.4} median {:.4}; wrote {}", rep.mean, rep.median, dir.display());
    Ok(())
}

fn export_attn(r: &Run, v: Variant, index: usize, layers: &[usize]) -> Result<()> {
    let (fm, tok, _) = load_stage3::<f64>(&r.out, &r.ds, &r.cfg, v)?;
    let spec = v.spec();
    let test = encode_split(&tok, &r.ds, Split::Test, r.cfg.k_hist, spec.slots(), fm.lm.cfg.max_len)?;
    let Some(ex) = test.get(index) else {
        bail!("test split has {} prompts, no index {index}", test.len());
    };
    let layers: Vec<usize> = if layers.is_empty() { (0..fm.lm.cfg.n_layers).collect() } else { layers.to_vec() };
    let mut ctx = Ctx::new();
    let fused = fm.fuse(&mut ctx, &r.ds, ex, &TrainMask::none())?;
    let maps = attention_maps(&fm.lm, ctx.g.value(fused.fused), &layers)?;
    let tokens: Vec<String> = ex.prompt.ids.iter().map(|&t| tok.token(t).unwrap_or("<unk>").to_string()).collect();
    let dir = r.out.join("export").join(format!("attn-{}", v.slug()));
    std::fs::create_dir_all(&dir)?;
    for (l, m) in layers.iter().zip(&maps) {
        std::fs::write(dir.join(format!("layer{l}.csv")), attention_csv(&tokens, m)?)?;
    }
    println!("wrote {} attention maps to {}", maps.len(), dir.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            ratings,
            items,
            threshold,
            min_interactions,
            window,
            ratios,
            out,
        } => {
            let cfg = IngestConfig {
                threshold,
                min_user_interactions: min_interactions,
                window: window.parse::<TimeWindow>()?,
            };
            let mut ds = ingest(&ratings, &items, &cfg)?;
            temporal_split(&mut ds, parse_ratios(&ratios)?)?;
            tag_warm_cold(&mut ds)?;
            ds.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&ds.manifest())?);
        }
        Command::Synth {
            config,
            seed,
            users,
            items,
            rank,
            density,
            out,
        } => {
            let mut s = match &config {
                Some(p) => load_config(p)?.synth,
                None => RunConfig::default().synth,
            };
            s.seed = seed.unwrap_or(s.seed);
            s.n_users = users.unwrap_or(s.n_users);
            s.n_items = items.unwrap_or(s.n_items);
            s.rank = rank.unwrap_or(s.rank);
            s.density = density.unwrap_or(s.density);
            let ds = synth_generate(&s)?;
            ds.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&ds.manifest())?);
        }
        Command::Stage1(a) => stage1(&a.open()?)?,
        Command::Distill(a) => distill(&a.open()?)?,
        Command::Stage2 { run, no_align } => stage2(&run.open()?, !no_align)?,
        Command::Stage3 { run, variant } => stage3(&run.open()?, Variant::parse(&variant.variant)?, false)?,
        Command::Eval { run, variant } => print_reports(&eval(&run.open()?, Variant::parse(&variant.variant)?)?),
        Command::Ablate { run, variant } => ablate(&run.open()?, &variant)?,
        Command::ExportAlign { run, no_align } => export_align(&run.open()?, !no_align)?,
        Command::ExportAttn {
            run,
            variant,
            index,
            layers,
        } => export_attn(&run.open()?, Variant::parse(&variant.variant)?, index, &layers)?,
        Command::Run { run, stage, all } => {
            let r = run.open()?;
            match (stage, all) {
                (Some(1), _) => {
                    stage1(&r)?;
                    distill(&r)?;
                }
                (Some(2), _) => stage2(&r, true)?,
                (Some(_), _) => stage3(&r, Variant::Rec, false)?,
                (None, true) => {
                    stage1(&r)?;
                    distill(&r)?;
                    stage2(&r, true)?;
                    stage3(&r, Variant::Rec, false)?;
                    print_reports(&eval(&r, Variant::Rec)?);
                }
                (None, false) => bail!("pass --stage N or --all"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
