//! `deltaflow` — single entry point for the exemplar-editing pipeline:
//! data generation, two-stage training, editing, test-time adaptation,
//! evaluation with the λ sweep, the ablation batch runner and the
//! finite-difference self-check.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 data/checkpoint
//! incompatibility, 4 numeric failure. Errors print one machine-parsable
//! line `error[<kind>]: <message>` on stderr.

use clap::{Args, Parser, Subcommand};
use deltaflow_core::data::{gen_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, Split};
use deltaflow_core::eval::{edit_image, eval_run, EvalOptions};
use deltaflow_core::gradsuite::run_suite;
use deltaflow_core::objectives::LossBreakdown;
use deltaflow_core::trainer::{
    attach_variant, load_checkpoint, make_variant, pretrain_backbone, save_checkpoint, tta_opts,
    train_adapter, ModelConfig, Stage, TrainConfig, VARIANT_TAGS,
};
use deltaflow_core::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "deltaflow", version, about = "exemplar-based image editing pipeline")]
struct Cli {
    /// TOML run configuration (default: $DELTAFLOW_CONFIG if set).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 1 is the fully deterministic mode.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic exemplar-pair dataset (DFD1).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage 1: pretrain the backbone as a conditional identity generator.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Stage 2: train the adapter set on a frozen pretrained backbone.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ablation variant tag (defaults to the config's).
        #[arg(long)]
        variant: Option<String>,
        /// Unfreeze the backbone as well.
        #[arg(long)]
        joint: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Edit one evaluation episode's query with its exemplar pair.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Index into the evaluation episodes.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// Output prefix; writes <prefix>.dfd1 plus one PPM preview per image.
        #[arg(long)]
        out: PathBuf,
        /// Override the injection strength λ_ca (default: learned value).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 17)]
        noise_seed: u64,
    },
    /// Test-time adaptation on one episode's exemplar pair.
    Tta {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Keep λ_ca fixed during adaptation.
        #[arg(long)]
        freeze_lambda: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes <out>.json and <out>.csv.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated λ_ca sweep grid, e.g. `0,0.25,0.5,1`.
        #[arg(long)]
        lambda_grid: Option<String>,
        /// Restrict to one split: `seen` or `unseen`.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        max_episodes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate every ablation variant from one shared stage-1
    /// checkpoint; writes a combined table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Output directory for per-variant checkpoints and the table.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda_sdc: Option<f64>,
    /// Keep λ_ca fixed at its current value instead of learning it.
    #[arg(long)]
    freeze_lambda: bool,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.lambda_sdc {
            cfg.lambda_sdc = v;
        }
        if self.freeze_lambda {
            cfg.freeze_lambda = true;
        }
    }
}

/// The run configuration file. Every section is optional and falls back to
/// the documented defaults.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct RunConfig {
    dataset: DatasetSection,
    model: ModelSection,
    train: TrainSection,
    eval: EvalSection,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct DatasetSection(DatasetConfig);

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection(DatasetConfig::default())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct ModelSection {
    variant: String,
    encoder_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: "full".into(),
            encoder_seed: 7,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct TrainSection(TrainConfig);

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection(TrainConfig::default())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct EvalSection {
    steps: usize,
    seed: u64,
    lambda_grid: Vec<f64>,
    max_episodes: Option<usize>,
    split: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            steps: 4,
            seed: 17,
            lambda_grid: vec![],
            max_episodes: None,
            split: None,
        }
    }
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let path = path.clone().or_else(|| std::env::var_os("DELTAFLOW_CONFIG").map(PathBuf::from));
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(&p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Snapshot of everything that determines a run, written next to each
/// artifact so the run is reproducible from the snapshot alone.
#[derive(serde::Serialize)]
struct ResolvedSnapshot<'a> {
    command: &'a str,
    threads: usize,
    config_hash: String,
    run: &'a RunConfig,
    model: &'a ModelConfig,
    train: Option<&'a TrainConfig>,
}

fn write_snapshot(out: &Path, snap: &ResolvedSnapshot) -> Result<()> {
    let text = toml::to_string_pretty(snap).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(sidecar(out, "config.toml"), text)?;
    Ok(())
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_loss_csv(out: &Path, curve: &[LossBreakdown]) -> Result<()> {
    let mut text = String::from("step,flow,sdc,total\n");
    for (i, b) in curve.iter().enumerate() {
        text.push_str(&format!("{},{},{},{}\n", i, b.flow, b.sdc, b.total));
    }
    std::fs::write(sidecar(out, "loss.csv"), text)?;
    Ok(())
}

fn model_config(run: &RunConfig, variant: &str) -> Result<ModelConfig> {
    let mut cfg = make_variant(variant)?;
    cfg.encoder.seed = run.model.encoder_seed;
    cfg.encoder.h = run.dataset.0.h;
    cfg.encoder.w = run.dataset.0.w;
    cfg.encoder.patch = run.dataset.0.patch;
    cfg.backbone.h = run.dataset.0.h;
    cfg.backbone.w = run.dataset.0.w;
    cfg.backbone.patch = run.dataset.0.patch;
    Ok(cfg)
}

fn eval_options(run: &RunConfig) -> Result<EvalOptions> {
    let split = match run.eval.split.as_deref() {
        None => None,
        Some("seen") => Some(Split::Seen),
        Some("unseen") => Some(Split::Unseen),
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown split `{other}`; expected seen or unseen"
            )))
        }
    };
    Ok(EvalOptions {
        steps: run.eval.steps,
        seed: run.eval.seed,
        lambda_grid: run.eval.lambda_grid.clone(),
        split,
        max_episodes: run.eval.max_episodes,
    })
}

fn parse_lambda_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad λ value `{v}` in grid")))
        })
        .collect()
}

fn nth_eval_episode(data: &Dataset, index: usize) -> Result<&deltaflow_core::data::Episode> {
    data.eval_episodes()
        .nth(index)
        .ok_or_else(|| Error::Config(format!("dataset has no evaluation episode {index}")))
}

fn run(cli: Cli) -> Result<()> {
    let run_cfg = load_run_config(&cli.config)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    match &cli.cmd {
        Cmd::GenData { out, seed } => {
            let mut dcfg = run_cfg.dataset.0.clone();
            if let Some(s) = seed {
                dcfg.seed = *s;
            }
            let data = gen_dataset(&dcfg)?;
            save_dataset(&data, out)?;
            let model = model_config(&run_cfg, &run_cfg.model.variant)?;
            write_snapshot(
                out,
                &ResolvedSnapshot {
                    command: "gen-data",
                    threads: cli.threads,
                    config_hash: format!("{:#018x}", model.hash()),
                    run: &run_cfg,
                    model: &model,
                    train: None,
                },
            )?;
            println!(
                "wrote {} ({} episodes, {} train / {} eval)",
                out.display(),
                data.episodes.len(),
                data.train_episodes().count(),
                data.eval_episodes().count()
            );
        }
        Cmd::Pretrain { data, out, overrides } => {
            let mut tcfg = run_cfg.train.0.clone();
            tcfg.stage = Stage::Pretrain;
            tcfg.steps = 2000; // stage-1 default
            overrides.apply(&mut tcfg);
            let dataset = load_dataset(data)?;
            let model = model_config(&run_cfg, &run_cfg.model.variant)?;
            let (ckpt, curve) = pretrain_backbone(model.clone(), &tcfg, &dataset)?;
            save_checkpoint(&ckpt, out)?;
            write_loss_csv(out, &curve)?;
            write_snapshot(
                out,
                &ResolvedSnapshot {
                    command: "pretrain",
                    threads: cli.threads,
                    config_hash: format!("{:#018x}", model.hash()),
                    run: &run_cfg,
                    model: &model,
                    train: Some(&tcfg),
                },
            )?;
            let last = curve.last().map_or(f64::NAN, |b| b.total);
            println!("wrote {} ({} steps, final loss {last:.6})", out.display(), curve.len());
        }
        Cmd::Train {
            data,
            base,
            out,
            variant,
            joint,
            overrides,
        } => {
            let mut tcfg = run_cfg.train.0.clone();
            tcfg.stage = if *joint { Stage::Joint } else { Stage::Adapter };
            if let Some(v) = variant {
                tcfg.variant = v.clone();
            } else {
                tcfg.variant = run_cfg.model.variant.clone();
            }
            overrides.apply(&mut tcfg);
            let dataset = load_dataset(data)?;
            let base_ckpt = load_checkpoint(base)?;
            let model = model_config(&run_cfg, &tcfg.variant)?;
            let start = attach_variant(&base_ckpt, model.clone(), &tcfg)?;
            let (ckpt, curve) = train_adapter(&start, &tcfg, &dataset)?;
            save_checkpoint(&ckpt, out)?;
            write_loss_csv(out, &curve)?;
            write_snapshot(
                out,
                &ResolvedSnapshot {
                    command: "train",
                    threads: cli.threads,
                    config_hash: format!("{:#018x}", model.hash()),
                    run: &run_cfg,
                    model: &model,
                    train: Some(&tcfg),
                },
            )?;
            let last = curve.last().map_or(f64::NAN, |b| b.total);
            println!(
                "wrote {} (variant `{}`, {} steps, final loss {last:.6})",
                out.display(),
                tcfg.variant,
                curve.len()
            );
        }
        Cmd::Edit {
            ckpt,
            data,
            episode,
            out,
            lambda,
            steps,
            noise_seed,
        } => {
            let dataset = load_dataset(data)?;
            let ckpt = load_checkpoint(ckpt)?;
            ckpt.cfg.check_dataset(&dataset)?;
            let ep = nth_eval_episode(&dataset, *episode)?;
            let b_hat = edit_image(
                &ckpt.model,
                (&ep.exemplar_source, &ep.exemplar_target),
                &ep.query,
                *steps,
                *lambda,
                *noise_seed,
            )?;
            let mut out_ep = ep.clone();
            out_ep.query_target = b_hat.clone();
            save_dataset(
                &Dataset {
                    h: dataset.h,
                    w: dataset.w,
                    patch: dataset.patch,
                    episodes: vec![out_ep],
                },
                &sidecar(out, "dfd1"),
            )?;
            for (name, img) in [
                ("a.ppm", &ep.exemplar_source),
                ("a_prime.ppm", &ep.exemplar_target),
                ("b.ppm", &ep.query),
                ("b_hat.ppm", &b_hat),
                ("b_prime.ppm", &ep.query_target),
            ] {
                std::fs::write(sidecar(out, name), img.to_ppm())?;
            }
            println!(
                "edited episode {episode} (family {}): target MSE {:.6}",
                ep.spec.family.name(),
                b_hat.mse(&ep.query_target)
            );
        }
        Cmd::Tta {
            ckpt,
            data,
            episode,
            steps,
            seed,
            freeze_lambda,
            out,
        } => {
            let dataset = load_dataset(data)?;
            let base = load_checkpoint(ckpt)?;
            base.cfg.check_dataset(&dataset)?;
            let ep = nth_eval_episode(&dataset, *episode)?;
            let (adapted, curve) = tta_opts(&base, ep, *steps, *seed, *freeze_lambda)?;
            save_checkpoint(&adapted, out)?;
            write_loss_csv(out, &curve)?;
            let (first, last) = (
                curve.first().map_or(f64::NAN, |b| b.total),
                curve.last().map_or(f64::NAN, |b| b.total),
            );
            println!(
                "adapted on episode {episode} for {steps} steps (loss {first:.6} -> {last:.6}); wrote {}",
                out.display()
            );
        }
        Cmd::Eval {
            ckpt,
            data,
            out,
            lambda_grid,
            split,
            max_episodes,
            steps,
            seed,
        } => {
            let mut run_cfg = run_cfg.clone();
            if let Some(g) = lambda_grid {
                run_cfg.eval.lambda_grid = parse_lambda_grid(g)?;
            }
            if let Some(s) = split {
                run_cfg.eval.split = Some(s.clone());
            }
            if let Some(m) = max_episodes {
                run_cfg.eval.max_episodes = Some(*m);
            }
            if let Some(s) = steps {
                run_cfg.eval.steps = *s;
            }
            if let Some(s) = seed {
                run_cfg.eval.seed = *s;
            }
            let dataset = load_dataset(data)?;
            let ckpt = load_checkpoint(ckpt)?;
            let opts = eval_options(&run_cfg)?;
            let report = eval_run(&ckpt, &dataset, &opts)?;
            std::fs::write(sidecar(out, "json"), report.to_json())?;
            std::fs::write(sidecar(out, "csv"), report.to_csv())?;
            write_snapshot(
                out,
                &ResolvedSnapshot {
                    command: "eval",
                    threads: cli.threads,
                    config_hash: report.config_hash.clone(),
                    run: &run_cfg,
                    model: &ckpt.cfg,
                    train: None,
                },
            )?;
            println!(
                "evaluated {} episodes: accuracy {:.3}, consistency MSE {:.6}, alignment {:.3}",
                report.overall.count,
                report.overall.accuracy,
                report.overall.mean_consistency_mse,
                report.overall.mean_alignment
            );
        }
        Cmd::Ablate { data, base, out, overrides } => {
            let dataset = load_dataset(data)?;
            let base_ckpt = load_checkpoint(base)?;
            std::fs::create_dir_all(out)?;
            let mut tcfg = run_cfg.train.0.clone();
            tcfg.stage = Stage::Adapter;
            overrides.apply(&mut tcfg);
            let mut table = String::from(
                "variant,params,accuracy,mean_target_mse,mean_consistency_mse,mean_alignment\n",
            );
            println!("variant | params | accuracy | target MSE | consistency | alignment");
            for tag in VARIANT_TAGS {
                let mut vtcfg = tcfg.clone();
                vtcfg.variant = tag.to_string();
                let mut vcfg = model_config(&run_cfg, tag)?;
                vcfg.backbone = base_ckpt.cfg.backbone.clone();
                vcfg.encoder = base_ckpt.cfg.encoder.clone();
                if tag == "w/o 𝓛_sdc" {
                    vtcfg.lambda_sdc = 0.0;
                }
                let start = attach_variant(&base_ckpt, vcfg, &vtcfg)?;
                let params = start.model.adapter.param_count();
                let (ckpt, _) = train_adapter(&start, &vtcfg, &dataset)?;
                let slug: String = tag
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                    .collect();
                save_checkpoint(&ckpt, &out.join(format!("{slug}.dfc1")))?;
                let opts = EvalOptions {
                    split: Some(Split::Seen),
                    ..eval_options(&run_cfg)?
                };
                let report = eval_run(&ckpt, &dataset, &opts)?;
                let a = &report.overall;
                table.push_str(&format!(
                    "\"{tag}\",{params},{},{},{},{}\n",
                    a.accuracy, a.mean_target_mse, a.mean_consistency_mse, a.mean_alignment
                ));
                println!(
                    "{tag} | {params} | {:.3} | {:.5} | {:.5} | {:.3}",
                    a.accuracy, a.mean_target_mse, a.mean_consistency_mse, a.mean_alignment
                );
            }
            std::fs::write(out.join("ablation.csv"), table)?;
            println!("wrote {}", out.join("ablation.csv").display());
        }
        Cmd::Gradcheck { seeds, tol } => {
            let mut failed = false;
            for case in run_suite(*seeds) {
                let ok = case.passes(*tol);
                failed |= !ok;
                println!(
                    "{} [{} cases] max rel err {:.3e} ... {}",
                    case.name,
                    case.cases,
                    case.max_rel_err,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed {
                return Err(Error::Numeric("gradient suite failed".into()));
            }
            println!("gradient suite passed (tolerance {tol:.0e})");
        }
    }
    Ok(())
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn kind_for(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::Io(_) => "config",
        Error::Numeric(_) => "numeric",
        _ => "incompatible",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("error[usage]: {e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", kind_for(&e));
            ExitCode::from(exit_for(&e))
        }
    }
}
