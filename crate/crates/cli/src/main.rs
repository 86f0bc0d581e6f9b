use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gea_core::feature_store::{ingest_manifest_with, DatasetManifest};
use gea_core::fixture::{make_fixture, FixtureConfig};
use gea_core::flow_sampler::{generate_for_manifest, GenerationConfig};
use gea_core::model::GeaModel;
use gea_core::reports::{
    heatmap_rows, mix_manifest, mixed_token_rows, omega_sweep, project_manifest, sample_heatmap,
    write_csv, write_json, Branch, CSV_SCHEMA_VERSION,
};
use gea_core::retrieval::evaluate;
use gea_core::trainer::{
    fit, model_config_for, run_ablation, Checkpoint, FitOptions, TrainConfig,
};
use gea_core::{Execution, GeaError, Result};

#[derive(Debug, Parser)]
#[command(name = "gea", version, about = "Generation-enhanced text-to-image person retrieval")]
struct Cli {
    /// Seed overriding the one in the config or the command default.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (a .csv path for the export commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON config file (training config, or fixture config for make-fixture).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a manifest and all feature files it references.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write the synthetic identity dataset (train/val/test manifests).
    MakeFixture {
        #[arg(long, default_value_t = 32)]
        num_identities: usize,
        #[arg(long, default_value_t = 4)]
        texts_per_identity: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        /// Identities in the train split (default 256).
        #[arg(long)]
        train_identities: Option<usize>,
    },
    /// Generate one feature bundle per record with the desk flow sampler.
    SampleFlow {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 28)]
        steps: usize,
        #[arg(long, default_value_t = 7.0)]
        guidance: f64,
    },
    /// Train on a manifest; writes config, checkpoints and history.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print the metric table.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        rerank_fused: bool,
    },
    /// Train and evaluate all four ablation settings.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Evaluate one checkpoint at several mix weights.
    OmegaSweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        omegas: Vec<f64>,
        #[arg(long)]
        rerank_fused: bool,
    },
    /// Write mixed text global tokens for inspection.
    Mix {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        omega: f64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export the fusion cross-attention weights of one sample as CSV.
    ExportHeatmap {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sample: String,
        #[arg(long, value_enum, default_value_t = BranchArg::Image)]
        branch: BranchArg,
    },
    /// PCA projection of image, text and mixed global tokens.
    #[command(name = "project-2d")]
    Project2d {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0.6)]
        omega: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BranchArg {
    Image,
    Text,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Image => Branch::Image,
            BranchArg::Text => Branch::Text,
        }
    }
}

struct Ctx {
    seed: Option<u64>,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    exec: Execution,
}

impl Ctx {
    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| GeaError::io(&dir, e))?;
        Ok(dir)
    }

    /// `--out` as a CSV file path, or `default` inside the `--out` directory.
    fn out_csv(&self, default: &str) -> Result<PathBuf> {
        match &self.out {
            Some(p) if p.extension().is_some_and(|e| e == "csv") => {
                if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent).map_err(|e| GeaError::io(parent, e))?;
                }
                Ok(p.clone())
            }
            Some(p) if p.extension().is_some() => Err(GeaError::Validation(format!(
                "{}: only CSV output is supported",
                p.display()
            ))),
            _ => Ok(self.out_dir()?.join(default)),
        }
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| GeaError::io(path, e))?;
                serde_json::from_str::<TrainConfig>(&text)
                    .map_err(|e| GeaError::parse(path.display().to_string(), e))?
            }
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.execution = self.exec;
        cfg.validate()?;
        Ok(cfg)
    }

    fn manifest(&self, path: &Path) -> Result<DatasetManifest> {
        ingest_manifest_with(path, self.exec)
    }
}

fn load_model(checkpoint: Option<&Path>, manifest: &DatasetManifest) -> Result<GeaModel> {
    match checkpoint {
        Some(p) => Checkpoint::load(p)?.model(),
        None => GeaModel::new(model_config_for(manifest, &TrainConfig::default())),
    }
}

/// Exclusive marker for a run directory, removed on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => GeaError::Validation(format!(
                    "run directory {} is locked by another run",
                    dir.display()
                )),
                _ => GeaError::io(&path, e),
            })?;
        Ok(RunLock(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out,
        config: cli.config,
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
    };
    match cli.command {
        Command::Ingest { manifest } => {
            let m = ctx.manifest(&manifest)?;
            let summary = serde_json::json!({
                "schema_version": 1,
                "manifest": manifest,
                "split": m.split,
                "embedding_dim": m.embedding_dim,
                "records": m.len(),
                "identities": m.num_identities(),
                "with_generated": m.records.iter().filter(|r| r.generated.is_some()).count(),
                "with_text_features": m.records.iter().filter(|r| r.text_feature.is_some()).count(),
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            if ctx.out.is_some() {
                write_json(&summary, &ctx.out_dir()?.join("ingest.json"))?;
            }
        }
        Command::MakeFixture {
            num_identities,
            texts_per_identity,
            dim,
            noise,
            train_identities,
        } => {
            let mut cfg = match &ctx.config {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| GeaError::io(path, e))?;
                    serde_json::from_str::<FixtureConfig>(&text)
                        .map_err(|e| GeaError::parse(path.display().to_string(), e))?
                }
                None => FixtureConfig {
                    num_identities,
                    texts_per_identity,
                    dim,
                    noise,
                    train_identities: Some(train_identities.unwrap_or(256)),
                    ..FixtureConfig::desk(0)
                },
            };
            if let Some(s) = ctx.seed {
                cfg.seed = s;
            }
            let dir = ctx.out_dir()?;
            let (_, paths) = make_fixture(&cfg, &dir)?;
            for p in [paths.train, paths.val, paths.test] {
                println!("{}", p.display());
            }
        }
        Command::SampleFlow {
            manifest,
            steps,
            guidance,
        } => {
            let m = ctx.manifest(&manifest)?;
            let cfg = GenerationConfig {
                steps,
                guidance_scale: guidance,
                seed: ctx.seed.unwrap_or(0),
                ..GenerationConfig::default()
            };
            let path = generate_for_manifest(&m, &cfg, &ctx.out_dir()?, ctx.exec)?;
            println!("{}", path.display());
        }
        Command::Train { train, val, resume } => {
            let cfg = ctx.train_config()?;
            let train_m = ctx.manifest(&train)?;
            let val_m = val.as_deref().map(|v| ctx.manifest(v)).transpose()?;
            let dir = ctx.out_dir()?;
            let _lock = RunLock::acquire(&dir)?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let out = fit(
                &train_m,
                &cfg,
                FitOptions {
                    val: val_m.as_ref(),
                    out_dir: Some(&dir),
                    resume,
                    stop_after: None,
                },
            )?;
            if let Some(last) = out.history.last() {
                println!(
                    "finished epoch {} mean loss {:.4}{}",
                    last.epoch,
                    last.mean_loss,
                    out.trainer
                        .best_map
                        .map(|m| format!(" best val mAP {:.2}", m * 100.0))
                        .unwrap_or_default()
                );
            }
        }
        Command::Eval {
            manifest,
            checkpoint,
            omega,
            rerank_fused,
        } => {
            let m = ctx.manifest(&manifest)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let omega = omega.unwrap_or_else(|| ckpt.header.train_config.eval_omega());
            let report = evaluate(&m, &ckpt.model()?, omega, rerank_fused, ctx.exec)?;
            print!("{}", report.table());
            write_json(&report, &ctx.out_dir()?.join("eval_report.json"))?;
        }
        Command::Ablate { train, test } => {
            let cfg = ctx.train_config()?;
            let train_m = ctx.manifest(&train)?;
            let test_m = ctx.manifest(&test)?;
            let rows = run_ablation(&train_m, &test_m, &cfg)?;
            let mark = |b: bool| if b { "yes" } else { "-" };
            println!(
                "{:<10}{:>6}{:>6}{:>8}{:>8}{:>8}{:>8}",
                "Model", "TGTE", "GIF", "R-1", "R-5", "R-10", "mAP"
            );
            for r in &rows {
                println!(
                    "{:<10}{:>6}{:>6}{:>8.2}{:>8.2}{:>8.2}{:>8.2}",
                    r.ablation.label(),
                    mark(r.tgte),
                    mark(r.gif),
                    r.report.rank1,
                    r.report.rank5,
                    r.report.rank10,
                    r.report.map * 100.0
                );
            }
            let dir = ctx.out_dir()?;
            write_json(
                &serde_json::json!({ "schema_version": 1, "rows": rows }),
                &dir.join("ablation.json"),
            )?;
            let table: Vec<AblationCsv> = rows
                .iter()
                .map(|r| AblationCsv {
                    schema_version: CSV_SCHEMA_VERSION,
                    model: r.ablation.label(),
                    tgte: r.tgte,
                    gif: r.gif,
                    rank1: r.report.rank1,
                    rank5: r.report.rank5,
                    rank10: r.report.rank10,
                    map: r.report.map,
                })
                .collect();
            write_csv(&table, &dir.join("ablation.csv"))?;
        }
        Command::OmegaSweep {
            manifest,
            checkpoint,
            omegas,
            rerank_fused,
        } => {
            let m = ctx.manifest(&manifest)?;
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let rows = omega_sweep(&m, &model, &omegas, rerank_fused, ctx.exec)?;
            for r in &rows {
                println!(
                    "omega {:.3}  R-1 {:6.2}  R-5 {:6.2}  R-10 {:6.2}  mAP {:6.2}",
                    r.omega,
                    r.rank1,
                    r.rank5,
                    r.rank10,
                    r.map * 100.0
                );
            }
            write_csv(&rows, &ctx.out_csv("omega_sweep.csv")?)?;
        }
        Command::Mix {
            manifest,
            omega,
            checkpoint,
        } => {
            let m = ctx.manifest(&manifest)?;
            let model = load_model(checkpoint.as_deref(), &m)?;
            let mixed = mix_manifest(&m, &model, omega, ctx.exec)?;
            let path = ctx.out_csv("mixed_tokens.csv")?;
            write_csv(&mixed_token_rows(&mixed, omega), &path)?;
            println!("{}", path.display());
        }
        Command::ExportHeatmap {
            manifest,
            checkpoint,
            sample,
            branch,
        } => {
            let m = ctx.manifest(&manifest)?;
            let model = load_model(checkpoint.as_deref(), &m)?;
            let weights = sample_heatmap(&m, &model, &sample, branch.into())?;
            let path = ctx.out_csv(&format!("heatmap_{sample}.csv"))?;
            write_csv(&heatmap_rows(&sample, branch.into(), &weights), &path)?;
            println!("{}", path.display());
        }
        Command::Project2d {
            manifest,
            checkpoint,
            omega,
        } => {
            let m = ctx.manifest(&manifest)?;
            let model = load_model(checkpoint.as_deref(), &m)?;
            let points = project_manifest(&m, &model, omega, ctx.exec)?;
            let path = ctx.out_csv("projection_2d.csv")?;
            write_csv(&points, &path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct AblationCsv {
    schema_version: u32,
    model: &'static str,
    tgte: bool,
    gif: bool,
    rank1: f64,
    rank5: f64,
    rank10: f64,
    map: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
