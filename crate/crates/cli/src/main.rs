use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use rosa_core::bounds::{verify_campaign, write_csv};
use rosa_core::pipeline::{
    evaluate, linear_eval, pretrain, render_summary, run_ablation, summarize, write_rows,
    write_runs, AblationGrid, Checkpoint, ClassifierFile, CsvAppender, MetricsRow, PretrainState,
    RunConfig, RunStats,
};
use rosa_core::Error;

#[derive(Parser)]
#[command(
    name = "rosa",
    about = "Adversarial contrastive pretraining and bound verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarial contrastive pretraining. Writes a checkpoint every epoch.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint.json and metrics.csv.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from out/checkpoint.json if present.
        #[arg(long)]
        resume: bool,
    },
    /// Train a linear classifier on a frozen extractor.
    Le {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Adversarially train the classifier.
        #[arg(long)]
        at: bool,
        /// Overrides the configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Clean and robust accuracy of a classifier on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run an ablation grid. Writes metrics rows to --out, per-run results
    /// next to it (.runs.csv) and a markdown summary (.md).
    Ablation {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Exact inequality checks on random discrete worlds, as CSV.
    Verify {
        #[arg(long, default_value_t = 1000)]
        worlds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        max_atoms: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit non-zero if any check fails.
        #[arg(long)]
        strict: bool,
    },
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::from_json(&text)?)
}

fn config_for(ck: &Checkpoint, over: Option<&Path>) -> Result<RunConfig> {
    match over {
        Some(p) => read_config(p),
        None => ck.config.clone().ok_or_else(|| {
            Error::Config("checkpoint carries no config; pass --config".into()).into()
        }),
    }
}

fn extractor_of(ck: &Checkpoint, cfg: &RunConfig) -> Result<rosa_core::models::FeatureExtractor> {
    Ok(PretrainState::from_checkpoint(ck, cfg)?.encoder.extractor)
}

fn append(path: Option<&Path>, rows: &[MetricsRow]) -> Result<()> {
    match path {
        Some(p) => {
            let mut a = CsvAppender::open(p)?;
            for r in rows {
                a.append(r)?;
            }
        }
        None => write_rows(rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            out,
            resume,
        } => {
            let cfg = read_config(&config)?;
            std::fs::create_dir_all(&out)?;
            let ck_path = out.join("checkpoint.json");
            let (train, _) = cfg.data.load()?;
            let state = if resume && ck_path.exists() {
                PretrainState::from_checkpoint(&Checkpoint::load(&ck_path)?, &cfg)?
            } else {
                let s = PretrainState::init(&cfg, train.d_in());
                s.checkpoint(&cfg, train.classes).save(&ck_path)?;
                s
            };
            let mut metrics = CsvAppender::open(&out.join("metrics.csv"))?;
            let mut stats = RunStats::default();
            let (state, _) = pretrain(&cfg, &train, state, &mut stats, |s, row| {
                s.checkpoint(&cfg, train.classes).save(&ck_path)?;
                metrics.append(row)
            })?;
            eprintln!(
                "pretrained {} epochs; {} attack batches checked; {} log-probability saturations; {} degenerate SAM steps",
                state.epochs_done, stats.attacks_checked, stats.saturations, stats.sam.degenerate
            );
            println!("{}", ck_path.display());
        }
        Command::Le {
            checkpoint,
            at,
            config,
            out,
            metrics,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = config_for(&ck, config.as_deref())?;
            let (train, test) = cfg.data.load()?;
            let f = extractor_of(&ck, &cfg)?;
            let mut stats = RunStats::default();
            let (clf, rows) = linear_eval(&f, &train, &test, at, &cfg, &mut stats)?;
            let out = out.unwrap_or_else(|| {
                checkpoint.with_file_name(if at {
                    "classifier-at.json"
                } else {
                    "classifier.json"
                })
            });
            ClassifierFile::new(&clf, at).save(&out)?;
            append(metrics.as_deref(), &rows)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            classifier,
            config,
            metrics,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = config_for(&ck, config.as_deref())?;
            let (_, test) = cfg.data.load()?;
            let f = extractor_of(&ck, &cfg)?;
            let file = ClassifierFile::load(&classifier)?;
            let clf = file.classifier()?;
            let mut stats = RunStats::default();
            let r = evaluate(
                &f,
                &clf,
                &test,
                &cfg,
                u64::from(file.adversarial),
                &mut stats,
            )?;
            let mut row = MetricsRow::new(
                &cfg.config_hash(),
                cfg.seed,
                if file.adversarial {
                    "eval-at-le"
                } else {
                    "eval-le"
                },
                cfg.epochs_le,
            );
            row.clean_acc = Some(r.clean_acc);
            row.robust_acc = Some(r.robust_acc);
            if let Some(p) = metrics.as_deref() {
                append(Some(p), &[row])?;
            }
            println!(
                "{}",
                serde_json::json!({"clean_acc": r.clean_acc, "robust_acc": r.robust_acc})
            );
        }
        Command::Ablation { grid, out, threads } => {
            let text = std::fs::read_to_string(&grid)
                .with_context(|| format!("reading {}", grid.display()))?;
            let mut g = AblationGrid::from_json(&text)?;
            if threads.is_some() {
                g.threads = threads;
            }
            if out.exists() {
                std::fs::remove_file(&out)?;
            }
            let outcome = run_ablation(&g, Some(&out))?;
            let runs_path = out.with_extension("runs.csv");
            write_runs(&outcome.runs, std::fs::File::create(&runs_path)?)?;
            let failures: Vec<_> = outcome.runs.iter().filter(|r| !r.ok()).cloned().collect();
            let md = render_summary(&summarize(&outcome), &failures);
            std::fs::write(out.with_extension("md"), &md)?;
            print!("{md}");
        }
        Command::Verify {
            worlds,
            seed,
            max_atoms,
            out,
            strict,
        } => {
            let rows = verify_campaign(worlds, seed, max_atoms)?;
            match &out {
                Some(p) => write_csv(&rows, std::fs::File::create(p)?)?,
                None => write_csv(&rows, std::io::stdout().lock())?,
            }
            let mut names: Vec<&str> = rows.iter().map(|r| r.check_name).collect();
            names.dedup();
            names.sort_unstable();
            names.dedup();
            let mut failed = 0;
            for n in names {
                let of: Vec<_> = rows.iter().filter(|r| r.check_name == n).collect();
                let bad = of.iter().filter(|r| !r.pass).count();
                failed += bad;
                eprintln!("{n}: {}/{} pass", of.len() - bad, of.len());
            }
            if strict && failed > 0 {
                anyhow::bail!("{failed} checks failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(2),
                Some(Error::NumericalAbort { .. }) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
