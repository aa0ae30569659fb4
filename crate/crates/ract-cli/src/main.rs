//! `ract` — prepare data, generate synthetic benchmarks, train with the
//! three-stage ranking-critical schedule, evaluate checkpoints and export
//! plot-ready curves.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use ract_core::config::RunConfig;
use ract_core::data::{binarize_and_filter, load_events, InteractionMatrix, SplitSpec};
use ract_core::ranking::{MetricKind, MetricSpec};
use ract_core::trainer::checkpoint::{self, Checkpoint};
use ract_core::trainer::{
    activity_breakdown, config_from_checkpoint, evaluate, FoldInConfig, Trainer, CSV_HEADER,
};

#[derive(Parser)]
#[command(
    name = "ract",
    about = "Ranking-critical training for implicit-feedback collaborative filtering",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw interaction events, binarize/filter them and write the
    /// binary interaction-matrix file.
    Prepare {
        /// Delimited text with columns (user_id, item_id, rating[, timestamp])
        #[arg(long)]
        input: PathBuf,
        /// Output path for the binary matrix
        #[arg(long)]
        output: PathBuf,
        /// Keep events with rating >= this value
        #[arg(long, default_value_t = 4.0)]
        min_rating: f64,
        /// Drop users with fewer items than this (iterated to a fixed point)
        #[arg(long, default_value_t = 5)]
        min_user_items: usize,
        /// Drop items with fewer users than this (iterated to a fixed point)
        #[arg(long, default_value_t = 1)]
        min_item_users: usize,
    },
    /// Generate a cluster-structured synthetic dataset in the matrix format.
    Synth {
        #[arg(long)]
        users: usize,
        #[arg(long)]
        items: usize,
        #[arg(long)]
        clusters: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the full three-stage training schedule from a config file.
    Train {
        /// Flat key = value config; unknown keys are rejected
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on held-out users and write per-user scores.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary interaction-matrix file (item vocabulary must match)
        #[arg(long)]
        data: PathBuf,
        /// Which users to evaluate: val | test | all
        #[arg(long, default_value = "val")]
        split: String,
        /// Comma-separated cutoffs; defaults to the run's critic cutoff
        #[arg(long)]
        cutoffs: Option<String>,
        /// Comma-separated metric kinds (ndcg, recall)
        #[arg(long, default_value = "ndcg,recall")]
        metrics: String,
        /// Print the mean of the first metric bucketed by user activity
        #[arg(long)]
        breakdown: bool,
        /// Where to write per-user scores (default: next to the checkpoint)
        #[arg(long)]
        per_user_csv: Option<PathBuf>,
    },
    /// Reshape a run's metrics.csv into long-format (series, epoch, value)
    /// rows for external plotting.
    Curves {
        #[arg(long)]
        run_dir: PathBuf,
        /// Output path (default: <run_dir>/curves.csv)
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare {
            input,
            output,
            min_rating,
            min_user_items,
            min_item_users,
        } => cmd_prepare(&input, &output, min_rating, min_user_items, min_item_users),
        Command::Synth {
            users,
            items,
            clusters,
            seed,
            output,
        } => cmd_synth(users, items, clusters, seed, &output),
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            checkpoint,
            data,
            split,
            cutoffs,
            metrics,
            breakdown,
            per_user_csv,
        } => cmd_eval(
            &checkpoint,
            &data,
            &split,
            cutoffs.as_deref(),
            &metrics,
            breakdown,
            per_user_csv.as_deref(),
        ),
        Command::Curves { run_dir, output } => cmd_curves(&run_dir, output.as_deref()),
    }
}

fn print_stats(m: &InteractionMatrix) {
    println!("users:        {}", m.n_users());
    println!("items:        {}", m.n_items());
    println!("interactions: {}", m.nnz());
    println!("sparsity:     {:.4}%", m.sparsity_percent());
}

fn cmd_prepare(
    input: &Path,
    output: &Path,
    min_rating: f64,
    min_user_items: usize,
    min_item_users: usize,
) -> Result<()> {
    let loaded = load_events(input)?;
    if loaded.malformed > 0 {
        println!("{} malformed lines skipped", loaded.malformed);
    }
    let matrix = binarize_and_filter(&loaded.events, min_rating, min_user_items, min_item_users)
        .context("binarize/filter")?;
    matrix.save(output)?;
    print_stats(&matrix);
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_synth(users: usize, items: usize, clusters: usize, seed: u64, output: &Path) -> Result<()> {
    let matrix = ract_core::synth::generate(users, items, clusters, seed)?;
    matrix.save(output)?;
    print_stats(&matrix);
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config_path)?;
    if cfg.data.is_empty() {
        bail!("config must set `data`");
    }
    if cfg.run_dir.is_empty() {
        bail!("config must set `run_dir`");
    }
    let run_dir = PathBuf::from(&cfg.run_dir);
    let data = InteractionMatrix::load(Path::new(&cfg.data))?;
    println!(
        "loaded {} users x {} items ({} interactions)",
        data.n_users(),
        data.n_items(),
        data.nnz()
    );
    let mut trainer = Trainer::new(cfg, data)?;
    let outcome = trainer.run(|r| {
        println!(
            "stage {} epoch {:>4}  loss {:>12.6}  val_ndcg {:>8.5}  val_recall {:>8.5}  critic_mse {:>10.6}  ({:.2}s)",
            r.stage, r.epoch, r.train_loss, r.val_ndcg, r.val_recall, r.critic_mse, r.wall_seconds
        );
    });
    // preserve partial logs even when a stage fails
    trainer.write_run_outputs(&run_dir)?;
    outcome?;
    if let Some(best) = &trainer.best {
        println!(
            "best val ndcg {:.6} at stage {} epoch {}",
            best.score, best.stage, best.epoch
        );
    }
    println!(
        "rows without held-out items dropped: {}; half-steps skipped: {}",
        trainer.dropped_rows, trainer.skipped_half_steps
    );
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn parse_metric_list(metrics: &str, cutoffs: &[usize]) -> Result<Vec<MetricSpec>> {
    let mut kinds = Vec::new();
    for name in metrics.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        kinds.push(name.parse::<MetricKind>()?);
    }
    if kinds.is_empty() {
        bail!("empty metric list");
    }
    let mut specs = Vec::new();
    for &kind in &kinds {
        for &cutoff in cutoffs {
            specs.push(MetricSpec { kind, cutoff });
        }
    }
    Ok(specs)
}

fn cmd_eval(
    checkpoint_path: &Path,
    data_path: &Path,
    split: &str,
    cutoffs: Option<&str>,
    metrics: &str,
    breakdown: bool,
    per_user_csv: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let cfg = config_from_checkpoint(&ckpt)?;
    let n_items: usize = ckpt.get_parsed("meta.n_items")?;
    let data = InteractionMatrix::load(data_path)?;
    if data.n_items() != n_items {
        bail!(
            "item count mismatch: checkpoint was trained on {} items, data has {}",
            n_items,
            data.n_items()
        );
    }
    let actor_config = cfg.actor_config();
    let params = checkpoint::get_actor(&ckpt, "", &actor_config, n_items)?;
    let actor = ract_core::actor::Actor {
        config: actor_config,
        params,
    };

    let users: Vec<usize> = match split {
        "all" => (0..data.n_users()).collect(),
        "val" | "test" => {
            let s = ract_core::data::split_users(
                &data,
                &SplitSpec {
                    n_heldout_val: cfg.n_heldout_val.resolve(data.n_users()),
                    n_heldout_test: cfg.n_heldout_test.resolve(data.n_users()),
                    seed: cfg.seed,
                },
            )?;
            if split == "val" {
                s.val
            } else {
                s.test
            }
        }
        other => bail!("unknown split `{other}` (val | test | all)"),
    };
    if users.is_empty() {
        bail!("the `{split}` split holds no users");
    }

    let cutoff_list: Vec<usize> = match cutoffs {
        Some(text) => text
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| anyhow!("bad cutoff `{s}`")))
            .collect::<Result<_>>()?,
        None => vec![cfg.critic_cutoff],
    };
    let specs = parse_metric_list(metrics, &cutoff_list)?;

    let fold = FoldInConfig {
        fraction: cfg.holdout_fraction,
        seed: cfg.seed,
    };
    let report = evaluate(&actor, &data, &users, &fold, &specs, cfg.normalize_input)?;

    println!(
        "evaluated {} users ({} skipped with < 2 interactions)",
        report.rows.len(),
        report.skipped
    );
    for (spec, mean) in specs.iter().zip(&report.means) {
        println!("{:>12}: {:.6}", spec.label(), mean);
    }

    if breakdown {
        println!("activity breakdown ({}):", specs[0].label());
        for bucket in activity_breakdown(&report.rows, 0, &[250, 500, 750]) {
            println!(
                "{:>10}: mean {:.6} over {} users",
                bucket.label, bucket.mean, bucket.count
            );
        }
    }

    let csv_path: PathBuf = match per_user_csv {
        Some(p) => p.to_path_buf(),
        None => checkpoint_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("per_user.csv"),
    };
    let mut csv = String::from("user,interactions");
    for spec in &specs {
        csv.push(',');
        csv.push_str(&spec.label());
    }
    csv.push('\n');
    for row in &report.rows {
        csv.push_str(&format!("{},{}", row.user, row.n_interactions));
        for s in &row.scores {
            csv.push_str(&format!(",{s}"));
        }
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv)?;
    println!("per-user scores: {}", csv_path.display());
    Ok(())
}

/// Value columns of `metrics.csv`, exported as one series each.
const CURVE_SERIES: [&str; 5] = [
    "train_loss",
    "val_ndcg",
    "val_recall",
    "critic_mse",
    "wall_seconds",
];

fn cmd_curves(run_dir: &Path, output: Option<&Path>) -> Result<()> {
    let metrics_path = run_dir.join("metrics.csv");
    let text = std::fs::read_to_string(&metrics_path)
        .with_context(|| format!("cannot read {}", metrics_path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => bail!("unexpected metrics.csv header: {other:?}"),
    }

    // keep the original value strings so exported values are bit-identical
    let mut out = String::from("series,epoch,value\n");
    let mut stage_starts: Vec<(String, String)> = Vec::new();
    let mut last_stage = String::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            bail!("bad metrics row `{line}`");
        }
        let (stage, epoch) = (fields[0], fields[1]);
        if stage != last_stage {
            stage_starts.push((epoch.to_string(), stage.to_string()));
            last_stage = stage.to_string();
        }
        for (series, value) in CURVE_SERIES.iter().zip(&fields[2..]) {
            out.push_str(&format!("{series},{epoch},{value}\n"));
        }
    }
    for (epoch, stage) in stage_starts {
        out.push_str(&format!("stage_start,{epoch},{stage}\n"));
    }
    let out_path: PathBuf = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("curves.csv"));
    std::fs::write(&out_path, out)?;
    println!("wrote {}", out_path.display());
    Ok(())
}
