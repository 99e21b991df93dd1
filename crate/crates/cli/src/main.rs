use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use gradinterp::datasets::write_temporal_csv;
use gradinterp::experiments::{
    export_decision_boundary, export_weight_curves, linspace, load_model, run_comparison,
    run_delta_ablation, run_k_ablation, run_one, run_trelu_ablation, save_record, BoundingBox,
    Cell, ExperimentConfig, ResultsTable,
};
use gradinterp::temporal_nn::Model;
use gradinterp::training::{evaluate, Method};

#[derive(Parser, Debug)]
#[command(
    name = "gradinterp",
    version,
    about = "Temporal domain generalization experiments"
)]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in rotated 2-Moons setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the generated (or loaded) snapshots to `<out>/data.csv`.
    GenData,
    /// Train one method and save its checkpoint and report.
    Train {
        #[arg(long, value_parser = parse_method)]
        method: Method,
    },
    /// Evaluate a checkpoint on the test snapshot.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare the configured methods across seeds.
    Compare,
    /// GI with random, adversarial and warm-started adversarial δ.
    AblateDelta,
    /// GI with each finetune-domain count in `k_values`.
    AblateK,
    /// ERM with 0..=L TReLU layers, converted from the last hidden layer back.
    AblateTrelu,
    /// Write `<out>/boundary_<t>.csv` for a 2-feature model.
    ExportBoundary {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Raw time to evaluate at.
        #[arg(long)]
        time: f64,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        /// `x0_min,x0_max,x1_min,x1_max`
        #[arg(long, value_parser = parse_bbox)]
        bbox: Option<BoundingBox>,
    },
    /// Write `<out>/weights.csv` with `w_j(t)` of a per-feature model.
    ExportWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        points: usize,
        #[arg(long, default_value_t = 0.0)]
        t_min: f64,
        #[arg(long, default_value_t = 3.0)]
        t_max: f64,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn parse_bbox(s: &str) -> Result<BoundingBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c, d] if a < b && c < d => Ok(BoundingBox {
            x0: (a, b),
            x1: (c, d),
        }),
        [_, _, _, _] => Err("bounds must be increasing".into()),
        _ => Err(format!(
            "expected 4 comma-separated numbers, got {}",
            v.len()
        )),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut exp = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::moons(),
    };
    if let Some(s) = cli.seed {
        exp.seeds = vec![s];
    }
    Ok(exp)
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn report_table(table: &ResultsTable, out: &Path) -> ExitCode {
    print!("{}", table.render());
    println!("results written to {}", out.join("results.csv").display());
    if table.all_succeeded() {
        ExitCode::SUCCESS
    } else {
        for row in table.rows.iter().filter(|r| r.failed > 0) {
            for e in &row.errors {
                eprintln!("{}: {e}", row.method);
            }
        }
        ExitCode::FAILURE
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let exp = load_config(cli)?;
    let seed = exp.seeds[0];
    let out = &cli.out;
    match &cli.command {
        Command::GenData => {
            create_out(out)?;
            let ds = exp.data.load(seed)?;
            let path = out.join("data.csv");
            write_temporal_csv(&ds, &path)?;
            println!(
                "{} snapshots, {} features -> {}",
                ds.snapshots().len(),
                ds.dim(),
                path.display()
            );
        }
        Command::Train { method } => {
            let exp2 = exp.clone();
            let method = *method;
            let cell = Cell {
                label: method.name().into(),
                model: exp.model.clone(),
                config: std::sync::Arc::new(move |s| exp2.train_config(method, s)),
            };
            for &s in &exp.seeds {
                let dir = out.join(method.name()).join(format!("seed_{s}"));
                let (record, _) = run_one(&exp, &cell, s, &dir)?;
                save_record(&record, &dir)?;
                println!(
                    "{} seed {s}: test metric {:.3} (report in {})",
                    method,
                    record.test_metric().unwrap_or(f64::NAN),
                    dir.display()
                );
            }
        }
        Command::Eval { checkpoint } => {
            let model = load_model(checkpoint)?;
            let ds = exp.data.load(seed)?;
            let (_, _, test) = exp.split(&ds)?;
            let base = exp.train_config(Method::Erm, seed)?.loss.base;
            let m = evaluate(&model, &test, base)?;
            println!(
                "t={}: metric {:.4}, loss {:.6}",
                test.time, m.metric, m.loss
            );
            create_out(out)?;
            let path = out.join("eval.json");
            let json = serde_json::json!({
                "checkpoint": checkpoint,
                "seed": seed,
                "time": test.time,
                "metric": m.metric,
                "loss": m.loss,
            });
            std::fs::write(&path, serde_json::to_string_pretty(&json)?)?;
        }
        Command::Compare => return Ok(report_table(&run_comparison(&exp, out)?, out)),
        Command::AblateDelta => return Ok(report_table(&run_delta_ablation(&exp, out)?, out)),
        Command::AblateK => return Ok(report_table(&run_k_ablation(&exp, out)?, out)),
        Command::AblateTrelu => return Ok(report_table(&run_trelu_ablation(&exp, out)?, out)),
        Command::ExportBoundary {
            checkpoint,
            time,
            resolution,
            bbox,
        } => {
            let model = load_model(checkpoint)?;
            create_out(out)?;
            let path = out.join(format!("boundary_{time}.csv"));
            let grid = export_decision_boundary(
                &model,
                *time,
                bbox.unwrap_or_default(),
                *resolution,
                &path,
            )?;
            println!("{} grid points -> {}", grid.len(), path.display());
        }
        Command::ExportWeights {
            checkpoint,
            points,
            t_min,
            t_max,
        } => {
            let Model::PerFeature(pf) = load_model(checkpoint)? else {
                bail!("weight curves need a per-feature model checkpoint");
            };
            create_out(out)?;
            let path = out.join("weights.csv");
            export_weight_curves(&pf, &linspace(*t_min, *t_max, *points), &path)?;
            println!("{points} points -> {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    info!("{:?}", cli.command);
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
