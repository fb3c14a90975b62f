//! The `pointda` command line: data generation, training, ablation,
//! evaluation, visualization and annotation conversion, all driven by one
//! TOML config plus dotted `key=value` overrides.
//!
//! Every run writes `resolved_config.toml` into its output directory; that
//! echo plus the dataset manifest pins down the run completely. Exit codes:
//! 0 success, 1 runtime failure, 2 usage or config error. Errors print one
//! machine-parseable line: `error[<category>]: <message>`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{apply_env_seed, load_config, Config};
use crate::data::{generate_domain_pair, load_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, render_artifacts, METRICS_CSV_HEADER};
use crate::geometry::PointSet;
use crate::training::{load_checkpoint_any, run_ablation, train, TrainOptions};

#[derive(Parser)]
#[command(
    name = "pointda",
    version,
    about = "Point-proposal crowd counting with unsupervised domain adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target dataset pair
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root to write; defaults to `data.root` from the config
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Dotted config overrides, e.g. `data.n_source=50`
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train on the dataset pair under `data.root`
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for checkpoints, CSV logs and the config echo
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Continue from `<out>/last.ckpt`
        #[arg(long)]
        resume: bool,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train every loss-component combination and write the report table
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a labeled split
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `source-eval` or `target-eval`
        #[arg(long, default_value = "target-eval")]
        split: String,
        /// Also sweep thresholds 0.1..0.9 into `threshold_sweep.csv`
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Render prediction overlays and entropy heatmaps for a few samples
    Visualize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "target-eval")]
        split: String,
        /// How many samples to render
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Convert external annotation files into the native JSON format
    ConvertAnnotations {
        /// One of the registered formats (`txt-xy`, `csv-xy`)
        #[arg(long)]
        format: String,
        /// Directory of annotation files to convert
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

/// Parses the command line and dispatches; returns the process exit code.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let message = e.to_string().replace('\n', "; ");
            eprintln!("error[{}]: {}", e.category(), message);
            e.exit_code()
        }
    }
}

fn ensure_out(path: &Path, force: bool, allow_existing: bool) -> Result<()> {
    if allow_existing || force || !path.exists() {
        return Ok(());
    }
    let occupied = fs::read_dir(path)
        .map(|mut entries| entries.next().is_some())
        .unwrap_or(true);
    if occupied {
        return Err(Error::OutputCollision(path.to_path_buf()));
    }
    Ok(())
}

fn parse_eval_split(name: &str) -> Result<Split> {
    match name {
        "source-eval" => Ok(Split::SourceEval),
        "target-eval" => Ok(Split::TargetEval),
        other => Err(Error::InvalidArgument(format!(
            "split must be source-eval or target-eval, got '{other}'"
        ))),
    }
}

fn load_target_adapt(cfg: &Config) -> Result<Option<Dataset>> {
    if !cfg.data.root.join("target/images").is_dir() {
        log::warn!(
            "no target domain under {}; training source-only",
            cfg.data.root.display()
        );
        return Ok(None);
    }
    load_dataset(&cfg.data.root, Split::TargetAdapt).map(Some)
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenerateData {
            config,
            out,
            force,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let out = out.unwrap_or_else(|| cfg.data.root.clone());
            ensure_out(&out, force, false)?;
            let manifest =
                generate_domain_pair(&cfg.data.pair_spec(), cfg.data.n_source, cfg.data.n_target, &out)?;
            cfg.write_resolved_echo(&out)?;
            println!(
                "wrote {} source and {} target images to {} (shift axes: {})",
                manifest.n_source,
                manifest.n_target,
                out.display(),
                manifest.shift_axes.join(", ")
            );
            Ok(())
        }
        Command::Train {
            config,
            out,
            force,
            resume,
            overrides,
        } => {
            let mut cfg = load_config(&config, &overrides)?;
            apply_env_seed(&mut cfg)?;
            ensure_out(&out, force, resume)?;
            let source = load_dataset(&cfg.data.root, Split::SourceTrain)?;
            let target = load_target_adapt(&cfg)?;
            let opts = TrainOptions {
                resume,
                stop_after: None,
            };
            let outcome = train(&cfg, &source, target.as_ref(), &out, &opts)?;
            if let Some(rec) = &outcome.source_eval {
                println!("source-eval: mae {:.3}, mse {:.3}", rec.mae, rec.mse);
            }
            if let Some(rec) = &outcome.target_eval {
                println!("target-eval: mae {:.3}, mse {:.3}", rec.mae, rec.mse);
            }
            println!(
                "finished at step {}; checkpoints under {}",
                outcome.final_step,
                out.display()
            );
            Ok(())
        }
        Command::Ablate {
            config,
            out,
            force,
            overrides,
        } => {
            let mut cfg = load_config(&config, &overrides)?;
            apply_env_seed(&mut cfg)?;
            ensure_out(&out, force, false)?;
            cfg.write_resolved_echo(&out)?;
            let source = load_dataset(&cfg.data.root, Split::SourceTrain)?;
            let target = load_dataset(&cfg.data.root, Split::TargetAdapt)?;
            let report = run_ablation(&cfg, &source, &target, &out)?;
            println!("{}", report.to_csv());
            println!("report written to {}", out.join("ablation_report.csv").display());
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            sweep,
            out,
            force,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            ensure_out(&out, force, false)?;
            let split = parse_eval_split(&split)?;
            let state = load_checkpoint_any(&checkpoint, &cfg)?;
            let samples = load_dataset(&cfg.data.root, split)?.load_all()?;
            let record = evaluate(
                &state.main,
                &samples,
                cfg.eval.threshold,
                &cfg.data.root.display().to_string(),
                &split.to_string(),
            )?;
            cfg.write_resolved_echo(&out)?;
            let metrics_path = out.join("metrics.csv");
            fs::write(
                &metrics_path,
                format!("{METRICS_CSV_HEADER}\n{}\n", record.csv_row(state.step)),
            )
            .map_err(|e| Error::io(&metrics_path, e))?;
            record.write_per_image_csv(&out.join("per_image.csv"))?;
            println!(
                "{}: mae {:.3}, mse {:.3}, mean entropy {:.3} over {} images",
                split, record.mae, record.mse, record.mean_entropy, record.n_images
            );
            if sweep {
                let sweep_path = out.join("threshold_sweep.csv");
                let mut text = String::from("threshold,mae,mse\n");
                for i in 1..=9 {
                    let threshold = i as f64 / 10.0;
                    let rec = evaluate(&state.main, &samples, threshold, "sweep", &split.to_string())?;
                    text.push_str(&format!("{threshold},{},{}\n", rec.mae, rec.mse));
                }
                fs::write(&sweep_path, text).map_err(|e| Error::io(&sweep_path, e))?;
                println!("threshold sweep written to {}", sweep_path.display());
            }
            Ok(())
        }
        Command::Visualize {
            config,
            checkpoint,
            split,
            count,
            out,
            force,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            ensure_out(&out, force, false)?;
            let split = parse_eval_split(&split)?;
            let state = load_checkpoint_any(&checkpoint, &cfg)?;
            let dataset = load_dataset(&cfg.data.root, split)?;
            cfg.write_resolved_echo(&out)?;
            for index in 0..count.min(dataset.len()) {
                let sample = dataset.get(index)?;
                let (overlay, entropy) =
                    render_artifacts(&state.main, &sample, cfg.eval.threshold, &out)?;
                println!("{} -> {}, {}", sample.id, overlay.display(), entropy.display());
            }
            Ok(())
        }
        Command::ConvertAnnotations {
            format,
            input,
            out,
            force,
        } => {
            ensure_out(&out, force, false)?;
            let converter = find_converter(&format)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut names: Vec<PathBuf> = fs::read_dir(&input)
                .map_err(|e| Error::io(&input, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .is_some_and(|ext| ext == converter.extension())
                })
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(Error::DatasetIntegrity(format!(
                    "no .{} files under {}",
                    converter.extension(),
                    input.display()
                )));
            }
            for path in &names {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let points = converter.parse(&text, path)?;
                let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                let out_path = out.join(format!("{stem}.json"));
                let body = serde_json::json!({ "points": points });
                fs::write(&out_path, serde_json::to_string_pretty(&body).unwrap())
                    .map_err(|e| Error::io(&out_path, e))?;
            }
            println!("converted {} files into {}", names.len(), out.display());
            Ok(())
        }
    }
}

/// Plugin point for external annotation formats: implement this trait and
/// register the format in [`converters`].
pub trait AnnotationConverter {
    fn extension(&self) -> &'static str;
    fn parse(&self, text: &str, path: &Path) -> Result<Vec<[f64; 2]>>;
}

/// Whitespace-separated `x y` pairs, one per line.
struct TxtXy;

impl AnnotationConverter for TxtXy {
    fn extension(&self) -> &'static str {
        "txt"
    }

    fn parse(&self, text: &str, path: &Path) -> Result<Vec<[f64; 2]>> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |field: Option<&str>| -> Result<f64> {
                field
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        message: format!("line {}: expected 'x y'", lineno + 1),
                    })
            };
            let x = parse(it.next())?;
            let y = parse(it.next())?;
            points.push([x, y]);
        }
        PointSet::new(points.clone())?;
        Ok(points)
    }
}

/// Comma-separated `x,y` pairs, one per line, optional `x,y` header.
struct CsvXy;

impl AnnotationConverter for CsvXy {
    fn extension(&self) -> &'static str {
        "csv"
    }

    fn parse(&self, text: &str, path: &Path) -> Result<Vec<[f64; 2]>> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.eq_ignore_ascii_case("x,y")) {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let parse = |field: Option<&&str>| -> Result<f64> {
                field
                    .and_then(|f| f.trim().parse().ok())
                    .ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        message: format!("line {}: expected 'x,y'", lineno + 1),
                    })
            };
            let x = parse(parts.first())?;
            let y = parse(parts.get(1))?;
            points.push([x, y]);
        }
        PointSet::new(points.clone())?;
        Ok(points)
    }
}

fn converters() -> Vec<(&'static str, Box<dyn AnnotationConverter>)> {
    vec![("txt-xy", Box::new(TxtXy)), ("csv-xy", Box::new(CsvXy))]
}

fn find_converter(name: &str) -> Result<Box<dyn AnnotationConverter>> {
    converters()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| c)
        .ok_or_else(|| {
            let known: Vec<&str> = converters().iter().map(|(n, _)| *n).collect();
            Error::InvalidArgument(format!(
                "unknown annotation format '{name}'; known formats: {}",
                known.join(", ")
            ))
        })
}
