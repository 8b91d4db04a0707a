//! Command-line front end for the TSP heat-map pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/model error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use tspnet::data::{
    self, dataset_stats, read_dataset, write_dataset, Dataset, SolverKind, Split,
    STATS_CSV_HEADER,
};
use tspnet::decode::DecoderKind;
use tspnet::evalbench::{
    self, benchmark, report_csv, sweep_beam_width, sweep_capacity, MethodSpec, SweepAxis,
};
use tspnet::geom::TspInstance;
use tspnet::model::{load_checkpoint, Gcn};
use tspnet::train::{fit, parse_config_file, FitSinks};
use tspnet::Error;

/// Largest instance size the exact generator accepts.
const EXACT_GEN_MAX_N: usize = 20;

#[derive(Parser)]
#[command(name = "tspnet", version, about = "TSP heat-map pipeline", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of instances with reference tours.
    Generate {
        /// Instance size (exact tours up to n=20, heuristic beyond).
        #[arg(long)]
        n: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Split tag for the stats row (train|val|test).
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Train a model from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
    },
    /// Decode tours for every instance of a dataset.
    Solve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// greedy | beam | beam-shortest
        #[arg(long, default_value = "greedy")]
        decoder: String,
        #[arg(long, default_value_t = 128)]
        beam_width: usize,
        #[arg(long)]
        out: PathBuf,
        /// Average each edge probability with its reverse before decoding.
        #[arg(long, default_value_t = false)]
        symmetrize: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Benchmark a method over a dataset; writes a CSV report.
    Benchmark {
        /// exact | nearest-neighbor | nearest-insertion | random-insertion |
        /// farthest-insertion | nn-2opt | fi-2opt | greedy | beam | beam-shortest
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Required by the model methods.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        beam_width: usize,
    },
    /// Sweep beam width (or retrain per capacity value) and report gaps.
    Sweep {
        /// beam_width | l_conv | h
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 1,2,4,8.
        #[arg(long)]
        values: String,
        /// Checkpoint for beam_width sweeps.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation dataset.
        #[arg(long)]
        data: PathBuf,
        /// Training dataset for capacity sweeps.
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Epochs per capacity value.
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one instance as a three-panel SVG figure.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Zero-based record index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        /// greedy | beam | beam-shortest
        #[arg(long, default_value = "beam-shortest")]
        decoder: String,
        #[arg(long, default_value_t = 128)]
        beam_width: usize,
    },
}

fn default_threads(requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    })
}

fn parse_split(name: &str) -> Result<Split, Error> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::InvalidArgument(format!(
            "unknown split '{other}' (expected train|val|test)"
        ))),
    }
}

fn with_pool<T>(threads: usize, f: impl FnOnce() -> Result<T, Error> + Send) -> Result<T, Error>
where
    T: Send,
{
    let pool = rayon_pool(threads)?;
    pool.install(f)
}

fn rayon_pool(threads: usize) -> Result<tspnet_rayon::ThreadPool, Error> {
    tspnet_rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

// rayon is re-exported through the library so the CLI does not pin its
// own copy
use tspnet::rayon as tspnet_rayon;

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn load_model(path: &Path) -> Result<Gcn<f32>, Error> {
    load_checkpoint(path)
}

fn decoded_records(
    model: &Gcn<f32>,
    dataset: &Dataset,
    decoder: DecoderKind,
    symmetrize: bool,
) -> Result<Vec<(TspInstance, tspnet::geom::Tour)>, Error> {
    use tspnet_rayon::prelude::*;
    let chunks: Vec<_> = dataset.records.chunks(20).collect();
    let solved: Vec<Vec<(TspInstance, tspnet::geom::Tour)>> = chunks
        .par_iter()
        .map(|chunk| -> Result<_, Error> {
            let instances: Vec<&TspInstance> = chunk.iter().map(|(i, _)| i).collect();
            let maps = model.heatmaps(&instances)?;
            chunk
                .iter()
                .zip(maps)
                .map(|((inst, _), hm)| {
                    let hm = if symmetrize { hm.symmetrized() } else { hm };
                    let tour = decoder.decode(&hm, inst, 0)?;
                    Ok((inst.clone(), tour))
                })
                .collect()
        })
        .collect::<Result<_, Error>>()?;
    Ok(solved.into_iter().flatten().collect())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { n, count, seed, out, split, threads } => {
            let split = parse_split(&split)?;
            let threads = default_threads(threads);
            let dataset = with_pool(threads, || {
                if n <= EXACT_GEN_MAX_N {
                    data::generate_dataset(n, count, seed, SolverKind::HeldKarpCapped(EXACT_GEN_MAX_N), split)
                } else {
                    eprintln!(
                        "note: n = {n} exceeds the exact-solver cap ({EXACT_GEN_MAX_N}); \
                         stored tours are farthest-insertion + 2-opt, not optimal"
                    );
                    data::generate_heuristic_dataset(n, count, seed, split)
                }
            })?;
            write_dataset(&dataset, &out)?;
            let stats = dataset_stats(&dataset)?;
            println!("{STATS_CSV_HEADER}");
            println!("{}", stats.csv_row());
            Ok(())
        }
        Command::Train { config, data, out_checkpoint } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::Io {
                path: config.display().to_string(),
                source: e,
            })?;
            let cfg = parse_config_file(&text)?;
            let full = read_dataset(&data)?;
            let held_out = ((full.len() as f64) * cfg.val_fraction).ceil() as usize;
            let held_out = held_out.clamp(1, full.len().saturating_sub(1).max(1));
            let split_at = full.len() - held_out;
            let mut train_ds = full;
            let val_records = train_ds.records.split_off(split_at);
            train_ds.split = Split::Train;
            let val_ds = Dataset {
                split: Split::Val,
                n: train_ds.n,
                seed: train_ds.seed,
                records: val_records,
                mean_solve_ms: None,
            };
            let mut model = Gcn::<f32>::new(cfg.arch, cfg.train.seed)?;
            let best = out_checkpoint.with_extension("best.ckpt");
            let log = out_checkpoint.with_extension("log.csv");
            let sinks = FitSinks {
                checkpoint: Some(&out_checkpoint),
                best_checkpoint: Some(&best),
                log: Some(&log),
            };
            let report = fit(&mut model, &train_ds, &val_ds, &cfg.train, &sinks)?;
            let last = report.epochs.last().expect("at least one epoch");
            println!(
                "trained {} epochs on {} records (val {}); final loss {:.6}, val gap {}%",
                report.epochs.len(),
                train_ds.len(),
                val_ds.len(),
                last.mean_loss,
                last.val_gap_pct.map(|g| format!("{g:.3}")).unwrap_or_default()
            );
            println!("checkpoint: {}", out_checkpoint.display());
            Ok(())
        }
        Command::Solve { checkpoint, data, decoder, beam_width, out, symmetrize, threads } => {
            let model = load_model(&checkpoint)?;
            let dataset = read_dataset(&data)?;
            let decoder = DecoderKind::parse(&decoder, beam_width)?;
            let threads = default_threads(threads);
            let started = Instant::now();
            let solved = with_pool(threads, || {
                decoded_records(&model, &dataset, decoder, symmetrize)
            })?;
            let wall_ms = started.elapsed().as_secs_f64() * 1e3;
            let mut text = String::new();
            let mut total = 0.0;
            for (inst, tour) in &solved {
                total += tspnet::geom::tour_length(inst, tour)?;
                text.push_str(&data::format_record(inst, tour));
                text.push('\n');
            }
            write_text(&out, &text)?;
            println!(
                "solved {} instances; mean length {:.6}; wall {:.1} ms",
                solved.len(),
                total / solved.len() as f64,
                wall_ms
            );
            Ok(())
        }
        Command::Benchmark { method, data, threads, out, checkpoint, beam_width } => {
            let spec = MethodSpec::parse(&method, beam_width)?;
            let model = match (&spec, checkpoint) {
                (s, Some(path)) if s.needs_model() => Some(load_model(&path)?),
                (s, None) if s.needs_model() => {
                    return Err(Error::InvalidArgument(format!(
                        "method {} requires --checkpoint",
                        s.name()
                    )))
                }
                _ => None,
            };
            let dataset = read_dataset(&data)?;
            let threads = default_threads(threads);
            let row = benchmark(&spec, model.as_ref(), &dataset, threads)?;
            let csv = report_csv(&[row])?;
            print!("{csv}");
            if let Some(path) = out {
                write_text(&path, &csv)?;
            }
            Ok(())
        }
        Command::Sweep {
            axis,
            values,
            checkpoint,
            data,
            train_data,
            epochs,
            seed,
            threads,
            out,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let values: Vec<usize> = if values.trim().is_empty() {
                Vec::new()
            } else {
                values
                    .split(',')
                    .map(|v| {
                        v.trim().parse::<usize>().map_err(|_| {
                            Error::InvalidArgument(format!("bad sweep value '{v}'"))
                        })
                    })
                    .collect::<Result<_, _>>()?
            };
            let dataset = read_dataset(&data)?;
            let threads = default_threads(threads);
            let rows = match axis {
                SweepAxis::BeamWidth => {
                    let path = checkpoint.ok_or_else(|| {
                        Error::InvalidArgument("beam_width sweeps require --checkpoint".into())
                    })?;
                    let model = load_model(&path)?;
                    sweep_beam_width(&model, &dataset, &values, threads)?
                }
                SweepAxis::LConv | SweepAxis::Hidden => {
                    let train_path = train_data.ok_or_else(|| {
                        Error::InvalidArgument("capacity sweeps require --train-data".into())
                    })?;
                    let train_ds = read_dataset(&train_path)?;
                    let base = tspnet::model::GcnConfig::desk_scale();
                    let train_cfg = tspnet::train::TrainConfig {
                        epochs,
                        subset_per_epoch: train_ds.len(),
                        batch_size: 20,
                        seed,
                        ..tspnet::train::TrainConfig::default()
                    };
                    sweep_capacity(axis, &values, &base, &train_cfg, &train_ds, &dataset, threads)?
                }
            };
            let csv = if rows.is_empty() {
                String::new()
            } else {
                report_csv(&rows)?
            };
            print!("{csv}");
            if let Some(path) = out {
                write_text(&path, &csv)?;
            }
            Ok(())
        }
        Command::Render { checkpoint, data, index, out, decoder, beam_width } => {
            let model = load_model(&checkpoint)?;
            let dataset = read_dataset(&data)?;
            let (instance, reference) = dataset.records.get(index).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "index {index} out of range for {} records",
                    dataset.len()
                ))
            })?;
            let decoder = DecoderKind::parse(&decoder, beam_width)?;
            let heatmap = model.heatmaps(&[instance])?.remove(0);
            let predicted = decoder.decode(&heatmap, instance, 0)?;
            evalbench::export_figure(instance, &heatmap, &predicted, reference, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
