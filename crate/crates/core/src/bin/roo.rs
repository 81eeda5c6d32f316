use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use roo::batcher::{build_batch, build_impression_batch};
use roo::cost::{formula_report, measure_run};
use roo::harness::{
    audit_runs, build_report, generate_events, join_impressions, read_events, render_table, run_pipeline, stream_hash,
    write_events, Config, HarnessError,
};
use roo::joiner::join_stream;
use roo::model::{Counters, Mode};
use roo::schema::{ImpressionSample, RequestSample};
use roo::store::{expand_block, measure_footprint, read_block, read_impressions, write_block, write_impressions};

#[derive(Parser)]
#[command(name = "roo", version, about = "Request-only training data pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config covering every module.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = CliMode::Roo)]
    mode: CliMode,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Roo,
    Impression,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Mode {
        match m {
            CliMode::Roo => Mode::Roo,
            CliMode::Impression => Mode::Impression,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic event stream to <out>/events.jsonl.
    Generate,
    /// Join an event stream into samples (<out>/samples.jsonl).
    Join {
        #[arg(long)]
        events: PathBuf,
    },
    /// Store a samples JSON-lines file as a columnar block.
    Pack {
        #[arg(long)]
        input: PathBuf,
    },
    /// Expand a ROO block into impression rows.
    Expand {
        #[arg(long)]
        input: PathBuf,
    },
    /// Build jagged batches from a stored block.
    Batch {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the full pipeline over an event stream into a run directory.
    Forward {
        #[arg(long)]
        events: PathBuf,
    },
    /// Cost formulas for (n, m, d), or a measured report over two runs.
    Cost {
        n: Option<u64>,
        m: Option<u64>,
        d: Option<u64>,
        #[arg(long)]
        roo: Option<PathBuf>,
        #[arg(long)]
        impression: Option<PathBuf>,
    },
    /// Storage footprint of a ROO block.
    Footprint {
        #[arg(long)]
        input: PathBuf,
    },
    /// Label and coverage parity between a ROO run and an impression run.
    Audit {
        #[arg(long)]
        roo: PathBuf,
        #[arg(long)]
        impression: PathBuf,
    },
    /// Consolidated report over finished runs.
    Report {
        #[arg(long)]
        roo: Option<PathBuf>,
        #[arg(long)]
        impression: Option<PathBuf>,
        #[arg(long)]
        audit: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<Config, HarnessError> {
    let c = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    Ok(match g.seed {
        Some(s) => c.with_seed(s),
        None => c,
    })
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> HarnessError + '_ {
    move |source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String, HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    fs::write(path, format!("{text}\n")).map_err(io_err(path))?;
    Ok(text)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(json_err(path))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(json_err(path))?);
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let g = &cli.global;
    let config = load_config(g)?;
    let mode = Mode::from(g.mode);
    let out = &g.out;
    match cli.command {
        Command::Generate => {
            ensure_dir(out)?;
            let events = generate_events(&config.generator)?;
            write_events(&events, &out.join("events.jsonl"))?;
            println!(
                "{}",
                serde_json::json!({ "events": events.len(), "stream_hash": stream_hash(&events) })
            );
        }
        Command::Join { events } => {
            ensure_dir(out)?;
            let events = read_events(&events)?;
            match mode {
                Mode::Roo => {
                    let lossy = roo::harness::apply_loss(&events, config.generator.loss_rate, config.generator.seed);
                    let joined = join_stream(&lossy, &config.joiner)?;
                    let text = write_json(&out.join("join_metrics.json"), &joined.metrics)?;
                    write_jsonl(&out.join("samples.jsonl"), &joined.into_samples())?;
                    println!("{text}");
                }
                Mode::Impression => {
                    let joined = join_impressions(&events, &config.joiner);
                    let text = write_json(&out.join("join_metrics.json"), &joined.metrics)?;
                    write_jsonl(&out.join("impressions.jsonl"), &joined.rows)?;
                    println!("{text}");
                }
            }
        }
        Command::Pack { input } => {
            ensure_dir(out)?;
            let summary = match mode {
                Mode::Roo => {
                    let samples: Vec<RequestSample> = read_jsonl(&input)?;
                    write_block(&samples, &out.join("block.roo"))?
                }
                Mode::Impression => {
                    let rows: Vec<ImpressionSample> = read_jsonl(&input)?;
                    write_impressions(&rows, &out.join("block.imp"))?
                }
            };
            println!(
                "{}",
                serde_json::json!({ "bytes_written": summary.bytes_written, "sample_count": summary.sample_count })
            );
        }
        Command::Expand { input } => {
            ensure_dir(out)?;
            let (rows, io) = expand_block(&input)?;
            let rows: Vec<ImpressionSample> = rows.collect();
            write_jsonl(&out.join("impressions.jsonl"), &rows)?;
            println!("{}", write_json(&out.join("io_report.json"), &io)?);
        }
        Command::Batch { input } => {
            ensure_dir(out)?;
            let registry = config.generator.registry();
            let size = config.pipeline.batch_size;
            let batches = match mode {
                Mode::Roo => read_block(&input)?
                    .chunks(size)
                    .map(|c| build_batch(c, &registry, &config.batch))
                    .collect::<Result<Vec<_>, _>>()?,
                Mode::Impression => read_impressions(&input)?
                    .chunks(size)
                    .map(|c| build_impression_batch(c, &registry, &config.batch))
                    .collect::<Result<Vec<_>, _>>()?,
            };
            write_json(&out.join("batches.json"), &batches)?;
            let sizes: Vec<_> = batches.iter().map(|b| (b.b_ro, b.b_nro)).collect();
            println!(
                "{}",
                serde_json::json!({ "batches": batches.len(), "b_ro_b_nro": sizes })
            );
        }
        Command::Forward { events } => {
            let events = read_events(&events)?;
            let summary = run_pipeline(&events, mode, &config, out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary.counters).expect("counters serialize")
            );
        }
        Command::Cost {
            n,
            m,
            d,
            roo: roo_dir,
            impression,
        } => match (n, m, d, roo_dir, impression) {
            (Some(n), Some(m), Some(d), None, None) => {
                let r = formula_report(n, m, d)?;
                println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            }
            (None, None, None, Some(a), Some(b)) => {
                let read = |dir: &Path| -> Result<std::collections::BTreeMap<String, Counters>, HarnessError> {
                    let p = dir.join("counters.json");
                    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
                    serde_json::from_str(&text).map_err(json_err(&p))
                };
                let (ra, rb) = (read(&a)?, read(&b)?);
                let mut reports = std::collections::BTreeMap::new();
                for (arch, c) in &ra {
                    if let Some(ic) = rb.get(arch) {
                        reports.insert(arch.clone(), measure_run(c, ic)?);
                    }
                }
                println!("{}", serde_json::to_string_pretty(&reports).expect("report serializes"));
            }
            _ => {
                return Err(HarnessError::Config(
                    "cost takes either N M D or --roo <dir> --impression <dir>".into(),
                ))
            }
        },
        Command::Footprint { input } => {
            let samples = read_block(&input)?;
            let fp = measure_footprint(&samples)?;
            println!("{}", serde_json::to_string_pretty(&fp).expect("report serializes"));
        }
        Command::Audit { roo: a, impression } => {
            ensure_dir(out)?;
            let report = audit_runs(&a, &impression)?;
            println!("{}", write_json(&out.join("audit.json"), &report)?);
        }
        Command::Report {
            roo: a,
            impression,
            audit,
        } => {
            ensure_dir(out)?;
            let report = build_report(a.as_deref(), impression.as_deref(), audit.as_deref())?;
            let json_path = out.join("report.json");
            fs::write(&json_path, report.to_json()).map_err(io_err(&json_path))?;
            let table = render_table(&report);
            let txt_path = out.join("report.txt");
            fs::write(&txt_path, &table).map_err(io_err(&txt_path))?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
