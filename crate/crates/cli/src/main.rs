use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use megsim_core::market::{read_entries, QueryFilter, Registry};
use megsim_core::plan::{expand_parameters, parse_plan};
use megsim_core::recording::{
    load_csv_recording, load_recording, store_recording, synthesize_recording, SyntheticSpec,
};
use megsim_core::scheduler::Strategy;
use megsim_core::sim::{run_live, run_simulation, summarize, write_outputs, Scenario};
use megsim_core::wavelet::{analyze_pair, emit_asc, emit_ppm, output_stem, WaveletConfig};
use megsim_core::workload::{
    estimate_workload, fine_job_count, generate_meta_jobs, serial_seconds, WorkloadSpec,
    DEFAULT_FINE_JOB_CPU_SEC,
};

#[derive(Parser)]
#[command(name = "megsim", version, about = "MEG wavelet workloads on a simulated priced grid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario under one scheduling strategy.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Seconds from experiment start.
        #[arg(long)]
        deadline: Option<f64>,
        /// G$.
        #[arg(long)]
        budget: Option<f64>,
        /// Also run the wavelet analysis of every completed job on this
        /// recording (`.csv` or binary).
        #[arg(long)]
        live: Option<PathBuf>,
    },
    /// Parse or expand a plan file.
    Plan {
        #[command(subcommand)]
        action: PlanAction,
    },
    /// Publish to or query the market directory.
    Gmd {
        #[arg(long, default_value = "gmd.jsonl", global = true)]
        registry: PathBuf,
        #[command(subcommand)]
        action: GmdAction,
    },
    /// Generate a synthetic recording from a JSON description.
    Synth {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-correlate one sensor pair at one offset.
    Analyze {
        recording: PathBuf,
        #[arg(long)]
        a: usize,
        #[arg(long)]
        b: usize,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long, default_value_t = megsim_core::wavelet::DEFAULT_WINDOW_LEN)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print meta-job partitioning and workload size.
    Workload {
        #[arg(long)]
        sensors: usize,
        #[arg(long)]
        offset_max: u64,
        #[arg(long, default_value_t = 1)]
        meta_size: u64,
        #[arg(long, default_value_t = DEFAULT_FINE_JOB_CPU_SEC)]
        per_job_cpu_sec: f64,
    },
}

#[derive(Subcommand)]
enum PlanAction {
    /// Print the parsed plan in canonical form.
    Parse { file: PathBuf },
    /// Print one line per parameter binding.
    Expand { file: PathBuf },
}

#[derive(Subcommand)]
enum GmdAction {
    /// Publish every entry of a JSON or JSON-lines file.
    Publish { file: PathBuf },
    /// List entries, cheapest first.
    Query {
        #[arg(long)]
        service: Option<String>,
        #[arg(long)]
        max_price: Option<f64>,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn load_any_recording(path: &PathBuf) -> Result<megsim_core::recording::Recording> {
    let rec = if path.extension().is_some_and(|e| e == "csv") {
        load_csv_recording(path)
    } else {
        load_recording(path)
    };
    rec.with_context(|| format!("reading {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            strategy,
            seed,
            out,
            deadline,
            budget,
            live,
        } => {
            let mut s = Scenario::load(&scenario)
                .with_context(|| format!("loading {}", scenario.display()))?;
            if let Some(st) = strategy {
                s.qos.strategy = st;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(d) = deadline {
                s.qos.deadline = d;
            }
            if let Some(b) = budget {
                s.qos.budget = b;
            }
            s.validate()?;
            let log = match live {
                Some(path) => {
                    let rec = load_any_recording(&path)?;
                    let cfg = WaveletConfig::for_rate(rec.sample_rate_hz(), s.workload.window_len);
                    let (log, outputs) = run_live(&s, &rec, &cfg, out.join("jobs"))?;
                    println!("live: {} archives under {}", outputs.len(), out.join("jobs").display());
                    log
                }
                None => run_simulation(&s)?,
            };
            let files = write_outputs(&log, &out)?;
            println!("{}", summarize(&log).render());
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Plan { action } => match action {
            PlanAction::Parse { file } => {
                let plan = parse_plan(&fs::read_to_string(&file)?)
                    .with_context(|| format!("parsing {}", file.display()))?;
                print!("{plan}");
            }
            PlanAction::Expand { file } => {
                let plan = parse_plan(&fs::read_to_string(&file)?)
                    .with_context(|| format!("parsing {}", file.display()))?;
                for b in expand_parameters(&plan) {
                    println!("{b}");
                }
            }
        },
        Command::Gmd { registry, action } => {
            let mut reg = Registry::open(&registry)?;
            match action {
                GmdAction::Publish { file } => {
                    let entries = read_entries(&file)?;
                    let n = entries.len();
                    for e in entries {
                        reg.publish(e)?;
                    }
                    println!("published {n} entries to {}", registry.display());
                }
                GmdAction::Query { service, max_price } => {
                    let filter = QueryFilter {
                        service_name: service,
                        max_price,
                    };
                    for e in reg.query(&filter) {
                        println!("{}", serde_json::to_string(&e)?);
                    }
                }
            }
        }
        Command::Synth { spec, out } => {
            let spec: SyntheticSpec = serde_json::from_str(&fs::read_to_string(&spec)?)
                .with_context(|| format!("parsing {}", spec.display()))?;
            let rec = synthesize_recording(&spec)?;
            store_recording(&rec, &out)?;
            println!(
                "wrote {} ({} sensors x {} samples)",
                out.display(),
                rec.sensor_count(),
                rec.duration_samples()
            );
        }
        Command::Analyze {
            recording,
            a,
            b,
            offset,
            window,
            out,
        } => {
            let rec = load_any_recording(&recording)?;
            let cfg = WaveletConfig::for_rate(rec.sample_rate_hz(), window);
            let map = analyze_pair(&rec, a, b, offset, window, &cfg)?;
            fs::create_dir_all(&out)?;
            let stem = out.join(output_stem(a, b, offset));
            emit_asc(&map, stem.with_extension("asc"))?;
            emit_ppm(&map, stem.with_extension("ppm"))?;
            let peaks: BTreeMap<usize, i64> =
                (0..map.scales.len()).map(|k| (k, map.peak_lag(k))).collect();
            println!("wrote {}.{{asc,ppm}}", stem.display());
            println!("peak lag per scale: {peaks:?}");
        }
        Command::Workload {
            sensors,
            offset_max,
            meta_size,
            per_job_cpu_sec,
        } => {
            if sensors < 2 {
                bail!("need at least two sensors");
            }
            let spec = WorkloadSpec {
                sensor_count: sensors,
                offset_max,
                meta_job_size: meta_size,
                window_len: megsim_core::wavelet::DEFAULT_WINDOW_LEN,
                per_fine_job_cpu_sec: per_job_cpu_sec,
            };
            let jobs = generate_meta_jobs(&spec)?;
            let fine = fine_job_count(sensors, offset_max);
            println!("fine_jobs={fine}");
            println!("meta_jobs={}", jobs.len());
            let hour = estimate_workload(sensors, 3600);
            println!("per_second_estimate_1h={hour}");
            println!(
                "serial_days={:.2}",
                serial_seconds(fine, per_job_cpu_sec) / 86_400.0
            );
            println!(
                "serial_days_1h={:.2}",
                serial_seconds(hour, per_job_cpu_sec) / 86_400.0
            );
        }
    }
    Ok(())
}
