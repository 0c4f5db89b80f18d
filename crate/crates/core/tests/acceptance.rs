//! Acceptance criteria as one binary: each criterion prints a single
//! PASS or FAIL line, and any failure makes the process exit nonzero.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use megsim_core::plan::{expand_parameters, parse_plan};
use megsim_core::recording::{synthesize_recording, window, Burst, Component, SyntheticSpec};
use megsim_core::scheduler::Strategy;
use megsim_core::sim::{
    per_resource_shares, run_simulation, summarize, write_outputs, EventKind, ExperimentLog,
    Scenario, SummaryRow,
};
use megsim_core::wavelet::{
    analyze_pair, asc_bytes, cwt, dominant_scale, parse_asc, ppm_bytes, wavelet_cross_correlation,
    CorrelationMap, WaveletConfig,
};
use megsim_core::workload::{estimate_workload, fine_job_count, generate_meta_jobs, WorkloadSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn run(strategy: Strategy, seed: u64) -> (ExperimentLog, SummaryRow) {
    let s = Scenario::table2().with_strategy(strategy).with_seed(seed);
    let log = run_simulation(&s).expect("bundled scenario runs");
    let sum = summarize(&log);
    (log, sum)
}

fn within_limits(s: &SummaryRow) -> bool {
    let q = Scenario::table2().qos;
    s.is_complete() && s.completion.unwrap() <= q.deadline && s.spent <= q.budget
}

fn table2_orderings() -> Outcome {
    let seed = Scenario::table2().seed;
    let mut rows = Vec::new();
    for strategy in [Strategy::TimeMin, Strategy::CostMin, Strategy::CostTime] {
        let started = Instant::now();
        let (_, sum) = run(strategy, seed);
        ensure!(
            started.elapsed() < Duration::from_secs(10),
            "{strategy} took {:?}",
            started.elapsed()
        );
        ensure!(within_limits(&sum), "{strategy} outside limits: {}", sum.render());
        rows.push(sum);
    }
    let (time, cost, ct) = (&rows[0], &rows[1], &rows[2]);
    let span = |s: &SummaryRow| s.makespan().unwrap();
    ensure!(
        cost.spent < ct.spent && ct.spent < time.spent,
        "spend order violated: cost {} cost-time {} time {}",
        cost.spent,
        ct.spent,
        time.spent
    );
    ensure!(
        span(time) < span(ct) && span(ct) < span(cost),
        "makespan order violated: time {} cost-time {} cost {}",
        span(time),
        span(ct),
        span(cost)
    );
    Ok(format!("{} | {} | {}", time.render(), cost.render(), ct.render()))
}

fn budget_and_deadline_safety() -> Outcome {
    let started = Instant::now();
    let q = Scenario::table2().qos;
    let mut cost_checked = 0;
    for seed in 0..50 {
        for strategy in Strategy::ALL {
            let (log, sum) = run(strategy, seed);
            ensure!(
                sum.spent <= q.budget,
                "seed {seed} {strategy}: spent {} > {}",
                sum.spent,
                q.budget
            );
            if strategy == Strategy::CostMin {
                let always_feasible = log.events.iter().all(|e| {
                    !matches!(e.kind, EventKind::Tick { feasible: Some(false), .. })
                });
                if always_feasible {
                    cost_checked += 1;
                    ensure!(
                        sum.is_complete() && sum.completion.unwrap() <= q.deadline,
                        "seed {seed}: feasible cost-min run missed the deadline ({})",
                        sum.render()
                    );
                }
            }
        }
    }
    ensure!(
        started.elapsed() < Duration::from_secs(300),
        "took {:?}",
        started.elapsed()
    );
    Ok(format!(
        "150 runs within budget; {cost_checked}/50 feasible cost-min runs met the deadline"
    ))
}

fn behavioral_claims() -> Outcome {
    let seed = Scenario::table2().seed;

    let (log, _) = run(Strategy::TimeMin, seed);
    let shares = per_resource_shares(&log);
    ensure!(
        shares.len() == 4 && shares.values().all(|&n| n >= 1),
        "time-min left a worker idle: {shares:?}"
    );

    let scenario = Scenario::table2();
    let cheap: BTreeSet<&str> = scenario
        .resources
        .iter()
        .filter(|r| r.worker && r.price == 1.0)
        .map(|r| r.host.as_str())
        .collect();
    let (log, _) = run(Strategy::CostMin, seed);
    let mut probed_hosts = BTreeSet::new();
    let probes: BTreeSet<u64> = log
        .events
        .iter()
        .take_while(|e| e.t == 0.0)
        .filter_map(|e| match &e.kind {
            EventKind::Assigned { job, host, .. } if probed_hosts.insert(host.clone()) => {
                Some(*job)
            }
            _ => None,
        })
        .collect();
    let rest: Vec<&str> = log
        .completions()
        .filter(|(_, job, ..)| !probes.contains(job))
        .map(|(_, _, host, _)| host)
        .collect();
    let share = rest.iter().filter(|h| cheap.contains(*h)).count() as f64 / rest.len() as f64;
    ensure!(share >= 0.8, "cost-min price-1 share {share:.3} < 0.8");

    let mut uniform = Scenario::table2();
    for r in uniform.resources.iter_mut().filter(|r| r.worker) {
        r.price = 1.0;
    }
    let a = run_simulation(&uniform.clone().with_strategy(Strategy::TimeMin)).unwrap();
    let b = run_simulation(&uniform.with_strategy(Strategy::CostTime)).unwrap();
    ensure!(a.events == b.events, "uniform-price cost-time diverged from time-min");
    Ok(format!(
        "time-min shares {:?}; cost-min price-1 share {:.2}; uniform-price logs identical",
        shares.values().collect::<Vec<_>>(),
        share
    ))
}

fn workload_arithmetic() -> Outcome {
    ensure!(
        fine_job_count(64, 29750) == 59_976_000,
        "fine_job_count(64, 29750) = {}",
        fine_job_count(64, 29750)
    );
    ensure!(
        estimate_workload(64, 3600) == 7_257_600,
        "estimate_workload(64, 3600) = {}",
        estimate_workload(64, 3600)
    );
    let jobs = generate_meta_jobs(&WorkloadSpec {
        sensor_count: 2,
        offset_max: 100,
        meta_job_size: 1,
        window_len: 256,
        per_fine_job_cpu_sec: 1.0,
    })
    .map_err(|e| e.to_string())?;
    ensure!(jobs.len() == 100, "{} meta-jobs", jobs.len());
    Ok("59976000 / 7257600 / 100".into())
}

fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn wavelet_kernel() -> Outcome {
    let started = Instant::now();
    let rate = 500.0;

    let cfg = WaveletConfig::for_rate(rate, 256);
    let w = cwt(&noise(7, 256), &cfg).map_err(|e| e.to_string())?;
    let auto = wavelet_cross_correlation(&w, &w, 0).map_err(|e| e.to_string())?;
    for k in (0..auto.scales.len()).filter(|k| !auto.degenerate_scales.contains(k)) {
        ensure!(
            (auto.at(k, 0) - 1.0).abs() <= 1e-9,
            "autocorrelation at scale {k} is {}",
            auto.at(k, 0)
        );
    }

    let long = WaveletConfig::for_rate(rate, 2048);
    let scales = long.scales();
    for f in [5.0, 10.0, 20.0, 40.0] {
        let w = cwt(&common::sine(f, rate, 2048), &long).map_err(|e| e.to_string())?;
        let mean_abs: Vec<f64> = w
            .rows()
            .map(|r| r.iter().map(|c| c.norm()).sum::<f64>() / r.len() as f64)
            .collect();
        let peak = (0..mean_abs.len())
            .max_by(|&a, &b| mean_abs[a].total_cmp(&mean_abs[b]))
            .unwrap();
        let expected = common::nearest_scale(f, long.omega0, rate, &scales);
        ensure!(
            peak.abs_diff(expected) <= 1,
            "{f} Hz peaks at scale {peak}, expected {expected}"
        );
    }

    for delay in [0.0, 10.0, 25.0, 40.0] {
        let rec = synthesize_recording(&SyntheticSpec {
            sensor_count: 2,
            sample_rate_hz: rate,
            duration_samples: 512,
            components: vec![Component {
                frequency_hz: 10.0,
                amplitude: 1.0,
                delay_samples: vec![0.0, delay],
                burst: Some(Burst {
                    center_samples: 110.0,
                    width_samples: 25.0,
                }),
            }],
            noise_amplitude: 0.0,
            seed: 42,
        })
        .map_err(|e| e.to_string())?;
        let wa = cwt(&window(&rec, 0, 0, 256).unwrap().values, &cfg).unwrap();
        let map = analyze_pair(&rec, 0, 1, 0, 256, &cfg).map_err(|e| e.to_string())?;
        let lag = map.peak_lag(dominant_scale(&wa));
        ensure!(
            (lag - delay as i64).abs() <= 1,
            "injected delay {delay}, peak lag {lag}"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let (x, y) = (noise(100 + trial, 256), noise(200 + trial, 256));
        let (a, b): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let (wx, wy, wm) = (
            cwt(&x, &cfg).unwrap(),
            cwt(&y, &cfg).unwrap(),
            cwt(&mix, &cfg).unwrap(),
        );
        for k in 0..cfg.scale_count() {
            for t in 0..256 {
                let gap = (wm.get(k, t) - (wx.get(k, t) * a + wy.get(k, t) * b)).norm();
                ensure!(gap <= 1e-9, "linearity gap {gap:e} at scale {k}, t {t}");
            }
        }
    }

    ensure!(
        started.elapsed() < Duration::from_secs(30),
        "took {:?}",
        started.elapsed()
    );
    Ok(format!("all checks in {:.2?}", started.elapsed()))
}

fn plan_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/plans")
}

fn parser() -> Outcome {
    let fig5 = std::fs::read_to_string(plan_dir().join("fig5.plan")).map_err(|e| e.to_string())?;
    let plan = parse_plan(&fig5).map_err(|e| e.to_string())?;
    ensure!(
        plan.parameters.len() == 4 && plan.tasks.len() == 2,
        "{} parameters, {} tasks",
        plan.parameters.len(),
        plan.tasks.len()
    );
    let n = expand_parameters(&plan).len();
    ensure!(n == 29750 / 10 + 1, "{n} bindings");

    let mut files: Vec<PathBuf> = std::fs::read_dir(plan_dir())
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "plan"))
        .collect();
    files.sort();
    ensure!(files.len() >= 10, "corpus has {} files", files.len());
    for f in &files {
        let text = std::fs::read_to_string(f).unwrap();
        let first = parse_plan(&text).map_err(|e| format!("{}: {e}", f.display()))?;
        let second = parse_plan(&first.to_string()).map_err(|e| format!("{}: {e}", f.display()))?;
        ensure!(first == second, "{} is not a fixpoint", f.display());
    }
    Ok(format!("{n} bindings; {} corpus files fixpoint", files.len()))
}

fn rendering() -> Outcome {
    let rec = synthesize_recording(&SyntheticSpec {
        sensor_count: 2,
        sample_rate_hz: 500.0,
        duration_samples: 300,
        components: vec![Component {
            frequency_hz: 12.0,
            amplitude: 1.0,
            delay_samples: vec![0.0, 6.0],
            burst: None,
        }],
        noise_amplitude: 0.4,
        seed: 5,
    })
    .map_err(|e| e.to_string())?;
    let cfg = WaveletConfig::for_rate(500.0, 128);
    let map: CorrelationMap = analyze_pair(&rec, 0, 1, 0, 128, &cfg).map_err(|e| e.to_string())?;

    let ppm = ppm_bytes(&map);
    let width = map.magnitudes[0].len();
    let header = format!("P6 {width} {} 255\n", map.magnitudes.len());
    ensure!(ppm.starts_with(header.as_bytes()), "bad PPM header");
    let pixels = &ppm[header.len()..];
    let (lo, hi) = map.min_max();
    for (r, row) in map.magnitudes.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let i = 3 * (r * width + c);
            let px = [pixels[i], pixels[i + 1], pixels[i + 2]];
            if v == hi {
                ensure!(px == [255, 0, 0], "max cell ({r},{c}) is {px:?}");
            }
            if v == lo {
                ensure!(px == [0, 0, 255], "min cell ({r},{c}) is {px:?}");
            }
        }
    }

    let back = parse_asc(std::str::from_utf8(&asc_bytes(&map)).unwrap()).map_err(|e| e.to_string())?;
    for (row, orig) in back.iter().zip(&map.magnitudes) {
        for (a, b) in row.iter().zip(orig) {
            ensure!(
                format!("{a:.8e}") == format!("{b:.8e}"),
                "ASC value {a} does not round-trip {b}"
            );
        }
    }
    Ok(format!("{}x{} map", map.magnitudes.len(), width))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let s = Scenario::table2().with_strategy(Strategy::CostTime);
        let log = run_simulation(&s).map_err(|e| e.to_string())?;
        write_outputs(&log, dir.path().join(run)).map_err(|e| e.to_string())?;
        logs.push(std::fs::read(dir.path().join(run).join("events.jsonl")).unwrap());
    }
    ensure!(!logs[0].is_empty(), "empty event log");
    ensure!(logs[0] == logs[1], "events.jsonl differs between runs");
    Ok(format!("{} bytes identical", logs[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("table-2 orderings", table2_orderings),
        ("budget/deadline safety over 50 seeds", budget_and_deadline_safety),
        ("behavioral claims", behavioral_claims),
        ("workload arithmetic", workload_arithmetic),
        ("wavelet kernel", wavelet_kernel),
        ("plan parser", parser),
        ("rendering", rendering),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
