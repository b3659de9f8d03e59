//! Command-line benchmark driver: run a configured workload against one
//! commit protocol over the simulated multi-data-center cluster, and emit
//! per-transaction CSV plus latency CDF data.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use mdcc::SimConfig;
use mdcc_bench::{
    cdf_to_csv, failure_report, run_workload, write_csv, FailureScript, ProtocolChoice,
    WorkloadKind, WorkloadSpec,
};

#[derive(Parser, Debug)]
#[command(
    name = "mdcc-bench",
    about = "Benchmark optimistic multi-data-center commit against 2PC and quorum-write baselines \
             on a deterministic network simulator"
)]
struct Args {
    /// Workload: micro-purchase | tpcw-lite-ordering
    #[arg(long, default_value = "micro-purchase")]
    workload: WorkloadKind,

    /// Protocol: mdcc-classic | mdcc-fast-noncomm | mdcc-fast-comm | 2pc | qw3 | qw4
    #[arg(long, default_value = "mdcc-fast-comm")]
    protocol: ProtocolChoice,

    /// Concurrent closed-loop clients.
    #[arg(long, default_value_t = 100)]
    clients: u32,

    /// Item table size.
    #[arg(long, default_value_t = 10_000)]
    items: u64,

    /// Simulated run length in seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,

    /// Simulator seed (overrides the config file's seed).
    #[arg(long)]
    seed: Option<u64>,

    /// TOML network configuration; defaults to the built-in five-DC layout.
    #[arg(long)]
    sim_config: Option<PathBuf>,

    /// Fail a data center: dc:fail_at:heal_at (seconds; heal may exceed the
    /// run length).
    #[arg(long)]
    failure: Option<FailureScript>,

    /// Write the per-transaction CSV here (a .cdf.csv sibling is written
    /// next to it).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Stream the full event trace to this file (JSON lines).
    #[arg(long)]
    trace: Option<PathBuf>,

    /// Initial stock per item.
    #[arg(long, default_value_t = 100)]
    stock: i64,
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(clean) => {
            if clean {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(args: Args) -> Result<bool> {
    let mut cfg = match &args.sim_config {
        Some(path) => SimConfig::load(path).with_context(|| format!("loading {path:?}"))?,
        None => SimConfig::default_five_dc(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let mut spec = WorkloadSpec::new(args.workload, args.protocol);
    spec.items = args.items;
    spec.clients = args.clients;
    spec.duration_s = args.duration;
    spec.failure = args.failure;
    spec.stock = args.stock;
    spec.validate()?;

    let mut result = run_workload(&spec, &cfg)?;
    if let Some(path) = &args.trace {
        result.sim.trace.attach_file(path)?;
        // Re-emit the retained events so the file holds the full run.
        let events = result.sim.trace.events.clone();
        for ev in events {
            result.sim.trace.push(ev);
        }
        result.sim.trace.flush();
    }

    let m = &result.metrics;
    println!(
        "protocol={} workload={:?} clients={} items={} duration_s={}",
        spec.protocol.label(),
        spec.kind,
        spec.clients,
        spec.items,
        spec.duration_s
    );
    println!(
        "committed={} aborted={} unknown={} throughput={:.1} tps",
        m.committed, m.aborted, m.unknown, m.throughput_tps
    );
    println!(
        "latency ms: mean={:.1} p50={:.1} p90={:.1} p99={:.1}",
        m.latency_mean_ms, m.latency_p50_ms, m.latency_p90_ms, m.latency_p99_ms
    );
    if let Some(f) = spec.failure {
        let fr = failure_report(m, f.fail_at_s);
        println!(
            "failure at {}s: pre mean={:.1} ms var={:.1}; post mean={:.1} ms var={:.1}; \
             max commit gap={:.2}s",
            f.fail_at_s, fr.pre_mean_ms, fr.pre_var, fr.post_mean_ms, fr.post_var,
            fr.max_commit_gap_s
        );
        println!("second,mean_latency_ms,commits");
        for (s, mean, n) in &fr.series {
            println!("{s},{mean:.2},{n}");
        }
    }
    if result.lost_updates > 0 {
        println!("lost_updates={}", result.lost_updates);
    }

    if let Some(out) = &args.out {
        write_csv(out, &m.rows)?;
        let cdf_path = out.with_extension("cdf.csv");
        std::fs::write(&cdf_path, cdf_to_csv(&m.cdf))
            .with_context(|| format!("writing {cdf_path:?}"))?;
        println!("wrote {out:?} and {cdf_path:?}");
    } else {
        // Compact CDF to stdout: one line per 5% step.
        println!("cdf (latency_ms,fraction):");
        let step = (m.cdf.len() / 20).max(1);
        for (i, (ms, frac)) in m.cdf.iter().enumerate() {
            if i % step == 0 || i + 1 == m.cdf.len() {
                println!("{ms:.1},{frac:.3}");
            }
        }
    }

    for v in &result.violations {
        eprintln!("invariant violation: {v}");
    }
    Ok(result.violations.is_empty())
}
