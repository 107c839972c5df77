//! `rdmachan`: run channel workloads, validate the property matrix and
//! sample read-ring pull latencies on the simulated fabric.
//!
//! Exit codes: 0 success, 1 usage or other error, 2 transport requirement
//! unmet, 3 stalled run, 4 matrix mismatch.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rdmachan::chan::{declared_table, ChanError, ChannelConfig, ChannelSpec, Family, Selector};
use rdmachan::datapath::{compose, echo_workload, AckPolicy, RUN_HEADER};
use rdmachan::fabric::ClockParams;
use rdmachan::metrics::dist::{histogram, histogram_csv, pull_latencies, DistParams};
use rdmachan::metrics::{validate_matrix, MeasureParams, HRT};
use rdmachan::workload::RunError;
use rdmachan::{Fabric, FabricConfig, Location, TransportProfile};

#[derive(Parser)]
#[command(name = "rdmachan", version, about = "Uni-directional RDMA channels on a simulated fabric")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Echo workload over a channel and its reverse channel; prints one CSV row.
    Run(RunArgs),
    /// Measures all channels and compares them with the declared table.
    Matrix(MatrixArgs),
    /// Pull-latency histogram of a read ring with an out-of-phase reader.
    Dist(DistArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Loc {
    Host,
    Device,
}

impl From<Loc> for Location {
    fn from(l: Loc) -> Self {
        match l {
            Loc::Host => Location::Host,
            Loc::Device => Location::Device,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    channel: String,
    #[arg(long, default_value = "ib")]
    profile: String,
    #[arg(long, default_value_t = 64)]
    msg_size: u64,
    #[arg(long, default_value_t = 1000)]
    count: u64,
    #[arg(long, default_value_t = 4)]
    outstanding: usize,
    #[arg(long, default_value_t = 1)]
    senders: usize,
    #[arg(long, default_value_t = 1)]
    readers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "host")]
    head_loc: Loc,
    #[arg(long, value_enum, default_value = "host")]
    tail_loc: Loc,
    /// Bytes a read-ring reader fetches per poll.
    #[arg(long)]
    prefetch: Option<u64>,
    /// Releases per acknowledgment; 1 acknowledges every message.
    #[arg(long, default_value_t = 1)]
    ack_batch: u32,
    /// PCIe round trip in ticks, paid by remote accesses to host memory.
    #[arg(long, default_value_t = 0)]
    pcie_rt: u64,
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args)]
struct MatrixArgs {
    #[arg(long, default_value = "-")]
    out: String,
    /// JSON array of declared rows replacing the built-in table entries with
    /// the same selector.
    #[arg(long)]
    declared: Option<PathBuf>,
}

#[derive(Args)]
struct DistArgs {
    #[arg(long, default_value = "rring.inlined")]
    channel: String,
    #[arg(long, default_value_t = 1000)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reader start phase is drawn from [0, jitter); 0 keeps it in sync.
    #[arg(long, default_value_t = HRT)]
    jitter: u64,
    /// Ticks between the publisher's store and its visibility.
    #[arg(long, default_value_t = 3 * HRT / 2)]
    write_ticks: u64,
    #[arg(long)]
    prefetch: Option<u64>,
    /// Histogram bin width in ticks.
    #[arg(long, default_value_t = HRT)]
    bin: u64,
    /// Print one latency per message instead of the histogram.
    #[arg(long)]
    per_message: bool,
    #[arg(long, default_value = "-")]
    out: String,
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::Chan(ChanError::RequirementUnmet(_)) => 2,
            RunError::Stall { .. } => 3,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<ChanError> for Failure {
    fn from(e: ChanError) -> Self {
        RunError::from(e).into()
    }
}

fn emit(out: &str, text: &str) -> Result<(), Failure> {
    if out == "-" {
        print!("{text}");
        std::io::stdout().flush().map_err(|e| Failure::usage(e.to_string()))
    } else {
        std::fs::write(out, text).map_err(|e| Failure::usage(format!("{out}: {e}")))
    }
}

fn selector(s: &str) -> Result<Selector, Failure> {
    s.parse().map_err(|_| {
        let known: Vec<_> = Selector::ALL.iter().map(|s| s.as_str()).collect();
        Failure::usage(format!("unknown channel '{s}'; expected one of {}", known.join(", ")))
    })
}

fn trace_enabled() -> bool {
    std::env::var("RDMA_CHAN_TRACE").is_ok_and(|v| v == "1")
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let sel = selector(&a.channel)?;
    let profile = TransportProfile::from_cli(&a.profile)
        .ok_or_else(|| Failure::usage(format!("unknown profile '{}'; expected ib, efa or 1rma", a.profile)))?;
    let clock = ClockParams { pcie_rt: a.pcie_rt, ..ClockParams::default() };
    let mut fab = Fabric::new(profile, a.seed, FabricConfig { clock, ..FabricConfig::default() });
    if trace_enabled() {
        fab.enable_trace();
    }
    let mut cfg =
        ChannelConfig { head_loc: a.head_loc.into(), tail_loc: a.tail_loc.into(), ..ChannelConfig::default() };
    if let Some(p) = a.prefetch {
        cfg.prefetch_bytes = p;
    }
    // Read rings broadcast from one publisher; everything else may fan in.
    let clients = if sel.family() == Family::ReadRing { 1 } else { a.senders.max(1) };
    let clients: Vec<_> = (0..clients).map(|_| fab.add_endpoint()).collect();
    let servers: Vec<_> = (0..a.readers.max(1)).map(|_| fab.add_endpoint()).collect();
    let ack = if a.ack_batch <= 1 { AckPolicy::PerMessage } else { AckPolicy::Batched(a.ack_batch) };
    let result = compose(sel, &mut fab, &clients, &servers, ack, &cfg)
        .map_err(RunError::from)
        .and_then(|mut dp| echo_workload(&mut fab, &mut dp, a.msg_size, a.count, a.outstanding, a.seed));
    if let Some(t) = fab.trace() {
        eprint!("{t}");
    }
    let stats = result?;
    emit(&a.out, &format!("{RUN_HEADER}\n{}\n", stats.csv_row()))
}

/// Built-in table with rows from `path` substituted by selector.
fn declared_rows(path: Option<&PathBuf>) -> Result<Vec<ChannelSpec>, Failure> {
    let mut table = declared_table();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
        let rows: Vec<ChannelSpec> =
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
        for r in rows {
            if let Some(slot) = table.iter_mut().find(|t| t.selector == r.selector) {
                *slot = r;
            }
        }
    }
    Ok(table)
}

fn cmd_matrix(a: MatrixArgs) -> Result<(), Failure> {
    let specs = declared_rows(a.declared.as_ref())?;
    let report = validate_matrix(&specs, &MeasureParams::default());
    emit(&a.out, &report.to_csv())?;
    for d in report.diff_lines() {
        eprintln!("{d}");
    }
    eprintln!("{}/{} channels match", report.matched(), report.rows.len());
    if report.all_match() {
        Ok(())
    } else {
        Err(Failure { code: 4, msg: "matrix mismatch".into() })
    }
}

fn cmd_dist(a: DistArgs) -> Result<(), Failure> {
    let sel = selector(&a.channel)?;
    let mut p = DistParams {
        count: a.count,
        seed: a.seed,
        jitter: a.jitter,
        write_ticks: a.write_ticks,
        ..DistParams::phase_shifted(sel, HRT)
    };
    if let Some(b) = a.prefetch {
        p.cfg.prefetch_bytes = b;
    }
    let lat = pull_latencies(&p)?;
    let text = if a.per_message {
        let mut s = String::from("message,pull_ticks\n");
        for (k, l) in lat.iter().enumerate() {
            s.push_str(&format!("{k},{l}\n"));
        }
        s
    } else {
        histogram_csv(&histogram(&lat, a.bin))
    };
    emit(&a.out, &text)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let r = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Matrix(a) => cmd_matrix(a),
        Cmd::Dist(a) => cmd_dist(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("rdmachan: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
