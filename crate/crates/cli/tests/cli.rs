use std::path::PathBuf;
use std::process::{Command, Output};

fn rdmachan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdmachan")).args(args).output().expect("spawn rdmachan")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Column `name` of the single data row of a run.
fn column(o: &Output, name: &str) -> f64 {
    let text = stdout(o);
    let mut lines = text.lines();
    let header: Vec<_> = lines.next().expect("header").split(',').collect();
    let row: Vec<_> = lines.next().expect("row").split(',').collect();
    let i = header.iter().position(|h| *h == name).expect("column");
    row[i].parse().expect("number")
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn run_header_is_golden() {
    let o = rdmachan(&["run", "--channel", "wslot.inlined", "--count", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(
        text.lines().next().unwrap(),
        "channel,profile,msg_size,count,outstanding,p50_ticks,p90_ticks,reqs_send,reqs_recv,copies_send,copies_recv,recv_registered_bytes"
    );
    assert!(text.lines().nth(1).unwrap().starts_with("wslot.inlined,ib,64,50,4,"));
}

#[test]
fn matrix_passes_and_writes_report() {
    let path = std::env::temp_dir().join(format!("rdmachan-matrix-{}.csv", std::process::id()));
    let o = rdmachan(&["matrix", "--out", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&path).unwrap();
    std::fs::remove_file(&path).ok();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "channel,profile,hrt,reqs_send,reqs_recv,blocking,zc_send,zc_recv,variable,mem_1_to_n,mem_n_to_1,transport,ordering,passive_send,passive_recv,match"
    );
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}

#[test]
fn misdeclared_row_exits_4_with_diff() {
    let o = rdmachan(&["matrix", "--declared", fixture("misdeclared.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).lines().any(|l| l.starts_with("sendrecv.normal,") && l.ends_with(",false")));
    assert!(stderr(&o).contains("sendrecv.normal: hrt: declared 2, measured 1"), "{}", stderr(&o));
}

#[test]
fn exit_codes() {
    assert_eq!(rdmachan(&["run", "--channel", "ring.sideways"]).status.code(), Some(1));
    assert_eq!(rdmachan(&["run", "--channel", "ring.nozeroing", "--profile", "efa"]).status.code(), Some(2));
    assert_eq!(rdmachan(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rdmachan(&["--help"]).status.code(), Some(0));
}

#[test]
fn device_head_speeds_up_shared_ring() {
    let run = |loc| {
        rdmachan(&[
            "run",
            "--channel",
            "sring.zeroing",
            "--senders",
            "8",
            "--outstanding",
            "1",
            "--count",
            "200",
            "--pcie-rt",
            "3",
            "--head-loc",
            loc,
        ])
    };
    let (host, dev) = (run("host"), run("device"));
    assert!(host.status.success() && dev.status.success(), "{}", stderr(&host));
    // At least the PCIe round trip the reservation skips.
    assert!(column(&dev, "p50_ticks") + 3.0 <= column(&host, "p50_ticks"));
}

#[test]
fn prefetch_reduces_reader_requests() {
    let run = |p| rdmachan(&["run", "--channel", "rring.inlined", "--readers", "4", "--count", "300", "--prefetch", p]);
    let (small, large) = (run("4"), run("4096"));
    assert!(small.status.success() && large.status.success(), "{}", stderr(&small));
    assert!(column(&large, "reqs_recv") < column(&small, "reqs_recv"));
}

#[test]
fn dist_is_bimodal() {
    let o = rdmachan(&["dist", "--channel", "rring.inlined", "--count", "400"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().next().unwrap(), "bin_start_ticks,count");
    let filled: Vec<u64> = text
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .filter(|(_, c)| *c != "0")
        .map(|(b, _)| b.parse().unwrap())
        .collect();
    assert_eq!(filled, vec![40, 60]);
}

#[test]
fn trace_goes_to_stderr() {
    let o = Command::new(env!("CARGO_BIN_EXE_rdmachan"))
        .args(["run", "--channel", "sendrecv.normal", "--count", "3"])
        .env("RDMA_CHAN_TRACE", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(!o.stderr.is_empty());
}
