use std::process::Command;

use clap::Parser;
use ringbench::bench::{self, Cli, Row, Source, CSV_HEADER};

const BIN: &str = env!("CARGO_BIN_EXE_ringbench");

fn run(args: &[&str]) -> Vec<Row> {
    let cli = Cli::try_parse_from(std::iter::once("ringbench").chain(args.iter().copied())).unwrap();
    bench::run(cli).unwrap()
}

#[test]
fn model_csv_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.csv");
    let rows = run(&["model", "--csv", path.to_str().unwrap()]);
    assert_eq!(rows.len(), 16);
    let written = std::fs::read_to_string(&path).unwrap();
    assert_eq!(written, include_str!("golden/model_default.csv"));
    assert_eq!(written.lines().next(), Some(CSV_HEADER));
}

#[test]
fn model_rows_follow_the_cost_arithmetic() {
    let rows = run(&["model"]);
    let big = 25_165_824f64;
    let small_pages = rows
        .iter()
        .find(|r| r.alloc == "4KiB-fragmented" && r.bytes == 25_165_824)
        .unwrap();
    // Cold small pages: 6144 pins at 2 us dominate the wire time.
    let expected = big / (1e-6 + 6144.0 * 2e-6) / 1e6;
    assert!((small_pages.bandwidth_mbps - expected).abs() < 1e-6);
    assert!(rows.iter().all(|r| r.source == Source::Model));
}

#[test]
fn zero_pin_cost_collapses_layouts() {
    let rows = run(&["model", "--pin-cost", "0"]);
    let (small, huge) = rows.split_at(8);
    for (a, b) in small.iter().zip(huge) {
        assert_eq!(a.bytes, b.bytes);
        assert_eq!(a.bandwidth_mbps, b.bandwidth_mbps);
    }
}

#[test]
fn modeled_halo_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let path = dir.path().join(format!("halo{i}.csv"));
        run(&[
            "halo",
            "--transport",
            "modeled",
            "--local-extent",
            "4,8,16",
            "--iters",
            "2",
            "--csv",
            path.to_str().unwrap(),
        ]);
        outputs.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 3);
    assert!(text.lines().skip(1).all(|l| l.starts_with("model,halo,")));
}

#[test]
fn halo_labels_and_channels() {
    let rows = run(&[
        "halo",
        "--local-extent",
        "2",
        "--dims",
        "2,1,1,2",
        "--mode",
        "threaded",
        "--comms-threads",
        "8",
        "--alloc",
        "standard,hw-cache,slot-cache",
        "--iters",
        "2",
    ]);
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r.mode, "Threaded");
        assert_eq!(r.channels, 8);
        assert_eq!(r.bytes, 96 * 8);
        assert_eq!(r.source, Source::Measured);
        assert!(r.bandwidth_mbps > 0.0);
    }
    let md = bench::render_markdown(&rows);
    assert!(md.starts_with("| Comms | Threaded | Threaded | Threaded |"));
    assert!(md.contains("| Pages | memalign | hw-cache | slot-cache |"));
}

#[test]
fn allreduce_rows_carry_the_breakdown() {
    let rows = run(&[
        "allreduce",
        "--lengths",
        "1,100,4096",
        "--ranks",
        "3",
        "--comms-threads",
        "1,4",
        "--alloc",
        "hw-cache,standard,slot-cache",
        "--iters",
        "2",
    ]);
    assert_eq!(rows.len(), 3 * 2 * 3);
    for r in &rows {
        assert!(r.comms_us + r.compute_us <= r.total_us * (1.0 + 1e-9));
        assert!(r.percent_comms() > 0.0 && r.percent_comms() <= 100.0);
    }
    assert_eq!(rows[0].bytes, 4);
    let md = bench::render_markdown(&rows);
    assert!(md.contains("Comms %"));
}

#[test]
fn modeled_allreduce_runs() {
    let rows = run(&["allreduce", "--transport", "modeled", "--lengths", "64,65536", "--iters", "1"]);
    assert!(rows.iter().all(|r| r.source == Source::Model && r.comms_us > 0.0));
}

#[test]
fn binary_exit_codes() {
    let out = Command::new(BIN).args(["hugepool", "--pages", "0"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "hugeadm --pool-pages-min=2M:0");
    for bad in ["-1", "8001"] {
        let out = Command::new(BIN).args(["hugepool", "--pages", bad]).output().unwrap();
        assert!(!out.status.success(), "pages {bad}");
    }
    let out = Command::new(BIN).args(["halo", "--comms-threads", "9"]).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(BIN)
        .args(["halo", "--dims", "1,1,1,1", "--local-extent", "1", "--iters", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("| 96 |"));
    let out = Command::new(BIN).args(["halo", "--transport", "tcp"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn tcp_halo_across_processes() {
    let listeners: Vec<_> = (0..2)
        .map(|_| std::net::TcpListener::bind("127.0.0.1:0").unwrap())
        .collect();
    let addrs: Vec<_> = listeners.iter().map(|l| l.local_addr().unwrap()).collect();
    drop(listeners);
    let dir = tempfile::tempdir().unwrap();
    let hostfile = dir.path().join("hosts");
    std::fs::write(&hostfile, format!("0 {}\n1 {}\n", addrs[0], addrs[1])).unwrap();
    let csv = dir.path().join("out.csv");
    let children: Vec<_> = (0..2)
        .map(|rank| {
            Command::new(BIN)
                .args(["halo", "--transport", "tcp", "--dims", "2,1,1,1", "--local-extent", "2,4"])
                .args(["--mode", "seq,threaded", "--iters", "2", "--rank", &rank.to_string()])
                .arg("--hostfile")
                .arg(&hostfile)
                .arg("--csv")
                .arg(&csv)
                .stdout(std::process::Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in children {
        assert!(c.wait().unwrap().success());
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
    assert!(text.lines().skip(1).all(|l| l.starts_with("measured,halo,")));
}
