use std::fs;
use std::process::{Command, Output};

use saltv_core::ReportDocument;

fn saltv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saltv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("small.cfg");
    fs::write(
        &path,
        "# tiny scenario\nvehicles = 6\nobservers = 2\nduration_s = 2\nseed = 9\n",
    )
    .unwrap();
    path
}

#[test]
fn sim_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("r.json");
    let o = saltv(&[
        "sim",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--schemes",
        "saltv,ecdsa,tesla,vast",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("scheme"));
    assert!(stdout.contains("immediate_ratio"));
    let doc = ReportDocument::from_json(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc.schemes.len(), 4);
    assert_eq!(doc.config.seed, 9);
    for m in &doc.schemes {
        assert_eq!(m.unaccounted, 0);
        assert!(m.deliveries > 0);
    }
}

#[test]
fn sim_is_reproducible_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = saltv(&[
            "sim",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert!(o.status.success());
        ReportDocument::from_json(&fs::read_to_string(out).unwrap()).unwrap()
    };
    let a = run("a.json", "3");
    let b = run("b.json", "3");
    assert_eq!(a, b);
    assert_eq!(a.config.seed, 3);
}

#[test]
fn missing_config_exits_2_and_names_path() {
    let o = saltv(&["sim", "--config", "/definitely/not/here.cfg", "--out", "/tmp/x.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/definitely/not/here.cfg"));
}

#[test]
fn invalid_config_exits_2_and_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "vehicles = 0\nseed = 1\n").unwrap();
    let o = saltv(&[
        "sim",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vehicles"));
}

#[test]
fn unknown_scheme_and_bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = saltv(&[
        "sim",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        "/tmp/x.json",
        "--schemes",
        "rsa",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(saltv(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bloom_build_and_query() {
    let dir = tempfile::tempdir().unwrap();
    let filter = dir.path().join("f.bin");
    let rids = dir.path().join("rids.txt");
    let o = saltv(&[
        "bloom",
        "build",
        "--n",
        "1000",
        "--p",
        "0.001",
        "--out",
        filter.to_str().unwrap(),
        "--emit-rids",
        rids.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("m = 14378 bits"), "{stdout}");
    assert!(stdout.contains("k = 10"));
    let listed = fs::read_to_string(&rids).unwrap();
    assert_eq!(listed.lines().count(), 1000);
    for rid in listed.lines().take(20) {
        let q = saltv(&["bloom", "query", "--filter", filter.to_str().unwrap(), "--rid", rid]);
        assert!(q.status.success());
        assert_eq!(String::from_utf8(q.stdout).unwrap().trim(), "true");
    }
    let q = saltv(&["bloom", "query", "--filter", filter.to_str().unwrap(), "--rid", "zz"]);
    assert_eq!(q.status.code(), Some(2));
}

#[test]
fn bench_writes_cost_table_usable_by_sim() {
    let dir = tempfile::tempdir().unwrap();
    let costs = dir.path().join("costs.json");
    let o = saltv(&["bench", "--iters", "20", "--out", costs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("sig_verify"));
    let cfg = small_config(dir.path());
    let out = dir.path().join("r.json");
    let o = saltv(&[
        "sim",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--costs",
        costs.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = ReportDocument::from_json(&fs::read_to_string(out).unwrap()).unwrap();
    assert_ne!(doc.costs.source, "nominal");
    let verify = doc.costs.median_us("sig_verify").unwrap();
    let gmac = doc.costs.median_us("gmac").unwrap();
    assert!(verify >= 10.0 * gmac, "sig_verify {verify} us vs gmac {gmac} us");
}

#[test]
fn out_of_range_loss_rate_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lossy.cfg");
    fs::write(&cfg, "loss_rate = 1.5\nseed = 1\n").unwrap();
    let o = saltv(&[
        "sim",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("loss_rate"));
}

#[test]
fn bundled_urban_scenario_populates_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/urban_100.cfg");
    let out = dir.path().join("urban.json");
    let o = saltv(&["sim", "--config", cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = ReportDocument::from_json(&fs::read_to_string(out).unwrap()).unwrap();
    let m = &doc.schemes[0];
    assert_eq!(m.vehicles, 100);
    assert!(m.messages_sent > 0 && m.deliveries > 0);
    assert!(m.avg_message_frame_bytes > 0.0 && m.avg_computation_ms > 0.0);
    assert!(m.immediate_ratio > 0.0);
    assert_eq!(m.unaccounted, 0);
}
