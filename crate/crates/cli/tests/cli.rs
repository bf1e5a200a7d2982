use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::Duration;

const BIN: &str = env!("CARGO_BIN_EXE_fedlora");

fn fedlora(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn default_config() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")).unwrap()
}

#[test]
fn run_writes_bundle_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, default_config()).unwrap();
    let out = dir.path().join("out");
    let o = fedlora(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--variants",
        "baseline,federated",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("baseline") && text.contains("federated"), "{text}");
    for f in ["manifest.json", "comparison.csv", "ledger.jsonl", "round_log.jsonl"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    fedlora_core::experiment::verify_manifest(&out).unwrap();
}

#[test]
fn simulate_reports_each_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, default_config()).unwrap();
    let out = dir.path().join("sim");
    let o = fedlora(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("round ")).count(), 3);
    assert!(out.join("global_round_3.frame").is_file());

    let p = fedlora(&["pca", "--updates", out.join("round_1").to_str().unwrap()]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    assert!(out.join("round_1").join("pca_points.csv").is_file());
}

#[test]
fn invalid_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "rounds = 0\n").unwrap();
    let o = fedlora(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("rounds"));
}

#[test]
fn keygen_aggregate_and_clients_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let keys = dir.path().join("keys");
    for id in ["0", "1", "2"] {
        let o = fedlora(&["keygen", "--client-id", id, "--out", keys.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = dir.path().join("cfg.toml");
    let text = default_config().replace("listen_address = \"127.0.0.1:7878\"", &format!(
        "listen_address = \"127.0.0.1:{port}\"\nregistry_path = {:?}\nkey_dir = {:?}",
        keys.join("registry.json"),
        keys
    ));
    std::fs::write(&cfg, text).unwrap();
    let cfg = cfg.to_str().unwrap().to_owned();

    let aggregator = Command::new(BIN)
        .args(["aggregate", "--config", &cfg])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    thread::sleep(Duration::from_millis(500));
    let clients: Vec<_> = (0..3)
        .map(|id| {
            Command::new(BIN)
                .args(["client", "--config", &cfg, "--client-id", &id.to_string()])
                .env("RUST_LOG", "warn")
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    for c in clients {
        let o = c.wait_with_output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = aggregator.wait_with_output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("9 ROUND_START sent, 9 UPDATE received, 3 aggregations, 9 ledger entries"));
}
