mod common;

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use common::{plan, three_step_toml, TOKEN};
use ledgerflow_node::config::NodeConfig;
use ledgerflow_node::exit;

fn node() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_node"));
    c.env("RUST_LOG", "warn");
    c
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A single-member config written to `dir/node.toml`. The pre-bound
/// listeners are released so the process can bind the same ports.
fn solo(dir: &Path) -> (NodeConfig, PathBuf) {
    let cfg = plan(dir, 1, None, 0, 1).remove(0).config;
    let path = dir.join("node.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    (cfg, path)
}

fn run(config: &Path) -> Output {
    node().args(["run", "--config"]).arg(config).output().unwrap()
}

struct Running {
    child: Child,
    api: String,
}

impl Running {
    fn start(config: &Path) -> Running {
        let mut child = node().args(["run", "--config"]).arg(config).stdout(Stdio::piped()).spawn().unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("api listening on ").unwrap_or_else(|| panic!("unexpected output {line:?}"));
        Running { child, api: format!("http://{addr}") }
    }

    fn client(&self) -> Command {
        let mut c = node();
        c.env("LEDGERFLOW_API", &self.api).env("LEDGERFLOW_TOKEN", TOKEN);
        c
    }

    fn terminate(mut self) -> i32 {
        let ok = Command::new("kill").args(["-TERM", &self.child.id().to_string()]).status().unwrap();
        assert!(ok.success());
        self.child.wait().unwrap().code().expect("exited normally")
    }
}

fn wait_ready(api: &str) {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(common::Api::new(api).wait_for("/chain/status", std::time::Duration::from_secs(10), |s| s["status"] == "READY"));
}

#[test]
fn run_submit_inspect_and_restart() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, config) = solo(tmp.path());
    let model = tmp.path().join("model.toml");
    std::fs::write(&model, three_step_toml("claims", 0, 0, 0)).unwrap();

    let out = node().args(["chain", "inspect", "--data"]).arg(&cfg.data_dir).output().unwrap();
    assert_eq!(code(&out), exit::DATA_DIR, "no chain yet");

    let proc = Running::start(&config);
    wait_ready(&proc.api);
    let out = proc.client().args(["model", "submit"]).arg(&model).output().unwrap();
    assert_eq!(code(&out), exit::OK, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("\"blockNumber\":1"), "{}", stdout(&out));
    let out = proc.client().args(["case", "launch", "claims", "--data", "amount=42"]).output().unwrap();
    assert_eq!(code(&out), exit::OK, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("caseId"));
    let out = proc.client().args(["case", "launch", "claims", "--data", "amount=lots"]).output().unwrap();
    assert_eq!(code(&out), exit::FAILURE);
    let out = proc.client().args(["case", "launch", "claims", "--data", "oops"]).output().unwrap();
    assert_eq!(code(&out), exit::USAGE);
    assert_eq!(proc.terminate(), exit::OK);

    let out = node().args(["chain", "inspect", "--data"]).arg(&cfg.data_dir).output().unwrap();
    assert_eq!(code(&out), exit::OK);
    let text = stdout(&out);
    assert!(text.contains("MODEL_UPDATE") && text.contains("INSTANCE_STATE"), "{text}");
    assert!(text.contains("chain intact: head 2"), "{text}");

    // A lone member with a chain has nobody to recover ordering state from.
    assert_eq!(code(&run(&config)), exit::NO_RECOVERY_SOURCE);

    // Flip a byte in the newest block.
    let blocks = cfg.data_dir.join("blocks");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&blocks).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let last = files.last().unwrap();
    let mut bytes = std::fs::read(last).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(last, bytes).unwrap();
    let out = node().args(["chain", "inspect", "--data"]).arg(&cfg.data_dir).output().unwrap();
    assert_eq!(code(&out), exit::CHAIN_CORRUPT, "{}", stdout(&out));
    assert_eq!(code(&run(&config)), exit::CHAIN_CORRUPT);
}

#[test]
fn startup_failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&tmp.path().join("missing.toml"))), exit::CONFIG);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "node_id = \"zero\"\n").unwrap();
    assert_eq!(code(&run(&bad)), exit::CONFIG);

    let (cfg, config) = solo(tmp.path());
    let out = node().args(["run", "--config"]).arg(&config).args(["--node-id", "9"]).output().unwrap();
    assert_eq!(code(&out), exit::CONFIG, "unknown node id");

    // Hold the peer port.
    let busy = std::net::TcpListener::bind(&cfg.listen).unwrap();
    assert_eq!(code(&run(&config)), exit::BIND);
    drop(busy);

    std::fs::write(&cfg.key_file, "zz").unwrap();
    assert_eq!(code(&run(&config)), exit::KEYS, "unreadable key");
    let other = node().args(["keygen", "--out"]).arg(&cfg.key_file).output().unwrap();
    assert_eq!(code(&other), exit::OK);
    assert_eq!(code(&run(&config)), exit::KEYS, "key does not match the configured public key");
}

#[test]
fn model_check_validates_offline() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good.toml");
    std::fs::write(&good, three_step_toml("m", 0, 1, 2)).unwrap();
    let out = node().args(["model", "submit", "--check"]).arg(&good).output().unwrap();
    assert_eq!(code(&out), exit::OK);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, three_step_toml("m", 0, 1, 2).replace("inputs = { p1 = 1 }", "inputs = { nowhere = 1 }")).unwrap();
    let out = node().args(["model", "submit", "--check"]).arg(&bad).output().unwrap();
    assert_eq!(code(&out), exit::FAILURE);
    let out = node().args(["model", "submit"]).output().unwrap();
    assert_eq!(code(&out), exit::USAGE);
}
