use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ledgerflow::block::BlockStore;
use ledgerflow::crypto::KeyPair;
use ledgerflow::workflow::{TxBody, WorkflowModel};
use ledgerflow_node::config::NodeConfig;
use ledgerflow_node::{dto, exit, Listeners, StartOptions};

#[derive(Parser)]
#[command(name = "node", version, about = "Ledger-backed workflow node")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a node until interrupted.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured node id.
        #[arg(long)]
        node_id: Option<u32>,
        /// Override the configured data directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Override the configured peer listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Local chain tools.
    Chain {
        #[command(subcommand)]
        command: ChainCmd,
    },
    /// Workflow models.
    Model {
        #[command(subcommand)]
        command: ModelCmd,
    },
    /// Workflow cases.
    Case {
        #[command(subcommand)]
        command: CaseCmd,
    },
    /// Generate a signing key; prints the public key.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ChainCmd {
    /// Print the stored chain and verify it backwards from the head.
    Inspect {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(clap::Args)]
struct ApiArgs {
    /// Base URL of a node's worklist API.
    #[arg(long, env = "LEDGERFLOW_API", default_value = "http://127.0.0.1:8000")]
    api: String,
    #[arg(long, env = "LEDGERFLOW_TOKEN")]
    token: Option<String>,
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Validate a model file and submit it for ordering.
    Submit {
        file: PathBuf,
        /// Only validate the file.
        #[arg(long)]
        check: bool,
        #[command(flatten)]
        api: ApiArgs,
    },
}

#[derive(Subcommand)]
enum CaseCmd {
    /// Launch a case of an installed model.
    Launch {
        model_id: String,
        /// Initial case data as name=value; repeatable.
        #[arg(long = "data", value_name = "K=V")]
        data: Vec<String>,
        #[command(flatten)]
        api: ApiArgs,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let code = match cli.command {
        Cmd::Run { config, node_id, data_dir, listen } => run(&config, node_id, data_dir, listen),
        Cmd::Chain { command: ChainCmd::Inspect { data } } => inspect(&data),
        Cmd::Model { command: ModelCmd::Submit { file, check, api } } => submit_model(&file, check, &api),
        Cmd::Case { command: CaseCmd::Launch { model_id, data, api } } => launch_case(&model_id, &data, &api),
        Cmd::Keygen { out } => keygen(&out),
    };
    ExitCode::from(code as u8)
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime")
}

fn run(config: &Path, node_id: Option<u32>, data_dir: Option<PathBuf>, listen: Option<String>) -> i32 {
    let mut cfg = match NodeConfig::load(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::CONFIG;
        }
    };
    if let Some(id) = node_id {
        cfg.node_id = id;
    }
    if let Some(d) = data_dir {
        cfg.data_dir = d;
    }
    if let Some(l) = listen {
        cfg.listen = l;
    }
    runtime().block_on(async move {
        let node = match ledgerflow_node::start(cfg, Listeners::default(), StartOptions::default()).await {
            Ok(n) => n,
            Err(e) => {
                eprintln!("error: {e}");
                return e.exit_code();
            }
        };
        println!("api listening on {}", node.api_addr);
        wait_for_signal().await;
        tracing::info!("shutting down");
        node.stop().await;
        exit::OK
    })
}

async fn wait_for_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

fn inspect(data: &Path) -> i32 {
    if !data.join("head").is_file() {
        eprintln!("error: {} holds no chain", data.display());
        return exit::DATA_DIR;
    }
    let store = match BlockStore::open(data) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::DATA_DIR;
        }
    };
    for b in store.chain() {
        let kinds: Vec<&str> = b
            .transactions
            .iter()
            .map(|t| match &t.body {
                TxBody::ModelUpdate(_) => "MODEL_UPDATE",
                TxBody::InstanceState(_) => "INSTANCE_STATE",
            })
            .collect();
        println!("{:>8}  {}  {}  {}", b.number, b.hash, dto::iso(b.timestamp_ms), kinds.join(","));
    }
    let v = store.verify();
    match v.failure {
        None if v.is_intact() => {
            println!("chain intact: head {} {}", store.head_number(), store.head_hash());
            exit::OK
        }
        None => {
            println!("chain incomplete below block {:?}", v.verified_down_to);
            exit::CHAIN_CORRUPT
        }
        Some(f) => {
            println!("chain damaged at block {}: {:?}", f.at, f.kind);
            exit::CHAIN_CORRUPT
        }
    }
}

fn keygen(out: &Path) -> i32 {
    let kp = KeyPair::generate(&mut rand::rngs::OsRng);
    if let Err(e) = std::fs::write(out, kp.seed_hex() + "\n") {
        eprintln!("error: {}: {e}", out.display());
        return exit::FAILURE;
    }
    println!("{}", kp.public().to_hex());
    exit::OK
}

fn client(api: &ApiArgs) -> (reqwest::Client, String) {
    (reqwest::Client::new(), api.api.trim_end_matches('/').to_string())
}

async fn send(req: reqwest::RequestBuilder, api: &ApiArgs) -> i32 {
    let req = match &api.token {
        Some(t) => req.bearer_auth(t),
        None => req,
    };
    match req.send().await {
        Ok(resp) => {
            let status = resp.status();
            let body = resp.text().await.unwrap_or_default();
            println!("{body}");
            if status.is_success() {
                exit::OK
            } else {
                eprintln!("error: HTTP {status}");
                exit::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit::FAILURE
        }
    }
}

fn submit_model(file: &Path, check: bool, api: &ApiArgs) -> i32 {
    let text = match std::fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            return exit::FAILURE;
        }
    };
    if let Err(e) = WorkflowModel::from_toml(&text) {
        eprintln!("error: {}: {e}", file.display());
        return exit::FAILURE;
    }
    if check {
        println!("{}: ok", file.display());
        return exit::OK;
    }
    let (c, base) = client(api);
    let req = c.post(format!("{base}/models")).header("content-type", "application/toml").body(text);
    runtime().block_on(send(req, api))
}

fn launch_case(model_id: &str, data: &[String], api: &ApiArgs) -> i32 {
    let mut initial = serde_json::Map::new();
    for kv in data {
        let Some((k, v)) = kv.split_once('=') else {
            eprintln!("error: --data expects name=value, got `{kv}`");
            return exit::USAGE;
        };
        initial.insert(k.trim().to_string(), serde_json::Value::String(v.to_string()));
    }
    let (c, base) = client(api);
    let body = serde_json::json!({ "modelId": model_id, "initialData": initial });
    let req = c.post(format!("{base}/cases")).json(&body);
    runtime().block_on(send(req, api))
}
