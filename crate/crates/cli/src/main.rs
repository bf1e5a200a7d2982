use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fedlora_core::aggregation::ClientUpdate;
use fedlora_core::config::{FedConfig, TransportKind};
use fedlora_core::evalkit::{compare, pca_updates, EvalReport, VariantKind};
use fedlora_core::experiment::{run_experiment, run_federated, variant_label, ExperimentPlan, Setup};
use fedlora_core::identity::{ClientIdentity, KeyRegistry, Ledger};
use fedlora_core::lora::AdapterSet;
use fedlora_core::proto::{self, ClientBehavior, ClientContext, MessageKind};

#[derive(Parser)]
#[command(name = "fedlora", version, about = "Federated LoRA fine-tuning on a synthetic non-IID task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Baseline,
    Single,
    Federated,
}

#[derive(Subcommand)]
enum Command {
    /// Run baseline, single-client and federated variants and write a report bundle.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Variants to run (default: all).
        #[arg(long, value_enum, value_delimiter = ',')]
        variants: Vec<VariantArg>,
        /// Train single-client variants concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Run the aggregator and every client in one process.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Directory for round frames, ledger and round log.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve as the aggregator on the configured listen address.
    Aggregate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Join an aggregator as one client.
    Client {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        client_id: u32,
    },
    /// Generate a client key pair and add its public key to a registry.
    Keygen {
        #[arg(long)]
        client_id: u32,
        #[arg(long)]
        out: PathBuf,
        /// Registry file to update (default: <out>/registry.json).
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Evaluate adapter frame files against the baseline.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        adapters: Vec<PathBuf>,
        /// Where to write comparison.csv (default: current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PCA of the client updates stored in one round directory.
    Pca {
        #[arg(long)]
        updates: PathBuf,
        /// Output directory (default: the round directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<FedConfig> {
    FedConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            out,
            variants,
            parallel,
        } => cmd_run(&load_config(&config)?, out, &variants, parallel),
        Command::Simulate { config, out } => cmd_simulate(load_config(&config)?, out),
        Command::Aggregate { config, out } => cmd_aggregate(&load_config(&config)?, out),
        Command::Client { config, client_id } => cmd_client(&load_config(&config)?, client_id),
        Command::Keygen {
            client_id,
            out,
            registry,
        } => cmd_keygen(client_id, &out, registry),
        Command::Eval { config, adapters, out } => cmd_eval(&load_config(&config)?, &adapters, out),
        Command::Pca { updates, out } => cmd_pca(&updates, out),
    }
}

fn cmd_run(config: &FedConfig, out: PathBuf, variants: &[VariantArg], parallel: bool) -> Result<()> {
    let mut plan = ExperimentPlan::full(config.clone()).with_out_dir(&out);
    plan.parallel = parallel;
    if !variants.is_empty() {
        plan.variants.retain(|v| {
            variants.iter().any(|a| match (a, v) {
                (VariantArg::Baseline, VariantKind::Baseline) => true,
                (VariantArg::Single, VariantKind::SingleClient(_)) => true,
                (VariantArg::Federated, VariantKind::Federated) => true,
                _ => false,
            })
        });
    }
    let bundle = run_experiment(&plan)?;
    print!("{}", bundle.comparison.render_text());
    println!("wrote {} artifacts to {}", bundle.manifest.len() + 1, out.display());
    Ok(())
}

fn cmd_simulate(mut config: FedConfig, out: Option<PathBuf>) -> Result<()> {
    config.transport = TransportKind::InProcess;
    let setup = Setup::build(&config)?;
    let outcome = run_federated(&config, &setup, &BTreeMap::new())?;
    for rec in &outcome.round_log {
        let g = rec.global.as_ref().expect("completed rounds carry a global report");
        println!(
            "round {}: clients {:?}, stragglers {:?}, global macro {:.2}% min {:.2}% h-mean {:.2}%",
            rec.round,
            rec.accepted,
            rec.stragglers,
            100.0 * g.macro_acc,
            100.0 * g.min_acc,
            100.0 * g.h_mean
        );
    }
    if let Some(dir) = out.or(config.out_dir.clone()) {
        proto::write_round_artifacts(&outcome.result, &dir)?;
        let mut log = Vec::new();
        fedlora_core::evalkit::write_round_log(&outcome.round_log, &mut log)?;
        std::fs::write(dir.join("round_log.jsonl"), log)?;
        let mut ledger = Ledger::in_memory();
        for e in &outcome.result.ledger {
            ledger.credit(e.round, e.client_id, e.reward)?;
        }
        std::fs::write(dir.join("ledger.jsonl"), ledger.to_jsonl())?;
        println!("wrote round artifacts to {}", dir.display());
    }
    Ok(())
}

fn cmd_aggregate(config: &FedConfig, out: Option<PathBuf>) -> Result<()> {
    let registry_path = config
        .registry_path
        .as_ref()
        .context("registry_path must be set to run the aggregator")?;
    let registry = KeyRegistry::load(registry_path).with_context(|| format!("loading {}", registry_path.display()))?;
    let mut ledger = match &config.ledger_path {
        Some(p) => Ledger::open(p).with_context(|| format!("opening ledger {}", p.display()))?,
        None => Ledger::in_memory(),
    };
    let setup = Setup::build(config)?;
    let listener = TcpListener::bind(&config.listen_address)
        .with_context(|| format!("binding {}", config.listen_address))?;
    log::info!("listening on {}", listener.local_addr()?);
    let endpoints = proto::accept_clients(&listener, config.clients(), config.timeout())?;
    log::info!("{} of {} clients connected", endpoints.len(), config.clients());
    let result = proto::run_aggregator(config, &registry, &mut ledger, endpoints, &setup.initial)?;
    for rec in &result.rounds {
        println!(
            "round {}: aggregated {:?}, stragglers {:?}, rejected {:?}",
            rec.round,
            rec.accepted,
            rec.stragglers,
            rec.rejected.iter().map(|r| r.client_id).collect::<Vec<_>>()
        );
    }
    println!(
        "{} ROUND_START sent, {} UPDATE received, {} aggregations, {} ledger entries",
        result.stats.sent_count(MessageKind::RoundStart),
        result.stats.received_count(MessageKind::Update),
        result.stats.aggregations,
        ledger.len()
    );
    if let Some(dir) = out.or(config.out_dir.clone()) {
        proto::write_round_artifacts(&result, &dir)?;
        println!("wrote round artifacts to {}", dir.display());
    }
    Ok(())
}

fn cmd_client(config: &FedConfig, client_id: u32) -> Result<()> {
    let key_dir = config.key_dir.as_ref().context("key_dir must be set to run a client")?;
    let identity = ClientIdentity::load(key_dir, client_id)?;
    let setup = Setup::build(config)?;
    let shard = setup
        .shards
        .iter()
        .find(|s| s.client_id == client_id)
        .with_context(|| format!("client {client_id} is not part of the configured task"))?;
    let endpoint = proto::connect(&config.listen_address, config.timeout())?;
    let ctx = ClientContext {
        config,
        model: &setup.model,
        shard,
        identity: &identity,
        behavior: ClientBehavior::default(),
    };
    let adapters = proto::run_client(&ctx, endpoint)?;
    let report = EvalReport::evaluate(
        format!("client_{client_id}_final"),
        VariantKind::SingleClient(client_id),
        &setup.model,
        &adapters,
        std::slice::from_ref(shard),
    )?;
    println!(
        "client {client_id} finished; local test accuracy {:.2}%",
        100.0 * report.macro_acc
    );
    Ok(())
}

fn cmd_keygen(client_id: u32, out: &Path, registry: Option<PathBuf>) -> Result<()> {
    let identity = ClientIdentity::generate(client_id);
    identity.write_files(out)?;
    let registry_path = registry.unwrap_or_else(|| out.join("registry.json"));
    let mut reg = if registry_path.exists() {
        KeyRegistry::load(&registry_path)?
    } else {
        KeyRegistry::new()
    };
    reg.register(client_id, identity.public_key())?;
    reg.save(&registry_path)?;
    println!(
        "wrote key pair for client {client_id} to {} and registered it in {}",
        out.display(),
        registry_path.display()
    );
    Ok(())
}

fn cmd_eval(config: &FedConfig, files: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let setup = Setup::build(config)?;
    let mut reports = vec![EvalReport::evaluate(
        variant_label(VariantKind::Baseline),
        VariantKind::Baseline,
        &setup.model,
        &AdapterSet::empty(),
        &setup.shards,
    )?];
    for file in files {
        let msg = proto::read_frame_file(file)?;
        let kind = match msg.kind {
            MessageKind::Update => VariantKind::SingleClient(msg.sender_id),
            MessageKind::RoundStart => VariantKind::Federated,
            other => bail!("{} holds a {other} frame, not adapters", file.display()),
        };
        let label = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| file.display().to_string());
        reports.push(EvalReport::evaluate(label, kind, &setup.model, &msg.adapters()?, &setup.shards)?);
    }
    let comparison = compare(&reports)?;
    print!("{}", comparison.render_text());
    let dir = out.unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("comparison.csv"), comparison.to_csv()?)?;
    Ok(())
}

fn cmd_pca(round_dir: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut updates: Vec<ClientUpdate> = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(round_dir)
        .with_context(|| format!("reading {}", round_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.extension().is_some_and(|e| e == "frame") {
            let msg = proto::read_frame_file(&path)?;
            if msg.kind == MessageKind::Update {
                updates.push(msg.to_client_update()?);
            }
        }
    }
    let projection = pca_updates(&updates)?;
    let dir = out.unwrap_or_else(|| round_dir.to_path_buf());
    projection.write_csv(&dir)?;
    for (id, (a, b)) in &projection.points {
        println!("client {id}: pc1 {a:.6} pc2 {b:.6}");
    }
    println!(
        "explained variance: {:.6e}, {:.6e} of {:.6e}",
        projection.explained_variance.0, projection.explained_variance.1, projection.total_variance
    );
    Ok(())
}
