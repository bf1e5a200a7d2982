//! End-to-end experiment: pretraining, baseline, single-client variants and
//! federated training, written out as a report bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::FedConfig;
use crate::data::{self, ClientShard};
use crate::error::{FedError, Result};
use crate::evalkit::{self, compare, Comparison, EvalReport, PcaProjection, RoundLogRecord, VariantKind};
use crate::identity::{Ledger, LedgerEntry};
use crate::lora::{pretrain_base, train_local, AdapterSet, BaseModel, OptimizerState};
use crate::proto::{self, ClientBehavior, ExperimentResult};

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub config: FedConfig,
    pub variants: Vec<VariantKind>,
    pub out_dir: Option<PathBuf>,
    /// Train the single-client variants on separate threads.
    pub parallel: bool,
}

impl ExperimentPlan {
    /// Baseline, every single-client variant and the federated variant.
    pub fn full(config: FedConfig) -> Self {
        let mut variants = vec![VariantKind::Baseline];
        variants.extend(config.client_ids().into_iter().map(VariantKind::SingleClient));
        variants.push(VariantKind::Federated);
        Self {
            config,
            variants,
            out_dir: None,
            parallel: false,
        }
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.variants.is_empty() {
            return Err(FedError::Config("the plan requests no variants".into()));
        }
        let ids = self.config.client_ids();
        for v in &self.variants {
            if let VariantKind::SingleClient(k) = v {
                if !ids.contains(k) {
                    return Err(FedError::Config(format!("single-client variant for unknown client {k}")));
                }
            }
        }
        Ok(())
    }
}

/// Everything shared by the variants of one experiment.
pub struct Setup {
    pub model: BaseModel,
    pub shards: Vec<ClientShard>,
    /// Common adapter starting point, already rounded to wire precision.
    pub initial: AdapterSet,
}

impl Setup {
    pub fn build(config: &FedConfig) -> Result<Self> {
        let task = config.task_spec();
        let shards = data::generate(&task).map_err(|e| e.context("generating client data"))?;
        let model = pretrain_base(&task, config.model, config.pretrain, config.base_seed())
            .map_err(|e| e.context("pretraining the base model"))?;
        let initial = AdapterSet::init(
            &config.model,
            &config.targets,
            config.rank,
            config.alpha,
            config.scaling_mode,
            config.adapter_init_seed(),
        )?;
        Ok(Self {
            model,
            shards,
            initial: proto::quantize(&initial)?,
        })
    }
}

/// Trains client `client_id` alone for as many epochs as it would see over
/// the whole federated run.
pub fn train_single_client(config: &FedConfig, setup: &Setup, client_id: u32) -> Result<AdapterSet> {
    let shard = setup
        .shards
        .iter()
        .find(|s| s.client_id == client_id)
        .ok_or_else(|| FedError::Input(format!("no shard for client {client_id}")))?;
    let mut adapters = setup.initial.clone();
    let mut opt = OptimizerState::new(
        config.lr,
        config.beta1,
        config.beta2,
        config.adam_eps,
        config.weight_decay,
        config.total_steps(shard.train.len()),
    );
    for t in 1..=config.rounds {
        train_local(
            &setup.model,
            &mut adapters,
            &shard.train,
            config.local_training(),
            &mut opt,
            config.client_seed(client_id, t),
        )
        .map_err(|e| e.context(format!("single-client variant {client_id}, round {t}")))?;
    }
    Ok(adapters)
}

pub struct FederatedOutcome {
    pub result: ExperimentResult,
    pub final_adapters: AdapterSet,
    pub round_log: Vec<RoundLogRecord>,
    /// PCA of the accepted client updates, per round with at least two of them.
    pub pca: BTreeMap<u32, PcaProjection>,
}

pub fn run_federated(
    config: &FedConfig,
    setup: &Setup,
    behaviors: &BTreeMap<u32, ClientBehavior>,
) -> Result<FederatedOutcome> {
    let identities = proto::simulation_identities(config);
    let registry = proto::registry_for(&identities)?;
    let mut ledger = Ledger::in_memory();
    let sim = proto::simulate(
        config,
        &setup.model,
        &setup.shards,
        &identities,
        &registry,
        &mut ledger,
        behaviors,
        &setup.initial,
    )?;
    let result = sim.result.map_err(|e| e.context("federated variant"))?;
    let final_adapters = result
        .final_global()
        .map(|g| g.adapters.clone())
        .ok_or_else(|| FedError::Aggregation("federated run produced no global adapters".into()))?;
    let round_log = evalkit::round_log(&result, &setup.model, &setup.shards)?;
    let mut pca = BTreeMap::new();
    for rec in &result.rounds {
        if rec.updates.len() >= 2 {
            let p = evalkit::pca_updates(&rec.updates).map_err(|e| e.context(format!("PCA of round {}", rec.round)))?;
            pca.insert(rec.round, p);
        }
    }
    Ok(FederatedOutcome {
        result,
        final_adapters,
        round_log,
        pca,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub struct ReportBundle {
    pub reports: Vec<EvalReport>,
    pub comparison: Comparison,
    pub federated: Option<FederatedOutcome>,
    pub manifest: Vec<ManifestEntry>,
}

impl ReportBundle {
    pub fn ledger(&self) -> &[LedgerEntry] {
        self.federated.as_ref().map_or(&[], |f| &f.result.ledger)
    }
}

pub fn variant_label(kind: VariantKind) -> String {
    match kind {
        VariantKind::Baseline => "baseline".into(),
        VariantKind::SingleClient(k) => format!("single_client_{k}"),
        VariantKind::Federated => "federated".into(),
    }
}

/// Runs every requested variant and, when the plan has an output directory,
/// writes the report bundle there.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ReportBundle> {
    plan.validate()?;
    let config = &plan.config;
    let setup = Setup::build(config)?;

    let singles: Vec<u32> = plan
        .variants
        .iter()
        .filter_map(|v| match v {
            VariantKind::SingleClient(k) => Some(*k),
            _ => None,
        })
        .collect();
    let mut single_adapters: BTreeMap<u32, AdapterSet> = BTreeMap::new();
    if plan.parallel {
        let trained: Vec<(u32, Result<AdapterSet>)> = std::thread::scope(|s| {
            let handles: Vec<_> = singles
                .iter()
                .map(|&k| {
                    let setup = &setup;
                    (k, s.spawn(move || train_single_client(config, setup, k)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(k, h)| (k, h.join().expect("single-client thread panicked")))
                .collect()
        });
        for (k, r) in trained {
            single_adapters.insert(k, r?);
        }
    } else {
        for &k in &singles {
            single_adapters.insert(k, train_single_client(config, &setup, k)?);
        }
    }

    let mut federated = None;
    let mut reports = Vec::new();
    for &kind in &plan.variants {
        let label = variant_label(kind);
        let adapters = match kind {
            VariantKind::Baseline => AdapterSet::empty(),
            VariantKind::SingleClient(k) => single_adapters[&k].clone(),
            VariantKind::Federated => {
                let outcome = run_federated(config, &setup, &BTreeMap::new())?;
                let a = outcome.final_adapters.clone();
                federated = Some(outcome);
                a
            }
        };
        let report = EvalReport::evaluate(label.clone(), kind, &setup.model, &adapters, &setup.shards)
            .map_err(|e| e.context(format!("evaluating {label}")))?;
        log::info!("{label}: macro {:.4} min {:.4} h-mean {:.4}", report.macro_acc, report.min_acc, report.h_mean);
        reports.push(report);
    }
    let comparison = compare(&reports)?;
    let mut bundle = ReportBundle {
        reports,
        comparison,
        federated,
        manifest: Vec::new(),
    };
    if let Some(dir) = &plan.out_dir {
        bundle.manifest = write_bundle(plan, &bundle, dir)?;
    }
    Ok(bundle)
}

fn write_bundle(plan: &ExperimentPlan, bundle: &ReportBundle, dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let mut put = |rel: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        written.push(PathBuf::from(rel));
        Ok(())
    };
    put("config.toml", plan.config.to_toml_string().as_bytes())?;
    put("reports.json", serde_json::to_string_pretty(&bundle.reports)?.as_bytes())?;
    put("comparison.csv", bundle.comparison.to_csv()?.as_bytes())?;
    put("comparison.txt", bundle.comparison.render_text().as_bytes())?;
    if let Some(fed) = &bundle.federated {
        let mut log = Vec::new();
        evalkit::write_round_log(&fed.round_log, &mut log)?;
        put("round_log.jsonl", &log)?;
        let ledger: String = fed
            .result
            .ledger
            .iter()
            .map(|e| serde_json::to_string(e).map(|s| s + "\n"))
            .collect::<std::result::Result<_, _>>()?;
        put("ledger.jsonl", ledger.as_bytes())?;
        put("message_stats.json", serde_json::to_string_pretty(&fed.result.stats)?.as_bytes())?;
        for (round, p) in &fed.pca {
            let sub = format!("pca/round_{round}");
            p.write_csv(&dir.join(&sub))?;
            written.push(PathBuf::from(format!("{sub}/pca_points.csv")));
            written.push(PathBuf::from(format!("{sub}/pca_variance.csv")));
        }
        let rounds_dir = dir.join("rounds");
        proto::write_round_artifacts(&fed.result, &rounds_dir)?;
        for entry in walk(&rounds_dir)? {
            written.push(entry.strip_prefix(dir).expect("inside bundle").to_path_buf());
        }
    }
    written.sort();
    let mut manifest = Vec::new();
    for rel in written {
        let bytes = fs::read(dir.join(&rel))?;
        manifest.push(ManifestEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| FedError::Io(e.into()))?;
        if entry.file_type().is_file() {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

/// Checks every manifest entry against the file on disk.
pub fn verify_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    for entry in &manifest {
        let bytes = fs::read(dir.join(&entry.path))
            .map_err(|e| FedError::Io(e).context(format!("manifest entry {}", entry.path)))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != entry.sha256 || bytes.len() as u64 != entry.bytes {
            return Err(FedError::Input(format!("{} does not match its manifest digest", entry.path)));
        }
    }
    Ok(manifest)
}
