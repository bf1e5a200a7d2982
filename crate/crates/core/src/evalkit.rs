//! Accuracy, fairness metrics, comparison tables, PCA of client updates and
//! per-round logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{reconstruct_delta, ClientUpdate};
use crate::data::{ClientShard, Example};
use crate::error::{FedError, Result};
use crate::linalg::{truncated_svd, Matrix};
use crate::lora::{predict, AdapterSet, BaseModel, InjectionTarget};
use crate::proto::{ExperimentResult, Rejection, RoundPhase};

/// Fraction of examples whose argmax prediction matches the label.
pub fn accuracy(model: &BaseModel, adapters: &AdapterSet, test: &[Example]) -> Result<f64> {
    if test.is_empty() {
        return Err(FedError::Input("accuracy over an empty split".into()));
    }
    let mut correct = 0usize;
    for ex in test {
        if predict(model, adapters, &ex.tokens)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessMetrics {
    pub macro_acc: f64,
    pub min_acc: f64,
    pub h_mean: f64,
    /// Some client scored exactly zero, so `h_mean` was set to 0.
    pub zero_accuracy: bool,
}

pub fn aggregate_metrics(per_client_acc: &BTreeMap<u32, f64>) -> Result<FairnessMetrics> {
    if per_client_acc.is_empty() {
        return Err(FedError::Input("no accuracies to aggregate".into()));
    }
    if let Some((id, acc)) = per_client_acc.iter().find(|(_, a)| !(0.0..=1.0).contains(*a)) {
        return Err(FedError::Input(format!("accuracy {acc} of client {id} outside [0, 1]")));
    }
    let k = per_client_acc.len() as f64;
    let macro_acc = per_client_acc.values().sum::<f64>() / k;
    let min_acc = per_client_acc.values().copied().fold(f64::INFINITY, f64::min);
    let zero_accuracy = min_acc == 0.0;
    let h_mean = if zero_accuracy {
        0.0
    } else {
        k / per_client_acc.values().map(|a| 1.0 / a).sum::<f64>()
    };
    Ok(FairnessMetrics {
        macro_acc,
        min_acc,
        h_mean,
        zero_accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Baseline,
    SingleClient(u32),
    Federated,
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VariantKind::Baseline => f.write_str("baseline"),
            VariantKind::SingleClient(k) => write!(f, "single_client:{k}"),
            VariantKind::Federated => f.write_str("federated"),
        }
    }
}

impl std::str::FromStr for VariantKind {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(VariantKind::Baseline),
            "federated" => Ok(VariantKind::Federated),
            _ => s
                .strip_prefix("single_client:")
                .and_then(|k| k.parse().ok())
                .map(VariantKind::SingleClient)
                .ok_or_else(|| FedError::Input(format!("unknown variant kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub kind: VariantKind,
    pub per_client_acc: BTreeMap<u32, f64>,
    pub macro_acc: f64,
    pub min_acc: f64,
    pub h_mean: f64,
    pub zero_accuracy: bool,
}

impl EvalReport {
    pub fn new(label: impl Into<String>, kind: VariantKind, per_client_acc: BTreeMap<u32, f64>) -> Result<Self> {
        let m = aggregate_metrics(&per_client_acc)?;
        Ok(Self {
            label: label.into(),
            kind,
            per_client_acc,
            macro_acc: m.macro_acc,
            min_acc: m.min_acc,
            h_mean: m.h_mean,
            zero_accuracy: m.zero_accuracy,
        })
    }

    /// Evaluates `adapters` on every client's test split.
    pub fn evaluate(
        label: impl Into<String>,
        kind: VariantKind,
        model: &BaseModel,
        adapters: &AdapterSet,
        shards: &[ClientShard],
    ) -> Result<Self> {
        let mut per_client = BTreeMap::new();
        for shard in shards {
            per_client.insert(shard.client_id, accuracy(model, adapters, &shard.test)?);
        }
        Self::new(label, kind, per_client)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub macro_acc: f64,
    pub min_acc: f64,
    pub h_mean: f64,
}

impl Deltas {
    fn between(a: &EvalReport, b: &EvalReport) -> Self {
        Self {
            macro_acc: a.macro_acc - b.macro_acc,
            min_acc: a.min_acc - b.min_acc,
            h_mean: a.h_mean - b.h_mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub report: EvalReport,
    pub vs_baseline: Deltas,
    pub vs_best_single: Option<Deltas>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub clients: Vec<u32>,
    pub baseline: String,
    pub best_single: Option<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Builds the comparison table. The designated baseline is the first
/// baseline-kind report (or the first report); the best single-client
/// variant is the single-client report with the highest macro accuracy.
pub fn compare(reports: &[EvalReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| FedError::Input("nothing to compare".into()))?;
    let clients: Vec<u32> = first.per_client_acc.keys().copied().collect();
    for r in reports {
        if !r.per_client_acc.keys().copied().eq(clients.iter().copied()) {
            return Err(FedError::Input(format!(
                "report {:?} covers a different client set than {:?}",
                r.label, first.label
            )));
        }
    }
    let baseline = reports
        .iter()
        .find(|r| r.kind == VariantKind::Baseline)
        .unwrap_or(first);
    let mut best: Option<&EvalReport> = None;
    for r in reports.iter().filter(|r| matches!(r.kind, VariantKind::SingleClient(_))) {
        if best.is_none_or(|b| r.macro_acc > b.macro_acc) {
            best = Some(r);
        }
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            report: r.clone(),
            vs_baseline: Deltas::between(r, baseline),
            vs_best_single: best.map(|b| Deltas::between(r, b)),
        })
        .collect();
    Ok(Comparison {
        clients,
        baseline: baseline.label.clone(),
        best_single: best.map(|b| b.label.clone()),
        rows,
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn signed_pct(x: f64) -> String {
    format!("{:+.2}", 100.0 * x)
}

impl Comparison {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["variant".to_string(), "kind".to_string()];
        h.extend(self.clients.iter().map(|c| format!("acc_client_{c}")));
        h.extend(
            [
                "macro_acc",
                "min_acc",
                "h_mean",
                "zero_accuracy",
                "d_macro_vs_baseline",
                "d_min_vs_baseline",
                "d_hmean_vs_baseline",
                "d_macro_vs_best_single",
                "d_min_vs_best_single",
                "d_hmean_vs_best_single",
            ]
            .map(String::from),
        );
        h
    }

    /// CSV with full-precision values, accuracies in [0, 1].
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for row in &self.rows {
            let r = &row.report;
            let mut rec = vec![r.label.clone(), r.kind.to_string()];
            rec.extend(r.per_client_acc.values().map(f64::to_string));
            rec.extend([r.macro_acc, r.min_acc, r.h_mean].map(|x| x.to_string()));
            rec.push(r.zero_accuracy.to_string());
            let d = row.vs_baseline;
            rec.extend([d.macro_acc, d.min_acc, d.h_mean].map(|x| x.to_string()));
            match row.vs_best_single {
                Some(d) => rec.extend([d.macro_acc, d.min_acc, d.h_mean].map(|x| x.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), 3)),
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| FedError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        let clients: Vec<u32> = headers
            .iter()
            .filter_map(|h| h.strip_prefix("acc_client_"))
            .map(|c| c.parse().map_err(|_| FedError::Input(format!("bad client column {c:?}"))))
            .collect::<Result<_>>()?;
        let k = clients.len();
        if headers.len() != k + 12 {
            return Err(FedError::Input(format!("expected {} columns, found {}", k + 12, headers.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| FedError::Input(format!("not a number: {s:?}")))
        };
        let mut reports = Vec::new();
        let mut parsed = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let f: Vec<&str> = rec.iter().collect();
            let mut per_client = BTreeMap::new();
            for (i, c) in clients.iter().enumerate() {
                per_client.insert(*c, num(f[2 + i])?);
            }
            let report = EvalReport {
                label: f[0].to_string(),
                kind: f[1].parse()?,
                per_client_acc: per_client,
                macro_acc: num(f[2 + k])?,
                min_acc: num(f[3 + k])?,
                h_mean: num(f[4 + k])?,
                zero_accuracy: f[5 + k]
                    .parse()
                    .map_err(|_| FedError::Input(format!("not a bool: {:?}", f[5 + k])))?,
            };
            let vs_baseline = Deltas {
                macro_acc: num(f[6 + k])?,
                min_acc: num(f[7 + k])?,
                h_mean: num(f[8 + k])?,
            };
            let vs_best_single = if f[9 + k].is_empty() {
                None
            } else {
                Some(Deltas {
                    macro_acc: num(f[9 + k])?,
                    min_acc: num(f[10 + k])?,
                    h_mean: num(f[11 + k])?,
                })
            };
            reports.push(report.clone());
            parsed.push(ComparisonRow {
                report,
                vs_baseline,
                vs_best_single,
            });
        }
        let mut out = compare(&reports)?;
        out.rows = parsed;
        Ok(out)
    }

    /// Aligned text table, percentages with two decimals.
    pub fn render_text(&self) -> String {
        let mut header: Vec<String> = vec!["variant".into()];
        header.extend(self.clients.iter().map(|c| format!("client {c}")));
        header.extend(["Macro-Acc", "Min-Acc", "H-mean", "dMin(base)", "dH(base)", "dMin(best)", "dH(best)"].map(String::from));
        let mut table = vec![header];
        for row in &self.rows {
            let r = &row.report;
            let mut line = vec![if r.zero_accuracy { format!("{}*", r.label) } else { r.label.clone() }];
            line.extend(r.per_client_acc.values().map(|a| pct(*a)));
            line.extend([pct(r.macro_acc), pct(r.min_acc), pct(r.h_mean)]);
            line.extend([signed_pct(row.vs_baseline.min_acc), signed_pct(row.vs_baseline.h_mean)]);
            match row.vs_best_single {
                Some(d) => line.extend([signed_pct(d.min_acc), signed_pct(d.h_mean)]),
                None => line.extend(["-".to_string(), "-".to_string()]),
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in table.iter().enumerate() {
            for (c, cell) in line.iter().enumerate() {
                if c == 0 {
                    let _ = write!(out, "{cell:<w$}", w = widths[c]);
                } else {
                    let _ = write!(out, "  {cell:>w$}", w = widths[c]);
                }
            }
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        let _ = writeln!(out, "baseline: {}", self.baseline);
        if let Some(best) = &self.best_single {
            let _ = writeln!(out, "best single-client: {best}");
        }
        if self.rows.iter().any(|r| r.report.zero_accuracy) {
            out.push_str("* some client has zero accuracy; H-mean reported as 0\n");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub points: BTreeMap<u32, (f64, f64)>,
    pub explained_variance: (f64, f64),
    pub total_variance: f64,
}

/// Dense update of each client, all targets flattened in canonical order.
fn flatten_updates(updates: &[&ClientUpdate]) -> Result<Vec<Vec<f64>>> {
    let targets: Vec<InjectionTarget> = updates[0].adapters.targets();
    let mut rows = Vec::with_capacity(updates.len());
    for u in updates {
        if u.adapters.targets() != targets {
            return Err(FedError::Shape(format!("client {} adapts a different target set", u.client_id)));
        }
        let mut v = Vec::new();
        for &t in &targets {
            let d = reconstruct_delta(u, t)?;
            if d.shape() != reconstruct_delta(updates[0], t)?.shape() {
                return Err(FedError::Shape(format!("client {} has a mismatched {t} update", u.client_id)));
            }
            v.extend_from_slice(d.data());
        }
        rows.push(v);
    }
    Ok(rows)
}

/// Projects each client's dense update onto the top two principal directions.
pub fn pca_updates(updates: &[ClientUpdate]) -> Result<PcaProjection> {
    if updates.len() < 2 {
        return Err(FedError::Input(format!("PCA needs at least 2 updates, got {}", updates.len())));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(FedError::Input("duplicate client in PCA input".into()));
    }
    let mut rows = flatten_updates(&sorted)?;
    let k = rows.len();
    let p = rows[0].len();
    for j in 0..p {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / k as f64;
        for r in &mut rows {
            r[j] -= mean;
        }
    }
    let centered = Matrix::from_rows(&rows)?;
    let denom = (k - 1) as f64;
    let total_variance = centered.data().iter().map(|x| x * x).sum::<f64>() / denom;
    let comps = 2.min(k).min(p);
    let svd = truncated_svd(&centered, comps)?;
    let mut coords = vec![[0.0f64; 2]; k];
    let mut explained = [0.0f64; 2];
    for c in 0..comps {
        let loading = svd.vt.row(c);
        let mut lead = 0;
        for (j, x) in loading.iter().enumerate() {
            if x.abs() > loading[lead].abs() {
                lead = j;
            }
        }
        let sign = if loading[lead] < 0.0 { -1.0 } else { 1.0 };
        let sigma = svd.singular_values[c];
        explained[c] = sigma * sigma / denom;
        for (i, coord) in coords.iter_mut().enumerate() {
            coord[c] = sign * svd.u.get(i, c) * sigma;
        }
    }
    Ok(PcaProjection {
        points: sorted
            .iter()
            .zip(&coords)
            .map(|(u, c)| (u.client_id, (c[0], c[1])))
            .collect(),
        explained_variance: (explained[0], explained[1]),
        total_variance,
    })
}

impl PcaProjection {
    /// Writes `pca_points.csv` and `pca_variance.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("pca_points.csv"))?;
        w.write_record(["client_id", "pc1", "pc2"])?;
        for (id, (a, b)) in &self.points {
            w.write_record([id.to_string(), a.to_string(), b.to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("pca_variance.csv"))?;
        w.write_record(["component", "explained_variance", "ratio"])?;
        for (name, v) in [("pc1", self.explained_variance.0), ("pc2", self.explained_variance.1)] {
            let ratio = if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 };
            w.write_record([name.to_string(), v.to_string(), ratio.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLogRecord {
    pub round: u32,
    pub phases: Vec<RoundPhase>,
    pub accepted: Vec<u32>,
    pub stragglers: Vec<u32>,
    pub rejected: Vec<Rejection>,
    pub weights: BTreeMap<u32, f64>,
    /// Aggregated model on every client's test split.
    pub global: Option<EvalReport>,
    /// Each accepted local update, before aggregation, on every test split.
    pub local: BTreeMap<u32, EvalReport>,
    pub residual_norms: BTreeMap<InjectionTarget, f64>,
    /// Global macro accuracy fell below the best local macro accuracy.
    pub global_below_best_local: bool,
    pub round1_dip: bool,
    pub events: Vec<String>,
}

pub fn round_log(result: &ExperimentResult, model: &BaseModel, shards: &[ClientShard]) -> Result<Vec<RoundLogRecord>> {
    let mut out = Vec::with_capacity(result.rounds.len());
    for rec in &result.rounds {
        let global = rec
            .global
            .as_ref()
            .map(|g| EvalReport::evaluate(format!("global_round_{}", rec.round), VariantKind::Federated, model, &g.adapters, shards))
            .transpose()?;
        let mut local = BTreeMap::new();
        for u in &rec.updates {
            let report = EvalReport::evaluate(
                format!("local_client_{}_round_{}", u.client_id, rec.round),
                VariantKind::SingleClient(u.client_id),
                model,
                &u.adapters,
                shards,
            )?;
            local.insert(u.client_id, report);
        }
        let best_local = local.values().map(|r| r.macro_acc).fold(f64::NEG_INFINITY, f64::max);
        let below = global.as_ref().is_some_and(|g| g.macro_acc < best_local);
        out.push(RoundLogRecord {
            round: rec.round,
            phases: rec.phases.clone(),
            accepted: rec.accepted.clone(),
            stragglers: rec.stragglers.clone(),
            rejected: rec.rejected.clone(),
            weights: rec.weights.clone(),
            global,
            local,
            residual_norms: rec.global.as_ref().map(|g| g.residual_norms.clone()).unwrap_or_default(),
            global_below_best_local: below,
            round1_dip: rec.round == 1 && below,
            events: rec.events.clone(),
        });
    }
    Ok(out)
}

pub fn write_round_log<W: std::io::Write>(records: &[RoundLogRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_round_log(text: &str) -> Result<Vec<RoundLogRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(FedError::from))
        .collect()
}
