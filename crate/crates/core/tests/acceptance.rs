//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use fedlora_core::aggregation::{aggregate, renormalize_weights, weighted_mean_delta, ClientUpdate, WeightingMode};
use fedlora_core::config::{FedConfig, TransportKind};
use fedlora_core::data::Example;
use fedlora_core::evalkit::{aggregate_metrics, pca_updates, EvalReport};
use fedlora_core::experiment::{run_experiment, run_federated, ExperimentPlan, Setup};
use fedlora_core::identity::{parse_ledger, validate_chain, Ledger};
use fedlora_core::linalg::{random_init, Matrix};
use fedlora_core::lora::{loss_and_grads, AdapterPair, AdapterSet, BaseModel, InjectionTarget, ModelDims, ScalingMode};
use fedlora_core::proto::ClientBehavior;
use fedlora_core::FedError;
use fedlora_oracle as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_metric_oracle() -> Outcome {
    let accs: BTreeMap<u32, f64> = [(0, 0.5846), (1, 0.4101), (2, 0.3402)].into_iter().collect();
    let m = aggregate_metrics(&accs).map_err(|e| e.to_string())?;
    let tol = 5e-5;
    check(
        (m.macro_acc - 0.4450).abs() <= tol && (m.min_acc - 0.3402).abs() <= tol && (m.h_mean - 0.4232).abs() <= tol,
        || format!("got macro {:.6} min {:.6} h-mean {:.6}", m.macro_acc, m.min_acc, m.h_mean),
    )?;
    Ok(format!("macro {:.4}, min {:.4}, h-mean {:.4}", m.macro_acc, m.min_acc, m.h_mean))
}

/// |analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)
const GRAD_FLOOR: f64 = 1e-6;

fn c2_gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims {
            vocab: rng.random_range(4..10),
            d: rng.random_range(2..6),
            hidden: rng.random_range(3..9),
            classes: rng.random_range(2..5),
            seq_len: rng.random_range(1..5),
        };
        let rank = rng.random_range(1..=dims.d.min(dims.hidden).min(3));
        let scaling = if seed % 2 == 0 { ScalingMode::AlphaOverR } else { ScalingMode::Alpha };
        let alpha = rng.random_range(0.5..4.0);
        let model = BaseModel::init(dims, seed + 100);
        let mut adapters = AdapterSet::init(&dims, &InjectionTarget::ALL, rank, alpha, scaling, seed + 200)
            .map_err(|e| e.to_string())?;
        for (i, pair) in adapters.pairs.values_mut().enumerate() {
            pair.b = random_init(pair.b.rows(), pair.b.cols(), 0.3, seed * 31 + i as u64);
        }
        let batch: Vec<Example> = (0..rng.random_range(1..4))
            .map(|_| Example {
                tokens: (0..dims.seq_len).map(|_| rng.random_range(0..dims.vocab)).collect(),
                label: rng.random_range(0..dims.classes),
            })
            .collect();
        let analytic = loss_and_grads(&model, &adapters, &batch, None).map_err(|e| e.to_string())?;
        for target in adapters.targets() {
            for factor in 0..2 {
                let pick = |s: &AdapterSet| -> Matrix {
                    let p = s.get(target).unwrap();
                    if factor == 0 { p.a.clone() } else { p.b.clone() }
                };
                let x = pick(&adapters).data().to_vec();
                let g = &analytic.grads.pairs[&target];
                let g = if factor == 0 { &g.a } else { &g.b };
                for idx in 0..x.len() {
                    let f = |p: &[f64]| {
                        let mut s = adapters.clone();
                        let pair: &mut AdapterPair = s.pairs.get_mut(&target).unwrap();
                        let m = if factor == 0 { &mut pair.a } else { &mut pair.b };
                        m.data_mut().copy_from_slice(p);
                        loss_and_grads(&model, &s, &batch, None).unwrap().loss
                    };
                    let numeric = oracle::central_difference(f, &x, idx, 1e-5);
                    let a = g.data()[idx];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
    }
    check(worst < 1e-4, || format!("max relative error {worst:.3e} over {checked} entries"))?;
    Ok(format!("max relative error {worst:.3e} over {checked} entries in 20 configurations"))
}

fn pair_from(target: InjectionTarget, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, alpha: f64) -> AdapterPair {
    AdapterPair::new(
        target,
        Matrix::from_rows(&a).unwrap(),
        Matrix::from_rows(&b).unwrap(),
        alpha,
        ScalingMode::AlphaOverR,
    )
    .unwrap()
}

fn update(id: u32, n_k: u64, adapters: AdapterSet) -> ClientUpdate {
    ClientUpdate {
        client_id: id,
        round: 1,
        n_k,
        adapters,
        signature: Vec::new(),
    }
}

fn random_update(id: u32, n_k: u64, dims: &ModelDims, rank: usize, seed: u64) -> ClientUpdate {
    let mut set = AdapterSet::init(dims, &InjectionTarget::ALL, rank, 32.0, ScalingMode::AlphaOverR, seed).unwrap();
    for (i, pair) in set.pairs.values_mut().enumerate() {
        pair.b = random_init(pair.b.rows(), pair.b.cols(), 0.2, seed * 17 + i as u64);
    }
    update(id, n_k, set)
}

fn dense(m: &Matrix) -> Vec<Vec<f64>> {
    m.to_rows()
}

fn c3_aggregation_algebra() -> Outcome {
    let dims = ModelDims::default();
    let rank = 8;
    let mode = WeightingMode::SampleWeighted;

    // (a) singleton
    let single = random_update(0, 274, &dims, rank, 1);
    let g = aggregate(std::slice::from_ref(&single), mode, rank).map_err(|e| e.to_string())?;
    let mut worst_a: f64 = 0.0;
    for t in single.adapters.targets() {
        let d = single.adapters.get(t).unwrap().delta().sub(&g.adapters.get(t).unwrap().delta()).unwrap();
        worst_a = worst_a.max(d.frobenius_norm());
    }
    check(worst_a <= 1e-10, || format!("(a) singleton drift {worst_a:.3e}"))?;

    // (b) scalar example
    let one = |v: f64| vec![vec![v]];
    let u1 = update(0, 1, AdapterSet::from_pairs([pair_from(InjectionTarget::Q, one(2.0), one(1.0), 1.0)]).unwrap());
    let u2 = update(1, 3, AdapterSet::from_pairs([pair_from(InjectionTarget::Q, one(6.0), one(1.0), 1.0)]).unwrap());
    let pair = [u1, u2];
    let mean = weighted_mean_delta(&pair, mode, InjectionTarget::Q).map_err(|e| e.to_string())?.get(0, 0);
    check(mean == 5.0, || format!("(b) expected weighted mean 5, got {mean:?}"))?;
    let g = aggregate(&pair, mode, 1).map_err(|e| e.to_string())?;
    let v = g.adapters.get(InjectionTarget::Q).unwrap().delta().get(0, 0);
    check((v - 5.0).abs() <= 1e-14, || format!("(b) re-factorized product {v:?}"))?;

    // (c) identical updates
    let u = random_update(0, 10, &dims, rank, 2);
    let copies: Vec<ClientUpdate> = (0..3)
        .map(|i| ClientUpdate { client_id: i, n_k: 10 + 50 * i as u64, ..u.clone() })
        .collect();
    let g = aggregate(&copies, mode, rank).map_err(|e| e.to_string())?;
    let mut worst_c: f64 = 0.0;
    for t in u.adapters.targets() {
        let d = u.adapters.get(t).unwrap().delta().sub(&g.adapters.get(t).unwrap().delta()).unwrap();
        worst_c = worst_c.max(d.frobenius_norm());
    }
    check(worst_c <= 1e-10, || format!("(c) identical-update drift {worst_c:.3e}"))?;

    // (d) rank-8 truncation vs dense mean + full SVD
    let ups: Vec<ClientUpdate> = [(0u32, 274u64), (1, 102), (2, 335)]
        .into_iter()
        .map(|(id, n)| random_update(id, n, &dims, rank, 40 + id as u64))
        .collect();
    let g = aggregate(&ups, mode, rank).map_err(|e| e.to_string())?;
    let total: f64 = ups.iter().map(|u| u.n_k as f64).sum();
    let mut worst_d: f64 = 0.0;
    for t in ups[0].adapters.targets() {
        let (d_out, d_in) = t.shape(&dims);
        let mut mean = oracle::zeros(d_out, d_in);
        for u in &ups {
            let p = u.adapters.get(t).unwrap();
            let prod = oracle::triple_loop_matmul(&dense(&p.b), &dense(&p.a));
            let w = u.n_k as f64 / total * p.scale();
            for r in 0..d_out {
                for c in 0..d_in {
                    mean[r][c] += w * prod[r][c];
                }
            }
        }
        let best = oracle::best_rank_k(&mean, rank);
        let ours = dense(&g.adapters.get(t).unwrap().delta());
        worst_d = worst_d.max(oracle::frobenius(&oracle::sub(&ours, &best)));
    }
    check(worst_d <= 1e-8, || format!("(d) truncation differs from oracle by {worst_d:.3e}"))?;

    // (e) permutation invariance
    let mut rev = ups.clone();
    rev.reverse();
    let g2 = aggregate(&rev, mode, rank).map_err(|e| e.to_string())?;
    check(g2 == g, || "(e) aggregate depends on input order".into())?;

    Ok(format!(
        "(a) {worst_a:.1e} (b) exact 5 (c) {worst_c:.1e} (d) {worst_d:.1e} (e) bit-exact"
    ))
}

fn c4_transport_equivalence() -> Outcome {
    let mut cfg = FedConfig::default();
    cfg.seed = 11;
    cfg.transport = TransportKind::InProcess;
    let a = run_experiment(&ExperimentPlan::full(cfg.clone())).map_err(|e| e.to_string())?;
    cfg.transport = TransportKind::Socket;
    cfg.listen_address = "127.0.0.1:0".into();
    let b = run_experiment(&ExperimentPlan::full(cfg)).map_err(|e| e.to_string())?;
    let (ca, cb) = (
        a.comparison.to_csv().map_err(|e| e.to_string())?,
        b.comparison.to_csv().map_err(|e| e.to_string())?,
    );
    check(ca.as_bytes() == cb.as_bytes(), || "comparison CSVs differ between transports".into())?;
    let ga = a.federated.as_ref().unwrap().final_adapters.clone();
    let gb = b.federated.as_ref().unwrap().final_adapters.clone();
    check(ga == gb, || "final global adapters differ between transports".into())?;
    Ok(format!("{} comparison rows, {} CSV bytes identical", a.comparison.rows.len(), ca.len()))
}

struct SeedRun {
    seed: u64,
    federated: EvalReport,
    best_single: EvalReport,
    round1_dip: bool,
    round1_macro: f64,
    final_macro: f64,
}

fn fairness_runs() -> Result<Vec<SeedRun>, String> {
    let mut out = Vec::new();
    for seed in 0..5u64 {
        let mut cfg = FedConfig::default();
        cfg.seed = seed;
        let bundle = run_experiment(&ExperimentPlan::full(cfg)).map_err(|e| format!("seed {seed}: {e}"))?;
        let fed = bundle
            .reports
            .iter()
            .find(|r| r.label == "federated")
            .cloned()
            .ok_or("missing federated report")?;
        let best_label = bundle.comparison.best_single.clone().ok_or("no single-client report")?;
        let best = bundle.reports.iter().find(|r| r.label == best_label).cloned().unwrap();
        let log = &bundle.federated.as_ref().unwrap().round_log;
        let first = log.first().and_then(|r| r.global.as_ref()).ok_or("no round-1 global report")?;
        let last = log.last().and_then(|r| r.global.as_ref()).unwrap();
        out.push(SeedRun {
            seed,
            round1_dip: log[0].round1_dip,
            round1_macro: first.macro_acc,
            final_macro: last.macro_acc,
            federated: fed,
            best_single: best,
        });
    }
    Ok(out)
}

fn c5_fairness(runs: &[SeedRun]) -> Outcome {
    let wins = runs.iter().filter(|r| r.federated.min_acc >= r.best_single.min_acc).count();
    let n = runs.len() as f64;
    let fed_h = runs.iter().map(|r| r.federated.h_mean).sum::<f64>() / n;
    let single_h = runs.iter().map(|r| r.best_single.h_mean).sum::<f64>() / n;
    let detail: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: min {:.4} vs {:.4}, h {:.4} vs {:.4}",
                r.seed, r.federated.min_acc, r.best_single.min_acc, r.federated.h_mean, r.best_single.h_mean
            )
        })
        .collect();
    let summary = format!(
        "min-acc wins {wins}/5, mean h-mean {fed_h:.4} vs best single {single_h:.4} [{}]",
        detail.join("; ")
    );
    check(wins >= 4 && fed_h >= single_h - 0.01, || summary.clone())?;
    Ok(summary)
}

fn c6_round_dynamics(runs: &[SeedRun]) -> Outcome {
    let dips = runs.iter().filter(|r| r.round1_dip).count();
    let improved = runs.iter().filter(|r| r.final_macro >= r.round1_macro).count();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: dip {} r1 {:.4} final {:.4}", r.seed, r.round1_dip, r.round1_macro, r.final_macro))
        .collect();
    let summary = format!("round-1 dip in {dips}/5 seeds, final >= round 1 in {improved}/5 [{}]", detail.join("; "));
    check(dips >= 1 && improved >= 4, || summary.clone())?;
    Ok(summary)
}

fn c7_pca() -> Outcome {
    let v = vec![vec![1.5, -2.0], vec![0.5, 3.0]];
    let neg: Vec<Vec<f64>> = v.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let mk = |id, a: Vec<Vec<f64>>| update(id, 1, AdapterSet::from_pairs([pair_from(InjectionTarget::Q, a, eye.clone(), 2.0)]).unwrap());
    let p = pca_updates(&[mk(0, v.clone()), mk(1, neg)]).map_err(|e| e.to_string())?;
    let norm = v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let (a, b) = (p.points[&0], p.points[&1]);
    let err_anti = (a.0.abs() - norm).abs().max(a.1.abs()).max((a.0 + b.0).abs()).max(b.1.abs());
    check(err_anti <= 1e-9, || format!("antipodal points {a:?} {b:?}, expected ±{norm}"))?;

    let dims = ModelDims { vocab: 8, d: 4, hidden: 6, classes: 3, seq_len: 3 };
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let ups: Vec<ClientUpdate> = (0..3).map(|k| random_update(k, 1, &dims, 2, seed * 10 + k as u64)).collect();
        let p = pca_updates(&ups).map_err(|e| e.to_string())?;
        let samples: Vec<Vec<f64>> = ups
            .iter()
            .map(|u| u.adapters.targets().iter().flat_map(|t| u.adapters.get(*t).unwrap().delta().into_data()).collect())
            .collect();
        let d = oracle::pca_pairwise_distances(&samples, 2);
        for i in 0..3u32 {
            for j in 0..3u32 {
                let (x, y) = (p.points[&i], p.points[&j]);
                let ours = ((x.0 - y.0).powi(2) + (x.1 - y.1).powi(2)).sqrt();
                worst = worst.max((ours - d[i as usize][j as usize]).abs());
            }
        }
    }
    check(worst <= 1e-8, || format!("random 3-client distances off by {worst:.3e}"))?;
    Ok(format!("antipodal error {err_anti:.1e}, oracle distance error {worst:.1e}"))
}

fn small_fed_config() -> FedConfig {
    let mut cfg = FedConfig::default();
    cfg.seed = 3;
    cfg.client_timeout_secs = 30.0;
    cfg
}

fn c8_identity() -> Outcome {
    let cfg = small_fed_config();
    let setup = Setup::build(&cfg).map_err(|e| e.to_string())?;

    let forged: BTreeMap<u32, ClientBehavior> = [(
        1,
        ClientBehavior {
            forge_rounds: BTreeSet::from([2]),
            ..Default::default()
        },
    )]
    .into_iter()
    .collect();
    let out = run_federated(&cfg, &setup, &forged).map_err(|e| e.to_string())?;
    let r2 = &out.result.rounds[1];
    check(r2.accepted == vec![0, 2], || format!("round 2 aggregated {:?}", r2.accepted))?;
    check(
        r2.rejected.iter().any(|r| r.client_id == 1 && r.reason.contains("signature")),
        || format!("forged update not recorded as rejected: {:?}", r2.rejected),
    )?;
    check(r2.events.iter().any(|e| e.contains("client 1")), || "forged update not logged".into())?;
    check(out.result.ledger.len() == 8, || format!("ledger has {} entries, expected 8", out.result.ledger.len()))?;

    let healthy = run_federated(&cfg, &setup, &BTreeMap::new()).map_err(|e| e.to_string())?;
    let entries = &healthy.result.ledger;
    let rk = cfg.rounds as usize * cfg.clients();
    check(entries.len() == rk, || format!("ledger has {} entries, expected {rk}", entries.len()))?;
    validate_chain(entries).map_err(|e| e.to_string())?;

    let mut ledger = Ledger::in_memory();
    for e in entries {
        ledger.credit(e.round, e.client_id, e.reward).map_err(|e| e.to_string())?;
    }
    let text = ledger.to_jsonl();
    parse_ledger(&text).map_err(|e| e.to_string())?;
    let line_of = |pos: usize| text[..pos].matches('\n').count();
    let mut mutations = 0;
    for pos in 0..text.len() {
        for mask in [0x01u8, 0x20, 0x80] {
            let mut bytes = text.as_bytes().to_vec();
            bytes[pos] ^= mask;
            let mutated = String::from_utf8_lossy(&bytes);
            let expected = line_of(pos).min(rk - 1);
            match parse_ledger(&mutated) {
                Err(FedError::Ledger { index, .. }) if index == expected => mutations += 1,
                Err(e) => return Err(format!("byte {pos} ^ {mask:#x}: wrong failure {e}, expected index {expected}")),
                Ok(_) => return Err(format!("byte {pos} ^ {mask:#x}: mutation accepted")),
            }
        }
    }
    Ok(format!(
        "forged update excluded and logged; {rk}-entry ledger validates; {mutations} single-byte mutations all caught at the right index"
    ))
}

fn c9_straggler() -> Outcome {
    let mut cfg = small_fed_config();
    cfg.client_timeout_secs = 20.0;
    let setup = Setup::build(&cfg).map_err(|e| e.to_string())?;
    let silent: BTreeMap<u32, ClientBehavior> = [(
        1,
        ClientBehavior {
            silent_rounds: BTreeSet::from([2]),
            ..Default::default()
        },
    )]
    .into_iter()
    .collect();
    let started = Instant::now();
    let out = run_federated(&cfg, &setup, &silent).map_err(|e| e.to_string())?;
    let r2 = &out.result.rounds[1];
    check(r2.accepted == vec![0, 2], || format!("round 2 aggregated {:?}", r2.accepted))?;
    let sum: f64 = r2.weights.values().sum();
    check((sum - 1.0).abs() <= 1e-15, || format!("weights sum to {sum:.17}"))?;
    let expected = renormalize_weights(&[(0, 274), (2, 335)], cfg.weighting).map_err(|e| e.to_string())?;
    check(r2.weights == expected, || format!("weights {:?}", r2.weights))?;
    let log = &out.round_log[1];
    check(log.stragglers == vec![1], || format!("round log stragglers {:?}", log.stragglers))?;
    check(out.round_log[0].stragglers.is_empty() && out.round_log[2].stragglers.is_empty(), || {
        "straggler excluded outside its silent round".into()
    })?;
    check(started.elapsed() < Duration::from_secs(60), || "straggler run took too long".into())?;
    Ok(format!("round 2 aggregated clients 0 and 2, weight sum error {:.1e}", (sum - 1.0).abs()))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(msg) => {
            println!("PASS  {name} ({secs:.1}s): {msg}");
            true
        }
        Err(msg) => {
            println!("FAIL  {name} ({secs:.1}s): {msg}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= run("1 metric oracle", c1_metric_oracle);
    ok &= run("2 gradient correctness", c2_gradient_check);
    ok &= run("3 aggregation algebra", c3_aggregation_algebra);
    ok &= run("4 transport equivalence", c4_transport_equivalence);
    let runs = catch_unwind(fairness_runs).unwrap_or_else(|_| Err("fairness runs panicked".into()));
    match &runs {
        Ok(runs) => {
            ok &= run("5 fairness over 5 seeds", || c5_fairness(runs));
            ok &= run("6 round-1 dynamics", || c6_round_dynamics(runs));
        }
        Err(e) => {
            println!("FAIL  5 fairness over 5 seeds: {e}");
            println!("FAIL  6 round-1 dynamics: {e}");
            ok = false;
        }
    }
    ok &= run("7 PCA diagnostic", c7_pca);
    ok &= run("8 identity guarantees", c8_identity);
    ok &= run("9 straggler handling", c9_straggler);
    if !ok {
        std::process::exit(1);
    }
}
