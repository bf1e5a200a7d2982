//! Adapter-only federated averaging.
//!
//! Each client's update is expanded to its dense `ΔW_k = s · B_k · A_k`, the
//! updates are averaged per target with sample-count or uniform weights, and
//! the mean is truncated back to rank `r` so it can be redistributed as a
//! factor pair. Clients are always summed in ascending `client_id`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::linalg::{truncated_svd, Matrix};
use crate::lora::{AdapterPair, AdapterSet, InjectionTarget, ScalingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    /// `n_k / N`
    #[default]
    SampleWeighted,
    /// `1 / K`
    Uniform,
}

/// How the averaged update is turned back into factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    /// Average the dense products, then truncated SVD to rank `r`.
    #[default]
    ProductSvd,
    /// Average `A` and `B` separately. Kept for the ablation showing that
    /// `mean(B)·mean(A) ≠ mean(B·A)`.
    FactorAverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub round: u32,
    pub n_k: u64,
    pub adapters: AdapterSet,
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalAdapterState {
    pub round: u32,
    pub adapters: AdapterSet,
    /// Frobenius norm of `mean ΔW − s · B' · A'` per target.
    pub residual_norms: BTreeMap<InjectionTarget, f64>,
}

/// `s · B_k · A_k` for one target of one client.
pub fn reconstruct_delta(update: &ClientUpdate, target: InjectionTarget) -> Result<Matrix> {
    update
        .adapters
        .get(target)
        .map(AdapterPair::delta)
        .ok_or_else(|| {
            FedError::Shape(format!(
                "client {} update has no adapter for {target}",
                update.client_id
            ))
        })
}

/// Weights over the clients that actually responded, summing to one.
/// `responding` holds `(client_id, n_k)` pairs.
pub fn renormalize_weights(responding: &[(u32, u64)], mode: WeightingMode) -> Result<BTreeMap<u32, f64>> {
    if responding.is_empty() {
        return Err(FedError::Aggregation("no responding clients".into()));
    }
    let mut ids = BTreeSet::new();
    for (id, n) in responding {
        if !ids.insert(*id) {
            return Err(FedError::Aggregation(format!("client {id} listed twice")));
        }
        if *n == 0 {
            return Err(FedError::Aggregation(format!("client {id} reports zero samples")));
        }
    }
    let weights = match mode {
        WeightingMode::Uniform => {
            let w = 1.0 / responding.len() as f64;
            responding.iter().map(|&(id, _)| (id, w)).collect()
        }
        WeightingMode::SampleWeighted => {
            let total: u64 = responding.iter().map(|&(_, n)| n).sum();
            responding
                .iter()
                .map(|&(id, n)| (id, n as f64 / total as f64))
                .collect()
        }
    };
    Ok(weights)
}

/// Sorts updates by client and checks round, target set, shapes and
/// rank/alpha/scaling agreement.
fn check_updates(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let first = updates
        .first()
        .ok_or_else(|| FedError::Aggregation("no updates to aggregate".into()))?;
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for w in sorted.windows(2) {
        if w[0].client_id == w[1].client_id {
            return Err(FedError::Protocol(format!(
                "duplicate update from client {}",
                w[0].client_id
            )));
        }
    }
    let hyper = first.adapters.hyper();
    for u in &sorted {
        if u.round != first.round {
            return Err(FedError::Protocol(format!(
                "mixed rounds: client {} sent round {}, expected {}",
                u.client_id, u.round, first.round
            )));
        }
        u.adapters.validate()?;
        if u.adapters.hyper() != hyper {
            return Err(FedError::Shape(format!(
                "client {} uses different rank/alpha/scaling",
                u.client_id
            )));
        }
        if u.adapters.targets() != first.adapters.targets() {
            return Err(FedError::Shape(format!(
                "client {} adapts a different target set",
                u.client_id
            )));
        }
        for (t, p) in &u.adapters.pairs {
            let reference = &first.adapters.pairs[t];
            if p.a.shape() != reference.a.shape() || p.b.shape() != reference.b.shape() {
                return Err(FedError::Shape(format!(
                    "client {} {t} factors have shapes {:?}/{:?}, expected {:?}/{:?}",
                    u.client_id,
                    p.a.shape(),
                    p.b.shape(),
                    reference.a.shape(),
                    reference.b.shape()
                )));
            }
        }
    }
    Ok(sorted)
}

/// Weighted mean of the dense updates for one target, before truncation.
pub fn weighted_mean_delta(
    updates: &[ClientUpdate],
    mode: WeightingMode,
    target: InjectionTarget,
) -> Result<Matrix> {
    let sorted = check_updates(updates)?;
    let weights = weights_for(&sorted, mode)?;
    mean_delta(&sorted, &weights, target)
}

fn weights_for(sorted: &[&ClientUpdate], mode: WeightingMode) -> Result<BTreeMap<u32, f64>> {
    let responding: Vec<(u32, u64)> = sorted.iter().map(|u| (u.client_id, u.n_k)).collect();
    renormalize_weights(&responding, mode)
}

fn mean_delta(sorted: &[&ClientUpdate], weights: &BTreeMap<u32, f64>, target: InjectionTarget) -> Result<Matrix> {
    let mut acc: Option<Matrix> = None;
    for u in sorted {
        let delta = reconstruct_delta(u, target)?;
        let w = weights[&u.client_id];
        match acc.as_mut() {
            None => {
                let mut m = Matrix::zeros(delta.rows(), delta.cols());
                m.add_scaled(w, &delta)?;
                acc = Some(m);
            }
            Some(m) => m.add_scaled(w, &delta)?,
        }
    }
    acc.ok_or_else(|| FedError::Aggregation("no updates to aggregate".into()))
}

/// Splits a dense update into rank-`rank` factors with `s · B' · A'` equal to
/// its best rank-`rank` approximation. Returns the pair and the residual norm.
pub fn refactorize(
    target: InjectionTarget,
    dense: &Matrix,
    rank: usize,
    alpha: f64,
    scaling: ScalingMode,
) -> Result<(AdapterPair, f64)> {
    let svd = truncated_svd(dense, rank)?;
    let s = scaling.scale(alpha, rank);
    let mut a = svd.vt.clone();
    let mut b = svd.u.clone();
    for (j, sigma) in svd.singular_values.iter().enumerate() {
        let root = (sigma / s).sqrt();
        a.row_mut(j).iter_mut().for_each(|v| *v *= root);
        for i in 0..b.rows() {
            b.set(i, j, b.get(i, j) * root);
        }
    }
    let pair = AdapterPair::new(target, a, b, alpha, scaling)?;
    let residual = dense.sub(&pair.delta())?.frobenius_norm();
    Ok((pair, residual))
}

/// Product-space FedAvg with SVD re-factorization to rank `rank`.
pub fn aggregate(updates: &[ClientUpdate], mode: WeightingMode, rank: usize) -> Result<GlobalAdapterState> {
    aggregate_with(updates, mode, rank, MergeStrategy::ProductSvd)
}

pub fn aggregate_with(
    updates: &[ClientUpdate],
    mode: WeightingMode,
    rank: usize,
    strategy: MergeStrategy,
) -> Result<GlobalAdapterState> {
    let sorted = check_updates(updates)?;
    let weights = weights_for(&sorted, mode)?;
    let first = sorted[0];
    let (client_rank, alpha, scaling) = first
        .adapters
        .hyper()
        .ok_or_else(|| FedError::Aggregation("updates carry no adapters".into()))?;

    let mut pairs = Vec::new();
    let mut residual_norms = BTreeMap::new();
    for target in first.adapters.targets() {
        let mean = mean_delta(&sorted, &weights, target)?;
        let (pair, residual) = match strategy {
            MergeStrategy::ProductSvd => refactorize(target, &mean, rank, alpha, scaling)?,
            MergeStrategy::FactorAverage => {
                if rank != client_rank {
                    return Err(FedError::Rank {
                        rank,
                        rows: mean.rows(),
                        cols: mean.cols(),
                    });
                }
                let reference = &first.adapters.pairs[&target];
                let mut a = Matrix::zeros(reference.a.rows(), reference.a.cols());
                let mut b = Matrix::zeros(reference.b.rows(), reference.b.cols());
                for u in &sorted {
                    let p = &u.adapters.pairs[&target];
                    let w = weights[&u.client_id];
                    a.add_scaled(w, &p.a)?;
                    b.add_scaled(w, &p.b)?;
                }
                let pair = AdapterPair::new(target, a, b, alpha, scaling)?;
                let residual = mean.sub(&pair.delta())?.frobenius_norm();
                (pair, residual)
            }
        };
        residual_norms.insert(target, residual);
        pairs.push(pair);
    }
    Ok(GlobalAdapterState {
        round: first.round,
        adapters: AdapterSet::from_pairs(pairs)?,
        residual_norms,
    })
}
