//! Observables computed from client states: consensus deviation, the
//! stationarity metric at the averaged factors, the consensus-deviation bound
//! with plug-in constants, log-log rate fits, and communication cost.
//!
//! Every metric uses full-shard deterministic gradients; minibatch noise only
//! enters through the trajectory itself.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::algorithms::{ClientState, Task};
use crate::error::{Error, Result};
use crate::linalg::{mean, DenseMatrix};
use crate::model::{accuracy_at, chain_rule, loss_and_grad_at, LoraLayer};
use crate::topology::MixingMatrix;

/// Bytes per transmitted scalar.
pub const BYTES_PER_SCALAR: u64 = 8;

/// Column order of the metrics CSV.
pub const CSV_COLUMNS: [&str; 10] = [
    "t",
    "train_loss",
    "train_accuracy",
    "dev_a",
    "dev_b",
    "stat_metric",
    "max_norm_a",
    "max_norm_b",
    "bytes_per_client",
    "bytes_total",
];

/// One row of per-round observables. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub t: usize,
    /// Mean over clients of the global objective at each client's own model.
    pub train_loss: f64,
    /// Mean over clients of full-dataset accuracy; empty for regression.
    pub train_accuracy: Option<f64>,
    pub dev_a: f64,
    pub dev_b: f64,
    pub stat_metric: f64,
    pub max_norm_a: f64,
    pub max_norm_b: f64,
    /// Mean bytes sent per client in one round.
    pub bytes_per_client: f64,
    /// Cumulative bytes sent by all clients through round `t`.
    pub bytes_total: u64,
}

/// `(1/n) sum |A_i - mean A|_F^2` and the same for `B`.
pub fn consensus_deviation(states: &[ClientState]) -> Result<(f64, f64)> {
    if states.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    let a: Vec<&DenseMatrix> = states.iter().map(|s| s.layer.a()).collect();
    let b: Vec<&DenseMatrix> = states.iter().map(|s| s.layer.b()).collect();
    Ok((mean_sq_deviation(&a)?, mean_sq_deviation(&b)?))
}

// Pairwise form `(1/n^2) sum_{i<j} |X_i - X_j|^2`: exactly zero when all
// clients agree, which the mean-centered form is not under rounding.
fn mean_sq_deviation(mats: &[&DenseMatrix]) -> Result<f64> {
    let mut total = 0.0;
    for (i, x) in mats.iter().enumerate() {
        for y in &mats[i + 1..] {
            total += x.sub(y)?.frobenius_norm_sq();
        }
    }
    Ok(total / (mats.len() * mats.len()) as f64)
}

/// Global objective `f(W) = (1/n) sum_i f_i(W)` (each `f_i` the mean loss over
/// shard `i`) and its gradient in `W`.
pub fn global_loss_and_grad(task: &Task, w: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let shards = task.shard_batches();
    let n = shards.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(shards.len());
    for batch in shards {
        let (l, g) = loss_and_grad_at(task.spec(), w, batch)?;
        loss += l;
        grads.push(g);
    }
    let refs: Vec<&DenseMatrix> = grads.iter().collect();
    Ok((loss / n, mean(&refs)?))
}

/// `|grad_A f(B A)|_F^2 + |grad_B f(B A)|_F^2` at the given (averaged)
/// factors, using the full data of every shard.
pub fn stationarity_metric(task: &Task, bar_a: &DenseMatrix, bar_b: &DenseMatrix) -> Result<f64> {
    let layer = LoraLayer::new(task.w0().clone(), bar_a.clone(), bar_b.clone())?;
    let (_, grad_w) = global_loss_and_grad(task, &layer.effective_weight()?)?;
    let g = chain_rule(&layer, grad_w)?;
    Ok(g.grad_a.frobenius_norm_sq() + g.grad_b.frobenius_norm_sq())
}

/// Consensus-deviation bound evaluated with plug-in constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationBound {
    pub m_a: f64,
    pub m_b: f64,
    pub rho: f64,
    pub a0: f64,
    pub bound_a: f64,
    pub bound_b: f64,
}

/// Plug-in constants for [`deviation_bound`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Largest observed stochastic gradient norm (in `W`).
    pub grad_norm: f64,
    /// Largest observed `|A_i|_F`.
    pub norm_a: f64,
    /// Largest observed `|B_i|_F`.
    pub norm_b: f64,
    pub local_steps: usize,
    pub eta: f64,
    /// `sum_i |A_i^(0)|_F^2` over all clients.
    pub init_stacked_norm_a: f64,
}

/// `M_A = 2(1+b^2) b^2 G^2 C_B^2 / (1-b^2)^2`, `M_B` likewise with `C_A`,
/// `a0(t) = rho^t |[A^(0)]|^2 / n`, `rho = (1+b^2)/2`;
/// returns `bound_a = K^2 eta^2 M_A + a0(t)` and `bound_b = K^2 eta^2 M_B`.
pub fn deviation_bound(q: &MixingMatrix, inputs: &BoundInputs, t: usize) -> DeviationBound {
    deviation_bound_from_beta(q.beta(), q.n(), inputs, t)
}

pub fn deviation_bound_from_beta(
    beta: f64,
    n: usize,
    inputs: &BoundInputs,
    t: usize,
) -> DeviationBound {
    let b2 = beta * beta;
    let common = 2.0 * (1.0 + b2) * b2 * inputs.grad_norm.powi(2) / (1.0 - b2).powi(2);
    let m_a = common * inputs.norm_b.powi(2);
    let m_b = common * inputs.norm_a.powi(2);
    let rho = (1.0 + b2) / 2.0;
    let a0 = rho.powi(t as i32) * inputs.init_stacked_norm_a / n as f64;
    let scale = (inputs.local_steps as f64 * inputs.eta).powi(2);
    DeviationBound {
        m_a,
        m_b,
        rho,
        a0,
        bound_a: scale * m_a + a0,
        bound_b: scale * m_b,
    }
}

/// Least-squares slope of `ln(value)` against `ln(T)`.
pub fn rate_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 points for a rate fit, got {}",
            points.len()
        )));
    }
    let mut ts: Vec<f64> = points.iter().map(|p| p.0).collect();
    ts.sort_by(f64::total_cmp);
    if ts.windows(2).any(|w| w[0] == w[1]) || ts[0] <= 0.0 {
        return Err(Error::InvalidArgument(
            "rate fit needs distinct positive T values".into(),
        ));
    }
    if let Some(p) = points.iter().find(|p| !(p.1 > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "cannot take the log of nonpositive value {} at T = {}",
            p.1, p.0
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Bytes sent per client per round and over a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommCost {
    pub per_client_max: u64,
    pub per_client_mean: f64,
    pub per_round_total: u64,
    pub total: u64,
}

/// Each client sends its payload once to every neighbor per round.
pub fn comm_cost_from_degrees(
    payload_scalars: usize,
    degrees: &[usize],
    rounds: usize,
) -> CommCost {
    let per_client: Vec<u64> = degrees
        .iter()
        .map(|&d| d as u64 * payload_scalars as u64 * BYTES_PER_SCALAR)
        .collect();
    let per_round_total: u64 = per_client.iter().sum();
    CommCost {
        per_client_max: per_client.iter().copied().max().unwrap_or(0),
        per_client_mean: per_round_total as f64 / per_client.len().max(1) as f64,
        per_round_total,
        total: per_round_total * rounds as u64,
    }
}

/// Gossip of both factors: `degree(i) * (d1 + d2) * r * 8` bytes per client
/// per round.
pub fn comm_cost(d1: usize, d2: usize, r: usize, q: &MixingMatrix, rounds: usize) -> CommCost {
    let degrees: Vec<usize> = (0..q.n()).map(|i| q.out_degree(i)).collect();
    comm_cost_from_degrees((d1 + d2) * r, &degrees, rounds)
}

/// Computes the observables for the current client states.
pub fn record_round(
    task: &Task,
    states: &[ClientState],
    t: usize,
    cost: &CommCost,
) -> Result<MetricsRecord> {
    let (dev_a, dev_b) = consensus_deviation(states)?;
    let a: Vec<&DenseMatrix> = states.iter().map(|s| s.layer.a()).collect();
    let b: Vec<&DenseMatrix> = states.iter().map(|s| s.layer.b()).collect();
    let stat_metric = stationarity_metric(task, &mean(&a)?, &mean(&b)?)?;

    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut has_acc = false;
    for s in states {
        let w = s.layer.effective_weight()?;
        let (l, _) = global_loss_and_grad(task, &w)?;
        loss_sum += l;
        if let Some(acc) = accuracy_at(&w, task.dataset().samples())? {
            acc_sum += acc;
            has_acc = true;
        }
    }
    let n = states.len() as f64;
    Ok(MetricsRecord {
        t,
        train_loss: loss_sum / n,
        train_accuracy: has_acc.then_some(acc_sum / n),
        dev_a,
        dev_b,
        stat_metric,
        max_norm_a: a.iter().map(|m| m.frobenius_norm()).fold(0.0, f64::max),
        max_norm_b: b.iter().map(|m| m.frobenius_norm()).fold(0.0, f64::max),
        bytes_per_client: if t == 0 { 0.0 } else { cost.per_client_mean },
        bytes_total: cost.per_round_total * t as u64,
    })
}

/// Writes records as CSV with the header in [`CSV_COLUMNS`] order.
pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
