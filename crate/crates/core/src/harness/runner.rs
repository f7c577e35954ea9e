//! Builds tasks and topologies from a configuration, runs every sweep point
//! and replicate, and writes the output directory:
//!
//! * `config_echo.json`: the parsed configuration with `eta` resolved
//! * `metrics_<axis>-<value>_seed-<seed>.csv` (or `metrics_seed-<seed>.csv`)
//! * `summary.json`

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::algorithms::{run_variant, Task, Trajectory, Variant};
use crate::data::{
    generate_classification, generate_regression, normalize_columns, partition_dirichlet,
    partition_fixed_ratio, partition_iid, ClassificationSpec, Dataset, Partition,
};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, matmul, DenseMatrix};
use crate::metrics::{
    deviation_bound_from_beta, rate_slope, write_metrics_csv, BoundInputs, MetricsRecord,
};
use crate::model::{ModelKind, ModelSpec};
use crate::rng::{stream, StreamRole};
use crate::topology::{
    build_complete, build_erdos_renyi, build_exponential_graph, build_ring, mixing_complete,
    mixing_from_laplacian, mixing_from_ring, mixing_metropolis_hastings, MixingMatrix,
    TopologyFile,
};

use super::config::{DataConfig, ExperimentConfig, PartitionConfig, SweepAxis, TopologyConfig};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "DECLORA_THREADS";

/// Generates the dataset and the frozen base for `seed`.
///
/// The base is the ground truth plus a random offset of rank
/// `base_shift_rank` whose norm is `base_shift` times the ground truth's.
pub fn build_dataset(
    model: ModelKind,
    data: &DataConfig,
    seed: u64,
) -> Result<(Dataset, DenseMatrix)> {
    let mut rng = stream(seed, StreamRole::Data, &[]);
    let ds = match model {
        ModelKind::MultinomialLogistic => generate_classification(
            &ClassificationSpec {
                samples: data.samples,
                features: data.features,
                classes: data.classes,
                noise: data.noise,
                separation: data.separation,
            },
            &mut rng,
        )?,
        ModelKind::LeastSquares => generate_regression(
            data.samples,
            data.features,
            data.classes,
            data.noise,
            &mut rng,
        )?,
    };
    let w_star = ds
        .ground_truth()
        .cloned()
        .ok_or_else(|| Error::InvalidData("generator returned no ground truth".into()))?;
    let w0 = if data.base_shift > 0.0 {
        let mut rng = stream(seed, StreamRole::Base, &[]);
        let (d1, d2) = w_star.shape();
        let u = gaussian_matrix(d1, data.base_shift_rank, 1.0, &mut rng)?;
        let v = gaussian_matrix(data.base_shift_rank, d2, 1.0, &mut rng)?;
        let shift = matmul(&u, &v)?;
        let scale = data.base_shift * w_star.frobenius_norm() / shift.frobenius_norm();
        w_star.add(&shift.scale(scale)?)?
    } else {
        w_star
    };
    Ok((ds, w0))
}

pub fn build_partition(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<Partition> {
    let mut rng = stream(seed, StreamRole::Partition, &[]);
    match &cfg.partition {
        PartitionConfig::Iid => partition_iid(ds, cfg.train.n, &mut rng),
        PartitionConfig::FixedRatio { ratios, normalize } => {
            let shares = if *normalize {
                normalize_columns(ratios)?
            } else {
                ratios.clone()
            };
            partition_fixed_ratio(ds, &shares, &mut rng)
        }
        PartitionConfig::Dirichlet { alpha } => {
            partition_dirichlet(ds, cfg.train.n, *alpha, &mut rng)
        }
    }
}

/// The task for one replicate, with the base quantized if configured.
pub fn build_task(cfg: &ExperimentConfig, seed: u64) -> Result<Task> {
    let (ds, w0) = build_dataset(cfg.model, &cfg.data, seed)?;
    let partition = build_partition(cfg, &ds, seed)?;
    let spec = ModelSpec::new(cfg.model, w0.rows(), w0.cols())?;
    let task = Task::new(spec, Arc::new(ds), partition, w0)?;
    match cfg.train.quant_bits {
        Some(bits) => task.with_quantized_base(bits),
        None => Ok(task),
    }
}

pub fn build_mixing(topology: &TopologyConfig, n: usize, seed: u64) -> Result<MixingMatrix> {
    match topology {
        TopologyConfig::Ring => mixing_from_ring(&build_ring(n)?),
        TopologyConfig::ErdosRenyi { p_c } => {
            let g = build_erdos_renyi(n, *p_c, &mut stream(seed, StreamRole::Topology, &[]))?;
            mixing_from_laplacian(&g)
        }
        TopologyConfig::Complete => {
            build_complete(n)?;
            mixing_complete(n)
        }
        TopologyConfig::Exponential => mixing_metropolis_hastings(&build_exponential_graph(n)?),
        TopologyConfig::Explicit { path } => {
            let text = fs::read_to_string(path)?;
            let file: TopologyFile = serde_json::from_str(&text)?;
            if file.n != n {
                return Err(Error::InvalidGraph(format!(
                    "{} has {} nodes but n = {n}",
                    path.display(),
                    file.n
                )));
            }
            file.to_mixing()
        }
    }
}

/// Rounds in which the observed deviation exceeded its plug-in bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BoundViolations {
    pub dev_a: usize,
    pub dev_b: usize,
}

/// Counts rounds with `dev_a > bound_a` or `dev_b > bound_b`, with the
/// constants taken from the trajectory's own observed maxima.
pub fn count_bound_violations(
    traj: &Trajectory,
    beta: f64,
    n: usize,
    local_steps: usize,
    eta: f64,
) -> BoundViolations {
    let inputs = BoundInputs {
        grad_norm: traj.local_stats.max_grad_norm,
        norm_a: traj.local_stats.max_norm_a,
        norm_b: traj.local_stats.max_norm_b,
        local_steps,
        eta,
        init_stacked_norm_a: traj.init_stacked_norm_a,
    };
    let mut v = BoundViolations::default();
    for tr in &traj.traces {
        let b = deviation_bound_from_beta(beta, n, &inputs, tr.t);
        v.dev_a += (tr.metrics.dev_a > b.bound_a) as usize;
        v.dev_b += (tr.metrics.dev_b > b.bound_b) as usize;
    }
    v
}

/// One replicate of one sweep point.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub beta: f64,
    pub trajectory: Trajectory,
    pub violations: BoundViolations,
}

/// Runs a single (non-sweep) configuration at `seed`.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    let mut train = cfg.train.clone();
    train.seed = seed;
    let task = build_task(cfg, seed)?;
    let q = match train.variant {
        Variant::Centralized => None,
        _ => Some(build_mixing(&cfg.topology, train.n, seed)?),
    };
    let trajectory = run_variant(&train, &task, q.as_ref())?;
    // Server averaging behaves like complete mixing.
    let beta = q.as_ref().map_or(0.0, |q| q.beta());
    let violations = count_bound_violations(
        &trajectory,
        beta,
        train.n,
        train.local_steps,
        train.resolved_eta(),
    );
    Ok(RunResult {
        seed,
        beta,
        trajectory,
        violations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateSummary {
    pub seed: u64,
    pub metrics_file: String,
    pub beta: f64,
    pub eta: f64,
    pub selected_round: usize,
    pub best_accuracy_round: Option<usize>,
    pub mean_stationarity: f64,
    pub final_metrics: MetricsRecord,
    pub bound_violations: BoundViolations,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointSummary {
    pub axis: Option<SweepAxis>,
    pub value: Option<f64>,
    pub n: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub mean_final_loss: f64,
    pub mean_final_accuracy: Option<f64>,
    pub mean_stationarity: f64,
    pub replicates: Vec<ReplicateSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub points: Vec<PointSummary>,
    /// Log-log slope of the time-averaged stationarity metric against `T`,
    /// when sweeping `T` over at least four values.
    pub stationarity_slope: Option<f64>,
    pub total_bound_violations: BoundViolations,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    s / c as f64
}

fn metrics_filename(tag: Option<&str>, seed: u64) -> String {
    match tag {
        Some(t) => format!("metrics_{t}_seed-{seed}.csv"),
        None => format!("metrics_seed-{seed}.csv"),
    }
}

/// Removes written files if the run does not complete.
struct OutputGuard {
    written: Vec<PathBuf>,
    created_dir: Option<PathBuf>,
    armed: bool,
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.armed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
            if let Some(d) = &self.created_dir {
                let _ = fs::remove_dir(d);
            }
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| {
            Error::Config(vec![format!("{THREADS_ENV}: not a thread count: {v:?}")])
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Runs every sweep point and replicate and writes the output directory.
/// `out` overrides `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentSummary> {
    let errs = cfg.violations();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let points = cfg.points().map_err(Error::Config)?;
    let dir = out.unwrap_or(&cfg.output).to_path_buf();
    let mut guard = OutputGuard {
        written: Vec::new(),
        created_dir: (!dir.exists()).then(|| dir.clone()),
        armed: true,
    };
    fs::create_dir_all(&dir)?;

    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| cfg.seeds().into_iter().map(move |s| (p, s)))
        .collect();
    let results: Vec<RunResult> = thread_pool()?.install(|| {
        jobs.par_iter()
            .map(|&(p, seed)| run_single(&points[p].config, seed))
            .collect::<Result<_>>()
    })?;

    let mut echo_json = serde_json::to_value(cfg)?;
    echo_json["train"]["resolved_eta"] = serde_json::json!(cfg.train.resolved_eta());
    let echo_path = dir.join("config_echo.json");
    guard.written.push(echo_path.clone());
    fs::write(&echo_path, serde_json::to_string_pretty(&echo_json)? + "\n")?;

    let per_point = cfg.replicates;
    let mut summaries = Vec::with_capacity(points.len());
    let mut total = BoundViolations::default();
    for (point, chunk) in points.iter().zip(results.chunks(per_point)) {
        let tag = point.tag();
        let mut reps = Vec::with_capacity(chunk.len());
        for r in chunk {
            let name = metrics_filename(tag.as_deref(), r.seed);
            let path = dir.join(&name);
            guard.written.push(path.clone());
            let mut buf = Vec::new();
            write_metrics_csv(&r.trajectory.records(), &mut buf)?;
            fs::write(&path, buf)?;
            total.dev_a += r.violations.dev_a;
            total.dev_b += r.violations.dev_b;
            reps.push(ReplicateSummary {
                seed: r.seed,
                metrics_file: name,
                beta: r.beta,
                eta: point.config.train.resolved_eta(),
                selected_round: r.trajectory.selected_round,
                best_accuracy_round: r.trajectory.best_accuracy_round(),
                mean_stationarity: r.trajectory.mean_stationarity(),
                final_metrics: r.trajectory.final_metrics().clone(),
                bound_violations: r.violations,
            });
        }
        let acc: Vec<f64> = reps
            .iter()
            .filter_map(|r| r.final_metrics.train_accuracy)
            .collect();
        summaries.push(PointSummary {
            axis: point.label.map(|(a, _)| a),
            value: point.label.map(|(_, v)| v),
            n: point.config.train.n,
            rounds: point.config.train.rounds,
            local_steps: point.config.train.local_steps,
            mean_final_loss: mean(reps.iter().map(|r| r.final_metrics.train_loss)),
            mean_final_accuracy: (!acc.is_empty()).then(|| mean(acc.iter().copied())),
            mean_stationarity: mean(reps.iter().map(|r| r.mean_stationarity)),
            replicates: reps,
        });
    }

    let stationarity_slope = match &cfg.sweep {
        Some(s) if s.axis == SweepAxis::Rounds && s.values.len() >= 4 => {
            let pts: Vec<(f64, f64)> = summaries
                .iter()
                .map(|p| (p.rounds as f64, p.mean_stationarity))
                .collect();
            rate_slope(&pts).ok()
        }
        _ => None,
    };
    let summary = ExperimentSummary {
        points: summaries,
        stationarity_slope,
        total_bound_violations: total,
    };
    let summary_path = dir.join("summary.json");
    guard.written.push(summary_path.clone());
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    guard.armed = false;
    Ok(summary)
}

/// Spectral and degree statistics of the configured topology.
#[derive(Debug, Clone, Serialize)]
pub struct TopologyReport {
    pub n: usize,
    pub kind: String,
    pub edges: usize,
    pub beta: f64,
    pub rho: f64,
    pub min_degree: usize,
    pub max_degree: usize,
    pub mean_degree: f64,
}

pub fn topology_report(cfg: &ExperimentConfig) -> Result<TopologyReport> {
    let q = build_mixing(&cfg.topology, cfg.train.n, cfg.train.seed)?;
    let degrees = q.graph().degrees();
    Ok(TopologyReport {
        n: q.n(),
        kind: q.kind().to_string(),
        edges: q.graph().edges().len(),
        beta: q.beta(),
        rho: q.rho(),
        min_degree: degrees.iter().copied().min().unwrap_or(0),
        max_degree: degrees.iter().copied().max().unwrap_or(0),
        mean_degree: mean(degrees.iter().map(|&d| d as f64)),
    })
}
