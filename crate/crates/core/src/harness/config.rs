//! Experiment configuration: a single JSON document in which every field has
//! a default.
//!
//! ```json
//! {
//!   "train": { "n": 8, "rounds": 40, "local_steps": 2, "eta": "auto", "rank": 2,
//!              "batch_size": 16, "variant": "dec_lora", "seed": 1 },
//!   "model": "multinomial_logistic",
//!   "data": { "samples": 800, "features": 10, "classes": 4 },
//!   "partition": { "scheme": "dirichlet", "alpha": 1.0 },
//!   "topology": { "kind": "erdos_renyi", "p_c": 0.6 },
//!   "sweep": { "axis": "K", "values": [1, 2, 4, 5], "fixed_budget": 20 },
//!   "replicates": 5,
//!   "output": "out"
//! }
//! ```

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::algorithms::{TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::model::ModelKind;

/// Synthetic data and frozen-base generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples: usize,
    /// Input dimension `d2`.
    pub features: usize,
    /// Classes, or output dimension `d1` for least squares.
    pub classes: usize,
    /// Logit noise (classification) or target noise (least squares).
    pub noise: f64,
    /// Cluster-center distance from the origin (classification only).
    pub separation: f64,
    /// Frobenius norm of the base's offset from the ground truth, relative to
    /// the ground truth's norm.
    pub base_shift: f64,
    /// Rank of that offset.
    pub base_shift_rank: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 800,
            features: 10,
            classes: 4,
            noise: 0.5,
            separation: 5.0,
            base_shift: 1.0,
            base_shift_rank: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme", deny_unknown_fields)]
pub enum PartitionConfig {
    Iid,
    /// `ratios[client][class]`; columns are rescaled to sum to one unless
    /// `normalize` is false.
    FixedRatio {
        ratios: Vec<Vec<f64>>,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    Dirichlet {
        alpha: f64,
    },
}

fn default_true() -> bool {
    true
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig::Dirichlet { alpha: 1.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TopologyConfig {
    #[default]
    Ring,
    ErdosRenyi {
        p_c: f64,
    },
    Complete,
    Exponential,
    /// A topology JSON file (`n`, `edges`, optional `weights`).
    Explicit {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "n")]
    Clients,
    #[serde(rename = "p_c")]
    EdgeProbability,
    #[serde(rename = "K")]
    LocalSteps,
    #[serde(rename = "T")]
    Rounds,
    #[serde(rename = "rank")]
    Rank,
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "quant_bits")]
    QuantBits,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Clients => "n",
            SweepAxis::EdgeProbability => "p_c",
            SweepAxis::LocalSteps => "K",
            SweepAxis::Rounds => "T",
            SweepAxis::Rank => "rank",
            SweepAxis::Alpha => "alpha",
            SweepAxis::QuantBits => "quant_bits",
        }
    }

    fn is_integral(self) -> bool {
        !matches!(self, SweepAxis::EdgeProbability | SweepAxis::Alpha)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Keeps `K * T` equal to this when sweeping `K` or `T`.
    #[serde(default)]
    pub fixed_budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelKind,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub topology: TopologyConfig,
    pub sweep: Option<SweepConfig>,
    /// Seeds `train.seed, train.seed + 1, ...`.
    pub replicates: usize,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelKind::MultinomialLogistic,
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            topology: TopologyConfig::default(),
            sweep: None,
            replicates: 1,
            output: PathBuf::from("out"),
        }
    }
}

/// One configuration of a sweep, with its axis value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: Option<(SweepAxis, f64)>,
    pub config: ExperimentConfig,
}

impl SweepPoint {
    /// Filename fragment such as `K-4`.
    pub fn tag(&self) -> Option<String> {
        self.label
            .map(|(axis, v)| format!("{}-{}", axis.name(), format_value(axis, v)))
    }
}

fn format_value(axis: SweepAxis, v: f64) -> String {
    if axis.is_integral() {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn as_count(axis: SweepAxis, v: f64) -> std::result::Result<usize, String> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(format!(
            "sweep.values: {axis} needs nonnegative integers, got {v}"
        ))
    }
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64)
            .map(|r| self.train.seed.wrapping_add(r))
            .collect()
    }

    /// `self` with one sweep value applied.
    pub fn with_axis_value(&self, axis: SweepAxis, v: f64) -> std::result::Result<Self, String> {
        let mut c = self.clone();
        c.sweep = None;
        let budget = self.sweep.as_ref().and_then(|s| s.fixed_budget);
        match axis {
            SweepAxis::Clients => c.train.n = as_count(axis, v)?,
            SweepAxis::EdgeProbability => match &mut c.topology {
                TopologyConfig::ErdosRenyi { p_c } => *p_c = v,
                _ => return Err("sweep.axis: p_c requires an erdos_renyi topology".into()),
            },
            SweepAxis::LocalSteps | SweepAxis::Rounds => {
                let count = as_count(axis, v)?;
                if axis == SweepAxis::LocalSteps {
                    c.train.local_steps = count;
                } else {
                    c.train.rounds = count;
                }
                if let Some(b) = budget {
                    if count == 0 || b % count != 0 {
                        return Err(format!(
                            "sweep.fixed_budget: {b} is not a multiple of {axis} = {count}"
                        ));
                    }
                    if axis == SweepAxis::LocalSteps {
                        c.train.rounds = b / count;
                    } else {
                        c.train.local_steps = b / count;
                    }
                }
            }
            SweepAxis::Rank => c.train.rank = as_count(axis, v)?,
            SweepAxis::Alpha => match &mut c.partition {
                PartitionConfig::Dirichlet { alpha } => *alpha = v,
                _ => return Err("sweep.axis: alpha requires a dirichlet partition".into()),
            },
            SweepAxis::QuantBits => c.train.quant_bits = Some(as_count(axis, v)? as u32),
        }
        Ok(c)
    }

    /// The configurations to run, one per sweep value (or just `self`).
    pub fn points(&self) -> std::result::Result<Vec<SweepPoint>, Vec<String>> {
        match &self.sweep {
            None => Ok(vec![SweepPoint {
                label: None,
                config: self.clone(),
            }]),
            Some(s) => {
                let mut errs = Vec::new();
                let mut points = Vec::new();
                for &v in &s.values {
                    match self.with_axis_value(s.axis, v) {
                        Ok(config) => points.push(SweepPoint {
                            label: Some((s.axis, v)),
                            config,
                        }),
                        Err(e) => errs.push(e),
                    }
                }
                if errs.is_empty() {
                    Ok(points)
                } else {
                    Err(errs)
                }
            }
        }
    }

    /// Every violated invariant of a single (non-sweep) configuration.
    fn point_violations(&self) -> Vec<String> {
        let mut errs = self.train.violations();
        let d = &self.data;
        if d.features == 0 {
            errs.push("data.features: must be at least 1".into());
        }
        if self.model == ModelKind::MultinomialLogistic && d.classes < 2 {
            errs.push("data.classes: classification needs at least 2 classes".into());
        }
        if d.classes == 0 {
            errs.push("data.classes: must be at least 1".into());
        }
        if d.samples < d.classes.max(self.train.n) {
            errs.push(format!(
                "data.samples: need at least max(classes, n) samples, got {}",
                d.samples
            ));
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            errs.push(format!("data.noise: must be nonnegative, got {}", d.noise));
        }
        if !(d.separation >= 0.0 && d.separation.is_finite()) {
            errs.push(format!(
                "data.separation: must be nonnegative, got {}",
                d.separation
            ));
        }
        if !(d.base_shift >= 0.0 && d.base_shift.is_finite()) {
            errs.push(format!(
                "data.base_shift: must be nonnegative, got {}",
                d.base_shift
            ));
        }
        if d.base_shift > 0.0 && d.base_shift_rank == 0 {
            errs.push("data.base_shift_rank: must be at least 1 when base_shift > 0".into());
        }

        match &self.partition {
            PartitionConfig::Iid => {}
            PartitionConfig::FixedRatio { ratios, .. } => {
                if self.model != ModelKind::MultinomialLogistic {
                    errs.push("partition: fixed_ratio needs class labels".into());
                }
                if ratios.len() != self.train.n {
                    errs.push(format!(
                        "partition.ratios: {} rows for n = {} clients",
                        ratios.len(),
                        self.train.n
                    ));
                }
                if ratios.iter().any(|r| r.len() != d.classes) {
                    errs.push(format!(
                        "partition.ratios: every row needs {} entries",
                        d.classes
                    ));
                }
                if ratios
                    .iter()
                    .flatten()
                    .any(|x| !(*x >= 0.0 && x.is_finite()))
                {
                    errs.push("partition.ratios: entries must be nonnegative".into());
                }
            }
            PartitionConfig::Dirichlet { alpha } => {
                if self.model != ModelKind::MultinomialLogistic {
                    errs.push("partition: dirichlet needs class labels".into());
                }
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    errs.push(format!("partition.alpha: must be positive, got {alpha}"));
                }
            }
        }

        let gossip = self.train.variant != Variant::Centralized;
        match &self.topology {
            TopologyConfig::Ring if gossip && self.train.n < 3 => {
                errs.push("topology: ring needs n ≥ 3".into());
            }
            TopologyConfig::ErdosRenyi { p_c } if !(*p_c > 0.0 && *p_c <= 1.0) => {
                errs.push(format!("topology.p_c: must be in (0, 1], got {p_c}"));
            }
            TopologyConfig::Explicit { path } if gossip && !path.is_file() => {
                errs.push(format!(
                    "topology.path: {} is not a readable file",
                    path.display()
                ));
            }
            _ => {}
        }
        errs
    }

    /// Checks this configuration and every sweep point, reporting all
    /// violations at once.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.replicates < 1 {
            errs.push("replicates: at least 1 required".into());
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                errs.push("sweep.values: must not be empty".into());
            }
            if s.fixed_budget.is_some()
                && !matches!(s.axis, SweepAxis::LocalSteps | SweepAxis::Rounds)
            {
                errs.push("sweep.fixed_budget: only applies to the K and T axes".into());
            }
        }
        match self.points() {
            Err(e) => errs.extend(e),
            Ok(points) => {
                for p in points {
                    let prefix = p.tag().map(|t| format!("[{t}] ")).unwrap_or_default();
                    for e in p.config.point_violations() {
                        let line = format!("{prefix}{e}");
                        if !errs.contains(&line) {
                            errs.push(line);
                        }
                    }
                }
            }
        }
        errs
    }
}

/// Parses and validates a JSON configuration, reporting all violations.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_str(raw).map_err(|e| Error::Config(vec![format!("parse: {e}")]))?;
    let errs = cfg.violations();
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::LearningRate;

    #[test]
    fn empty_document_uses_defaults() {
        let cfg = validate_config("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn zero_local_steps_is_reported() {
        let err = validate_config(r#"{"train": {"local_steps": 0}}"#).unwrap_err();
        assert!(err.to_string().contains("K ≥ 1 required"), "{err}");
    }

    #[test]
    fn errors_are_aggregated() {
        let raw = r#"{"train": {"local_steps": 0, "rank": 0},
                      "topology": {"kind": "erdos_renyi", "p_c": 1.5},
                      "replicates": 0}"#;
        let Error::Config(errs) = validate_config(raw).unwrap_err() else {
            panic!()
        };
        assert_eq!(errs.len(), 4, "{errs:?}");
        assert!(errs.iter().any(|e| e.starts_with("topology.p_c")));
    }

    #[test]
    fn unknown_topology_lists_options() {
        let err = validate_config(r#"{"topology": {"kind": "torus"}}"#)
            .unwrap_err()
            .to_string();
        for name in ["ring", "erdos_renyi", "complete", "exponential", "explicit"] {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn auto_eta_resolves() {
        let cfg = validate_config(r#"{"train": {"eta": "auto", "local_steps": 5, "rounds": 100}}"#)
            .unwrap();
        assert_eq!(cfg.train.eta, LearningRate::AUTO);
        assert_eq!(cfg.train.resolved_eta(), 0.02);
    }

    #[test]
    fn fixed_budget_sweep() {
        let cfg = validate_config(
            r#"{"sweep": {"axis": "K", "values": [1, 2, 4, 5], "fixed_budget": 20}}"#,
        )
        .unwrap();
        let pts = cfg.points().unwrap();
        let kt: Vec<(usize, usize)> = pts
            .iter()
            .map(|p| (p.config.train.local_steps, p.config.train.rounds))
            .collect();
        assert_eq!(kt, vec![(1, 20), (2, 10), (4, 5), (5, 4)]);
        assert_eq!(pts[2].tag().unwrap(), "K-4");

        let bad = r#"{"sweep": {"axis": "K", "values": [3], "fixed_budget": 20}}"#;
        assert!(validate_config(bad).is_err());
    }

    #[test]
    fn sweep_values_are_validated_per_axis() {
        let raw = r#"{"topology": {"kind": "erdos_renyi", "p_c": 0.5},
                      "sweep": {"axis": "p_c", "values": [0.2, 1.2]}}"#;
        let Error::Config(errs) = validate_config(raw).unwrap_err() else {
            panic!()
        };
        assert_eq!(errs.len(), 1);
        assert!(errs[0].starts_with("[p_c-1.2]"), "{errs:?}");
        assert!(validate_config(r#"{"sweep": {"axis": "n", "values": [2.5]}}"#).is_err());
    }
}
