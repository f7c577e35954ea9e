//! LoRA-parameterized linear predictors with exact gradients, and symmetric
//! uniform quantization of the frozen base weight.
//!
//! The effective weight is `W = W0 + B A` with `A: r x d2`, `B: d1 x r`.
//! Gradients are computed with respect to `W` and pulled back through the
//! factorization: `dA = B^T dW`, `dB = dW A^T`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataBatch, Targets};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, matmul, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `(1/2m) sum |W x - y|^2`
    LeastSquares,
    /// Mean softmax cross-entropy of `W x`.
    MultinomialLogistic,
}

/// Shape and loss of the predictor; `d1` outputs (classes), `d2` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub d1: usize,
    pub d2: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, d1: usize, d2: usize) -> Result<Self> {
        if d1 == 0 || d2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive, got d1={d1}, d2={d2}"
            )));
        }
        Ok(Self { kind, d1, d2 })
    }

    fn check_weight(&self, w: &DenseMatrix) -> Result<()> {
        if w.shape() != (self.d1, self.d2) {
            return Err(Error::DimensionMismatch {
                op: "model weight",
                left_rows: w.rows(),
                left_cols: w.cols(),
                right_rows: self.d1,
                right_cols: self.d2,
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &DataBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if batch.feature_dim() != self.d2 {
            return Err(Error::DimensionMismatch {
                op: "batch features",
                left_rows: batch.len(),
                left_cols: batch.feature_dim(),
                right_rows: batch.len(),
                right_cols: self.d2,
            });
        }
        match (self.kind, &batch.targets) {
            (ModelKind::MultinomialLogistic, Targets::Classes(labels)) => {
                if let Some(l) = labels.iter().find(|&&l| l >= self.d1) {
                    return Err(Error::InvalidData(format!(
                        "label {l} out of range for {} classes",
                        self.d1
                    )));
                }
            }
            (ModelKind::LeastSquares, Targets::Values(y)) => {
                if y.cols() != self.d1 {
                    return Err(Error::DimensionMismatch {
                        op: "regression targets",
                        left_rows: y.rows(),
                        left_cols: y.cols(),
                        right_rows: y.rows(),
                        right_cols: self.d1,
                    });
                }
            }
            (kind, _) => {
                return Err(Error::InvalidData(format!(
                    "{kind:?} model given the wrong kind of targets"
                )))
            }
        }
        Ok(())
    }
}

/// Default standard deviation of the initial `A` factor: `1/sqrt(d2)`.
pub fn default_init_sigma(d2: usize) -> f64 {
    1.0 / (d2 as f64).sqrt()
}

/// Frozen base plus trainable low-rank factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    w0: Arc<DenseMatrix>,
    a: DenseMatrix,
    b: DenseMatrix,
}

impl LoraLayer {
    pub fn new(w0: Arc<DenseMatrix>, a: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        let (d1, d2) = w0.shape();
        let r = a.rows();
        if a.cols() != d2 || b.shape() != (d1, r) {
            return Err(Error::InvalidData(format!(
                "LoRA shapes disagree: w0 {d1}x{d2}, a {}x{}, b {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(Self { w0, a, b })
    }

    /// Standard initialization: `A ~ N(0, sigma^2)`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(
        w0: Arc<DenseMatrix>,
        rank: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument(
                "LoRA rank must be at least 1".into(),
            ));
        }
        let (d1, d2) = w0.shape();
        let a = gaussian_matrix(rank, d2, sigma, rng)?;
        Ok(Self {
            w0,
            a,
            b: DenseMatrix::zeros(d1, rank),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn w0(&self) -> &Arc<DenseMatrix> {
        &self.w0
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    /// Replaces both factors, keeping the shared base.
    pub fn with_factors(&self, a: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        Self::new(Arc::clone(&self.w0), a, b)
    }

    /// `W0 + B A`.
    pub fn effective_weight(&self) -> Result<DenseMatrix> {
        self.w0.add(&matmul(&self.b, &self.a)?)
    }
}

/// Gradients of the loss with respect to `A`, `B` and the effective weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub grad_a: DenseMatrix,
    pub grad_b: DenseMatrix,
    pub grad_w: DenseMatrix,
}

/// `X W^T`: one row of outputs per sample.
fn outputs(w: &DenseMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    matmul(x, &w.transpose())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Loss and its gradient with respect to a full weight matrix `w`.
pub fn loss_and_grad_at(
    spec: &ModelSpec,
    w: &DenseMatrix,
    batch: &DataBatch,
) -> Result<(f64, DenseMatrix)> {
    spec.check_weight(w)?;
    spec.check_batch(batch)?;
    let m = batch.len() as f64;
    let z = outputs(w, &batch.features)?;
    let (loss, residual) = match &batch.targets {
        Targets::Values(y) => {
            let r = z.sub(y)?;
            (r.frobenius_norm_sq() / (2.0 * m), r)
        }
        Targets::Classes(labels) => {
            let mut total = 0.0;
            let mut g = Vec::with_capacity(z.rows() * z.cols());
            for (i, &label) in labels.iter().enumerate() {
                let row = z.row(i);
                let lse = log_sum_exp(row);
                total += lse - row[label];
                g.extend(row.iter().enumerate().map(|(c, v)| {
                    let p = (v - lse).exp();
                    if c == label {
                        p - 1.0
                    } else {
                        p
                    }
                }));
            }
            (total / m, DenseMatrix::new(z.rows(), z.cols(), g)?)
        }
    };
    let grad_w = matmul(&residual.transpose(), &batch.features)?.scale(1.0 / m)?;
    Ok((loss, grad_w))
}

/// Loss at a full weight matrix.
pub fn loss_at(spec: &ModelSpec, w: &DenseMatrix, batch: &DataBatch) -> Result<f64> {
    loss_and_grad_at(spec, w, batch).map(|(l, _)| l)
}

/// Fraction of samples whose arg-max output equals the label. `None` for
/// regression targets.
pub fn accuracy_at(w: &DenseMatrix, batch: &DataBatch) -> Result<Option<f64>> {
    let Targets::Classes(labels) = &batch.targets else {
        return Ok(None);
    };
    let z = outputs(w, &batch.features)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let row = z.row(*i);
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc },
                );
            best.0 == label
        })
        .count();
    Ok(Some(correct as f64 / labels.len() as f64))
}

pub fn loss(spec: &ModelSpec, layer: &LoraLayer, batch: &DataBatch) -> Result<f64> {
    loss_at(spec, &layer.effective_weight()?, batch)
}

/// Pulls a weight-space gradient back to the factors.
pub fn chain_rule(layer: &LoraLayer, grad_w: DenseMatrix) -> Result<GradPair> {
    let grad_a = matmul(&layer.b.transpose(), &grad_w)?;
    let grad_b = matmul(&grad_w, &layer.a.transpose())?;
    Ok(GradPair {
        grad_a,
        grad_b,
        grad_w,
    })
}

pub fn gradient(spec: &ModelSpec, layer: &LoraLayer, batch: &DataBatch) -> Result<GradPair> {
    let (_, grad_w) = loss_and_grad_at(spec, &layer.effective_weight()?, batch)?;
    chain_rule(layer, grad_w)
}

/// Symmetric per-matrix uniform quantization to `bits` bits, returned
/// dequantized. Levels are `max|w0| * (2k - L) / L` for `k = 0..=L`,
/// `L = 2^bits - 1`.
pub fn quantize_base(w0: &DenseMatrix, bits: u32) -> Result<DenseMatrix> {
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "quantization bits must be in 2..=8, got {bits}"
        )));
    }
    let max = w0.max_abs();
    if max == 0.0 {
        return Ok(w0.clone());
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let level = |k: f64| max * (2.0 * k - levels) / levels;
    let data = w0
        .as_slice()
        .iter()
        .map(|&x| {
            let k = ((x / max + 1.0) * levels / 2.0).round().clamp(0.0, levels);
            // Pick the closer neighbor when rounding landed on a near-tie.
            [k - 1.0, k, k + 1.0]
                .into_iter()
                .filter(|c| (0.0..=levels).contains(c))
                .map(level)
                .min_by(|a, b| (a - x).abs().total_cmp(&(b - x).abs()))
                .expect("k itself is always a candidate")
        })
        .collect();
    DenseMatrix::new(w0.rows(), w0.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(rng: &mut ChaCha8Rng, d1: usize, d2: usize, r: usize) -> LoraLayer {
        let w0 = Arc::new(gaussian_matrix(d1, d2, 0.5, rng).unwrap());
        let a = gaussian_matrix(r, d2, 0.7, rng).unwrap();
        let b = gaussian_matrix(d1, r, 0.7, rng).unwrap();
        LoraLayer::new(w0, a, b).unwrap()
    }

    fn random_batch(
        rng: &mut ChaCha8Rng,
        kind: ModelKind,
        m: usize,
        d1: usize,
        d2: usize,
    ) -> DataBatch {
        let x = gaussian_matrix(m, d2, 1.0, rng).unwrap();
        let targets = match kind {
            ModelKind::LeastSquares => Targets::Values(gaussian_matrix(m, d1, 1.0, rng).unwrap()),
            ModelKind::MultinomialLogistic => {
                Targets::Classes((0..m).map(|_| rng.random_range(0..d1)).collect())
            }
        };
        DataBatch::new(x, targets).unwrap()
    }

    /// Per-sample loss written independently of the batched kernel.
    fn naive_loss(spec: &ModelSpec, w: &DenseMatrix, batch: &DataBatch) -> f64 {
        let m = batch.len();
        let mut total = 0.0;
        for i in 0..m {
            let x = batch.features.row(i);
            let z: Vec<f64> = (0..spec.d1)
                .map(|c| (0..spec.d2).map(|j| w.get(c, j) * x[j]).sum())
                .collect();
            total += match &batch.targets {
                Targets::Values(y) => {
                    0.5 * z
                        .iter()
                        .zip(y.row(i))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                }
                Targets::Classes(l) => {
                    let denom: f64 = z.iter().map(|v| v.exp()).sum();
                    -(z[l[i]].exp() / denom).ln()
                }
            };
        }
        total / m as f64
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let w = DenseMatrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let x = DenseMatrix::from_rows(&[[1.0, 0.0], [0.3, 0.7], [-1.0, 2.0]]);
        let y = matmul(&x, &w.transpose()).unwrap();
        let batch = DataBatch::new(x, Targets::Values(y)).unwrap();
        let spec = ModelSpec::new(ModelKind::LeastSquares, 2, 2).unwrap();
        let layer = LoraLayer::new(
            Arc::new(w),
            DenseMatrix::zeros(1, 2),
            DenseMatrix::zeros(2, 1),
        )
        .unwrap();
        assert_eq!(loss(&spec, &layer, &batch).unwrap(), 0.0);
    }

    #[test]
    fn uniform_softmax_loss_is_log_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ModelSpec::new(ModelKind::MultinomialLogistic, 5, 3).unwrap();
        let batch = random_batch(&mut rng, ModelKind::MultinomialLogistic, 7, 5, 3);
        let layer = LoraLayer::init(Arc::new(DenseMatrix::zeros(5, 3)), 2, 1.0, &mut rng).unwrap();
        assert!((loss(&spec, &layer, &batch).unwrap() - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [ModelKind::LeastSquares, ModelKind::MultinomialLogistic] {
            let spec = ModelSpec::new(kind, 3, 4).unwrap();
            let layer = random_layer(&mut rng, 3, 4, 2);
            let batch = random_batch(&mut rng, kind, 4, 3, 4);
            let w = layer.effective_weight().unwrap();
            let got = loss(&spec, &layer, &batch).unwrap();
            assert!((got - naive_loss(&spec, &w, &batch)).abs() <= 1e-12 * (1.0 + got));
        }
    }

    #[test]
    fn zero_b_gives_zero_grad_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ModelSpec::new(ModelKind::MultinomialLogistic, 3, 4).unwrap();
        let layer = LoraLayer::init(
            Arc::new(gaussian_matrix(3, 4, 1.0, &mut rng).unwrap()),
            2,
            0.5,
            &mut rng,
        )
        .unwrap();
        let batch = random_batch(&mut rng, ModelKind::MultinomialLogistic, 6, 3, 4);
        let g = gradient(&spec, &layer, &batch).unwrap();
        assert!(g.grad_a.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.grad_b.frobenius_norm() > 0.0);
    }

    #[test]
    fn scalar_least_squares_gradient() {
        let spec = ModelSpec::new(ModelKind::LeastSquares, 1, 1).unwrap();
        let layer = LoraLayer::new(
            Arc::new(DenseMatrix::zeros(1, 1)),
            DenseMatrix::from_rows(&[[1.0]]),
            DenseMatrix::from_rows(&[[1.0]]),
        )
        .unwrap();
        let batch = DataBatch::new(
            DenseMatrix::from_rows(&[[1.0]]),
            Targets::Values(DenseMatrix::from_rows(&[[0.0]])),
        )
        .unwrap();
        let g = gradient(&spec, &layer, &batch).unwrap();
        assert_eq!(g.grad_w.as_slice(), &[1.0]);
        assert_eq!(g.grad_a.as_slice(), &[1.0]);
        assert_eq!(g.grad_b.as_slice(), &[1.0]);
        assert_eq!(loss(&spec, &layer, &batch).unwrap(), 0.5);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for trial in 0..20 {
            let kind = if trial % 2 == 0 {
                ModelKind::LeastSquares
            } else {
                ModelKind::MultinomialLogistic
            };
            let spec = ModelSpec::new(kind, 3, 5).unwrap();
            let layer = random_layer(&mut rng, 3, 5, 2);
            let batch = random_batch(&mut rng, kind, 6, 3, 5);
            let g = gradient(&spec, &layer, &batch).unwrap();
            let mut fd_a = DenseMatrix::zeros(2, 5);
            for i in 0..2 {
                for j in 0..5 {
                    let bump = |delta: f64| {
                        let mut a = layer.a().clone();
                        a.set(i, j, a.get(i, j) + delta);
                        loss(
                            &spec,
                            &layer.with_factors(a, layer.b().clone()).unwrap(),
                            &batch,
                        )
                        .unwrap()
                    };
                    fd_a.set(i, j, (bump(h) - bump(-h)) / (2.0 * h));
                }
            }
            let rel = fd_a.sub(&g.grad_a).unwrap().frobenius_norm()
                / g.grad_a.frobenius_norm().max(1e-12);
            assert!(rel < 1e-5, "trial {trial}: rel {rel}");
        }
    }

    #[test]
    fn rejects_mismatched_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ModelSpec::new(ModelKind::MultinomialLogistic, 3, 4).unwrap();
        let layer = random_layer(&mut rng, 3, 4, 1);
        let wrong_dim = random_batch(&mut rng, ModelKind::MultinomialLogistic, 3, 3, 5);
        assert!(loss(&spec, &layer, &wrong_dim).is_err());
        let wrong_kind = random_batch(&mut rng, ModelKind::LeastSquares, 3, 3, 4);
        assert!(gradient(&spec, &layer, &wrong_kind).is_err());
        let bad_label =
            DataBatch::new(DenseMatrix::zeros(1, 4), Targets::Classes(vec![3])).unwrap();
        assert!(loss(&spec, &layer, &bad_label).is_err());
    }

    #[test]
    fn factorization_gauge_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = ModelSpec::new(ModelKind::MultinomialLogistic, 3, 4).unwrap();
        let layer = random_layer(&mut rng, 3, 4, 2);
        let batch = random_batch(&mut rng, ModelKind::MultinomialLogistic, 8, 3, 4);
        let s = DenseMatrix::from_rows(&[[2.0, 1.0], [0.0, 0.5]]);
        let s_inv = DenseMatrix::from_rows(&[[0.5, -1.0], [0.0, 2.0]]);
        assert!(
            matmul(&s, &s_inv)
                .unwrap()
                .max_abs_diff(&DenseMatrix::identity(2))
                .unwrap()
                == 0.0
        );
        let moved = layer
            .with_factors(
                matmul(&s_inv, layer.a()).unwrap(),
                matmul(layer.b(), &s).unwrap(),
            )
            .unwrap();
        let l0 = loss(&spec, &layer, &batch).unwrap();
        let l1 = loss(&spec, &moved, &batch).unwrap();
        assert!((l0 - l1).abs() < 1e-10);
    }

    #[test]
    fn quantization_examples() {
        let w = DenseMatrix::from_rows(&[[-1.0, 1.0]]);
        assert_eq!(quantize_base(&w, 2).unwrap(), w);
        let on_grid = DenseMatrix::from_rows(&[[-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]]);
        assert_eq!(quantize_base(&on_grid, 2).unwrap(), on_grid);
        assert_eq!(
            quantize_base(&DenseMatrix::zeros(2, 2), 4).unwrap(),
            DenseMatrix::zeros(2, 2)
        );
        assert!(quantize_base(&w, 1).is_err());
        assert!(quantize_base(&w, 9).is_err());
        let q = quantize_base(&DenseMatrix::from_rows(&[[0.1, -0.52, 0.9, -1.3]]), 4).unwrap();
        let distinct: std::collections::BTreeSet<u64> =
            q.as_slice().iter().map(|x| x.to_bits()).collect();
        assert_eq!(distinct.len(), 4);
    }

    proptest! {
        #[test]
        fn quantization_error_is_within_half_step(
            data in proptest::collection::vec(-5.0f64..5.0, 12),
            bits in 2u32..=8,
        ) {
            let w = DenseMatrix::new(3, 4, data).unwrap();
            let q = quantize_base(&w, bits).unwrap();
            let bound = w.max_abs() / ((1u32 << bits) - 1) as f64;
            prop_assert!(q.max_abs_diff(&w).unwrap() <= bound);
        }
    }
}
