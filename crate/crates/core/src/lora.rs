//! Dense-matrix model of a low-rank adapter and embedding-noise injection.
//!
//! The adapter computes `h = W0·x + B·(A·x)` with `W0` frozen and the update
//! `ΔW = B·A` of rank at most `r`. No `alpha / r` scaling is applied. Noise
//! injection adds `(alpha / sqrt(L·d))·ε` with `ε ~ Uniform[-1, 1]` to every
//! embedding entry.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64`, which is platform-independent.

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoraError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid noise spec: {0}")]
    InvalidNoise(String),
}

/// Row-major dense matrix of finite `f64`s.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LoraError> {
        if rows * cols != data.len() {
            return Err(LoraError::InvalidMatrix(format!(
                "{rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LoraError::InvalidMatrix("non-finite entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn from Uniform[-1, 1].
    pub fn random<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-1.0, 1.0).expect("valid bounds");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LoraError> {
        if x.len() != self.cols {
            return Err(LoraError::DimensionMismatch(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LoraError> {
        if self.cols != other.rows {
            return Err(LoraError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LoraError> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(LoraError::DimensionMismatch(format!(
                "{}x{} plus {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }
}

/// Frozen base weight `W0` (d×k) plus trainable factors `B` (d×r) and `A` (r×k).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    base: Matrix,
    b: Matrix,
    a: Matrix,
}

impl LowRankAdapter {
    pub fn new(base: Matrix, b: Matrix, a: Matrix) -> Result<Self, LoraError> {
        let (d, k, r) = (base.rows, base.cols, a.rows);
        if b.rows != d || b.cols != r || a.cols != k {
            return Err(LoraError::DimensionMismatch(format!(
                "W0 {d}x{k}, B {}x{}, A {}x{}",
                b.rows, b.cols, a.rows, a.cols
            )));
        }
        if r == 0 || r > d.min(k) {
            return Err(LoraError::DimensionMismatch(format!("rank {r} outside 1..={}", d.min(k))));
        }
        Ok(Self { base, b, a })
    }

    /// Standard initialisation: random `A`, zero `B`, so the adapter starts
    /// as the identity update.
    pub fn init<R: Rng>(base: Matrix, rank: usize, rng: &mut R) -> Result<Self, LoraError> {
        let (d, k) = (base.rows, base.cols);
        Self::new(base, Matrix::zeros(d, rank), Matrix::random(rank, k, rng))
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    /// Entries in `A` and `B`: `r·(d + k)`.
    pub fn trainable_params(&self) -> usize {
        self.rank() * (self.base.rows + self.base.cols)
    }

    /// Entries in `W0`: `d·k`.
    pub fn full_params(&self) -> usize {
        self.base.rows * self.base.cols
    }

    /// `W0·x + B·(A·x)`, without forming `B·A`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, LoraError> {
        let base = self.base.matvec(x)?;
        let update = self.b.matvec(&self.a.matvec(x)?)?;
        Ok(base.iter().zip(&update).map(|(h, u)| h + u).collect())
    }

    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("factors are conformable")
    }

    /// Folds the update into a new weight `W0 + B·A`; `W0` itself is untouched.
    pub fn merge(&self) -> Matrix {
        self.base.add(&self.delta()).expect("delta matches W0")
    }
}

pub fn lora_forward(adapter: &LowRankAdapter, x: &[f64]) -> Result<Vec<f64>, LoraError> {
    adapter.forward(x)
}

pub fn merge(adapter: &LowRankAdapter) -> Matrix {
    adapter.merge()
}

/// Noise for a `(batch, seq_len, dim)` embedding tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Base noise scale.
    pub alpha: f64,
    pub seq_len: usize,
    pub dim: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(alpha: f64, seq_len: usize, dim: usize, seed: u64) -> Result<Self, LoraError> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(LoraError::InvalidNoise(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        if seq_len == 0 || dim == 0 {
            return Err(LoraError::InvalidNoise("sequence length and dimension must be positive".into()));
        }
        Ok(Self {
            alpha,
            seq_len,
            dim,
            seed,
        })
    }

    /// `alpha / sqrt(L·d)`: the largest magnitude any noise entry can take.
    pub fn scale(&self) -> f64 {
        self.alpha / ((self.seq_len * self.dim) as f64).sqrt()
    }
}

/// Dense `(batch, seq_len, dim)` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub batch: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    pub fn zeros(batch: usize, seq_len: usize, dim: usize) -> Self {
        Self {
            batch,
            seq_len,
            dim,
            data: vec![0.0; batch * seq_len * dim],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.seq_len, self.dim)
    }
}

pub fn neftune_sample(spec: &NoiseSpec, batch: usize) -> Embeddings {
    let scale = spec.scale();
    let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid bounds");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = batch * spec.seq_len * spec.dim;
    Embeddings {
        batch,
        seq_len: spec.seq_len,
        dim: spec.dim,
        data: (0..n).map(|_| scale * unit.sample(&mut rng)).collect(),
    }
}

pub fn neftune_inject(x: &Embeddings, spec: &NoiseSpec) -> Result<Embeddings, LoraError> {
    if x.seq_len != spec.seq_len || x.dim != spec.dim || x.data.len() != x.batch * x.seq_len * x.dim {
        return Err(LoraError::ShapeMismatch {
            expected: (x.batch, spec.seq_len, spec.dim),
            actual: x.shape(),
        });
    }
    let noise = neftune_sample(spec, x.batch);
    Ok(Embeddings {
        data: x.data.iter().zip(&noise.data).map(|(a, n)| a + n).collect(),
        ..x.clone()
    })
}

/// Fine-tuning hyperparameters carried as metadata in build reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub scheduler: String,
    pub warmup_ratio: f64,
    pub rank: u32,
}

pub const SUPPORTED_RANKS: [u32; 3] = [8, 16, 32];

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 1e-4,
            scheduler: "cosine".into(),
            warmup_ratio: 0.1,
            rank: 32,
        }
    }
}

impl TrainConfig {
    pub fn with_rank(rank: u32) -> Result<Self, LoraError> {
        if !SUPPORTED_RANKS.contains(&rank) {
            return Err(LoraError::InvalidMatrix(format!("rank {rank} not in {SUPPORTED_RANKS:?}")));
        }
        Ok(Self {
            rank,
            ..Self::default()
        })
    }
}

/// Euclidean relative difference `|a - b| / |b|` (absolute when `b` is zero).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceSummary {
    pub adapters: usize,
    pub inputs_per_adapter: usize,
    pub max_relative_error: f64,
    pub zero_b_bitwise_equal: bool,
    pub base_unchanged: bool,
}

/// Compares the factored and merged paths on random adapters with
/// `d, k` in `1..=max_dim` and `r` in `1..=min(max_rank, d, k)`.
pub fn check_equivalence(adapters: usize, inputs: usize, max_dim: usize, max_rank: usize, seed: u64) -> EquivalenceSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut zero_b_ok = true;
    let mut base_ok = true;
    for _ in 0..adapters {
        let d = rng.random_range(1..=max_dim);
        let k = rng.random_range(1..=max_dim);
        let r = rng.random_range(1..=max_rank.min(d).min(k));
        let base = Matrix::random(d, k, &mut rng);
        let adapter = LowRankAdapter::new(base.clone(), Matrix::random(d, r, &mut rng), Matrix::random(r, k, &mut rng))
            .expect("conformable by construction");
        let frozen = LowRankAdapter::new(base.clone(), Matrix::zeros(d, r), adapter.a().clone()).expect("conformable");
        let merged = adapter.merge();
        for _ in 0..inputs {
            let x: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let factored = adapter.forward(&x).expect("length k");
            let via_merge = merged.matvec(&x).expect("length k");
            worst = worst.max(relative_error(&factored, &via_merge));

            let plain = base.matvec(&x).expect("length k");
            let with_zero_b = frozen.forward(&x).expect("length k");
            zero_b_ok &= plain.iter().zip(&with_zero_b).all(|(a, b)| a.to_bits() == b.to_bits());
        }
        base_ok &= adapter.base() == &base;
    }
    EquivalenceSummary {
        adapters,
        inputs_per_adapter: inputs,
        max_relative_error: worst,
        zero_b_bitwise_equal: zero_b_ok,
        base_unchanged: base_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_b_is_base_forward() {
        let mut rng = seeded();
        let base = Matrix::random(5, 4, &mut rng);
        let adapter = LowRankAdapter::init(base.clone(), 2, &mut rng).unwrap();
        let x = [0.3, -1.0, 0.25, 2.0];
        assert_eq!(adapter.forward(&x).unwrap(), base.matvec(&x).unwrap());
        assert_eq!(adapter.merge(), base);
    }

    #[test]
    fn identity_factors() {
        let n = 3;
        let adapter = LowRankAdapter::new(Matrix::zeros(n, n), Matrix::identity(n), Matrix::identity(n)).unwrap();
        let x = [1.5, -2.0, 0.125];
        assert_eq!(adapter.forward(&x).unwrap(), x.to_vec());

        let base = Matrix::from_vec(3, 3, (0..9).map(f64::from).collect()).unwrap();
        let adapter = LowRankAdapter::new(base.clone(), Matrix::identity(n), Matrix::identity(n)).unwrap();
        assert_eq!(adapter.merge(), base.add(&Matrix::identity(n)).unwrap());
    }

    #[test]
    fn factored_matches_merged_small() {
        let mut rng = seeded();
        let adapter = LowRankAdapter::new(
            Matrix::random(8, 6, &mut rng),
            Matrix::random(8, 2, &mut rng),
            Matrix::random(2, 6, &mut rng),
        )
        .unwrap();
        let x: Vec<f64> = (0..6).map(|i| f64::from(i) - 2.5).collect();
        let err = relative_error(&adapter.forward(&x).unwrap(), &adapter.merge().matvec(&x).unwrap());
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn merged_16x12_rank4_over_100_inputs() {
        let mut rng = seeded();
        let adapter = LowRankAdapter::new(
            Matrix::random(16, 12, &mut rng),
            Matrix::random(16, 4, &mut rng),
            Matrix::random(4, 12, &mut rng),
        )
        .unwrap();
        let merged = adapter.merge();
        for _ in 0..100 {
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..=1.0)).collect();
            assert!(relative_error(&adapter.forward(&x).unwrap(), &merged.matvec(&x).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn dimension_errors() {
        assert!(LowRankAdapter::new(Matrix::zeros(4, 3), Matrix::zeros(4, 2), Matrix::zeros(2, 4)).is_err());
        assert!(LowRankAdapter::new(Matrix::zeros(2, 3), Matrix::zeros(2, 3), Matrix::zeros(3, 3)).is_err());
        let ok = LowRankAdapter::new(Matrix::zeros(4, 3), Matrix::zeros(4, 1), Matrix::zeros(1, 3)).unwrap();
        assert!(matches!(ok.forward(&[1.0]), Err(LoraError::DimensionMismatch(_))));
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn parameter_counts() {
        let a = LowRankAdapter::new(Matrix::zeros(64, 48), Matrix::zeros(64, 8), Matrix::zeros(8, 48)).unwrap();
        assert_eq!(a.trainable_params(), 8 * (64 + 48));
        assert_eq!(a.full_params(), 64 * 48);
        assert!(a.trainable_params() < a.full_params());
    }

    #[test]
    fn noise_scale_and_bounds() {
        let spec = NoiseSpec::new(5.0, 100, 64, 1).unwrap();
        assert_eq!(spec.scale(), 0.0625);
        let noise = neftune_sample(&spec, 2);
        assert_eq!(noise.shape(), (2, 100, 64));
        assert!(noise.data.iter().all(|v| v.abs() <= 0.0625));
        assert_eq!(noise, neftune_sample(&spec, 2));
        assert_ne!(noise, neftune_sample(&NoiseSpec { seed: 2, ..spec }, 2));
    }

    #[test]
    fn zero_alpha_is_noiseless() {
        let spec = NoiseSpec::new(0.0, 4, 3, 9).unwrap();
        assert!(neftune_sample(&spec, 2).data.iter().all(|&v| v == 0.0));
        let x = Embeddings::zeros(2, 4, 3);
        assert_eq!(neftune_inject(&x, &spec).unwrap().data, x.data);
    }

    #[test]
    fn inject_shape_mismatch() {
        let spec = NoiseSpec::new(1.0, 4, 3, 0).unwrap();
        let x = Embeddings::zeros(1, 5, 3);
        assert!(matches!(neftune_inject(&x, &spec), Err(LoraError::ShapeMismatch { .. })));
        assert!(NoiseSpec::new(-1.0, 4, 3, 0).is_err());
        assert!(NoiseSpec::new(1.0, 0, 3, 0).is_err());
    }

    #[test]
    fn train_config_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.learning_rate, c.scheduler.as_str(), c.warmup_ratio), (3, 1e-4, "cosine", 0.1));
        assert_eq!(TrainConfig::with_rank(8).unwrap().rank, 8);
        assert!(TrainConfig::with_rank(4).is_err());
    }
}
