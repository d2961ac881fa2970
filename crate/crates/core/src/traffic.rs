//! Coflow demand: traffic matrices, flow-size distributions, arrival
//! sampling and clearance time.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Discrete time index.
pub type Slot = u64;

#[derive(Debug, Error, PartialEq)]
pub enum TrafficError {
    #[error("matrix must be square with n >= 1 (got {rows} rows, row {bad_row} has {bad_len} entries)")]
    NotSquare {
        rows: usize,
        bad_row: usize,
        bad_len: usize,
    },
    #[error("matrix dimension must be at least 1")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid flow-size distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid coflow model: {0}")]
    InvalidModel(String),
    #[error("coflow {id} has no remaining packet at ({i}, {j})")]
    NothingToServe { id: CoflowId, i: usize, j: usize },
}

/// N x N matrix of packet counts; entry (i, j) holds packets from input i to
/// output j.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TrafficMatrix {
    n: usize,
    counts: Vec<u32>,
}

impl TrafficMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1, "traffic matrix needs at least one port");
        TrafficMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R]) -> Result<Self, TrafficError> {
        let n = rows.len();
        if n == 0 {
            return Err(TrafficError::Empty);
        }
        let mut counts = Vec::with_capacity(n * n);
        for (r, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n {
                return Err(TrafficError::NotSquare {
                    rows: n,
                    bad_row: r,
                    bad_len: row.len(),
                });
            }
            counts.extend_from_slice(row);
        }
        Ok(TrafficMatrix { n, counts })
    }

    pub fn diagonal(values: &[u32]) -> Self {
        let mut m = TrafficMatrix::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: u32) {
        self.counts[i * self.n + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: u32) {
        self.counts[i * self.n + j] += v;
    }

    /// Decrements entry (i, j); returns false (and leaves the matrix
    /// untouched) when the entry is already zero.
    #[inline]
    pub fn decrement(&mut self, i: usize, j: usize) -> bool {
        let c = &mut self.counts[i * self.n + j];
        if *c == 0 {
            false
        } else {
            *c -= 1;
            true
        }
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.counts[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.counts
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.n)
            .map(|i| self.row(i).iter().map(|&c| c as u64).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let mut sums = vec![0u64; self.n];
        for row in self.counts.chunks_exact(self.n) {
            for (s, &c) in sums.iter_mut().zip(row) {
                *s += c as u64;
            }
        }
        sums
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn max_entry(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Iterates over `(i, j, count)` for every positive entry in row-major order.
    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        let n = self.n;
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(move |(k, &c)| (k / n, k % n, c))
    }

    pub fn add_assign(&mut self, other: &TrafficMatrix) -> Result<(), TrafficError> {
        if other.n != self.n {
            return Err(TrafficError::DimensionMismatch {
                expected: self.n,
                found: other.n,
            });
        }
        for (a, &b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// True iff every entry of `self` is at most the matching entry of `other`.
    pub fn le_entrywise(&self, other: &TrafficMatrix) -> bool {
        self.n == other.n && self.counts.iter().zip(&other.counts).all(|(a, b)| a <= b)
    }

    /// Applies the same permutation to rows and columns:
    /// `out[perm[i]][perm[j]] = self[i][j]`.
    pub fn permuted(&self, perm: &[usize]) -> TrafficMatrix {
        assert_eq!(perm.len(), self.n);
        let mut out = TrafficMatrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.set(perm[i], perm[j], self.get(i, j));
            }
        }
        out
    }

    pub fn clearance_time(&self) -> u64 {
        clearance_time(self)
    }
}

impl fmt::Debug for TrafficMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[u32]> = (0..self.n).map(|i| self.row(i)).collect();
        f.debug_struct("TrafficMatrix")
            .field("n", &self.n)
            .field("rows", &rows)
            .finish()
    }
}

/// Largest row or column sum: the minimum number of slots needed to move
/// every packet of `x` through the crossbar.
pub fn clearance_time(x: &TrafficMatrix) -> u64 {
    let rows = x.row_sums().into_iter().max().unwrap_or(0);
    let cols = x.col_sums().into_iter().max().unwrap_or(0);
    rows.max(cols)
}

/// Entrywise sum of the coflows' demand matrices.
pub fn aggregate<'a, I>(n: usize, demands: I) -> Result<TrafficMatrix, TrafficError>
where
    I: IntoIterator<Item = &'a TrafficMatrix>,
{
    let mut acc = TrafficMatrix::zeros(n);
    for d in demands {
        acc.add_assign(d)?;
    }
    Ok(acc)
}

/// Distribution of a single entry X_ij.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowSizeDistribution {
    Deterministic { value: u32 },
    /// Supported on {0, 1, 2, ...} with P[X = k] = (1 - p) p^k, p = mean / (mean + 1).
    Geometric { mean: f64 },
    /// P[X >= k] = k^-(1 + epsilon) for integer k >= 1.
    PowerLaw { epsilon: f64 },
    Zero,
}

impl FlowSizeDistribution {
    pub fn validate(&self) -> Result<(), TrafficError> {
        match *self {
            FlowSizeDistribution::Geometric { mean } if !(mean > 0.0 && mean.is_finite()) => Err(
                TrafficError::InvalidDistribution(format!("geometric mean must be > 0, got {mean}")),
            ),
            FlowSizeDistribution::PowerLaw { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => {
                Err(TrafficError::InvalidDistribution(format!(
                    "power-law epsilon must be > 0, got {epsilon}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Success parameter p of the geometric law, if this is one.
    pub fn geometric_p(&self) -> Option<f64> {
        match *self {
            FlowSizeDistribution::Geometric { mean } => Some(mean / (mean + 1.0)),
            _ => None,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            FlowSizeDistribution::Deterministic { value } => value as f64,
            FlowSizeDistribution::Geometric { mean } => mean,
            // E[X] = sum_k P[X >= k] = zeta(1 + epsilon)
            FlowSizeDistribution::PowerLaw { epsilon } => zeta(1.0 + epsilon),
            FlowSizeDistribution::Zero => 0.0,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            FlowSizeDistribution::Deterministic { .. } | FlowSizeDistribution::Zero => 0.0,
            FlowSizeDistribution::Geometric { mean } => mean * (1.0 + mean),
            FlowSizeDistribution::PowerLaw { epsilon } => {
                if epsilon <= 1.0 {
                    f64::INFINITY
                } else {
                    // E[X^2] = sum_k (2k - 1) k^-(1+eps)
                    let m = zeta(1.0 + epsilon);
                    2.0 * zeta(epsilon) - m - m * m
                }
            }
        }
    }

    /// MGF E[e^{sX}] where finite; `None` outside its domain.
    pub fn mgf(&self, s: f64) -> Option<f64> {
        match *self {
            FlowSizeDistribution::Deterministic { value } => Some((s * value as f64).exp()),
            FlowSizeDistribution::Zero => Some(1.0),
            FlowSizeDistribution::Geometric { .. } => {
                let p = self.geometric_p().unwrap();
                let denom = 1.0 - p * s.exp();
                (denom > 0.0).then(|| (1.0 - p) / denom)
            }
            FlowSizeDistribution::PowerLaw { .. } => (s == 0.0).then_some(1.0),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match *self {
            FlowSizeDistribution::Deterministic { value } => value,
            FlowSizeDistribution::Zero => 0,
            FlowSizeDistribution::Geometric { .. } => {
                sample_geometric(self.geometric_p().unwrap(), rng)
            }
            FlowSizeDistribution::PowerLaw { epsilon } => {
                // U in (0, 1]; floor(U^{-1/(1+eps)}) has P[X >= k] = k^{-(1+eps)}.
                let u = 1.0 - rng.random::<f64>();
                let x = u.powf(-1.0 / (1.0 + epsilon)).floor();
                if x >= u32::MAX as f64 {
                    u32::MAX
                } else {
                    x as u32
                }
            }
        }
    }
}

/// Samples k >= 0 with P[k] = (1 - p) p^k by inversion.
pub fn sample_geometric<R: Rng + ?Sized>(p: f64, rng: &mut R) -> u32 {
    if p <= 0.0 {
        return 0;
    }
    let u = 1.0 - rng.random::<f64>();
    let k = (u.ln() / p.ln()).floor();
    if k >= u32::MAX as f64 {
        u32::MAX
    } else {
        k as u32
    }
}

pub fn sample_flow_size<R: Rng + ?Sized>(dist: &FlowSizeDistribution, rng: &mut R) -> u32 {
    dist.sample(rng)
}

fn zeta(s: f64) -> f64 {
    // Direct sum plus Euler-Maclaurin tail; accurate to ~1e-12 for s > 1.
    let cutoff = 1000.0_f64;
    let mut sum = 0.0;
    for k in 1..1000 {
        sum += (k as f64).powf(-s);
    }
    sum + cutoff.powf(1.0 - s) / (s - 1.0) + 0.5 * cutoff.powf(-s) + s / 12.0 * cutoff.powf(-s - 1.0)
}

/// Where the nonzero entries of a coflow sit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    /// Every (i, j) drawn i.i.d. from the model's flow distribution.
    UniformDense,
    /// Only X_ii is nonzero.
    Diagonal,
    /// Geometric entries with per-entry means (row-major, n * n values).
    NonUniform { means: Vec<f64> },
}

/// Stochastic description of coflow arrivals: Poisson(lambda) coflows per
/// slot, each with an independently drawn demand matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoflowModel {
    pub n: usize,
    pub lambda: f64,
    pub placement: Placement,
    /// Per-entry distribution (ignored for `NonUniform`).
    pub flow: FlowSizeDistribution,
}

impl CoflowModel {
    /// Uniform traffic with geometric entries of mean beta / n.
    pub fn uniform_geometric(n: usize, lambda: f64, beta: f64) -> Self {
        CoflowModel {
            n,
            lambda,
            placement: Placement::UniformDense,
            flow: FlowSizeDistribution::Geometric {
                mean: beta / n as f64,
            },
        }
    }

    pub fn diagonal(n: usize, lambda: f64, flow: FlowSizeDistribution) -> Self {
        CoflowModel {
            n,
            lambda,
            placement: Placement::Diagonal,
            flow,
        }
    }

    pub fn validate(&self) -> Result<(), TrafficError> {
        if self.n == 0 {
            return Err(TrafficError::InvalidModel("n must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrafficError::InvalidModel(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        match &self.placement {
            Placement::NonUniform { means } => {
                if means.len() != self.n * self.n {
                    return Err(TrafficError::InvalidModel(format!(
                        "expected {} per-entry means, got {}",
                        self.n * self.n,
                        means.len()
                    )));
                }
                if means.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
                    return Err(TrafficError::InvalidModel(
                        "per-entry means must be finite and >= 0".into(),
                    ));
                }
                Ok(())
            }
            _ => self.flow.validate(),
        }
    }

    /// Per-entry mean matrix beta_ij (row-major).
    pub fn entry_means(&self) -> Vec<f64> {
        let n = self.n;
        match &self.placement {
            Placement::UniformDense => vec![self.flow.mean(); n * n],
            Placement::Diagonal => {
                let mut m = vec![0.0; n * n];
                for i in 0..n {
                    m[i * n + i] = self.flow.mean();
                }
                m
            }
            Placement::NonUniform { means } => means.clone(),
        }
    }

    /// Maximum expected per-port load: beta = max over row and column sums of beta_ij.
    pub fn beta(&self) -> f64 {
        let n = self.n;
        let means = self.entry_means();
        let mut best = 0.0f64;
        for i in 0..n {
            let row: f64 = means[i * n..(i + 1) * n].iter().sum();
            let col: f64 = (0..n).map(|r| means[r * n + i]).sum();
            best = best.max(row).max(col);
        }
        best
    }

    /// Offered load rho = lambda * beta.
    pub fn rho(&self) -> f64 {
        self.lambda * self.beta()
    }

    /// Packet arrival rate matrix (lambda * beta_ij), row-major.
    pub fn rate_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.n;
        let means = self.entry_means();
        (0..n)
            .map(|i| (0..n).map(|j| self.lambda * means[i * n + j]).collect())
            .collect()
    }

    /// Variance of the per-port load B = sum_j X_ij (worst port).
    pub fn port_load_variance(&self) -> f64 {
        let n = self.n;
        match &self.placement {
            Placement::UniformDense => n as f64 * self.flow.variance(),
            Placement::Diagonal => self.flow.variance(),
            Placement::NonUniform { means } => {
                let var = |m: f64| m * (1.0 + m);
                let mut best = 0.0f64;
                for i in 0..n {
                    let row: f64 = means[i * n..(i + 1) * n].iter().map(|&m| var(m)).sum();
                    let col: f64 = (0..n).map(|r| var(means[r * n + i])).sum();
                    best = best.max(row).max(col);
                }
                best
            }
        }
    }

    /// Draws one demand matrix.
    pub fn sample_demand<R: Rng + ?Sized>(&self, rng: &mut R) -> TrafficMatrix {
        let n = self.n;
        let mut x = TrafficMatrix::zeros(n);
        match &self.placement {
            Placement::Diagonal => {
                for i in 0..n {
                    x.set(i, i, self.flow.sample(rng));
                }
            }
            Placement::UniformDense => match self.flow {
                FlowSizeDistribution::Geometric { .. } => {
                    fill_geometric_sparse(&mut x, self.flow.geometric_p().unwrap(), rng)
                }
                FlowSizeDistribution::Zero => {}
                _ => {
                    for k in 0..n * n {
                        x.counts[k] = self.flow.sample(rng);
                    }
                }
            },
            Placement::NonUniform { means } => {
                for (k, &m) in means.iter().enumerate() {
                    if m > 0.0 {
                        x.counts[k] = sample_geometric(m / (m + 1.0), rng);
                    }
                }
            }
        }
        x
    }
}

/// Fills every entry with an i.i.d. geometric(p) value, visiting only the
/// positive ones: gaps between positive entries are geometric in the
/// probability of a zero, and a positive entry is 1 + geometric(p).
fn fill_geometric_sparse<R: Rng + ?Sized>(x: &mut TrafficMatrix, p: f64, rng: &mut R) {
    let cells = x.counts.len();
    if p <= 0.0 {
        return;
    }
    // P[X = 0] = 1 - p; gap G has P[G = g] = (1-p)^g p.
    let ln_zero = (1.0 - p).ln();
    let mut k = 0usize;
    loop {
        let u = 1.0 - rng.random::<f64>();
        let gap = (u.ln() / ln_zero).floor();
        if !(gap < (cells - k) as f64) {
            break;
        }
        k += gap as usize;
        x.counts[k] = 1 + sample_geometric(p, rng);
        k += 1;
        if k >= cells {
            break;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoflowId(pub u64);

impl fmt::Display for CoflowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A coflow and its transmission progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Coflow {
    pub id: CoflowId,
    pub arrival_slot: Slot,
    demand: TrafficMatrix,
    remaining: TrafficMatrix,
    remaining_total: u64,
    clearance: u64,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    completion_slot: Option<Slot>,
}

impl Coflow {
    /// All packets are released at `arrival_slot`. An all-zero demand is
    /// complete on arrival.
    pub fn new(id: CoflowId, arrival_slot: Slot, demand: TrafficMatrix) -> Self {
        let row_sums = demand.row_sums();
        let col_sums = demand.col_sums();
        let total: u64 = row_sums.iter().sum();
        let clearance = row_sums.iter().chain(&col_sums).copied().max().unwrap_or(0);
        Coflow {
            id,
            arrival_slot,
            remaining: demand.clone(),
            demand,
            remaining_total: total,
            clearance,
            row_sums,
            col_sums,
            completion_slot: (total == 0).then_some(arrival_slot),
        }
    }

    pub fn n(&self) -> usize {
        self.demand.n()
    }

    pub fn demand(&self) -> &TrafficMatrix {
        &self.demand
    }

    pub fn remaining(&self) -> &TrafficMatrix {
        &self.remaining
    }

    pub fn remaining_total(&self) -> u64 {
        self.remaining_total
    }

    /// Clearance time of the original demand.
    pub fn clearance_time(&self) -> u64 {
        self.clearance
    }

    /// Row sums of the original demand.
    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    /// Column sums of the original demand.
    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn completion_slot(&self) -> Option<Slot> {
        self.completion_slot
    }

    pub fn is_complete(&self) -> bool {
        self.completion_slot.is_some()
    }

    /// Transmits one packet of VOQ (i, j) in `slot`. Returns true when this
    /// was the coflow's last packet.
    pub fn serve(&mut self, i: usize, j: usize, slot: Slot) -> Result<bool, TrafficError> {
        if !self.remaining.decrement(i, j) {
            return Err(TrafficError::NothingToServe { id: self.id, i, j });
        }
        self.remaining_total -= 1;
        if self.remaining_total == 0 {
            self.completion_slot = Some(slot);
            return Ok(true);
        }
        Ok(false)
    }
}

/// Draws the coflows arriving in one slot: Poisson(lambda) many, each with an
/// independent demand. Counts and sizes come from separate random streams.
pub fn sample_arrivals<R1, R2>(
    model: &CoflowModel,
    slot: Slot,
    next_id: &mut u64,
    count_rng: &mut R1,
    size_rng: &mut R2,
) -> Vec<Coflow>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    let count = sample_poisson(model.lambda, count_rng);
    (0..count)
        .map(|_| {
            let id = CoflowId(*next_id);
            *next_id += 1;
            Coflow::new(id, slot, model.sample_demand(size_rng))
        })
        .collect()
}

pub fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("finite positive Poisson mean");
    d.sample(rng) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn x1() -> TrafficMatrix {
        TrafficMatrix::from_rows(&[[1, 2], [0, 1]]).unwrap()
    }

    fn x2() -> TrafficMatrix {
        TrafficMatrix::from_rows(&[[2, 1], [1, 2]]).unwrap()
    }

    #[test]
    fn clearance_time_examples() {
        assert_eq!(clearance_time(&x1()), 3);
        assert_eq!(clearance_time(&TrafficMatrix::zeros(4)), 0);
        assert_eq!(clearance_time(&x2()), 3);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = TrafficMatrix::from_rows(&[vec![1, 2], vec![3]]).unwrap_err();
        assert!(matches!(err, TrafficError::NotSquare { bad_row: 1, .. }));
        let empty: [[u32; 0]; 0] = [];
        assert_eq!(TrafficMatrix::from_rows(&empty).unwrap_err(), TrafficError::Empty);
    }

    #[test]
    fn aggregate_examples() {
        let sum = aggregate(2, [&x1(), &x2()]).unwrap();
        assert_eq!(sum, TrafficMatrix::from_rows(&[[3, 3], [1, 3]]).unwrap());
        assert_eq!(aggregate(3, []).unwrap(), TrafficMatrix::zeros(3));
        assert_eq!(aggregate(2, [&x2()]).unwrap(), x2());
        let err = aggregate(2, [&x1(), &TrafficMatrix::zeros(3)]).unwrap_err();
        assert_eq!(err, TrafficError::DimensionMismatch { expected: 2, found: 3 });
    }

    #[test]
    fn zero_rate_model_never_arrives() {
        let model = CoflowModel::uniform_geometric(4, 0.0, 2.5);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        let mut id = 0;
        for slot in 0..10_000 {
            assert!(sample_arrivals(&model, slot, &mut id, &mut a, &mut b).is_empty());
        }
    }

    #[test]
    fn arrival_count_mean_matches_lambda() {
        let model = CoflowModel::diagonal(1, 0.3, FlowSizeDistribution::Zero);
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(12);
        let mut id = 0;
        let slots = 1_000_000u64;
        let mut count = 0usize;
        for slot in 0..slots {
            count += sample_arrivals(&model, slot, &mut id, &mut a, &mut b).len();
        }
        let mean = count as f64 / slots as f64;
        assert!((0.2985..=0.3015).contains(&mean), "mean {mean}");
        assert_eq!(id as usize, count);
    }

    #[test]
    fn uniform_geometric_row_sum_mean() {
        let model = CoflowModel::uniform_geometric(16, 0.3, 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = 100_000;
        let mut acc = 0u64;
        for _ in 0..samples {
            acc += model.sample_demand(&mut rng).row_sums()[0];
        }
        let mean = acc as f64 / samples as f64;
        assert!((mean - 2.5).abs() <= 0.02 * 2.5, "mean row sum {mean}");
    }

    #[test]
    fn sparse_fill_matches_per_entry_law() {
        // Compare the sparse filler against direct per-entry sampling on the
        // empirical frequency of zero and of the value 2.
        let dist = FlowSizeDistribution::Geometric { mean: 0.4 };
        let p = dist.geometric_p().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut zeros = 0u64;
        let mut twos = 0u64;
        let mut cells = 0u64;
        for _ in 0..20_000 {
            let mut x = TrafficMatrix::zeros(8);
            fill_geometric_sparse(&mut x, p, &mut rng);
            for &c in x.as_slice() {
                cells += 1;
                zeros += (c == 0) as u64;
                twos += (c == 2) as u64;
            }
        }
        let f0 = zeros as f64 / cells as f64;
        let f2 = twos as f64 / cells as f64;
        assert!((f0 - (1.0 - p)).abs() < 3e-3, "P0 {f0}");
        assert!((f2 - (1.0 - p) * p * p).abs() < 2e-3, "P2 {f2}");
    }

    #[test]
    fn flow_size_samplers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let det = FlowSizeDistribution::Deterministic { value: 3 };
        assert!((0..1000).all(|_| sample_flow_size(&det, &mut rng) == 3));
        assert_eq!(FlowSizeDistribution::Zero.sample(&mut rng), 0);

        let geo = FlowSizeDistribution::Geometric { mean: 1.0 };
        let draws = 1_000_000;
        let sum: u64 = (0..draws).map(|_| geo.sample(&mut rng) as u64).sum();
        let mean = sum as f64 / draws as f64;
        assert!((0.99..=1.01).contains(&mean), "geometric mean {mean}");

        let pl = FlowSizeDistribution::PowerLaw { epsilon: 1.0 };
        let mut ge2 = 0u64;
        let mut ge1 = 0u64;
        for _ in 0..draws {
            let x = pl.sample(&mut rng);
            ge2 += (x >= 2) as u64;
            ge1 += (x >= 1) as u64;
        }
        assert_eq!(ge1, draws as u64);
        let tail = ge2 as f64 / draws as f64;
        assert!((0.248..=0.252).contains(&tail), "P[X>=2] {tail}");
    }

    #[test]
    fn distribution_validation() {
        assert!(FlowSizeDistribution::Geometric { mean: 0.0 }.validate().is_err());
        assert!(FlowSizeDistribution::PowerLaw { epsilon: -1.0 }.validate().is_err());
        assert!(FlowSizeDistribution::Deterministic { value: 0 }.validate().is_ok());
    }

    #[test]
    fn power_law_moments() {
        let pl = FlowSizeDistribution::PowerLaw { epsilon: 1.0 };
        // zeta(2) = pi^2 / 6
        assert!((pl.mean() - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-9);
        assert!(pl.variance().is_infinite());
        assert_eq!(pl.mgf(0.0), Some(1.0));
        assert_eq!(pl.mgf(0.1), None);
    }

    #[test]
    fn zero_demand_coflow_completes_on_arrival() {
        let c = Coflow::new(CoflowId(4), 17, TrafficMatrix::zeros(3));
        assert_eq!(c.completion_slot(), Some(17));
    }

    #[test]
    fn serving_tracks_remaining_and_completion() {
        let mut c = Coflow::new(CoflowId(0), 5, x1());
        assert_eq!(c.clearance_time(), 3);
        assert!(!c.serve(0, 1, 5).unwrap());
        assert!(c.serve(1, 0, 5).is_err());
        assert!(!c.serve(0, 0, 6).unwrap());
        assert!(!c.serve(0, 1, 6).unwrap());
        assert!(c.remaining().le_entrywise(c.demand()));
        assert!(c.serve(1, 1, 7).unwrap());
        assert_eq!(c.completion_slot(), Some(7));
        assert!(c.remaining().is_zero());
    }

    #[test]
    fn model_load_and_rates() {
        let m = CoflowModel::uniform_geometric(8, 0.3, 2.5);
        assert!((m.beta() - 2.5).abs() < 1e-12);
        assert!((m.rho() - 0.75).abs() < 1e-12);
        assert!((m.rate_matrix()[3][5] - 0.3 * 2.5 / 8.0).abs() < 1e-12);
        let bad = CoflowModel {
            placement: Placement::NonUniform { means: vec![0.1; 3] },
            ..m
        };
        assert!(bad.validate().is_err());
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(n: usize) -> impl Strategy<Value = TrafficMatrix> {
        proptest::collection::vec(0u32..20, n * n).prop_map(move |v| {
            let rows: Vec<Vec<u32>> = v.chunks(n).map(|c| c.to_vec()).collect();
            TrafficMatrix::from_rows(&rows).unwrap()
        })
    }

    fn pair() -> impl Strategy<Value = (TrafficMatrix, TrafficMatrix)> {
        (1usize..7).prop_flat_map(|n| (matrix(n), matrix(n)))
    }

    proptest! {
        #[test]
        fn clearance_bounds_and_subadditivity((x, y) in pair()) {
            prop_assert!(clearance_time(&x) >= x.max_entry() as u64);
            let mut s = x.clone();
            s.add_assign(&y).unwrap();
            prop_assert!(clearance_time(&s) <= clearance_time(&x) + clearance_time(&y));
        }

        #[test]
        fn clearance_invariant_under_joint_permutation(
            (x, seed) in (1usize..7).prop_flat_map(|n| (matrix(n), any::<u64>()))
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..x.n()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(clearance_time(&x.permuted(&perm)), clearance_time(&x));
        }
    }
}
